//! Minimal TIFF/IFD parser for DNG color-calibration metadata, plus a
//! matching fixture writer.
//!
//! Only the tags needed to recover a camera's color matrices are decoded:
//! Make (0x010F), Model (0x0110), UniqueCameraModel (0xC614),
//! ColorMatrix1/2 (0xC621/0xC622) and CalibrationIlluminant1/2
//! (0xC65A/0xC65B). IFD0 and SubIFD chains are walked; EXIF IFDs are not.
//! Every read is bounds-checked: corrupt input yields a typed error, never a
//! panic or out-of-bounds access.
//!
//! The DNG container stores each ColorMatrix as 9 signed rationals, row
//! major, mapping XYZ to camera space on column vectors. This crate works in
//! the transposed (row-vector) orientation, so ingestion transposes and the
//! writer transposes back.

use crate::colorsystem::{ColorMatrixRecord, Illuminant, MatrixSource};
use crate::numerics::Matrix;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DngError {
    #[error("not a TIFF file (bad magic)")]
    NotTiff,
    #[error("file truncated: read at offset {offset} past end ({len} bytes)")]
    Truncated { offset: usize, len: usize },
    #[error("no ColorMatrix tag found in any walked IFD")]
    MissingColorMatrix,
    #[error("SRATIONAL with zero denominator")]
    ZeroDenominator,
}

/// Byte order of a TIFF container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteOrder {
    LittleEndian,
    BigEndian,
}

/// A camera identity with its color matrices, as extracted from DNG
/// metadata (or deserialized from the records JSON).
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRecord {
    pub make: String,
    pub model: String,
    pub unique_camera_model: Option<String>,
    pub matrices: Vec<ColorMatrixRecord>,
    pub warnings: Vec<String>,
}

impl CameraRecord {
    /// Normalized identity used to group duplicates: lowercased make+model
    /// with collapsed whitespace.
    pub fn camera_id(&self) -> String {
        normalize_camera_id(&format!("{} {}", self.make, self.model))
    }
}

pub fn normalize_camera_id(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

// Tags handled by this parser.
const TAG_MAKE: u16 = 0x010F;
const TAG_MODEL: u16 = 0x0110;
const TAG_SUB_IFDS: u16 = 0x014A;
const TAG_UNIQUE_CAMERA_MODEL: u16 = 0xC614;
const TAG_COLOR_MATRIX_1: u16 = 0xC621;
const TAG_COLOR_MATRIX_2: u16 = 0xC622;
const TAG_CALIBRATION_ILLUMINANT_1: u16 = 0xC65A;
const TAG_CALIBRATION_ILLUMINANT_2: u16 = 0xC65B;

const TYPE_ASCII: u16 = 2;
const TYPE_SHORT: u16 = 3;
const TYPE_LONG: u16 = 4;
const TYPE_SRATIONAL: u16 = 10;

fn type_size(t: u16) -> Option<usize> {
    match t {
        1 | 2 | 6 | 7 => Some(1),
        3 | 8 => Some(2),
        4 | 9 | 11 => Some(4),
        5 | 10 | 12 => Some(8),
        _ => None,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    order: ByteOrder,
}

impl<'a> Reader<'a> {
    fn slice(&self, offset: usize, len: usize) -> Result<&'a [u8], DngError> {
        let end = offset
            .checked_add(len)
            .ok_or(DngError::Truncated { offset, len: self.bytes.len() })?;
        self.bytes
            .get(offset..end)
            .ok_or(DngError::Truncated { offset, len: self.bytes.len() })
    }

    fn u16_at(&self, offset: usize) -> Result<u16, DngError> {
        let b = self.slice(offset, 2)?;
        Ok(match self.order {
            ByteOrder::LittleEndian => u16::from_le_bytes([b[0], b[1]]),
            ByteOrder::BigEndian => u16::from_be_bytes([b[0], b[1]]),
        })
    }

    fn u32_at(&self, offset: usize) -> Result<u32, DngError> {
        let b = self.slice(offset, 4)?;
        Ok(match self.order {
            ByteOrder::LittleEndian => u32::from_le_bytes([b[0], b[1], b[2], b[3]]),
            ByteOrder::BigEndian => u32::from_be_bytes([b[0], b[1], b[2], b[3]]),
        })
    }

    fn i32_at(&self, offset: usize) -> Result<i32, DngError> {
        Ok(self.u32_at(offset)? as i32)
    }
}

#[derive(Debug)]
struct RawEntry {
    field_type: u16,
    count: u32,
    /// Offset of the value data inside the file (inline values point into
    /// the entry's own value field).
    data_offset: usize,
}

#[derive(Default)]
struct Collected {
    make: Option<String>,
    model: Option<String>,
    unique: Option<String>,
    matrix1: Option<Matrix>,
    matrix2: Option<Matrix>,
    illuminant1: Option<u16>,
    illuminant2: Option<u16>,
}

/// Parses DNG/TIFF bytes into a camera record.
pub fn parse_dng(bytes: &[u8]) -> Result<CameraRecord, DngError> {
    if bytes.len() < 8 {
        return Err(DngError::NotTiff);
    }
    let order = match &bytes[0..2] {
        b"II" => ByteOrder::LittleEndian,
        b"MM" => ByteOrder::BigEndian,
        _ => return Err(DngError::NotTiff),
    };
    let r = Reader { bytes, order };
    if r.u16_at(2)? != 42 {
        return Err(DngError::NotTiff);
    }
    let ifd0 = r.u32_at(4)? as usize;

    let mut collected = Collected::default();
    let mut visited: Vec<usize> = Vec::new();
    let mut queue: Vec<usize> = vec![ifd0];
    // Caps keep malformed offset cycles from looping forever.
    const MAX_IFDS: usize = 32;
    const MAX_ENTRIES: usize = 4096;

    while let Some(offset) = queue.pop() {
        if visited.contains(&offset) || visited.len() >= MAX_IFDS {
            continue;
        }
        visited.push(offset);
        let count = r.u16_at(offset)? as usize;
        if count > MAX_ENTRIES {
            return Err(DngError::Truncated { offset, len: bytes.len() });
        }
        for i in 0..count {
            let epos = offset + 2 + 12 * i;
            r.slice(epos, 12)?;
            let tag = r.u16_at(epos)?;
            let field_type = r.u16_at(epos + 2)?;
            let value_count = r.u32_at(epos + 4)?;
            let Some(tsize) = type_size(field_type) else {
                continue; // unknown field type: skip, as TIFF6 readers do
            };
            let total = (value_count as usize)
                .checked_mul(tsize)
                .ok_or(DngError::Truncated { offset: epos, len: bytes.len() })?;
            let data_offset = if total <= 4 { epos + 8 } else { r.u32_at(epos + 8)? as usize };
            // All value bytes must be in range before decoding anything.
            r.slice(data_offset, total)?;
            let entry = RawEntry { field_type, count: value_count, data_offset };
            match tag {
                TAG_MAKE => collected.make = decode_ascii(&r, &entry),
                TAG_MODEL => collected.model = decode_ascii(&r, &entry),
                TAG_UNIQUE_CAMERA_MODEL => collected.unique = decode_ascii(&r, &entry),
                TAG_COLOR_MATRIX_1 => collected.matrix1 = decode_color_matrix(&r, &entry)?,
                TAG_COLOR_MATRIX_2 => collected.matrix2 = decode_color_matrix(&r, &entry)?,
                TAG_CALIBRATION_ILLUMINANT_1 => collected.illuminant1 = decode_short(&r, &entry),
                TAG_CALIBRATION_ILLUMINANT_2 => collected.illuminant2 = decode_short(&r, &entry),
                TAG_SUB_IFDS => {
                    if entry.field_type == TYPE_LONG {
                        for k in 0..entry.count as usize {
                            if let Ok(sub) = r.u32_at(entry.data_offset + 4 * k) {
                                queue.push(sub as usize);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        // Follow the next-IFD pointer; 0 terminates.
        let next = r.u32_at(offset + 2 + 12 * count)? as usize;
        if next != 0 {
            queue.push(next);
        }
    }

    if collected.matrix1.is_none() && collected.matrix2.is_none() {
        return Err(DngError::MissingColorMatrix);
    }

    let mut warnings = Vec::new();
    let mut matrices = Vec::new();
    if let Some(m) = collected.matrix1 {
        let code = collected.illuminant1.unwrap_or_else(|| {
            warnings.push("CalibrationIlluminant1 missing; assuming standard light A (17)".into());
            17
        });
        matrices.push(
            ColorMatrixRecord::new(m, Illuminant::from_code(code), MatrixSource::Dng)
                .expect("3x3 by construction"),
        );
    }
    if let Some(m) = collected.matrix2 {
        let code = collected.illuminant2.unwrap_or_else(|| {
            warnings.push("CalibrationIlluminant2 missing; assuming D65 (21)".into());
            21
        });
        matrices.push(
            ColorMatrixRecord::new(m, Illuminant::from_code(code), MatrixSource::Dng)
                .expect("3x3 by construction"),
        );
    }

    Ok(CameraRecord {
        make: collected.make.unwrap_or_default(),
        model: collected.model.unwrap_or_default(),
        unique_camera_model: collected.unique,
        matrices,
        warnings,
    })
}

fn decode_ascii(r: &Reader, e: &RawEntry) -> Option<String> {
    if e.field_type != TYPE_ASCII {
        return None;
    }
    let bytes = r.slice(e.data_offset, e.count as usize).ok()?;
    let end = bytes.iter().position(|&b| b == 0).unwrap_or(bytes.len());
    Some(String::from_utf8_lossy(&bytes[..end]).into_owned())
}

fn decode_short(r: &Reader, e: &RawEntry) -> Option<u16> {
    match (e.field_type, e.count) {
        (TYPE_SHORT, c) if c >= 1 => r.u16_at(e.data_offset).ok(),
        (TYPE_LONG, c) if c >= 1 => r.u32_at(e.data_offset).ok().map(|v| v as u16),
        _ => None,
    }
}

/// Returns Ok(None) when the tag is present but malformed in shape (wrong
/// type or count), which readers conventionally treat as absent.
fn decode_color_matrix(r: &Reader, e: &RawEntry) -> Result<Option<Matrix>, DngError> {
    if e.field_type != TYPE_SRATIONAL || e.count != 9 {
        return Ok(None);
    }
    let mut vals = [0.0; 9];
    for (k, v) in vals.iter_mut().enumerate() {
        let num = r.i32_at(e.data_offset + 8 * k)?;
        let den = r.i32_at(e.data_offset + 8 * k + 4)?;
        if den == 0 {
            return Err(DngError::ZeroDenominator);
        }
        *v = num as f64 / den as f64;
    }
    // Stored row-major as the XYZ->camera map on column vectors; transpose
    // into the row-vector orientation used by the color system.
    match Matrix::new(3, 3, vals.to_vec()) {
        Ok(dng) => Ok(Some(dng.transpose())),
        Err(_) => Ok(None), // non-finite rationals: treat as absent
    }
}

// ---------------------------------------------------------------------------
// Fixture writer
// ---------------------------------------------------------------------------

/// Denominator used when quantizing matrix entries to signed rationals.
pub const RATIONAL_DENOMINATOR: i32 = 1_000_000;

struct EntryOut {
    tag: u16,
    field_type: u16,
    count: u32,
    data: Vec<u8>,
}

/// Emits a valid minimal TIFF containing exactly the tags [`parse_dng`]
/// reads. Matrix entries are quantized to rationals over 10^6, so the parse
/// round trip is exact to 1e-6 per entry.
pub fn write_minimal_dng(record: &CameraRecord, order: ByteOrder) -> Vec<u8> {
    let u16b = |v: u16| -> [u8; 2] {
        match order {
            ByteOrder::LittleEndian => v.to_le_bytes(),
            ByteOrder::BigEndian => v.to_be_bytes(),
        }
    };
    let u32b = |v: u32| -> [u8; 4] {
        match order {
            ByteOrder::LittleEndian => v.to_le_bytes(),
            ByteOrder::BigEndian => v.to_be_bytes(),
        }
    };
    let i32b = |v: i32| -> [u8; 4] {
        match order {
            ByteOrder::LittleEndian => v.to_le_bytes(),
            ByteOrder::BigEndian => v.to_be_bytes(),
        }
    };

    let ascii = |s: &str| -> Vec<u8> {
        let mut b = s.as_bytes().to_vec();
        b.push(0);
        b
    };
    let rational_matrix = |m: &Matrix| -> Vec<u8> {
        // back to the DNG orientation
        let dng = m.transpose();
        let mut out = Vec::with_capacity(72);
        for r in 0..3 {
            for c in 0..3 {
                let num = (dng[(r, c)] * RATIONAL_DENOMINATOR as f64).round() as i32;
                out.extend_from_slice(&i32b(num));
                out.extend_from_slice(&i32b(RATIONAL_DENOMINATOR));
            }
        }
        out
    };

    let mut entries: Vec<EntryOut> = Vec::new();
    let make = ascii(&record.make);
    entries.push(EntryOut { tag: TAG_MAKE, field_type: TYPE_ASCII, count: make.len() as u32, data: make });
    let model = ascii(&record.model);
    entries.push(EntryOut { tag: TAG_MODEL, field_type: TYPE_ASCII, count: model.len() as u32, data: model });
    if let Some(ucm) = &record.unique_camera_model {
        let d = ascii(ucm);
        entries.push(EntryOut {
            tag: TAG_UNIQUE_CAMERA_MODEL,
            field_type: TYPE_ASCII,
            count: d.len() as u32,
            data: d,
        });
    }
    for (i, rec) in record.matrices.iter().take(2).enumerate() {
        let (mtag, itag) = if i == 0 {
            (TAG_COLOR_MATRIX_1, TAG_CALIBRATION_ILLUMINANT_1)
        } else {
            (TAG_COLOR_MATRIX_2, TAG_CALIBRATION_ILLUMINANT_2)
        };
        entries.push(EntryOut {
            tag: mtag,
            field_type: TYPE_SRATIONAL,
            count: 9,
            data: rational_matrix(&rec.matrix),
        });
        let mut d = u16b(rec.illuminant.code()).to_vec();
        d.extend_from_slice(&[0, 0]); // pad the 4-byte value field
        entries.push(EntryOut { tag: itag, field_type: TYPE_SHORT, count: 1, data: d });
    }
    entries.sort_by_key(|e| e.tag);

    let ifd_offset = 8usize;
    let ifd_len = 2 + 12 * entries.len() + 4;
    let mut data_area: Vec<u8> = Vec::new();
    let data_base = ifd_offset + ifd_len;

    let mut out = Vec::new();
    out.extend_from_slice(match order {
        ByteOrder::LittleEndian => b"II",
        ByteOrder::BigEndian => b"MM",
    });
    out.extend_from_slice(&u16b(42));
    out.extend_from_slice(&u32b(ifd_offset as u32));
    out.extend_from_slice(&u16b(entries.len() as u16));
    for e in &entries {
        out.extend_from_slice(&u16b(e.tag));
        out.extend_from_slice(&u16b(e.field_type));
        out.extend_from_slice(&u32b(e.count));
        if e.data.len() <= 4 {
            let mut v = e.data.clone();
            v.resize(4, 0);
            out.extend_from_slice(&v);
        } else {
            // keep value offsets word-aligned
            if data_area.len() % 2 == 1 {
                data_area.push(0);
            }
            out.extend_from_slice(&u32b((data_base + data_area.len()) as u32));
            data_area.extend_from_slice(&e.data);
        }
    }
    out.extend_from_slice(&u32b(0)); // no next IFD
    out.extend_from_slice(&data_area);
    out
}
