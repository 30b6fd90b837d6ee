//! The image-formation forward model and the color-matrix linear system.
//!
//! A camera's 3x3 color matrix under illuminant L is the least-squares map
//! from the standard observer's responses to the camera's responses:
//! `C = (L S_xyz)^+ L S`. Stacking the per-illuminant blocks
//! `A_i = (L_i S_xyz)^+ L_i` against the published matrices `B_i` gives the
//! camera-specific linear system the estimator minimizes over.

use crate::numerics::{pseudoinverse, Matrix, NumericsError};
use crate::spectra::{IlluminantMatrix, ObserverMatrix, SpectraError, SpectralGrid};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ColorSystemError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Spectra(#[from] SpectraError),
    #[error("sensitivity matrix must be non-negative and not all zero")]
    InvalidSensitivity,
    #[error("no record carries a supported calibration illuminant (A or D65)")]
    NoUsableRecords,
}

/// Calibration illuminant identity as stored in DNG metadata.
/// Codes 17 and 21 are Standard Light A and D65.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Illuminant {
    A,
    D65,
    Other(u16),
}

impl Illuminant {
    pub fn from_code(code: u16) -> Self {
        match code {
            17 => Illuminant::A,
            21 => Illuminant::D65,
            other => Illuminant::Other(other),
        }
    }

    pub fn code(&self) -> u16 {
        match self {
            Illuminant::A => 17,
            Illuminant::D65 => 21,
            Illuminant::Other(c) => *c,
        }
    }
}

impl std::fmt::Display for Illuminant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Illuminant::A => write!(f, "A"),
            Illuminant::D65 => write!(f, "D65"),
            Illuminant::Other(c) => write!(f, "{c}"),
        }
    }
}

impl Serialize for Illuminant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Illuminant::A => s.serialize_str("A"),
            Illuminant::D65 => s.serialize_str("D65"),
            Illuminant::Other(c) => s.serialize_u16(*c),
        }
    }
}

impl<'de> Deserialize<'de> for Illuminant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Name(String),
            Code(u16),
        }
        match Repr::deserialize(d)? {
            Repr::Name(n) if n == "A" => Ok(Illuminant::A),
            Repr::Name(n) if n == "D65" => Ok(Illuminant::D65),
            Repr::Name(n) => Err(serde::de::Error::custom(format!("unknown illuminant name {n}"))),
            Repr::Code(c) => Ok(Illuminant::from_code(c)),
        }
    }
}

/// Where a color matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixSource {
    Dng,
    Json,
    Synthetic,
}

/// A camera's 3x3 calibration matrix paired with its illuminant.
///
/// The matrix is stored in the right-multiplication orientation used
/// throughout this crate (`observer_responses * C ~ camera_responses` on row
/// vectors); DNG ingestion transposes the container's XYZ-to-camera matrix
/// into this orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorMatrixRecord {
    pub matrix: Matrix,
    pub illuminant: Illuminant,
    pub source: MatrixSource,
}

impl ColorMatrixRecord {
    pub fn new(matrix: Matrix, illuminant: Illuminant, source: MatrixSource) -> Result<Self, ColorSystemError> {
        if matrix.rows() != 3 || matrix.cols() != 3 {
            return Err(ColorSystemError::ShapeMismatch(format!(
                "color matrix must be 3x3, got {}x{}",
                matrix.rows(),
                matrix.cols()
            )));
        }
        Ok(Self { matrix, illuminant, source })
    }
}

/// Non-negative n x 3 spectral sensitivities (columns r, g, b).
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMatrix {
    grid: SpectralGrid,
    data: Matrix,
}

impl SensitivityMatrix {
    pub fn new(grid: SpectralGrid, data: Matrix) -> Result<Self, ColorSystemError> {
        if data.rows() != grid.n() || data.cols() != 3 {
            return Err(ColorSystemError::ShapeMismatch(format!(
                "sensitivity must be {}x3, got {}x{}",
                grid.n(),
                data.rows(),
                data.cols()
            )));
        }
        if data.data().iter().any(|v| *v < 0.0) || data.data().iter().all(|v| *v == 0.0) {
            return Err(ColorSystemError::InvalidSensitivity);
        }
        Ok(Self { grid, data })
    }

    pub fn grid(&self) -> SpectralGrid {
        self.grid
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn max_value(&self) -> f64 {
        self.data.max_value()
    }

    /// Scaled so the maximum over all 3n entries is 1.
    pub fn max_normalized(&self) -> SensitivityMatrix {
        let m = self.max_value();
        SensitivityMatrix { grid: self.grid, data: self.data.scaled(1.0 / m) }
    }
}

/// The stacked per-illuminant system: blocks (A_i, B_i) with A_i 3 x n and
/// B_i the camera's 3x3 matrix for that illuminant.
#[derive(Debug, Clone)]
pub struct SpecificSystem {
    blocks: Vec<SystemBlock>,
    skipped: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SystemBlock {
    /// `(L_i S_xyz)^+ L_i`, 3 x n.
    pub a: Matrix,
    /// The camera's published matrix for this illuminant, 3 x 3.
    pub b: Matrix,
    pub illuminant: Illuminant,
}

impl SpecificSystem {
    pub fn blocks(&self) -> &[SystemBlock] {
        &self.blocks
    }

    /// Records dropped during construction (unsupported illuminants).
    pub fn skipped(&self) -> &[String] {
        &self.skipped
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// Renders patch intensities: `(R L) S` for an m x n reflectance matrix.
/// The association order is fixed for reproducibility.
pub fn render(
    r: &Matrix,
    l: &IlluminantMatrix,
    s: &SensitivityMatrix,
) -> Result<Matrix, ColorSystemError> {
    let n = l.grid().n();
    if r.cols() != n || s.grid() != l.grid() {
        return Err(ColorSystemError::ShapeMismatch(format!(
            "render: R is {}x{}, L has n={}, S has n={}",
            r.rows(),
            r.cols(),
            n,
            s.grid().n()
        )));
    }
    let rl = Matrix::from_fn(r.rows(), n, |i, j| r[(i, j)] * l.diag()[j]);
    Ok(rl.matmul(s.data())?)
}

/// The least-squares color matrix `(L obs)^+ (L S)` for a camera `s` under
/// illuminant `l`.
pub fn forward_color_matrix(
    s: &SensitivityMatrix,
    l: &IlluminantMatrix,
    obs: &ObserverMatrix,
) -> Result<Matrix, ColorSystemError> {
    if s.grid() != l.grid() || obs.grid() != l.grid() {
        return Err(ColorSystemError::ShapeMismatch("grids differ".into()));
    }
    let lobs = l.apply(obs.data());
    let p = pseudoinverse(&lobs)?;
    let ls = l.apply(s.data());
    Ok(p.matmul(&ls)?)
}

/// Builds the stacked system from a camera's records. Records with
/// unsupported illuminants are skipped and reported in the result.
pub fn build_specific_system(
    records: &[ColorMatrixRecord],
    obs: &ObserverMatrix,
    illums: &BTreeMap<Illuminant, IlluminantMatrix>,
) -> Result<SpecificSystem, ColorSystemError> {
    let mut blocks = Vec::new();
    let mut skipped = Vec::new();
    for rec in records {
        let Some(l) = illums.get(&rec.illuminant) else {
            skipped.push(format!("record with illuminant {} dropped (unsupported)", rec.illuminant));
            continue;
        };
        let lobs = l.apply(obs.data());
        let p = pseudoinverse(&lobs)?;
        // A_i = P L with L diagonal is a column scaling of P.
        let a = Matrix::from_fn(3, l.grid().n(), |r, c| p[(r, c)] * l.diag()[c]);
        blocks.push(SystemBlock { a, b: rec.matrix.clone(), illuminant: rec.illuminant });
    }
    if blocks.is_empty() {
        return Err(ColorSystemError::NoUsableRecords);
    }
    Ok(SpecificSystem { blocks, skipped })
}

/// The two bundled calibration illuminants (A and D65) as a map, on `grid`.
pub fn standard_illuminants(
    grid: SpectralGrid,
) -> Result<BTreeMap<Illuminant, IlluminantMatrix>, ColorSystemError> {
    use crate::spectra::{data, illuminant_matrix};
    let mut m = BTreeMap::new();
    m.insert(Illuminant::A, illuminant_matrix(&data::illuminant_a(grid)?));
    m.insert(Illuminant::D65, illuminant_matrix(&data::illuminant_d65(grid)?));
    Ok(m)
}
