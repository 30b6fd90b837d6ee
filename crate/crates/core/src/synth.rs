//! Synthetic Gaussian-bump camera families for desk-scale tests and the
//! validation substitute. The real ground-truth curves are third-party data
//! and are not shipped; loaders in [`crate::prior`] ingest user-supplied
//! databases in the same formats.

use crate::colorsystem::{
    forward_color_matrix, standard_illuminants, ColorMatrixRecord, Illuminant, MatrixSource,
    SensitivityMatrix,
};
use crate::dng::CameraRecord;
use crate::numerics::Matrix;
use crate::prior::SensitivityDatabase;
use crate::rng::{derive_seed, SplitMix64};
use crate::spectra::SpectralGrid;

/// One synthetic camera curve: three Gaussian bumps with a family-level
/// correlated shift plus small per-channel jitter, a shared width scale,
/// and a secondary blue-green leak bump. Max-normalized.
pub fn synthetic_curve(grid: SpectralGrid, seed: u64) -> SensitivityMatrix {
    let mut rng = SplitMix64::new(seed);
    let shift = rng.uniform(-12.0, 12.0);
    let width_scale = rng.uniform(0.85, 1.15);
    let centers = [
        600.0 + shift + rng.uniform(-4.0, 4.0),
        540.0 + shift * 0.8 + rng.uniform(-4.0, 4.0),
        465.0 + shift * 0.6 + rng.uniform(-4.0, 4.0),
    ];
    let widths = [34.0 * width_scale, 38.0 * width_scale, 30.0 * width_scale];
    let amps = [rng.uniform(0.75, 1.0), rng.uniform(0.85, 1.0), rng.uniform(0.7, 0.95)];
    // secondary leak of the red channel into the blue-green region
    let leak = rng.uniform(0.02, 0.08);
    let data = Matrix::from_fn(grid.n(), 3, |i, k| {
        let wl = grid.wavelength(i);
        let bump = |c: f64, w: f64| (-0.5 * ((wl - c) / w).powi(2)).exp();
        let mut v = amps[k] * bump(centers[k], widths[k]);
        if k == 0 {
            v += leak * bump(470.0 + shift * 0.5, 25.0);
        }
        v
    });
    SensitivityMatrix::new(grid, data)
        .expect("gaussian bumps are non-negative")
        .max_normalized()
}

/// A database of `count` synthetic cameras named `SynthCam NN`.
pub fn synthetic_database(grid: SpectralGrid, count: usize, seed: u64) -> SensitivityDatabase {
    let raw: Vec<(String, String, SensitivityMatrix)> = (0..count)
        .map(|i| {
            (
                format!("SynthCam {i:02}"),
                "synthetic".to_string(),
                synthetic_curve(grid, derive_seed(seed, i as u64)),
            )
        })
        .collect();
    SensitivityDatabase::new(grid, raw).expect("non-empty synthetic database")
}

/// Exact A/D65 color-matrix records for a curve, i.e. the matrices a DNG
/// would carry if the forward model held exactly.
pub fn exact_camera_record(
    make: &str,
    model: &str,
    s: &SensitivityMatrix,
) -> CameraRecord {
    let grid = s.grid();
    let obs = crate::spectra::data::observer(grid).expect("bundled observer");
    let illums = standard_illuminants(grid).expect("bundled illuminants");
    let matrices = [Illuminant::A, Illuminant::D65]
        .iter()
        .map(|&il| {
            let c = forward_color_matrix(s, &illums[&il], &obs).expect("forward matrix");
            ColorMatrixRecord::new(c, il, MatrixSource::Synthetic).expect("3x3")
        })
        .collect();
    CameraRecord {
        make: make.to_string(),
        model: model.to_string(),
        unique_camera_model: None,
        matrices,
        warnings: vec![],
    }
}

/// Records for every camera in a synthetic database, keyed by camera id.
pub fn exact_records_for_database(
    db: &SensitivityDatabase,
) -> std::collections::BTreeMap<String, CameraRecord> {
    let mut out = std::collections::BTreeMap::new();
    for e in db.entries() {
        let key = crate::dng::normalize_camera_id(&e.camera_id);
        if out.contains_key(&key) {
            continue;
        }
        let (make, model) = match e.camera_id.split_once(' ') {
            Some((m, rest)) => (m.to_string(), rest.to_string()),
            None => (e.camera_id.clone(), String::new()),
        };
        out.insert(key, exact_camera_record(&make, &model, &e.s));
    }
    out
}

/// Writes a synthetic database as a manifest plus per-camera CSVs, the
/// on-disk format the trainer and validator consume.
pub fn write_database(
    db: &SensitivityDatabase,
    dir: &std::path::Path,
) -> std::io::Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut cameras = Vec::new();
    for (i, e) in db.entries().iter().enumerate() {
        let file = format!("camera_{i:03}.csv");
        let mut text = String::from("wavelength_nm,r,g,b\n");
        for (row, wl) in e.s.grid().wavelengths().enumerate() {
            text.push_str(&format!(
                "{},{},{},{}\n",
                wl,
                e.s.data()[(row, 0)],
                e.s.data()[(row, 1)],
                e.s.data()[(row, 2)]
            ));
        }
        std::fs::write(dir.join(&file), text)?;
        cameras.push(serde_json::json!({
            "camera_id": e.camera_id,
            "source": e.source,
            "file": file,
        }));
    }
    let manifest = dir.join("manifest.json");
    std::fs::write(
        &manifest,
        serde_json::to_string_pretty(&serde_json::json!({ "cameras": cameras }))?,
    )?;
    Ok(manifest)
}
