//! Wavelength grids, spectral curves, tabulated illuminants, the CIE 1931
//! standard observer, and the CIE daylight model.
//!
//! The canonical grid is n = 31 samples from 400 to 700 nm in 10 nm steps.
//! Bundled data (observer, illuminants A and D65, daylight components,
//! chart reflectances) is compiled in as CSV and can be overridden at
//! runtime through the `SPECCURVE_DATA_DIR` environment variable.

use crate::numerics::Matrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpectraError {
    #[error("grid needs at least 2 samples, got {0}")]
    BadGrid(usize),
    #[error("format error: {0}")]
    FormatError(String),
    #[error("source range [{lo}, {hi}] does not cover the 400-700 nm grid")]
    CoverageError { lo: f64, hi: f64 },
    #[error("temperature {0} K outside the supported range [4000, 25000]")]
    OutOfRange(f64),
    #[error("curve values must be non-negative and finite")]
    NegativeValue,
    #[error("expected {expected} samples on the grid, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("io error reading {path}: {err}")]
    Io { path: String, err: String },
}

/// Uniform wavelength grid over [400, 700] nm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpectralGrid {
    n: usize,
}

impl SpectralGrid {
    pub const LAMBDA_MIN: f64 = 400.0;
    pub const LAMBDA_MAX: f64 = 700.0;

    pub fn new(n: usize) -> Result<Self, SpectraError> {
        if n < 2 {
            return Err(SpectraError::BadGrid(n));
        }
        Ok(Self { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn delta(&self) -> f64 {
        (Self::LAMBDA_MAX - Self::LAMBDA_MIN) / (self.n - 1) as f64
    }

    /// Wavelength of sample `i` (0-based): 400 + i * delta.
    pub fn wavelength(&self, i: usize) -> f64 {
        Self::LAMBDA_MIN + i as f64 * self.delta()
    }

    pub fn wavelengths(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).map(|i| self.wavelength(i))
    }
}

impl Default for SpectralGrid {
    fn default() -> Self {
        Self { n: 31 }
    }
}

/// Non-negative spectral samples on a grid (relative units).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCurve {
    grid: SpectralGrid,
    values: Vec<f64>,
}

impl SpectralCurve {
    pub fn new(grid: SpectralGrid, values: Vec<f64>) -> Result<Self, SpectraError> {
        if values.len() != grid.n() {
            return Err(SpectraError::LengthMismatch { expected: grid.n(), got: values.len() });
        }
        if !values.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(SpectraError::NegativeValue);
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> SpectralGrid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// CIE 1931 2-degree color matching functions sampled on a grid (n x 3).
#[derive(Debug, Clone)]
pub struct ObserverMatrix {
    grid: SpectralGrid,
    data: Matrix,
}

impl ObserverMatrix {
    pub fn new(grid: SpectralGrid, data: Matrix) -> Result<Self, SpectraError> {
        if data.rows() != grid.n() || data.cols() != 3 {
            return Err(SpectraError::LengthMismatch { expected: grid.n() * 3, got: data.rows() * data.cols() });
        }
        if data.data().iter().any(|v| *v < 0.0) {
            return Err(SpectraError::NegativeValue);
        }
        Ok(Self { grid, data })
    }

    pub fn grid(&self) -> SpectralGrid {
        self.grid
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }
}

/// Diagonal illuminant matrix: SPD samples times the grid step.
#[derive(Debug, Clone, PartialEq)]
pub struct IlluminantMatrix {
    grid: SpectralGrid,
    diag: Vec<f64>,
}

impl IlluminantMatrix {
    pub fn grid(&self) -> SpectralGrid {
        self.grid
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    /// Row-scales an n x c matrix by the diagonal: L * M.
    pub fn apply(&self, m: &Matrix) -> Matrix {
        debug_assert_eq!(m.rows(), self.diag.len());
        Matrix::from_fn(m.rows(), m.cols(), |r, c| self.diag[r] * m[(r, c)])
    }
}

/// Builds the diagonal matrix of Eq-style discretization: diag_i = spd_i * delta.
pub fn illuminant_matrix(spd: &SpectralCurve) -> IlluminantMatrix {
    let delta = spd.grid().delta();
    IlluminantMatrix {
        grid: spd.grid(),
        diag: spd.values().iter().map(|v| v * delta).collect(),
    }
}

// ---------------------------------------------------------------------------
// CSV spectral tables
// ---------------------------------------------------------------------------

/// A parsed spectral CSV: ascending wavelengths, one or more value columns.
#[derive(Debug, Clone)]
pub struct SpectralTable {
    pub column_names: Vec<String>,
    pub wavelengths: Vec<f64>,
    /// columns[c][row]
    pub columns: Vec<Vec<f64>>,
}

impl SpectralTable {
    pub fn parse(text: &str) -> Result<Self, SpectraError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| SpectraError::FormatError("empty file".into()))?;
        let mut fields = header.split(',').map(str::trim);
        match fields.next() {
            Some("wavelength_nm") => {}
            other => {
                return Err(SpectraError::FormatError(format!(
                    "header must start with 'wavelength_nm', got {other:?}"
                )))
            }
        }
        let column_names: Vec<String> = fields.map(|s| s.to_string()).collect();
        if column_names.is_empty() {
            return Err(SpectraError::FormatError("header has no value columns".into()));
        }
        let mut wavelengths = Vec::new();
        let mut columns = vec![Vec::new(); column_names.len()];
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != column_names.len() + 1 {
                return Err(SpectraError::FormatError(format!(
                    "line {}: expected {} fields, got {}",
                    lineno + 1,
                    column_names.len() + 1,
                    cells.len()
                )));
            }
            let wl: f64 = cells[0]
                .parse()
                .map_err(|_| SpectraError::FormatError(format!("line {}: bad wavelength", lineno + 1)))?;
            if let Some(&prev) = wavelengths.last() {
                if wl <= prev {
                    return Err(SpectraError::FormatError(format!(
                        "line {}: wavelengths must be strictly ascending",
                        lineno + 1
                    )));
                }
            }
            wavelengths.push(wl);
            for (c, cell) in cells[1..].iter().enumerate() {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| SpectraError::FormatError(format!("line {}: bad value", lineno + 1)))?;
                if !v.is_finite() {
                    return Err(SpectraError::FormatError(format!("line {}: non-finite value", lineno + 1)));
                }
                columns[c].push(v);
            }
        }
        if wavelengths.is_empty() {
            return Err(SpectraError::FormatError("no data rows".into()));
        }
        Ok(Self { column_names, wavelengths, columns })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SpectraError> {
        let text = std::fs::read_to_string(path).map_err(|e| SpectraError::Io {
            path: path.display().to_string(),
            err: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// Linearly interpolates one column onto a grid. The source range must
    /// cover the grid.
    pub fn resample(&self, column: usize, grid: SpectralGrid) -> Result<Vec<f64>, SpectraError> {
        let lo = self.wavelengths[0];
        let hi = *self.wavelengths.last().unwrap();
        if lo > SpectralGrid::LAMBDA_MIN || hi < SpectralGrid::LAMBDA_MAX {
            return Err(SpectraError::CoverageError { lo, hi });
        }
        let col = &self.columns[column];
        let mut out = Vec::with_capacity(grid.n());
        for wl in grid.wavelengths() {
            // upper_idx: first source wavelength >= wl
            let upper_idx = self.wavelengths.partition_point(|&w| w < wl);
            let v = if upper_idx < self.wavelengths.len() && self.wavelengths[upper_idx] == wl {
                col[upper_idx]
            } else {
                let i1 = upper_idx;
                let i0 = upper_idx - 1;
                let t = (wl - self.wavelengths[i0]) / (self.wavelengths[i1] - self.wavelengths[i0]);
                col[i0] + t * (col[i1] - col[i0])
            };
            out.push(v);
        }
        Ok(out)
    }
}

/// Loads a single-column SPD CSV (`wavelength_nm,value`) onto the grid.
pub fn load_spd_csv(path: &std::path::Path, grid: SpectralGrid) -> Result<SpectralCurve, SpectraError> {
    let table = SpectralTable::load(path)?;
    if table.column_names.len() != 1 {
        return Err(SpectraError::FormatError(format!(
            "expected a single value column, got {}",
            table.column_names.len()
        )));
    }
    SpectralCurve::new(grid, table.resample(0, grid)?)
}

// ---------------------------------------------------------------------------
// CIE daylight model
// ---------------------------------------------------------------------------

/// y_D parabola coefficient. The CIE standard value 2.870 is used; see the
/// module docs for the daylight white-point check this pins down.
pub const DAYLIGHT_YD_COEFF: f64 = 2.870;

/// Chromaticity (x_D, y_D) of the CIE daylight series at temperature `t` in
/// kelvin, from the published two-branch cubic in 1/T and the daylight
/// parabola y_D = -3.000 x^2 + 2.870 x - 0.275.
pub fn daylight_chromaticity(t: f64) -> Result<(f64, f64), SpectraError> {
    if !(4000.0..=25000.0).contains(&t) {
        return Err(SpectraError::OutOfRange(t));
    }
    let x = daylight_x(t);
    Ok((x, daylight_y(x)))
}

fn daylight_x(t: f64) -> f64 {
    if t <= 7000.0 {
        0.244063 + 0.09911e3 / t + 2.9678e6 / (t * t) - 4.6070e9 / (t * t * t)
    } else {
        0.237040 + 0.24748e3 / t + 1.9018e6 / (t * t) - 2.0064e9 / (t * t * t)
    }
}

fn daylight_y(x: f64) -> f64 {
    -3.000 * x * x + DAYLIGHT_YD_COEFF * x - 0.275
}

/// Daylight SPD at temperature `t`: L0 + M1 L1 + M2 L2 on the given grid,
/// with negative samples clamped to zero.
pub fn daylight_spd(t: f64, grid: SpectralGrid) -> Result<SpectralCurve, SpectraError> {
    let (x, y) = daylight_chromaticity(t)?;
    let m = 0.0241 + 0.2562 * x - 0.7341 * y;
    let m1 = (-1.3515 - 1.7703 * x + 5.9114 * y) / m;
    let m2 = (0.0300 - 31.4424 * x + 30.0717 * y) / m;
    let [s0, s1, s2] = data::daylight_components(grid)?;
    let values = (0..grid.n())
        .map(|i| (s0[i] + m1 * s1[i] + m2 * s2[i]).max(0.0))
        .collect();
    SpectralCurve::new(grid, values)
}

// ---------------------------------------------------------------------------
// Bundled data
// ---------------------------------------------------------------------------

pub mod data {
    //! Access to the bundled spectral data assets. Each asset is a 10 nm CSV
    //! in the repository `data/` directory, compiled into the library;
    //! setting `SPECCURVE_DATA_DIR` points the loaders at replacement files.

    use super::*;

    pub const OBSERVER_FILE: &str = "cie1931_observer_2deg.csv";
    pub const ILLUMINANT_A_FILE: &str = "illuminant_a.csv";
    pub const ILLUMINANT_D65_FILE: &str = "illuminant_d65.csv";
    pub const DAYLIGHT_COMPONENTS_FILE: &str = "daylight_components.csv";
    pub const COLORCHECKER_FILE: &str = "colorchecker_reflectances.csv";

    fn raw(name: &str) -> Result<SpectralTable, SpectraError> {
        if let Ok(dir) = std::env::var("SPECCURVE_DATA_DIR") {
            return SpectralTable::load(&std::path::Path::new(&dir).join(name));
        }
        let text = match name {
            OBSERVER_FILE => include_str!("../../../data/cie1931_observer_2deg.csv"),
            ILLUMINANT_A_FILE => include_str!("../../../data/illuminant_a.csv"),
            ILLUMINANT_D65_FILE => include_str!("../../../data/illuminant_d65.csv"),
            DAYLIGHT_COMPONENTS_FILE => include_str!("../../../data/daylight_components.csv"),
            COLORCHECKER_FILE => include_str!("../../../data/colorchecker_reflectances.csv"),
            other => return Err(SpectraError::FormatError(format!("unknown bundled asset {other}"))),
        };
        SpectralTable::parse(text)
    }

    /// CIE 1931 2-degree standard observer on the grid.
    pub fn observer(grid: SpectralGrid) -> Result<ObserverMatrix, SpectraError> {
        let t = raw(OBSERVER_FILE)?;
        let x = t.resample(0, grid)?;
        let y = t.resample(1, grid)?;
        let z = t.resample(2, grid)?;
        let m = Matrix::from_fn(grid.n(), 3, |r, c| [&x, &y, &z][c][r]);
        ObserverMatrix::new(grid, m)
    }

    /// CIE standard illuminant A (tungsten, ~2856 K) on the grid.
    pub fn illuminant_a(grid: SpectralGrid) -> Result<SpectralCurve, SpectraError> {
        SpectralCurve::new(grid, raw(ILLUMINANT_A_FILE)?.resample(0, grid)?)
    }

    /// CIE standard illuminant D65 (daylight, ~6504 K) on the grid.
    pub fn illuminant_d65(grid: SpectralGrid) -> Result<SpectralCurve, SpectraError> {
        SpectralCurve::new(grid, raw(ILLUMINANT_D65_FILE)?.resample(0, grid)?)
    }

    /// CIE daylight components S0, S1, S2 on the grid. S1 and S2 take
    /// negative values; they are combination coefficients, not SPDs.
    pub fn daylight_components(grid: SpectralGrid) -> Result<[Vec<f64>; 3], SpectraError> {
        let t = raw(DAYLIGHT_COMPONENTS_FILE)?;
        Ok([t.resample(0, grid)?, t.resample(1, grid)?, t.resample(2, grid)?])
    }

    /// 24-patch color chart reflectances as a patches x n matrix.
    pub fn colorchecker(grid: SpectralGrid) -> Result<Matrix, SpectraError> {
        let t = raw(COLORCHECKER_FILE)?;
        let cols: Vec<Vec<f64>> = (0..t.column_names.len())
            .map(|c| t.resample(c, grid))
            .collect::<Result<_, _>>()?;
        Ok(Matrix::from_fn(cols.len(), grid.n(), |p, i| cols[p][i]))
    }
}

/// CIE xy chromaticity of an SPD against an observer on the same grid.
pub fn spd_chromaticity(spd: &SpectralCurve, obs: &ObserverMatrix) -> (f64, f64) {
    let mut xyz = [0.0; 3];
    for i in 0..spd.grid().n() {
        for c in 0..3 {
            xyz[c] += spd.values()[i] * obs.data()[(i, c)];
        }
    }
    let sum = xyz[0] + xyz[1] + xyz[2];
    (xyz[0] / sum, xyz[1] / sum)
}
