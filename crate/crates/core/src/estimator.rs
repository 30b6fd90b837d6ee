//! The core reconstruction: minimize the weighted sum of per-illuminant
//! angular residuals and the angular distance to the autoencoder's
//! reconstruction, over the non-negative cone, by projected SGD with a
//! plateau scheduler.

use crate::colorsystem::{
    build_specific_system, standard_illuminants, ColorSystemError, SensitivityMatrix,
    SpecificSystem,
};
use crate::dng::CameraRecord;
use crate::nn::{ae_backward_input, ae_forward, AutoencoderWeights, Mode, NnError, PlateauScheduler};
use crate::numerics::{angular_distance_grad, Matrix, NumericsError};
use crate::prior::{flatten_curve, unflatten_curve};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    ColorSystem(#[from] ColorSystemError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("iterate collapsed to zero (max entry < 1e-9)")]
    DivergedToZero,
}

/// Optimization parameters (the published table of estimation settings).
#[derive(Debug, Clone)]
pub struct EstimatorParams {
    /// Specific-term coefficient.
    pub alpha: f64,
    /// Universal-term coefficient.
    pub beta: f64,
    pub lr: f64,
    pub scheduler_decay: f64,
    pub scheduler_patience: usize,
    /// Stop when the learning rate drops below this.
    pub stop_lr: f64,
    /// Reserved for randomized variants; the baseline iteration is
    /// deterministic and does not consume it.
    pub seed: u64,
    /// Hard safety stop on iterations.
    pub max_steps: usize,
}

impl Default for EstimatorParams {
    fn default() -> Self {
        Self {
            alpha: 1e2,
            beta: 2e-1,
            lr: 8e-4,
            scheduler_decay: 0.5,
            scheduler_patience: 2000,
            stop_lr: 4e-4,
            seed: 0,
            max_steps: 200_000,
        }
    }
}

/// Objective value and gradient at `s`:
/// `alpha * sum_i angle(A_i S, B_i) + beta * angle(S, A_w(S))`,
/// with the autoencoder evaluated without dropout and differentiated through
/// both arguments of the universal term.
pub fn objective(
    s: &Matrix,
    sys: &SpecificSystem,
    w: &AutoencoderWeights,
    alpha: f64,
    beta: f64,
) -> Result<(f64, Matrix), EstimatorError> {
    let n = s.rows();
    let mut value = 0.0;
    let mut grad = Matrix::zeros(n, 3);
    if alpha != 0.0 {
        for block in sys.blocks() {
            let u = block.a.matmul(s)?;
            let (theta, du, _) = angular_distance_grad(&u, &block.b)?;
            value += alpha * theta;
            // d theta / dS = A^T dU
            let at_du = block.a.transpose().matmul(&du)?;
            grad.add_scaled(&at_du, alpha);
        }
    }
    if beta != 0.0 {
        let x = flatten_curve(s);
        let (y, cache) = ae_forward(w, &x, Mode::Eval)?;
        let recon = unflatten_curve(&y, n);
        let (theta, du, dv) = angular_distance_grad(s, &recon)?;
        value += beta * theta;
        grad.add_scaled(&du, beta);
        // path through the autoencoder: dv pulled back to the input
        let gi = ae_backward_input(w, &cache, &flatten_curve(&dv))?;
        grad.add_scaled(&unflatten_curve(&gi, n), beta);
    }
    Ok((value, grad))
}

/// Result of an estimation run.
#[derive(Debug, Clone)]
pub struct EstimateReport {
    pub steps: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
}

/// Projected-SGD estimation from a specific system. Initializes at
/// `db_mean`, clamps negatives to zero after every step, stops when the
/// scheduler pushes the learning rate below `stop_lr`, and returns the
/// max-normalized iterate.
pub fn estimate_system(
    sys: &SpecificSystem,
    w: &AutoencoderWeights,
    db_mean: &SensitivityMatrix,
    params: &EstimatorParams,
) -> Result<(SensitivityMatrix, EstimateReport), EstimatorError> {
    let grid = db_mean.grid();
    let mut s = db_mean.data().clone();
    let mut lr = params.lr;
    let mut scheduler = PlateauScheduler::new(params.scheduler_decay, params.scheduler_patience);
    let mut report = EstimateReport { steps: 0, initial_objective: 0.0, final_objective: 0.0 };
    let mut steps = 0usize;
    while steps < params.max_steps {
        let (value, grad) = objective(&s, sys, w, params.alpha, params.beta)?;
        if steps == 0 {
            report.initial_objective = value;
        }
        report.final_objective = value;
        // projected SGD step
        for (sv, gv) in s.data_mut().iter_mut().zip(grad.data()) {
            *sv = (*sv - lr * gv).max(0.0);
        }
        if s.max_value() < 1e-9 {
            return Err(EstimatorError::DivergedToZero);
        }
        if scheduler.observe(value) {
            lr *= params.scheduler_decay;
        }
        steps += 1;
        if lr < params.stop_lr {
            break;
        }
    }
    report.steps = steps;
    let out = SensitivityMatrix::new(grid, s)
        .map_err(EstimatorError::ColorSystem)?
        .max_normalized();
    Ok((out, report))
}

/// Estimation from a camera record: builds the A/D65 system against the
/// bundled observer and illuminants, then runs [`estimate_system`].
pub fn estimate(
    camera: &CameraRecord,
    w: &AutoencoderWeights,
    db_mean: &SensitivityMatrix,
    params: &EstimatorParams,
) -> Result<(SensitivityMatrix, EstimateReport), EstimatorError> {
    let grid = db_mean.grid();
    let obs = crate::spectra::data::observer(grid).map_err(ColorSystemError::Spectra)?;
    let illums = standard_illuminants(grid)?;
    let sys = build_specific_system(&camera.matrices, &obs, &illums)?;
    estimate_system(&sys, w, db_mean, params)
}
