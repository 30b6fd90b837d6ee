//! Downstream applications of a known camera response: correlated color
//! temperature estimation, underwater attenuation recovery, the daylight
//! chromaticity locus, and raw-to-raw mapping.

use crate::colorsystem::{render, ColorSystemError, SensitivityMatrix};
use crate::metrics::{chromaticity, MetricsError};
use crate::numerics::{angular_distance_grad, pseudoinverse, Matrix, NumericsError};
use crate::spectra::{daylight_spd, illuminant_matrix, IlluminantMatrix, SpectraError, SpectralGrid};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppsError {
    #[error(transparent)]
    ColorSystem(#[from] ColorSystemError),
    #[error(transparent)]
    Spectra(#[from] SpectraError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("patch {0} has a zero response vector")]
    ZeroVector(usize),
    #[error("did not converge: projected gradient norm {grad_norm:e} after {iters} iterations")]
    NonConvergence { best: Vec<f64>, grad_norm: f64, iters: usize },
    #[error("stacked responses are rank deficient")]
    RankDeficient,
    #[error("locus must have at least 2 points")]
    DegenerateLocus,
}

pub const CCT_MIN: f64 = 4000.0;
pub const CCT_MAX: f64 = 25000.0;

/// Sum-of-squared per-patch angular errors (2-norm of the error vector)
/// between observed rows and rendered rows.
fn patch_angle_norm(observed: &Matrix, rendered: &Matrix) -> Result<f64, AppsError> {
    let mut acc = 0.0;
    for k in 0..observed.rows() {
        let u = Matrix::new(1, 3, observed.row(k).to_vec()).map_err(|_| AppsError::ZeroVector(k))?;
        let v = Matrix::new(1, 3, rendered.row(k).to_vec()).map_err(|_| AppsError::ZeroVector(k))?;
        let theta = crate::numerics::angular_distance(&u, &v).map_err(|e| match e {
            NumericsError::ZeroMatrix => AppsError::ZeroVector(k),
            other => AppsError::ColorSystem(ColorSystemError::Numerics(other)),
        })?;
        acc += theta * theta;
    }
    Ok(acc.sqrt())
}

/// Estimates the correlated color temperature of the scene illuminant from
/// observed patch responses: minimizes the per-patch angular error norm over
/// the daylight family, by a 100 K grid sweep then golden-section refinement
/// to about one kelvin.
pub fn estimate_cct(
    s: &SensitivityMatrix,
    reflectances: &Matrix,
    observed: &Matrix,
) -> Result<f64, AppsError> {
    let grid = s.grid();
    let objective = |t: f64| -> Result<f64, AppsError> {
        let l = illuminant_matrix(&daylight_spd(t, grid)?);
        let rendered = render(reflectances, &l, s)?;
        patch_angle_norm(observed, &rendered)
    };
    // coarse sweep
    let mut best_t = CCT_MIN;
    let mut best_f = f64::INFINITY;
    let mut t = CCT_MIN;
    while t <= CCT_MAX {
        let f = objective(t)?;
        if f < best_f {
            best_f = f;
            best_t = t;
        }
        t += 100.0;
    }
    // golden-section refinement inside the bracketing interval
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = (best_t - 100.0).max(CCT_MIN);
    let mut b = (best_t + 100.0).min(CCT_MAX);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = objective(c)?;
    let mut fd = objective(d)?;
    while b - a > 0.5 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = objective(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = objective(d)?;
        }
    }
    Ok(0.5 * (a + b))
}

/// Options for the attenuation solver.
#[derive(Debug, Clone)]
pub struct KdOptions {
    pub max_iters: usize,
    /// Projected-gradient norm below which the solve is converged.
    pub tol: f64,
    pub k_init: f64,
    pub k_max: f64,
}

impl Default for KdOptions {
    fn default() -> Self {
        Self { max_iters: 4000, tol: 1e-5, k_init: 0.5, k_max: 1.0 }
    }
}

/// Linear-interpolation weights from `n_hat` control points onto the grid.
fn interpolation_weights(grid: SpectralGrid, n_hat: usize) -> Vec<(usize, f64)> {
    // for grid index i: (j0, frac) with k_hat_i = (1-frac) K[j0] + frac K[j0+1]
    (0..grid.n())
        .map(|i| {
            let t = i as f64 / (grid.n() - 1) as f64 * (n_hat - 1) as f64;
            let j0 = (t.floor() as usize).min(n_hat - 2);
            (j0, t - j0 as f64)
        })
        .collect()
}

/// Recovers the diffuse downwelling attenuation coefficient from patch
/// responses at a known depth: projected gradient descent on the coarse
/// vector K in [0, k_max]^n_hat against the same angular objective as
/// [`estimate_cct`], with surface light fixed to the bundled D65.
///
/// Adding a constant to K scales every rendered response uniformly, which
/// the angular objective cannot see; the descent therefore fixes the shape
/// but not the level. A closing alignment step shifts K so the rendered
/// magnitudes match the observed ones, pinning the level to the data.
pub fn estimate_attenuation(
    s: &SensitivityMatrix,
    reflectances: &Matrix,
    observed: &Matrix,
    depth_m: f64,
    n_hat: usize,
    options: &KdOptions,
) -> Result<Vec<f64>, AppsError> {
    let grid = s.grid();
    let n = grid.n();
    let m = observed.rows();
    let surface = crate::spectra::data::illuminant_d65(grid)?;
    let weights = interpolation_weights(grid, n_hat);
    let delta = grid.delta();

    // objective and gradient at K
    let eval = |k: &[f64]| -> Result<(f64, Vec<f64>), AppsError> {
        // attenuated diagonal and its derivative factor
        let mut diag = vec![0.0; n];
        let mut k_hat = vec![0.0; n];
        for i in 0..n {
            let (j0, frac) = weights[i];
            k_hat[i] = (1.0 - frac) * k[j0] + frac * k[j0 + 1];
            diag[i] = surface.values()[i] * (-k_hat[i] * depth_m).exp() * delta;
        }
        // rendered rows: v_p = sum_i R[p,i] diag[i] S[i,:]
        let mut thetas = vec![0.0; m];
        let mut dv = Vec::with_capacity(m); // per patch: gradient wrt v (1x3)
        let mut rendered = Matrix::zeros(m, 3);
        for p in 0..m {
            for i in 0..n {
                let w = reflectances[(p, i)] * diag[i];
                if w != 0.0 {
                    for c in 0..3 {
                        rendered[(p, c)] += w * s.data()[(i, c)];
                    }
                }
            }
        }
        let mut f2 = 0.0;
        for p in 0..m {
            let u = Matrix::new(1, 3, observed.row(p).to_vec()).map_err(|_| AppsError::ZeroVector(p))?;
            let v = Matrix::new(1, 3, rendered.row(p).to_vec()).map_err(|_| AppsError::ZeroVector(p))?;
            let (theta, _, dv_p) = angular_distance_grad(&u, &v).map_err(|e| match e {
                NumericsError::ZeroMatrix => AppsError::ZeroVector(p),
                other => AppsError::ColorSystem(ColorSystemError::Numerics(other)),
            })?;
            thetas[p] = theta;
            dv.push(dv_p);
        }
        for t in &thetas {
            f2 += t * t;
        }
        let f = f2.sqrt();
        // chain rule back to K
        let mut grad = vec![0.0; n_hat];
        if f > 0.0 {
            for p in 0..m {
                let w_theta = thetas[p] / f;
                // d theta / d k_hat_i = dv . dL-path
                for i in 0..n {
                    let r = reflectances[(p, i)];
                    if r == 0.0 {
                        continue;
                    }
                    let ddiag = -depth_m * diag[i]; // d diag_i / d k_hat_i
                    let mut dtheta_dkhat = 0.0;
                    for c in 0..3 {
                        dtheta_dkhat += dv[p][(0, c)] * r * ddiag * s.data()[(i, c)];
                    }
                    let (j0, frac) = weights[i];
                    grad[j0] += w_theta * dtheta_dkhat * (1.0 - frac);
                    grad[j0 + 1] += w_theta * dtheta_dkhat * frac;
                }
            }
        }
        Ok((f, grad))
    };

    let clamp = |k: &mut [f64]| {
        for v in k.iter_mut() {
            *v = v.clamp(0.0, options.k_max);
        }
    };

    // scale alignment: shift K by the constant that matches rendered to
    // observed magnitudes (geometric mean of per-patch norm ratios)
    let align = |k: &mut Vec<f64>| -> Result<(), AppsError> {
        let mut diag = vec![0.0; n];
        for i in 0..n {
            let (j0, frac) = weights[i];
            let kh = (1.0 - frac) * k[j0] + frac * k[j0 + 1];
            diag[i] = surface.values()[i] * (-kh * depth_m).exp() * delta;
        }
        let mut log_ratio = 0.0;
        for p in 0..m {
            let mut rendered = [0.0; 3];
            for i in 0..n {
                let w = reflectances[(p, i)] * diag[i];
                for c in 0..3 {
                    rendered[c] += w * s.data()[(i, c)];
                }
            }
            let no: f64 = observed.row(p).iter().map(|v| v * v).sum::<f64>().sqrt();
            let nr: f64 = rendered.iter().map(|v| v * v).sum::<f64>().sqrt();
            if no == 0.0 || nr == 0.0 {
                return Err(AppsError::ZeroVector(p));
            }
            log_ratio += (no / nr).ln();
        }
        let shift = -(log_ratio / m as f64) / depth_m;
        for v in k.iter_mut() {
            *v = (*v + shift).clamp(0.0, options.k_max);
        }
        Ok(())
    };

    // below this the per-patch angles sit at the arccos clamp floor, i.e.
    // the fit is exact; gradients there are clamp noise, not signal
    let objective_floor =
        3.0 * (m as f64).sqrt() * (2.0 * crate::numerics::COS_CLAMP).sqrt();

    let mut k = vec![options.k_init.clamp(0.0, options.k_max); n_hat];
    let (mut f, mut grad) = eval(&k)?;
    let mut best = (f, k.clone());
    let mut lr = 0.05;
    let mut pg_norm = f64::INFINITY;
    for _ in 0..options.max_iters {
        if f <= objective_floor {
            align(&mut k)?;
            return Ok(k);
        }
        // projected gradient norm for the convergence check
        pg_norm = {
            let mut acc = 0.0;
            for j in 0..n_hat {
                let stepped = (k[j] - grad[j]).clamp(0.0, options.k_max);
                let d = k[j] - stepped;
                acc += d * d;
            }
            acc.sqrt()
        };
        if pg_norm < options.tol {
            align(&mut k)?;
            return Ok(k);
        }
        let mut cand: Vec<f64> = k.iter().zip(&grad).map(|(kv, gv)| kv - lr * gv).collect();
        clamp(&mut cand);
        let (fc, gc) = eval(&cand)?;
        if fc <= f {
            k = cand;
            f = fc;
            grad = gc;
            if f < best.0 {
                best = (f, k.clone());
            }
            lr = (lr * 1.25).min(10.0);
        } else {
            lr *= 0.5;
            if lr < 1e-12 {
                // stuck: the projected gradient cannot make progress
                break;
            }
        }
    }
    if f <= objective_floor || pg_norm < options.tol {
        align(&mut k)?;
        Ok(k)
    } else {
        Err(AppsError::NonConvergence { best: best.1, grad_norm: pg_norm, iters: options.max_iters })
    }
}

/// The camera's daylight chromaticity locus: the rg-chromaticity of the
/// white point of every sampled daylight temperature, ordered by T.
pub fn daylight_locus(
    s: &SensitivityMatrix,
    t_min: f64,
    t_max: f64,
    steps: usize,
) -> Result<Vec<(f64, f64)>, AppsError> {
    if steps < 2 {
        return Err(AppsError::DegenerateLocus);
    }
    let grid = s.grid();
    let ones = Matrix::new(1, grid.n(), vec![1.0; grid.n()]).expect("ones row");
    let mut out = Vec::with_capacity(steps);
    for j in 0..steps {
        let t = t_min + (t_max - t_min) * j as f64 / (steps - 1) as f64;
        let l = illuminant_matrix(&daylight_spd(t, grid)?);
        let white = render(&ones, &l, s)?;
        out.push(chromaticity([white[(0, 0)], white[(0, 1)], white[(0, 2)]])?);
    }
    Ok(out)
}

/// Classification of a chromaticity point against a locus polyline.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LocusClassification {
    pub on_locus: bool,
    pub distance: f64,
}

/// Minimum Euclidean distance from `point` to the polyline segments.
pub fn classify_near_locus(
    point: (f64, f64),
    locus: &[(f64, f64)],
    threshold: f64,
) -> Result<LocusClassification, AppsError> {
    if locus.len() < 2 {
        return Err(AppsError::DegenerateLocus);
    }
    let mut best = f64::INFINITY;
    for w in locus.windows(2) {
        let (ax, ay) = w[0];
        let (bx, by) = w[1];
        let (px, py) = point;
        let (dx, dy) = (bx - ax, by - ay);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 { ((px - ax) * dx + (py - ay) * dy) / len2 } else { 0.0 };
        let t = t.clamp(0.0, 1.0);
        let (cx, cy) = (ax + t * dx, ay + t * dy);
        let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
        best = best.min(d);
    }
    Ok(LocusClassification { on_locus: best <= threshold, distance: best })
}

/// Global 3x3 raw-to-raw map between two cameras: stacks rendered chart
/// responses over the given illuminants and solves the least-squares system
/// `I_src M = I_tgt`. With `white_balance`, each camera's rows are first
/// divided channelwise by its white-patch response under that illuminant
/// (`white_patch` picks the row; the brightest reflectance row by default).
pub fn raw_to_raw_map(
    s_src: &SensitivityMatrix,
    s_tgt: &SensitivityMatrix,
    reflectances: &Matrix,
    illums: &[IlluminantMatrix],
    white_balance: bool,
    white_patch: Option<usize>,
) -> Result<Matrix, AppsError> {
    let m = reflectances.rows();
    let white_row = white_patch.unwrap_or_else(|| {
        (0..m)
            .max_by(|&a, &b| {
                let sa: f64 = reflectances.row(a).iter().sum();
                let sb: f64 = reflectances.row(b).iter().sum();
                sa.total_cmp(&sb)
            })
            .unwrap_or(0)
    });
    let mut src = Matrix::zeros(m * illums.len(), 3);
    let mut tgt = Matrix::zeros(m * illums.len(), 3);
    for (j, l) in illums.iter().enumerate() {
        let is = render(reflectances, l, s_src)?;
        let it = render(reflectances, l, s_tgt)?;
        for (stack, rendered) in [(&mut src, &is), (&mut tgt, &it)] {
            for p in 0..m {
                for c in 0..3 {
                    let v = if white_balance {
                        let wp = rendered[(white_row, c)];
                        if wp == 0.0 {
                            return Err(AppsError::ZeroVector(white_row));
                        }
                        rendered[(p, c)] / wp
                    } else {
                        rendered[(p, c)]
                    };
                    stack[(j * m + p, c)] = v;
                }
            }
        }
    }
    let p = pseudoinverse(&src).map_err(|e| match e {
        NumericsError::SingularSystem { .. } => AppsError::RankDeficient,
        other => AppsError::ColorSystem(ColorSystemError::Numerics(other)),
    })?;
    Ok(p.matmul(&tgt).map_err(|e| AppsError::ColorSystem(e.into()))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectra::data;
    use crate::synth;

    fn grid() -> SpectralGrid {
        SpectralGrid::default()
    }

    fn test_camera() -> SensitivityMatrix {
        synth::synthetic_curve(grid(), 1234)
    }

    #[test]
    fn cct_round_trip_5554() {
        let s = test_camera();
        let r = data::colorchecker(grid()).unwrap();
        let l = illuminant_matrix(&daylight_spd(5554.0, grid()).unwrap());
        let observed = render(&r, &l, &s).unwrap();
        let t = estimate_cct(&s, &r, &observed).unwrap();
        assert!((t - 5554.0).abs() <= 10.0, "recovered {t}");
    }

    #[test]
    fn cct_boundary_4000() {
        let s = test_camera();
        let r = data::colorchecker(grid()).unwrap();
        let l = illuminant_matrix(&daylight_spd(4000.0, grid()).unwrap());
        let observed = render(&r, &l, &s).unwrap();
        let t = estimate_cct(&s, &r, &observed).unwrap();
        assert!((t - 4000.0).abs() <= 10.0, "recovered {t}");
    }

    #[test]
    fn cct_scale_invariance_per_patch() {
        let s = test_camera();
        let r = data::colorchecker(grid()).unwrap();
        let l = illuminant_matrix(&daylight_spd(8000.0, grid()).unwrap());
        let observed = render(&r, &l, &s).unwrap();
        let scaled = Matrix::from_fn(observed.rows(), 3, |p, c| observed[(p, c)] * 7.0);
        let t1 = estimate_cct(&s, &r, &observed).unwrap();
        let t2 = estimate_cct(&s, &r, &scaled).unwrap();
        assert_eq!(t1, t2);
    }

    fn render_attenuated(
        s: &SensitivityMatrix,
        r: &Matrix,
        k_true: &[f64],
        depth: f64,
    ) -> Matrix {
        let g = s.grid();
        let d65 = data::illuminant_d65(g).unwrap();
        let weights = interpolation_weights(g, k_true.len());
        let vals: Vec<f64> = (0..g.n())
            .map(|i| {
                let (j0, frac) = weights[i];
                let kh = (1.0 - frac) * k_true[j0] + frac * k_true[j0 + 1];
                d65.values()[i] * (-kh * depth).exp()
            })
            .collect();
        let spd = crate::spectra::SpectralCurve::new(g, vals).unwrap();
        render(r, &illuminant_matrix(&spd), s).unwrap()
    }

    #[test]
    fn kd_zero_attenuation_fixed_point() {
        let s = test_camera();
        let r = data::colorchecker(grid()).unwrap();
        let observed = render_attenuated(&s, &r, &[0.0; 10], 5.0);
        let k = estimate_attenuation(&s, &r, &observed, 5.0, 10, &KdOptions::default()).unwrap();
        let max = k.iter().copied().fold(0.0f64, f64::max);
        assert!(max < 0.02, "max K {max}");
    }

    #[test]
    fn kd_constant_recovery_at_16_2m() {
        let s = test_camera();
        let r = data::colorchecker(grid()).unwrap();
        // 18 patches, as in the waterproof chart
        let r18 = Matrix::from_fn(18, grid().n(), |p, i| r[(p, i)]);
        let observed = render_attenuated(&s, &r18, &[0.1; 10], 16.2);
        let k =
            estimate_attenuation(&s, &r18, &observed, 16.2, 10, &KdOptions::default()).unwrap();
        for (j, v) in k.iter().enumerate() {
            assert!((v - 0.1).abs() < 0.03, "K[{j}] = {v}");
        }
    }

    #[test]
    fn kd_depth_k_product_identifiability() {
        let s = test_camera();
        let r = data::colorchecker(grid()).unwrap();
        let k_true = [0.12; 10];
        let observed = render_attenuated(&s, &r, &k_true, 10.0);
        // the same observations explained at doubled depth with halved K
        let k1 = estimate_attenuation(&s, &r, &observed, 10.0, 10, &KdOptions::default()).unwrap();
        let k2 = estimate_attenuation(&s, &r, &observed, 20.0, 10, &KdOptions::default()).unwrap();
        let p1: f64 = k1.iter().sum::<f64>() * 10.0;
        let p2: f64 = k2.iter().sum::<f64>() * 20.0;
        assert!((p1 - p2).abs() / p1 < 0.05, "products {p1} vs {p2}");
    }

    #[test]
    fn kd_iterates_stay_in_box() {
        let s = test_camera();
        let r = data::colorchecker(grid()).unwrap();
        let observed = render_attenuated(&s, &r, &[0.3; 10], 8.0);
        let k = estimate_attenuation(&s, &r, &observed, 8.0, 10, &KdOptions::default()).unwrap();
        assert!(k.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn locus_single_channel_degenerate() {
        let g = grid();
        let data_m = Matrix::from_fn(g.n(), 3, |i, k| if k == 0 { 1.0 + i as f64 * 0.01 } else { 0.0 });
        let s = SensitivityMatrix::new(g, data_m).unwrap();
        let locus = daylight_locus(&s, 4000.0, 25000.0, 8).unwrap();
        for (r, b) in locus {
            assert!((r - 1.0).abs() < 1e-12);
            assert!(b.abs() < 1e-12);
        }
    }

    #[test]
    fn locus_observer_matches_daylight_chromaticity() {
        let g = grid();
        let obs = data::observer(g).unwrap();
        let s = SensitivityMatrix::new(g, obs.data().clone()).unwrap();
        let steps = 9;
        let locus = daylight_locus(&s, 4000.0, 25000.0, steps).unwrap();
        for (j, (r, b)) in locus.iter().enumerate() {
            let t = 4000.0 + (25000.0 - 4000.0) * j as f64 / (steps - 1) as f64;
            let (x, y) = crate::spectra::daylight_chromaticity(t).unwrap();
            // identifying camera RGB with XYZ: r = x, b = z = 1 - x - y
            assert!((r - x).abs() < 3e-3, "T={t}: r {r} vs x {x}");
            assert!((b - (1.0 - x - y)).abs() < 3e-3, "T={t}: b {b} vs z {}", 1.0 - x - y);
        }
    }

    #[test]
    fn locus_points_in_simplex() {
        let s = test_camera();
        let locus = daylight_locus(&s, 4000.0, 25000.0, 32).unwrap();
        for (r, b) in locus {
            assert!(r >= 0.0 && b >= 0.0 && r + b <= 1.0);
        }
    }

    #[test]
    fn classify_vertex_and_perpendicular() {
        let locus = vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)];
        let c = classify_near_locus((1.0, 0.0), &locus, 0.01).unwrap();
        assert_eq!(c.distance, 0.0);
        assert!(c.on_locus);
        let c = classify_near_locus((0.5, 0.25), &locus, 0.1).unwrap();
        assert!((c.distance - 0.25).abs() < 1e-12);
        assert!(!c.on_locus);
    }

    #[test]
    fn classify_matches_dense_sampling_oracle() {
        let s = test_camera();
        let locus = daylight_locus(&s, 4000.0, 25000.0, 64).unwrap();
        let mut rng = crate::rng::SplitMix64::new(5);
        for _ in 0..100 {
            let p = (rng.uniform(0.0, 0.7), rng.uniform(0.0, 0.7));
            let fast = classify_near_locus(p, &locus, 0.02).unwrap().distance;
            // dense sampling along every segment
            let mut slow = f64::INFINITY;
            for w in locus.windows(2) {
                for step in 0..=1000 {
                    let t = step as f64 / 1000.0;
                    let x = w[0].0 + t * (w[1].0 - w[0].0);
                    let y = w[0].1 + t * (w[1].1 - w[0].1);
                    slow = slow.min(((p.0 - x).powi(2) + (p.1 - y).powi(2)).sqrt());
                }
            }
            assert!((fast - slow).abs() < 1e-6, "fast {fast} slow {slow}");
        }
    }

    fn five_illums(g: SpectralGrid) -> Vec<IlluminantMatrix> {
        let mut v = vec![illuminant_matrix(&data::illuminant_a(g).unwrap())];
        for t in [5000.0, 5500.0, 6500.0, 7500.0] {
            v.push(illuminant_matrix(&daylight_spd(t, g).unwrap()));
        }
        v
    }

    #[test]
    fn raw2raw_identity() {
        let s = test_camera();
        let r = data::colorchecker(grid()).unwrap();
        let m = raw_to_raw_map(&s, &s, &r, &five_illums(grid()), false, None).unwrap();
        assert!(m.max_abs_diff(&Matrix::identity(3)) < 1e-9);
    }

    #[test]
    fn raw2raw_exact_linear_relation() {
        let s = test_camera();
        let p = Matrix::new(3, 3, vec![0.8, 0.15, 0.05, 0.1, 0.75, 0.15, 0.02, 0.08, 0.9]).unwrap();
        let tgt = SensitivityMatrix::new(grid(), s.data().matmul(&p).unwrap()).unwrap();
        let r = data::colorchecker(grid()).unwrap();
        let m = raw_to_raw_map(&s, &tgt, &r, &five_illums(grid()), false, None).unwrap();
        assert!(m.max_abs_diff(&p) < 1e-9, "diff {}", m.max_abs_diff(&p));
    }

    #[test]
    fn raw2raw_matches_normal_equation_oracle() {
        let s_src = synth::synthetic_curve(grid(), 7);
        let s_tgt = synth::synthetic_curve(grid(), 8);
        let r = data::colorchecker(grid()).unwrap();
        let illums = five_illums(grid());
        let m = raw_to_raw_map(&s_src, &s_tgt, &r, &illums, false, None).unwrap();
        // oracle: solve the normal equations independently per column
        let mrows = r.rows() * illums.len();
        let mut src = Matrix::zeros(mrows, 3);
        let mut tgt = Matrix::zeros(mrows, 3);
        for (j, l) in illums.iter().enumerate() {
            let is = render(&r, l, &s_src).unwrap();
            let it = render(&r, l, &s_tgt).unwrap();
            for p in 0..r.rows() {
                for c in 0..3 {
                    src[(j * r.rows() + p, c)] = is[(p, c)];
                    tgt[(j * r.rows() + p, c)] = it[(p, c)];
                }
            }
        }
        let ata = src.transpose().matmul(&src).unwrap();
        let atb = src.transpose().matmul(&tgt).unwrap();
        // 3x3 Cramer per column
        let det3 = |a: &Matrix| -> f64 {
            a[(0, 0)] * (a[(1, 1)] * a[(2, 2)] - a[(1, 2)] * a[(2, 1)])
                - a[(0, 1)] * (a[(1, 0)] * a[(2, 2)] - a[(1, 2)] * a[(2, 0)])
                + a[(0, 2)] * (a[(1, 0)] * a[(2, 1)] - a[(1, 1)] * a[(2, 0)])
        };
        let d = det3(&ata);
        for col in 0..3 {
            for row in 0..3 {
                let mut mm = ata.clone();
                for i in 0..3 {
                    mm[(i, row)] = atb[(i, col)];
                }
                let x = det3(&mm) / d;
                assert!((m[(row, col)] - x).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn raw2raw_white_balance_and_composition() {
        let g = grid();
        let s_a = synth::synthetic_curve(g, 11);
        let s_b = synth::synthetic_curve(g, 12);
        let s_c = synth::synthetic_curve(g, 13);
        let r = data::colorchecker(g).unwrap();
        let illums = five_illums(g);
        // white-balanced identity map is still the identity
        let m = raw_to_raw_map(&s_a, &s_a, &r, &illums, true, Some(18)).unwrap();
        assert!(m.max_abs_diff(&Matrix::identity(3)) < 1e-9);
        // composition a->b -> b->c approximates a->c on exact synthetic data
        let mab = raw_to_raw_map(&s_a, &s_b, &r, &illums, false, None).unwrap();
        let mbc = raw_to_raw_map(&s_b, &s_c, &r, &illums, false, None).unwrap();
        let mac = raw_to_raw_map(&s_a, &s_c, &r, &illums, false, None).unwrap();
        let comp = mab.matmul(&mbc).unwrap();
        assert!(comp.max_abs_diff(&mac) < 0.05, "diff {}", comp.max_abs_diff(&mac));
    }

    #[test]
    fn raw2raw_rank_deficient() {
        let g = grid();
        // single-channel cameras under one illuminant: rank 1 stack
        let d = Matrix::from_fn(g.n(), 3, |i, _| 0.1 + i as f64 * 0.01);
        let s = SensitivityMatrix::new(g, d).unwrap();
        let r = data::colorchecker(g).unwrap();
        let illums = vec![illuminant_matrix(&data::illuminant_d65(g).unwrap())];
        assert!(matches!(
            raw_to_raw_map(&s, &s, &r, &illums, false, None),
            Err(AppsError::RankDeficient)
        ));
    }
}
