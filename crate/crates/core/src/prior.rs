//! Ground-truth sensitivity database handling, data augmentation, the
//! per-channel normalized reconstruction loss, and the autoencoder training
//! loop.
//!
//! Every database curve is normalized by its maximal value over all 3n
//! entries at load time. During training each retained curve is freshly
//! augmented every step by `S -> G S H`: H scales the three channels by
//! independent uniforms in [h, 1], G rolls each wavelength row by an offset
//! drawn per column from {-g..g} (columns landing on the same row sum).

use crate::colorsystem::SensitivityMatrix;
use crate::dng::normalize_camera_id;
use crate::nn::{
    AutoencoderWeights, BatchTrainer, DropoutSemantics, PlateauScheduler, TrainState,
};
use crate::numerics::Matrix;
use crate::rng::SplitMix64;
use crate::spectra::{SpectralGrid, SpectralTable};
use serde::Deserialize;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("database is empty (after exclusions)")]
    EmptyDatabase,
    #[error("channel {0} has zero norm")]
    ZeroChannel(usize),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("entry {camera_id}: {err}")]
    Entry { camera_id: String, err: String },
    #[error(transparent)]
    Spectra(#[from] crate::spectra::SpectraError),
}

/// One ground-truth curve: camera identity, provenance, and the
/// max-normalized sensitivities.
#[derive(Debug, Clone)]
pub struct DatabaseEntry {
    pub camera_id: String,
    pub source: String,
    pub s: SensitivityMatrix,
}

/// The training database, grouped by normalized camera id so duplicates of
/// one physical camera can be excluded together.
#[derive(Debug, Clone)]
pub struct SensitivityDatabase {
    entries: Vec<DatabaseEntry>,
    groups: BTreeMap<String, Vec<usize>>,
    grid: SpectralGrid,
}

impl SensitivityDatabase {
    pub fn new(
        grid: SpectralGrid,
        raw: Vec<(String, String, SensitivityMatrix)>,
    ) -> Result<Self, PriorError> {
        if raw.is_empty() {
            return Err(PriorError::EmptyDatabase);
        }
        let mut entries = Vec::with_capacity(raw.len());
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (camera_id, source, s) in raw {
            if s.grid() != grid {
                return Err(PriorError::Entry {
                    camera_id,
                    err: "curve is not on the database grid".into(),
                });
            }
            let idx = entries.len();
            let key = normalize_camera_id(&camera_id);
            entries.push(DatabaseEntry { camera_id, source, s: s.max_normalized() });
            groups.entry(key).or_default().push(idx);
        }
        Ok(Self { entries, groups, grid })
    }

    /// Loads a manifest JSON (`{"cameras": [{"camera_id", "source", "file"}]}`)
    /// with per-camera CSV curves (`wavelength_nm,r,g,b`) relative to the
    /// manifest location.
    pub fn load(manifest_path: &std::path::Path, grid: SpectralGrid) -> Result<Self, PriorError> {
        #[derive(Deserialize)]
        struct ManifestEntry {
            camera_id: String,
            source: String,
            file: String,
        }
        #[derive(Deserialize)]
        struct Manifest {
            cameras: Vec<ManifestEntry>,
        }
        let text = std::fs::read_to_string(manifest_path)
            .map_err(|e| PriorError::Manifest(format!("{}: {e}", manifest_path.display())))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| PriorError::Manifest(e.to_string()))?;
        let base = manifest_path.parent().unwrap_or(std::path::Path::new("."));
        let mut raw = Vec::new();
        for m in manifest.cameras {
            let table = SpectralTable::load(&base.join(&m.file)).map_err(|e| PriorError::Entry {
                camera_id: m.camera_id.clone(),
                err: e.to_string(),
            })?;
            if table.column_names.len() != 3 {
                return Err(PriorError::Entry {
                    camera_id: m.camera_id,
                    err: format!("expected 3 channels, got {}", table.column_names.len()),
                });
            }
            let cols: Vec<Vec<f64>> = (0..3)
                .map(|c| table.resample(c, grid))
                .collect::<Result<_, _>>()?;
            let data = Matrix::from_fn(grid.n(), 3, |i, k| cols[k][i]);
            let s = SensitivityMatrix::new(grid, data).map_err(|e| PriorError::Entry {
                camera_id: m.camera_id.clone(),
                err: e.to_string(),
            })?;
            raw.push((m.camera_id, m.source, s));
        }
        Self::new(grid, raw)
    }

    pub fn grid(&self) -> SpectralGrid {
        self.grid
    }

    pub fn entries(&self) -> &[DatabaseEntry] {
        &self.entries
    }

    /// Group keys in sorted order.
    pub fn group_ids(&self) -> Vec<String> {
        self.groups.keys().cloned().collect()
    }

    pub fn group(&self, key: &str) -> Option<&[usize]> {
        self.groups.get(key).map(|v| v.as_slice())
    }

    /// Indices of entries whose group is not excluded.
    pub fn retained_indices(&self, exclude: &BTreeSet<String>) -> Vec<usize> {
        let mut keep = Vec::new();
        for (key, idxs) in &self.groups {
            if !exclude.contains(key) {
                keep.extend_from_slice(idxs);
            }
        }
        keep.sort_unstable();
        keep
    }

    /// Elementwise mean of the retained (max-normalized) curves; the
    /// standard estimator initialization.
    pub fn mean_curve(&self, exclude: &BTreeSet<String>) -> Result<SensitivityMatrix, PriorError> {
        let keep = self.retained_indices(exclude);
        if keep.is_empty() {
            return Err(PriorError::EmptyDatabase);
        }
        let mut acc = Matrix::zeros(self.grid.n(), 3);
        for &i in &keep {
            acc.add_scaled(self.entries[i].s.data(), 1.0 / keep.len() as f64);
        }
        SensitivityMatrix::new(self.grid, acc)
            .map_err(|e| PriorError::Entry { camera_id: "<mean>".into(), err: e.to_string() })
    }
}

/// Data augmentation parameters: `h` is the channel-scale floor, `g` the
/// roll radius in grid steps.
#[derive(Debug, Clone, Copy)]
pub struct AugmentParams {
    pub h: f64,
    pub g: usize,
    pub roll_mode: RollMode,
}

/// Roll-offset draw mode: per column of G (as published) or one shared
/// offset per matrix (a pure cyclic shift, for comparison).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RollMode {
    #[default]
    PerColumn,
    Global,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self { h: 0.2, g: 2, roll_mode: RollMode::PerColumn }
    }
}

/// Applies `S -> G S H`. Draw order: the three H scales, then the per-column
/// roll offsets (one shared offset in `Global` mode).
pub fn augment(s: &SensitivityMatrix, p: &AugmentParams, rng: &mut SplitMix64) -> SensitivityMatrix {
    let grid = s.grid();
    let n = grid.n();
    let h: [f64; 3] = [rng.uniform(p.h, 1.0), rng.uniform(p.h, 1.0), rng.uniform(p.h, 1.0)];
    let mut out = Matrix::zeros(n, 3);
    let g = p.g as i64;
    let mut global_u = 0i64;
    if p.roll_mode == RollMode::Global {
        global_u = rng.uniform_int(-g, g);
    }
    for c in 0..n {
        let u = match p.roll_mode {
            RollMode::PerColumn => rng.uniform_int(-g, g),
            RollMode::Global => global_u,
        };
        let r = (c as i64 + u).rem_euclid(n as i64) as usize;
        for k in 0..3 {
            out[(r, k)] += s.data()[(c, k)] * h[k];
        }
    }
    SensitivityMatrix::new(grid, out).expect("augmentation preserves validity")
}

/// Per-channel normalized reconstruction distance:
/// sqrt(sum_k |U_k - V_k|^2 / |U_k|^2).
pub fn delta_metric(u: &Matrix, v: &Matrix) -> Result<f64, PriorError> {
    debug_assert_eq!(u.rows(), v.rows());
    debug_assert_eq!(u.cols(), 3);
    let mut acc = 0.0;
    for k in 0..3 {
        let mut nu = 0.0;
        let mut d = 0.0;
        for i in 0..u.rows() {
            nu += u[(i, k)] * u[(i, k)];
            let e = u[(i, k)] - v[(i, k)];
            d += e * e;
        }
        if nu == 0.0 {
            return Err(PriorError::ZeroChannel(k));
        }
        acc += d / nu;
    }
    Ok(acc.sqrt())
}

/// Training hyperparameters (the published training table, overridable).
#[derive(Debug, Clone)]
pub struct TrainParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub scheduler_decay: f64,
    pub scheduler_patience: usize,
    pub stop_lr: f64,
    pub augment: AugmentParams,
    pub dropout_semantics: DropoutSemantics,
    /// Hard safety stop; the scheduler's stop criterion fires far earlier in
    /// any convergent run.
    pub max_steps: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            lr: 1e-1,
            momentum: 0.5,
            weight_decay: 1e-4,
            scheduler_decay: 0.5,
            scheduler_patience: 2000,
            stop_lr: 1e-5,
            augment: AugmentParams::default(),
            dropout_semantics: DropoutSemantics::default(),
            max_steps: 400_000,
        }
    }
}

/// Summary of one training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_lr: f64,
}

/// Flattens an n x 3 matrix to length 3n, channel blocks in r, g, b order.
pub fn flatten_curve(m: &Matrix) -> Vec<f64> {
    let n = m.rows();
    let mut out = vec![0.0; 3 * n];
    for k in 0..3 {
        for i in 0..n {
            out[k * n + i] = m[(i, k)];
        }
    }
    out
}

/// Inverse of [`flatten_curve`].
pub fn unflatten_curve(v: &[f64], n: usize) -> Matrix {
    Matrix::from_fn(n, 3, |i, k| v[k * n + i])
}

/// Trains the autoencoder on the database minus the excluded groups with
/// full-batch SGD and online augmentation. Deterministic given the seed.
pub fn train_autoencoder(
    db: &SensitivityDatabase,
    exclude: &BTreeSet<String>,
    params: &TrainParams,
    seed: u64,
) -> Result<(AutoencoderWeights, TrainReport), PriorError> {
    let keep = db.retained_indices(exclude);
    if keep.is_empty() {
        return Err(PriorError::EmptyDatabase);
    }
    let grid_n = db.grid().n();
    let n_flat = 3 * grid_n;
    let batch = keep.len();
    let mut rng = SplitMix64::new(seed);
    let weights = AutoencoderWeights::init(grid_n, &mut rng);
    let mut state = TrainState::new(
        weights,
        params.lr,
        params.momentum,
        params.weight_decay,
        PlateauScheduler::new(params.scheduler_decay, params.scheduler_patience),
    );
    let mut trainer = BatchTrainer::new(grid_n, batch);
    trainer.sync_transposes(&state.weights);

    let mut report = TrainReport { steps: 0, initial_loss: 0.0, final_loss: 0.0, final_lr: params.lr };
    // channel norms of the current augmented batch, per sample
    let mut norms = vec![[0.0f64; 3]; batch];
    let mut steps = 0usize;
    while steps < params.max_steps {
        // fresh augmentations of every retained curve, flattened into the batch
        for (row, &idx) in keep.iter().enumerate() {
            let aug = augment(&db.entries[idx].s, &params.augment, &mut rng);
            let x = &mut trainer.x0[row * n_flat..(row + 1) * n_flat];
            for k in 0..3 {
                let mut nu = 0.0;
                for i in 0..grid_n {
                    let v = aug.data()[(i, k)];
                    x[k * grid_n + i] = v;
                    nu += v * v;
                }
                if nu == 0.0 {
                    return Err(PriorError::ZeroChannel(k));
                }
                norms[row][k] = nu;
            }
        }
        trainer.forward_train(&state.weights, &mut rng, params.dropout_semantics);

        // mean Delta loss over the batch and its gradient wrt the outputs
        let mut loss = 0.0;
        {
            let (x0, out, dy) = trainer.loss_io();
            let mut deltas = vec![0.0f64; batch];
            for row in 0..batch {
                let x = &x0[row * n_flat..(row + 1) * n_flat];
                let y = &out[row * n_flat..(row + 1) * n_flat];
                let mut acc = 0.0;
                for k in 0..3 {
                    let mut d = 0.0;
                    for i in 0..grid_n {
                        let e = x[k * grid_n + i] - y[k * grid_n + i];
                        d += e * e;
                    }
                    acc += d / norms[row][k];
                }
                deltas[row] = acc.sqrt();
                loss += deltas[row];
            }
            loss /= batch as f64;
            // d loss / d y = -(x - y) / (|U_k|^2 * delta * batch)
            for row in 0..batch {
                let d = deltas[row];
                let scale = if d > 0.0 { 1.0 / (d * batch as f64) } else { 0.0 };
                for k in 0..3 {
                    let cs = scale / norms[row][k];
                    for i in 0..grid_n {
                        let j = row * n_flat + k * grid_n + i;
                        dy[j] = -(x0[j] - out[j]) * cs;
                    }
                }
            }
        }
        if steps == 0 {
            report.initial_loss = loss;
        }
        report.final_loss = loss;

        trainer.backward_and_update(&mut state);
        crate::nn::scheduler_update(&mut state, loss);
        steps += 1;
        if state.lr < params.stop_lr {
            break;
        }
    }
    report.steps = steps;
    report.final_lr = state.lr;
    Ok((state.weights, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn tiny_db(n_cameras: usize, grid: SpectralGrid) -> SensitivityDatabase {
        synth::synthetic_database(grid, n_cameras, 404)
    }

    #[test]
    fn database_normalizes_and_groups() {
        let grid = SpectralGrid::default();
        let data = Matrix::from_fn(31, 3, |i, k| (i + k + 1) as f64);
        let s = SensitivityMatrix::new(grid, data).unwrap();
        let db = SensitivityDatabase::new(
            grid,
            vec![
                ("Canon 5D II".into(), "lab-a".into(), s.clone()),
                ("canon  5d ii".into(), "lab-b".into(), s.clone()),
                ("Nikon D90".into(), "lab-a".into(), s),
            ],
        )
        .unwrap();
        assert_eq!(db.group_ids().len(), 2);
        assert_eq!(db.group("canon 5d ii").unwrap().len(), 2);
        for e in db.entries() {
            assert!((e.s.max_value() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn augment_degenerate_params_is_identity() {
        let grid = SpectralGrid::default();
        let db = tiny_db(1, grid);
        let s = &db.entries()[0].s;
        let p = AugmentParams { h: 1.0, g: 0, roll_mode: RollMode::PerColumn };
        let mut rng = SplitMix64::new(1);
        let out = augment(s, &p, &mut rng);
        assert!(out.data().max_abs_diff(s.data()) < 1e-15);
    }

    #[test]
    fn augment_scale_only_constant_per_channel() {
        let grid = SpectralGrid::default();
        let db = tiny_db(1, grid);
        let s = &db.entries()[0].s;
        let p = AugmentParams { h: 0.3, g: 0, roll_mode: RollMode::PerColumn };
        let mut rng = SplitMix64::new(2);
        let out = augment(s, &p, &mut rng);
        for k in 0..3 {
            let mut ratio = None;
            for i in 0..grid.n() {
                let (a, b) = (out.data()[(i, k)], s.data()[(i, k)]);
                if b > 1e-12 {
                    let r = a / b;
                    assert!((0.3..=1.0 + 1e-12).contains(&r));
                    if let Some(prev) = ratio {
                        assert!((r - prev as f64).abs() < 1e-12);
                    }
                    ratio = Some(r);
                }
            }
        }
    }

    #[test]
    fn augment_conserves_column_sums() {
        let grid = SpectralGrid::default();
        let db = tiny_db(1, grid);
        let s = &db.entries()[0].s;
        let p = AugmentParams { h: 1.0, g: 2, roll_mode: RollMode::PerColumn };
        let mut rng = SplitMix64::new(3);
        for _ in 0..1000 {
            let out = augment(s, &p, &mut rng);
            for k in 0..3 {
                let a: f64 = (0..grid.n()).map(|i| out.data()[(i, k)]).sum();
                let b: f64 = (0..grid.n()).map(|i| s.data()[(i, k)]).sum();
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn augment_global_roll_is_pure_shift() {
        let grid = SpectralGrid::default();
        let db = tiny_db(1, grid);
        let s = &db.entries()[0].s;
        let p = AugmentParams { h: 1.0, g: 3, roll_mode: RollMode::Global };
        let mut rng = SplitMix64::new(4);
        let out = augment(s, &p, &mut rng);
        // a pure shift preserves multisets per channel
        for k in 0..3 {
            let mut a: Vec<f64> = (0..grid.n()).map(|i| out.data()[(i, k)]).collect();
            let mut b: Vec<f64> = (0..grid.n()).map(|i| s.data()[(i, k)]).collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn delta_metric_cases() {
        let u = Matrix::from_fn(4, 3, |i, k| (i + k + 1) as f64);
        assert_eq!(delta_metric(&u, &u).unwrap(), 0.0);
        // V = 0: each normalized difference has unit norm -> sqrt(3)
        let z = Matrix::zeros(4, 3);
        assert!((delta_metric(&u, &z).unwrap() - 3.0f64.sqrt()).abs() < 1e-12);
        assert!(matches!(delta_metric(&z, &u), Err(PriorError::ZeroChannel(0))));
    }

    #[test]
    fn delta_metric_channel_weighting() {
        // channel norms (1, 10, 100); V = U + unit perturbation of one entry
        // per channel -> sqrt(1 + 0.01 + 0.0001)
        let mut u = Matrix::zeros(4, 3);
        u[(0, 0)] = 1.0;
        u[(1, 1)] = 10.0;
        u[(2, 2)] = 100.0;
        let mut v = u.clone();
        v[(3, 0)] += 1.0;
        v[(3, 1)] += 1.0;
        v[(3, 2)] += 1.0;
        let d = delta_metric(&u, &v).unwrap();
        assert!((d - 1.0101f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn flatten_round_trip() {
        let m = Matrix::from_fn(5, 3, |i, k| (i * 3 + k) as f64);
        let v = flatten_curve(&m);
        assert_eq!(v[0], m[(0, 0)]);
        assert_eq!(v[5], m[(0, 1)]); // channel blocks are contiguous
        let back = unflatten_curve(&v, 5);
        assert_eq!(back, m);
    }

    #[test]
    fn train_memorizes_single_curve() {
        // one curve, no augmentation: the autoencoder memorizes it
        let grid = SpectralGrid::new(16).unwrap();
        let db = tiny_db(1, grid);
        let params = TrainParams {
            augment: AugmentParams { h: 1.0, g: 0, roll_mode: RollMode::PerColumn },
            ..TrainParams::default()
        };
        let (w, report) = train_autoencoder(&db, &BTreeSet::new(), &params, 7).unwrap();
        assert!(report.final_loss < 0.05, "final loss {}", report.final_loss);
        assert!(report.final_loss < report.initial_loss);
        // eval reconstruction of the training curve is close
        let x = flatten_curve(db.entries()[0].s.data());
        let (y, _) = crate::nn::ae_forward(&w, &x, crate::nn::Mode::Eval).unwrap();
        let d = delta_metric(db.entries()[0].s.data(), &unflatten_curve(&y, grid.n())).unwrap();
        assert!(d < 0.2, "eval delta {d}");
    }

    #[test]
    fn train_excluding_group_removes_duplicates() {
        let grid = SpectralGrid::new(8).unwrap();
        let base = tiny_db(3, grid);
        // duplicate camera 0 under a different source
        let mut raw: Vec<(String, String, SensitivityMatrix)> = base
            .entries()
            .iter()
            .map(|e| (e.camera_id.clone(), e.source.clone(), e.s.clone()))
            .collect();
        raw.push((raw[0].0.clone(), "other-lab".into(), raw[0].2.clone()));
        let db = SensitivityDatabase::new(grid, raw).unwrap();
        let key = normalize_camera_id(&db.entries()[0].camera_id);
        let mut exclude = BTreeSet::new();
        exclude.insert(key.clone());
        let kept = db.retained_indices(&exclude);
        assert_eq!(kept.len(), 2);
        assert!(kept.iter().all(|&i| normalize_camera_id(&db.entries()[i].camera_id) != key));
        assert!(matches!(
            db.mean_curve(&BTreeSet::from_iter(db.group_ids())),
            Err(PriorError::EmptyDatabase)
        ));
    }

    #[test]
    fn train_deterministic_given_seed() {
        let grid = SpectralGrid::new(8).unwrap();
        let db = tiny_db(3, grid);
        let params = TrainParams {
            scheduler_patience: 50,
            stop_lr: 2e-2,
            ..TrainParams::default()
        };
        let (w1, r1) = train_autoencoder(&db, &BTreeSet::new(), &params, 42).unwrap();
        let (w2, r2) = train_autoencoder(&db, &BTreeSet::new(), &params, 42).unwrap();
        assert_eq!(
            crate::nn::checkpoint_to_bytes(&w1),
            crate::nn::checkpoint_to_bytes(&w2)
        );
        assert_eq!(r1.steps, r2.steps);
        let (w3, _) = train_autoencoder(&db, &BTreeSet::new(), &params, 43).unwrap();
        assert_ne!(
            crate::nn::checkpoint_to_bytes(&w1),
            crate::nn::checkpoint_to_bytes(&w3)
        );
    }

    #[test]
    fn synthetic_family_generalizes() {
        // held-out reconstruction within 2x of training reconstruction
        let grid = SpectralGrid::new(16).unwrap();
        let db = tiny_db(8, grid);
        let held_out = db.group_ids()[0].clone();
        let exclude = BTreeSet::from_iter([held_out.clone()]);
        let params = TrainParams {
            scheduler_patience: 200,
            stop_lr: 1e-3,
            ..TrainParams::default()
        };
        let (w, _) = train_autoencoder(&db, &exclude, &params, 11).unwrap();
        let eval_delta = |s: &SensitivityMatrix| {
            let x = flatten_curve(s.data());
            let (y, _) = crate::nn::ae_forward(&w, &x, crate::nn::Mode::Eval).unwrap();
            delta_metric(s.data(), &unflatten_curve(&y, grid.n())).unwrap()
        };
        let train_mean: f64 = db
            .retained_indices(&exclude)
            .iter()
            .map(|&i| eval_delta(&db.entries()[i].s))
            .sum::<f64>()
            / db.retained_indices(&exclude).len() as f64;
        let held_idx = db.group(&held_out).unwrap()[0];
        let held = eval_delta(&db.entries()[held_idx].s);
        assert!(
            held < 2.0 * train_mean + 0.05,
            "held-out delta {held} vs train mean {train_mean}"
        );
    }
}
