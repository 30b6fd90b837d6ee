//! Leave-one-out validation: for every camera group, train the prior on the
//! database minus that whole group (all duplicates), estimate once from the
//! camera's color matrices, and score against each ground-truth duplicate.

use crate::dng::CameraRecord;
use crate::estimator::{estimate, EstimatorParams};
use crate::metrics::{relative_full_scale_error, ErrorReport};
use crate::prior::{train_autoencoder, PriorError, SensitivityDatabase, TrainParams};
use crate::rng::derive_seed;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ValidationError {
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error("no validation results to summarize")]
    EmptyResults,
}

/// One scored row: a ground-truth duplicate compared against the single
/// estimate produced for its group.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationRow {
    pub camera_id: String,
    pub source: String,
    pub re_mean: f64,
    pub re_r: f64,
    pub re_g: f64,
    pub re_b: f64,
}

impl ValidationRow {
    fn new(camera_id: &str, source: &str, report: &ErrorReport) -> Self {
        Self {
            camera_id: camera_id.to_string(),
            source: source.to_string(),
            re_mean: report.re_mean,
            re_r: report.re_per_channel[0],
            re_g: report.re_per_channel[1],
            re_b: report.re_per_channel[2],
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoovOutcome {
    pub rows: Vec<ValidationRow>,
    /// Skip and failure notices, one line per affected group.
    pub notices: Vec<String>,
}

/// Grouping key for the leave-out unit: by camera (the default) or by brand
/// (the first whitespace token of the camera id).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GroupBy {
    #[default]
    Camera,
    Brand,
}

fn leave_out_key(camera_id_key: &str, group_by: GroupBy) -> String {
    match group_by {
        GroupBy::Camera => camera_id_key.to_string(),
        GroupBy::Brand => camera_id_key
            .split_whitespace()
            .next()
            .unwrap_or(camera_id_key)
            .to_string(),
    }
}

/// Runs the whole protocol. `matrices` maps normalized camera ids to their
/// records; groups without a record are skipped with a notice. `jobs`
/// bounds the worker threads; results are identical for any job count.
pub fn loov_run(
    db: &SensitivityDatabase,
    matrices: &BTreeMap<String, CameraRecord>,
    ae_params: &TrainParams,
    est_params: &EstimatorParams,
    seed: u64,
    jobs: usize,
    group_by: GroupBy,
) -> Result<LoovOutcome, ValidationError> {
    let group_ids = db.group_ids();
    if group_ids.is_empty() {
        return Err(ValidationError::Prior(PriorError::EmptyDatabase));
    }
    // partition groups by the leave-out key (identity for per-camera runs)
    let mut units: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for gid in &group_ids {
        units.entry(leave_out_key(gid, group_by)).or_default().push(gid.clone());
    }
    let units: Vec<(String, Vec<String>)> = units.into_iter().collect();

    struct UnitResult {
        rows: Vec<ValidationRow>,
        notices: Vec<String>,
    }

    let results: Vec<Mutex<Option<UnitResult>>> =
        (0..units.len()).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = jobs.max(1).min(units.len().max(1));

    let run_unit = |unit_index: usize| -> UnitResult {
        let (unit_key, members) = &units[unit_index];
        let mut rows = Vec::new();
        let mut notices = Vec::new();
        // leave out every member group of the unit at once
        let exclude: BTreeSet<String> = members.iter().cloned().collect();
        // which member groups have records at all
        let with_records: Vec<&String> =
            members.iter().filter(|g| matrices.contains_key(*g)).collect();
        if with_records.is_empty() {
            notices.push(format!("{unit_key}: no color-matrix record; group skipped"));
            return UnitResult { rows, notices };
        }
        let unit_seed = derive_seed(seed, unit_index as u64);
        let trained = train_autoencoder(db, &exclude, ae_params, unit_seed);
        let (weights, _) = match trained {
            Ok(t) => t,
            Err(e) => {
                notices.push(format!("{unit_key}: training failed: {e}"));
                return UnitResult { rows, notices };
            }
        };
        let mean = match db.mean_curve(&exclude) {
            Ok(m) => m,
            Err(e) => {
                notices.push(format!("{unit_key}: mean init failed: {e}"));
                return UnitResult { rows, notices };
            }
        };
        for gid in with_records {
            let record = &matrices[gid];
            match estimate(record, &weights, &mean, est_params) {
                Ok((s_hat, _)) => {
                    for &idx in db.group(gid).unwrap_or(&[]) {
                        let entry = &db.entries()[idx];
                        match relative_full_scale_error(
                            s_hat.data(),
                            entry.s.max_normalized().data(),
                        ) {
                            Ok(report) => {
                                rows.push(ValidationRow::new(&entry.camera_id, &entry.source, &report))
                            }
                            Err(e) => notices.push(format!("{gid}: scoring failed: {e}")),
                        }
                    }
                }
                Err(e) => notices.push(format!("{gid}: estimation failed: {e}")),
            }
        }
        UnitResult { rows, notices }
    };

    if workers <= 1 {
        for i in 0..units.len() {
            *results[i].lock().unwrap() = Some(run_unit(i));
        }
    } else {
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= units.len() {
                        break;
                    }
                    let r = run_unit(i);
                    *results[i].lock().unwrap() = Some(r);
                });
            }
        });
    }

    let mut rows = Vec::new();
    let mut notices = Vec::new();
    for cell in results {
        let r = cell.into_inner().unwrap().expect("every unit ran");
        rows.extend(r.rows);
        notices.extend(r.notices);
    }
    Ok(LoovOutcome { rows, notices })
}

/// Summary statistics over validation rows.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub count: usize,
    /// Lower median of the across-channel relative errors.
    pub median_re: f64,
    pub per_channel_medians: [f64; 3],
    pub best: RowRef,
    pub median: RowRef,
    pub worst: RowRef,
    /// Counts per 1%-wide bin: [0,1), [1,2), ...
    pub histogram: Vec<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RowRef {
    pub camera_id: String,
    pub source: String,
    pub re_mean: f64,
}

impl RowRef {
    fn of(row: &ValidationRow) -> Self {
        Self { camera_id: row.camera_id.clone(), source: row.source.clone(), re_mean: row.re_mean }
    }
}

fn lower_median(sorted: &[f64]) -> f64 {
    sorted[(sorted.len() - 1) / 2]
}

pub fn summarize(rows: &[ValidationRow]) -> Result<Summary, ValidationError> {
    if rows.is_empty() {
        return Err(ValidationError::EmptyResults);
    }
    let mut by_mean: Vec<&ValidationRow> = rows.iter().collect();
    by_mean.sort_by(|a, b| a.re_mean.total_cmp(&b.re_mean).then(a.camera_id.cmp(&b.camera_id)));
    let means: Vec<f64> = by_mean.iter().map(|r| r.re_mean).collect();
    let channel_median = |pick: fn(&ValidationRow) -> f64| {
        let mut v: Vec<f64> = rows.iter().map(pick).collect();
        v.sort_by(f64::total_cmp);
        lower_median(&v)
    };
    let mut histogram = vec![0u64; (means.last().unwrap() * 100.0).floor() as usize + 1];
    for m in &means {
        histogram[(m * 100.0).floor() as usize] += 1;
    }
    Ok(Summary {
        count: rows.len(),
        median_re: lower_median(&means),
        per_channel_medians: [
            channel_median(|r| r.re_r),
            channel_median(|r| r.re_g),
            channel_median(|r| r.re_b),
        ],
        best: RowRef::of(by_mean[0]),
        median: RowRef::of(by_mean[(by_mean.len() - 1) / 2]),
        worst: RowRef::of(by_mean[by_mean.len() - 1]),
        histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectra::SpectralGrid;
    use crate::synth;

    fn fast_params() -> (TrainParams, EstimatorParams) {
        (
            TrainParams { scheduler_patience: 100, stop_lr: 5e-3, ..TrainParams::default() },
            EstimatorParams { scheduler_patience: 150, ..EstimatorParams::default() },
        )
    }

    #[test]
    fn duplicate_group_scores_two_rows_from_one_estimate() {
        let grid = SpectralGrid::new(12).unwrap();
        let base = synth::synthetic_database(grid, 4, 88);
        let mut raw: Vec<(String, String, crate::colorsystem::SensitivityMatrix)> = base
            .entries()
            .iter()
            .map(|e| (e.camera_id.clone(), e.source.clone(), e.s.clone()))
            .collect();
        // a duplicate of camera 0 from another source
        raw.push((raw[0].0.clone(), "second-lab".into(), raw[0].2.clone()));
        let db = SensitivityDatabase::new(grid, raw).unwrap();
        let matrices = synth::exact_records_for_database(&db);
        let (tp, ep) = fast_params();
        let out = loov_run(&db, &matrices, &tp, &ep, 5, 1, GroupBy::Camera).unwrap();
        let dup_rows: Vec<_> =
            out.rows.iter().filter(|r| r.camera_id == db.entries()[0].camera_id).collect();
        assert_eq!(dup_rows.len(), 2);
        // identical curves scored against the same estimate: identical errors
        assert!((dup_rows[0].re_mean - dup_rows[1].re_mean).abs() < 1e-15);
        assert_eq!(out.rows.len(), 5);
    }

    #[test]
    fn group_without_record_is_skipped_with_notice() {
        let grid = SpectralGrid::new(12).unwrap();
        let db = synth::synthetic_database(grid, 3, 12);
        let mut matrices = synth::exact_records_for_database(&db);
        let dropped = db.group_ids()[1].clone();
        matrices.remove(&dropped);
        let (tp, ep) = fast_params();
        let out = loov_run(&db, &matrices, &tp, &ep, 5, 1, GroupBy::Camera).unwrap();
        assert!(out.rows.iter().all(|r| crate::dng::normalize_camera_id(&r.camera_id) != dropped));
        assert_eq!(out.notices.len(), 1);
        assert!(out.notices[0].contains("skipped"));
    }

    #[test]
    fn jobs_do_not_change_results() {
        let grid = SpectralGrid::new(12).unwrap();
        let db = synth::synthetic_database(grid, 4, 19);
        let matrices = synth::exact_records_for_database(&db);
        let (tp, ep) = fast_params();
        let a = loov_run(&db, &matrices, &tp, &ep, 7, 1, GroupBy::Camera).unwrap();
        let b = loov_run(&db, &matrices, &tp, &ep, 7, 4, GroupBy::Camera).unwrap();
        assert_eq!(a.rows.len(), b.rows.len());
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.camera_id, y.camera_id);
            assert_eq!(x.re_mean.to_bits(), y.re_mean.to_bits());
        }
    }

    #[test]
    fn brand_grouping_partitions() {
        let grid = SpectralGrid::new(12).unwrap();
        let raw = vec![
            ("Alpha One".to_string(), "s".to_string(), synth::synthetic_curve(grid, 1)),
            ("Alpha Two".to_string(), "s".to_string(), synth::synthetic_curve(grid, 2)),
            ("Beta One".to_string(), "s".to_string(), synth::synthetic_curve(grid, 3)),
        ];
        let db = SensitivityDatabase::new(grid, raw).unwrap();
        let matrices = synth::exact_records_for_database(&db);
        let (tp, ep) = fast_params();
        let out = loov_run(&db, &matrices, &tp, &ep, 3, 1, GroupBy::Brand).unwrap();
        // both alpha cameras are left out together, so all three still score
        assert_eq!(out.rows.len(), 3);
    }

    #[test]
    fn summarize_single_and_small() {
        let row = |id: &str, re: f64| ValidationRow {
            camera_id: id.into(),
            source: "s".into(),
            re_mean: re,
            re_r: re,
            re_g: re,
            re_b: re,
        };
        let s = summarize(&[row("a", 0.08)]).unwrap();
        assert_eq!(s.best.camera_id, "a");
        assert_eq!(s.median.camera_id, "a");
        assert_eq!(s.worst.camera_id, "a");
        let s = summarize(&[row("a", 0.04), row("b", 0.08), row("c", 0.17)]).unwrap();
        assert_eq!(s.median_re, 0.08);
        assert_eq!(s.best.camera_id, "a");
        assert_eq!(s.worst.camera_id, "c");
        // histogram: bins 4, 8, 17 occupied
        assert_eq!(s.histogram[4], 1);
        assert_eq!(s.histogram[8], 1);
        assert_eq!(s.histogram[17], 1);
        assert_eq!(s.histogram.iter().sum::<u64>(), 3);
        assert!(matches!(summarize(&[]), Err(ValidationError::EmptyResults)));
    }

    #[test]
    fn lower_median_convention_for_even_counts() {
        let row = |re: f64| ValidationRow {
            camera_id: format!("c{re}"),
            source: "s".into(),
            re_mean: re,
            re_r: re,
            re_g: re,
            re_b: re,
        };
        let s = summarize(&[row(0.02), row(0.04), row(0.06), row(0.08)]).unwrap();
        assert_eq!(s.median_re, 0.04);
    }
}
