// quick timing probe for one real-scale training
use speccurve::prior::{train_autoencoder, TrainParams};
use speccurve::spectra::SpectralGrid;
use speccurve::synth;
use std::collections::BTreeSet;
use std::time::Instant;

fn main() {
    let grid = SpectralGrid::default();
    let db = synth::synthetic_database(grid, 20, 42);
    let mut exclude = BTreeSet::new();
    exclude.insert(db.group_ids()[0].clone());
    let params = TrainParams::default();
    let t = Instant::now();
    let (_, report) = train_autoencoder(&db, &exclude, &params, 7).unwrap();
    let dt = t.elapsed().as_secs_f64();
    println!(
        "steps {} in {:.1} s ({:.3} ms/step), loss {:.4} -> {:.4}, final lr {:.2e}",
        report.steps, dt, dt / report.steps as f64 * 1e3,
        report.initial_loss, report.final_loss, report.final_lr
    );
}
