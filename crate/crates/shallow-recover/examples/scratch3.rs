use shallow_recover::datagen::{make_ground_truth, sample_dataset, GroundTruthSpec, ModelKind};
use shallow_recover::geometry::{hessian_spectrum_probe, theoretical_radius};
use shallow_recover::rng::{RngStream, StreamId};

fn main() {
    for &scale in &[1.2f64, 1.5, 2.0] {
        for seed in 1..=5u64 {
            let truth = make_ground_truth(&GroundTruthSpec {
                kind: ModelKind::Fcn, d: 10, k: 3, scale, seed,
            }).unwrap();
            let mut ds = RngStream::new(seed + 100, StreamId::new("acc-data", 0));
            let data = sample_dataset(&truth, 50_000, &mut ds).unwrap();
            let radius = theoretical_radius(&truth, 1.0).unwrap();
            let mut ps = RngStream::new(seed, StreamId::new("acc-probe", 0));
            let rep = hessian_spectrum_probe(&data, &truth, radius, 20, &mut ps).unwrap();
            println!(
                "scale={scale} seed={seed} radius={radius:.5} rho={:.5} lmin_truth={:.5e} lmin_ball={:.5e}",
                rep.rho, rep.probes[0].lambda_min, rep.min_lambda_min()
            );
        }
    }
}
