use shallow_recover::datagen::{make_ground_truth, sample_dataset, GroundTruthSpec, ModelKind};
use shallow_recover::model::batch_loss_grad;
use shallow_recover::optimizer::{aligned_error_generic, gd_run, near_truth_init, GDConfig};
use shallow_recover::rng::{RngStream, StreamId};
use std::time::Instant;

fn main() {
    let (d, k, n) = (10usize, 3usize, 20_000usize);
    // per-iter benchmark
    {
        let truth = make_ground_truth(&GroundTruthSpec {
            kind: ModelKind::Fcn,
            d,
            k,
            scale: 0.9,
            seed: 1,
        })
        .unwrap();
        let mut ds = RngStream::new(1, StreamId::new("data", 0));
        let data = sample_dataset(&truth, n, &mut ds).unwrap();
        let t0 = Instant::now();
        let mut acc = 0.0;
        for _ in 0..200 {
            let (l, g) = batch_loss_grad(&truth, &data).unwrap();
            acc += l + g[0];
        }
        println!(
            "fused per-iter {:.2} ms (acc {acc:.3})",
            t0.elapsed().as_secs_f64() * 1000.0 / 200.0
        );
    }

    for eta in [2.0, 5.0, 10.0] {
        for seed in 1..=3u64 {
            let truth = make_ground_truth(&GroundTruthSpec {
                kind: ModelKind::Fcn,
                d,
                k,
                scale: 0.9,
                seed,
            })
            .unwrap();
            let mut ds = RngStream::new(seed, StreamId::new("data", 0));
            let data = sample_dataset(&truth, n, &mut ds).unwrap();
            let mut stream = RngStream::new(seed, StreamId::new("init", 0));
            let tf = match &truth {
                shallow_recover::model::NetworkWeights::Fcn(w) => w.frobenius_norm(),
                _ => unreachable!(),
            };
            let w0 = near_truth_init(&truth, 0.1 * tf, &mut stream);
            let cfg = GDConfig {
                step_size: eta,
                max_iters: 40_000,
                grad_tol: 1e-9,
                trace_stride: 100,
            };
            let t0 = Instant::now();
            match gd_run(&data, &w0, &cfg, Some(&truth)) {
                Ok(trace) => {
                    let last = trace.records.last().unwrap();
                    let (err, _) = aligned_error_generic(&trace.final_weights, &truth).unwrap();
                    println!(
                        "eta={eta} seed={seed}: iters={} stop={:?} grad={:.2e} ratio={:.3} ascent={} {:.1}s",
                        trace.iterations,
                        trace.stop,
                        last.grad_norm,
                        err / tf,
                        trace.ascent_steps,
                        t0.elapsed().as_secs_f64()
                    );
                }
                Err(e) => println!("eta={eta} seed={seed}: ERR {e} {:.1}s", t0.elapsed().as_secs_f64()),
            }
        }
    }
}
