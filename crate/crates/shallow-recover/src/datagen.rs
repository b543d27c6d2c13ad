//! Seeded generation of ground-truth weights and synthetic datasets.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{RecoverError, Result};
use crate::model::{forward, CnnWeights, Dataset, FcnWeights, NetworkWeights};
use crate::rng::{RngStream, StreamId};

/// Which network generates the labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Fcn,
    Cnn,
}

/// Specification of a ground-truth network draw.
#[derive(Clone, Copy, Debug)]
pub struct GroundTruthSpec {
    pub kind: ModelKind,
    pub d: usize,
    pub k: usize,
    /// Per-column (FCN) or filter (CNN) norm after rescaling; must be in (0, 1].
    pub scale: f64,
    pub seed: u64,
}

pub const DEFAULT_WEIGHT_SCALE: f64 = 0.9;

/// Draw i.i.d. standard-normal weights, then rescale each column (FCN) or
/// the filter (CNN) to the requested norm. Deterministic in the seed.
pub fn make_ground_truth(spec: &GroundTruthSpec) -> Result<NetworkWeights> {
    if spec.d == 0 || spec.k == 0 {
        return Err(RecoverError::InvalidArgument(
            "d and K must be positive".into(),
        ));
    }
    if !(spec.scale > 0.0 && spec.scale <= 2.0) {
        return Err(RecoverError::InvalidArgument(format!(
            "weight scale must be in (0, 2], got {}",
            spec.scale
        )));
    }
    let mut rng = RngStream::new(spec.seed, StreamId::new("ground-truth", 0));
    match spec.kind {
        ModelKind::Fcn => {
            let mut mat = DMatrix::zeros(spec.d, spec.k);
            for j in 0..spec.k {
                let mut col = vec![0.0; spec.d];
                rng.fill_normal(&mut col);
                let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
                for (i, v) in col.iter().enumerate() {
                    mat[(i, j)] = v / norm * spec.scale;
                }
            }
            Ok(NetworkWeights::Fcn(FcnWeights::new(mat)))
        }
        ModelKind::Cnn => {
            if spec.d % spec.k != 0 {
                return Err(RecoverError::InvalidArgument(format!(
                    "K={} must divide d={} for the CNN model",
                    spec.k, spec.d
                )));
            }
            let m = spec.d / spec.k;
            let mut filt = vec![0.0; m];
            rng.fill_normal(&mut filt);
            let norm = filt.iter().map(|x| x * x).sum::<f64>().sqrt();
            for v in filt.iter_mut() {
                *v = *v / norm * spec.scale;
            }
            Ok(NetworkWeights::Cnn(CnnWeights::new(
                DVector::from_column_slice(&filt),
                spec.k,
            )))
        }
    }
}

/// Sample n inputs x ~ N(0, I_d) and labels y ~ Bernoulli(H(truth, x)).
pub fn sample_dataset(truth: &NetworkWeights, n: usize, stream: &mut RngStream) -> Result<Dataset> {
    if n == 0 {
        return Err(RecoverError::InvalidArgument("n must be >= 1".into()));
    }
    let d = truth.dim();
    let mut xs = vec![0.0; n * d];
    let mut ys = vec![0u8; n];
    for i in 0..n {
        let row = &mut xs[i * d..(i + 1) * d];
        stream.fill_normal(row);
        let h = forward(truth, row)?;
        ys[i] = (stream.uniform() < h) as u8;
    }
    Ok(Dataset { d, xs, ys, seed: 0 })
}

/// Write the line-based text dump: `d K n seed` header then one
/// `y x_1 ... x_d` row per sample with 17-significant-digit decimals.
pub fn dump_dataset<W: Write>(data: &Dataset, k: usize, out: &mut W) -> Result<()> {
    writeln!(out, "{} {} {} {}", data.d, k, data.len(), data.seed)?;
    for i in 0..data.len() {
        write!(out, "{}", data.ys[i])?;
        for &v in data.x(i) {
            write!(out, " {:.16e}", v)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Read a dataset dump produced by [`dump_dataset`]. Returns (dataset, K).
pub fn load_dataset<R: BufRead>(input: &mut R) -> Result<(Dataset, usize)> {
    let mut header = String::new();
    input.read_line(&mut header)?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 {
        return Err(RecoverError::InvalidArgument(
            "dataset header must be `d K n seed`".into(),
        ));
    }
    let bad = |what: &str| RecoverError::InvalidArgument(format!("bad {what} in dataset header"));
    let d: usize = parts[0].parse().map_err(|_| bad("d"))?;
    let k: usize = parts[1].parse().map_err(|_| bad("K"))?;
    let n: usize = parts[2].parse().map_err(|_| bad("n"))?;
    let seed: u64 = parts[3].parse().map_err(|_| bad("seed"))?;
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n);
    for line in input.lines().take(n) {
        let line = line?;
        let mut it = line.split_whitespace();
        let y: u8 = it
            .next()
            .ok_or_else(|| bad("row"))?
            .parse()
            .map_err(|_| bad("label"))?;
        ys.push(y);
        for _ in 0..d {
            let v: f64 = it
                .next()
                .ok_or_else(|| bad("row"))?
                .parse()
                .map_err(|_| bad("coordinate"))?;
            xs.push(v);
        }
    }
    if ys.len() != n {
        return Err(RecoverError::InvalidArgument(format!(
            "expected {n} rows, got {}",
            ys.len()
        )));
    }
    Ok((Dataset { d, xs, ys, seed }, k))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fcn_spec(seed: u64) -> GroundTruthSpec {
        GroundTruthSpec {
            kind: ModelKind::Fcn,
            d: 8,
            k: 3,
            scale: 0.9,
            seed,
        }
    }

    #[test]
    fn ground_truth_deterministic_and_normalized() {
        let a = make_ground_truth(&fcn_spec(3)).unwrap();
        let b = make_ground_truth(&fcn_spec(3)).unwrap();
        assert_eq!(a, b);
        if let NetworkWeights::Fcn(w) = &a {
            for col in w.mat.column_iter() {
                assert!((col.norm() - 0.9).abs() < 1e-12);
            }
        } else {
            panic!("expected fcn");
        }
    }

    #[test]
    fn different_seeds_differ() {
        for s in 0..100u64 {
            let a = make_ground_truth(&fcn_spec(2 * s)).unwrap();
            let b = make_ground_truth(&fcn_spec(2 * s + 1)).unwrap();
            let (NetworkWeights::Fcn(wa), NetworkWeights::Fcn(wb)) = (&a, &b) else {
                panic!("expected fcn");
            };
            assert!((&wa.mat - &wb.mat).norm() > 0.0);
        }
    }

    #[test]
    fn cnn_requires_divisibility() {
        let spec = GroundTruthSpec {
            kind: ModelKind::Cnn,
            d: 10,
            k: 3,
            scale: 0.9,
            seed: 0,
        };
        assert!(make_ground_truth(&spec).is_err());
    }

    #[test]
    fn zero_truth_labels_are_balanced() {
        use nalgebra::DMatrix;
        let truth = NetworkWeights::Fcn(FcnWeights::new(DMatrix::zeros(5, 2)));
        let mut stream = RngStream::new(1, StreamId::new("dataset", 0));
        let n = 100_000;
        let data = sample_dataset(&truth, n, &mut stream).unwrap();
        let mean = data.ys.iter().map(|&y| y as f64).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt());
    }

    #[test]
    fn label_mean_matches_monte_carlo_h() {
        let truth = make_ground_truth(&fcn_spec(9)).unwrap();
        let n = 100_000;
        let mut stream = RngStream::new(77, StreamId::new("dataset", 1));
        let data = sample_dataset(&truth, n, &mut stream).unwrap();
        let mean_y = data.ys.iter().map(|&y| y as f64).sum::<f64>() / n as f64;
        // independent Monte-Carlo estimate of E[H]
        let mut mc = RngStream::new(77, StreamId::new("mc-oracle", 0));
        let m = 100_000;
        let mut acc = 0.0;
        let mut x = vec![0.0; truth.dim()];
        for _ in 0..m {
            mc.fill_normal(&mut x);
            acc += forward(&truth, &x).unwrap();
        }
        let eh = acc / m as f64;
        let se = (0.25 / n as f64).sqrt() + (0.25 / m as f64).sqrt();
        assert!((mean_y - eh).abs() < 3.0 * se, "{mean_y} vs {eh}");
    }

    #[test]
    fn same_stream_same_dataset() {
        let truth = make_ground_truth(&fcn_spec(4)).unwrap();
        let mut s1 = RngStream::new(5, StreamId::new("dataset", 2));
        let mut s2 = RngStream::new(5, StreamId::new("dataset", 2));
        let a = sample_dataset(&truth, 500, &mut s1).unwrap();
        let b = sample_dataset(&truth, 500, &mut s2).unwrap();
        assert_eq!(a.xs, b.xs);
        assert_eq!(a.ys, b.ys);
    }

    #[test]
    fn input_marginals() {
        let truth = make_ground_truth(&fcn_spec(6)).unwrap();
        let n = 100_000;
        let mut stream = RngStream::new(8, StreamId::new("dataset", 3));
        let data = sample_dataset(&truth, n, &mut stream).unwrap();
        let d = data.d;
        for c in 0..d {
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for i in 0..n {
                let v = data.x(i)[c];
                sum += v;
                sumsq += v * v;
            }
            let mean = sum / n as f64;
            let var = sumsq / n as f64 - mean * mean;
            assert!(mean.abs() < 4.0 / (n as f64).sqrt());
            assert!((var - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt());
        }
    }

    #[test]
    fn label_calibration_by_decile() {
        let truth = make_ground_truth(&fcn_spec(10)).unwrap();
        let n = 100_000;
        let mut stream = RngStream::new(12, StreamId::new("dataset", 4));
        let data = sample_dataset(&truth, n, &mut stream).unwrap();
        let mut bins = vec![(0usize, 0.0f64, 0.0f64); 10]; // count, sum y, sum h
        for i in 0..n {
            let h = forward(&truth, data.x(i)).unwrap();
            let b = ((h * 10.0) as usize).min(9);
            bins[b].0 += 1;
            bins[b].1 += data.y(i);
            bins[b].2 += h;
        }
        for (count, sy, sh) in bins {
            if count < 100 {
                continue;
            }
            let freq = sy / count as f64;
            let hbar = sh / count as f64;
            let se = (hbar * (1.0 - hbar) / count as f64).sqrt().max(1e-9);
            assert!((freq - hbar).abs() < 5.0 * se, "{freq} vs {hbar} (n={count})");
        }
    }

    #[test]
    fn dump_load_round_trip() {
        let truth = make_ground_truth(&fcn_spec(14)).unwrap();
        let mut stream = RngStream::new(3, StreamId::new("dataset", 5));
        let data = sample_dataset(&truth, 50, &mut stream).unwrap();
        let mut buf = Vec::new();
        dump_dataset(&data, 3, &mut buf).unwrap();
        let (back, k) = load_dataset(&mut std::io::Cursor::new(buf)).unwrap();
        assert_eq!(k, 3);
        assert_eq!(back.ys, data.ys);
        assert_eq!(back.xs, data.xs); // 17 significant digits round-trips f64
    }
}
