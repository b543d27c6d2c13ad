//! Ordered compensated summation.
//!
//! All batch reductions in this crate go through these helpers with a fixed
//! chunk layout: per-chunk Kahan sums computed (possibly in parallel), then
//! merged sequentially in chunk order. The result is bit-identical for any
//! worker count.

/// Chunk size for parallel batch reductions. Fixed so the summation order
/// never depends on the thread count.
pub const REDUCTION_CHUNK: usize = 4096;

/// Scalar Kahan accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let y = x - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Elementwise Kahan accumulator over a fixed-length buffer.
#[derive(Clone, Debug)]
pub struct KahanBuf {
    sum: Vec<f64>,
    c: Vec<f64>,
}

impl KahanBuf {
    pub fn new(len: usize) -> Self {
        Self {
            sum: vec![0.0; len],
            c: vec![0.0; len],
        }
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, x: f64) {
        let y = x - self.c[i];
        let t = self.sum[i] + y;
        self.c[i] = (t - self.sum[i]) - y;
        self.sum[i] = t;
    }

    /// Accumulate `coeff * xs` starting at offset `off`.
    #[inline]
    pub fn add_scaled(&mut self, off: usize, xs: &[f64], coeff: f64) {
        for (j, &x) in xs.iter().enumerate() {
            self.add_at(off + j, coeff * x);
        }
    }

    /// Fold another accumulator's running sum into this one, in order.
    pub fn merge(&mut self, other: &KahanBuf) {
        for i in 0..self.sum.len() {
            self.add_at(i, other.sum[i]);
        }
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.sum
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.sum
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahan_beats_naive_on_ill_conditioned_sum() {
        let mut k = Kahan::default();
        k.add(1e16);
        for _ in 0..10_000 {
            k.add(1.0);
        }
        k.add(-1e16);
        assert_eq!(k.value(), 10_000.0);
    }

    #[test]
    fn merge_matches_sequential() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let mut whole = KahanBuf::new(1);
        for &x in &xs {
            whole.add_at(0, x);
        }
        let mut parts = KahanBuf::new(1);
        for chunk in xs.chunks(128) {
            let mut p = KahanBuf::new(1);
            for &x in chunk {
                p.add_at(0, x);
            }
            parts.merge(&p);
        }
        assert!((whole.as_slice()[0] - parts.as_slice()[0]).abs() < 1e-12);
    }
}
