//! Gaussian-moment quantities of the sigmoid, the rho curvature curves,
//! condition-number quantities, theoretical radii, and empirical
//! Hessian-spectrum probes.

use crate::error::{RecoverError, Result};
use crate::model::{
    batch_hessian_cnn, batch_hessian_fcn, sigmoid, Dataset, FcnWeights, NetworkWeights,
    HESSIAN_DIM_CAP,
};
use crate::quadrature::{GaussHermite, DEFAULT_NODES};
use crate::rng::RngStream;

#[inline]
fn phi1(z: f64) -> f64 {
    let p = sigmoid(z);
    p * (1.0 - p)
}

/// Scaling convention for the FCN curvature moments. The source definition
/// both draws z from N(0, sigma^2) and writes phi'(sigma z); the two readings
/// disagree, so the adopted default keeps z standard normal with the argument
/// scaled once, which is the convention consistent with the gamma_j moments.
/// `Literal` applies both scalings as written.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MomentConvention {
    #[default]
    ArgScaled,
    Literal,
}

impl MomentConvention {
    /// Argument multiplier for the integrand given sigma, with z ~ N(0,1).
    fn arg(self, sigma: f64) -> f64 {
        match self {
            MomentConvention::ArgScaled => sigma,
            MomentConvention::Literal => sigma * sigma,
        }
    }

    /// Power-variable multiplier: z^q is taken in the distribution's own scale.
    fn var(self, sigma: f64) -> f64 {
        match self {
            MomentConvention::ArgScaled => 1.0,
            MomentConvention::Literal => sigma,
        }
    }
}

/// Quadrature values of the sigmoid moments at one sigma.
#[derive(Clone, Debug)]
pub struct ActivationMoments {
    pub sigma: f64,
    /// gamma_j = E[phi(sigma z) z^j], j = 0..4, z ~ N(0,1).
    pub gamma: [f64; 5],
    /// alpha_q = E[phi'(. ) z^q], q = 0..2.
    pub alpha: [f64; 3],
    /// beta_q = E[phi'(.)^2 z^q], q in {0, 2}.
    pub beta0: f64,
    pub beta2: f64,
    pub nodes: usize,
}

pub fn activation_moments(sigma: f64) -> Result<ActivationMoments> {
    activation_moments_with(sigma, DEFAULT_NODES, MomentConvention::default())
}

pub fn activation_moments_with(
    sigma: f64,
    nodes: usize,
    convention: MomentConvention,
) -> Result<ActivationMoments> {
    if !(sigma > 0.0) {
        return Err(RecoverError::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let q = if nodes == DEFAULT_NODES {
        std::borrow::Cow::Borrowed(crate::quadrature::default_rule())
    } else {
        std::borrow::Cow::Owned(GaussHermite::new(nodes))
    };
    let a = convention.arg(sigma);
    let s = convention.var(sigma);
    let mut gamma = [0.0; 5];
    for (j, g) in gamma.iter_mut().enumerate() {
        // gamma_j always uses the unit-variance convention of its definition
        *g = q.expect(|z| sigmoid(sigma * z) * z.powi(j as i32));
    }
    let mut alpha = [0.0; 3];
    for (qi, al) in alpha.iter_mut().enumerate() {
        *al = q.expect(|z| phi1(a * z) * (s * z).powi(qi as i32));
    }
    let beta0 = q.expect(|z| phi1(a * z).powi(2));
    let beta2 = q.expect(|z| phi1(a * z).powi(2) * (s * z).powi(2));
    Ok(ActivationMoments {
        sigma,
        gamma,
        alpha,
        beta0,
        beta2,
        nodes,
    })
}

/// gamma_1(sigma) = E[phi(sigma z) z], the magnitude-recovery moment.
pub fn gamma1(sigma: f64) -> f64 {
    crate::quadrature::default_rule().expect(|z| sigmoid(sigma * z) * z)
}

/// FCN curvature quantity: min{beta0 - alpha0^2, beta2 - alpha2^2} - alpha1^2.
pub fn rho_fcn(sigma: f64) -> Result<f64> {
    rho_fcn_with(sigma, DEFAULT_NODES, MomentConvention::default())
}

pub fn rho_fcn_with(sigma: f64, nodes: usize, convention: MomentConvention) -> Result<f64> {
    let m = activation_moments_with(sigma, nodes, convention)?;
    let t0 = m.beta0 - m.alpha[0] * m.alpha[0];
    let t2 = m.beta2 - m.alpha[2] * m.alpha[2];
    Ok(t0.min(t2) - m.alpha[1] * m.alpha[1])
}

/// CNN curvature quantity: min{E[(phi'(z) z)^2], E[phi'(z)^2]} with
/// z ~ N(0, sigma^2), taken literally.
pub fn rho_cnn(sigma: f64) -> Result<f64> {
    rho_cnn_with(sigma, DEFAULT_NODES)
}

pub fn rho_cnn_with(sigma: f64, nodes: usize) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(RecoverError::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let q = if nodes == DEFAULT_NODES {
        std::borrow::Cow::Borrowed(crate::quadrature::default_rule())
    } else {
        std::borrow::Cow::Owned(GaussHermite::new(nodes))
    };
    let a = q.expect(|u| {
        let z = sigma * u;
        (phi1(z) * z).powi(2)
    });
    let b = q.expect(|u| phi1(sigma * u).powi(2));
    Ok(a.min(b))
}

/// One row of the Fig.-style curvature table.
#[derive(Clone, Copy, Debug)]
pub struct RhoPoint {
    pub sigma: f64,
    pub rho_fcn: f64,
    pub rho_cnn: f64,
}

/// Evaluate both curves on a uniform grid.
pub fn rho_curve(sigma_min: f64, sigma_max: f64, steps: usize) -> Result<Vec<RhoPoint>> {
    if !(sigma_min > 0.0 && sigma_max > sigma_min) {
        return Err(RecoverError::InvalidArgument(
            "need 0 < sigma_min < sigma_max".into(),
        ));
    }
    if steps < 2 {
        return Err(RecoverError::InvalidArgument("steps must be >= 2".into()));
    }
    let mut out = Vec::with_capacity(steps);
    for i in 0..steps {
        let sigma = sigma_min + (sigma_max - sigma_min) * i as f64 / (steps - 1) as f64;
        out.push(RhoPoint {
            sigma,
            rho_fcn: rho_fcn(sigma)?,
            rho_cnn: rho_cnn(sigma)?,
        });
    }
    Ok(out)
}

/// Singular-value conditioning of the ground truth.
#[derive(Clone, Debug)]
pub struct Conditioning {
    pub singular_values: Vec<f64>,
    pub kappa: f64,
    pub lambda: f64,
}

pub fn conditioning(w: &FcnWeights) -> Result<Conditioning> {
    let svd = w.mat.clone().svd(false, false);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = w.neurons();
    let smallest = sv[k - 1];
    if smallest < 1e-12 {
        return Err(RecoverError::Degenerate(
            "weights are rank deficient".into(),
        ));
    }
    let kappa = sv[0] / smallest;
    let lambda = sv.iter().map(|s| s / smallest).product();
    Ok(Conditioning {
        singular_values: sv,
        kappa,
        lambda,
    })
}

/// Theoretical local-convexity radius with all unspecified constants set to 1.
///
/// FCN: r = (c2 / sqrt(K)) * rho_fcn(sigma_K) / (kappa^2 lambda).
/// CNN: r = (c4 / K^2) * rho_cnn(||w*||).
pub fn theoretical_radius(truth: &NetworkWeights, constant: f64) -> Result<f64> {
    match truth {
        NetworkWeights::Fcn(w) => {
            let cond = conditioning(w)?;
            let k = w.neurons() as f64;
            let rho = rho_fcn(*cond.singular_values.last().unwrap())?;
            Ok(constant / k.sqrt() * rho / (cond.kappa * cond.kappa * cond.lambda))
        }
        NetworkWeights::Cnn(w) => {
            let k = w.strides as f64;
            let rho = rho_cnn(w.filter.norm())?;
            Ok(constant / (k * k) * rho)
        }
    }
}

/// Spectrum of the batch Hessian at one probe point.
#[derive(Clone, Copy, Debug)]
pub struct ProbePoint {
    /// Frobenius distance from the ground truth.
    pub dist: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

/// Summary emitted by the Hessian-spectrum probe.
#[derive(Clone, Debug)]
pub struct GeometryReport {
    pub conditioning: Option<Conditioning>,
    pub rho: f64,
    pub radius: f64,
    pub probes: Vec<ProbePoint>,
}

impl GeometryReport {
    pub fn min_lambda_min(&self) -> f64 {
        self.probes
            .iter()
            .map(|p| p.lambda_min)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_lambda_max(&self) -> f64 {
        self.probes
            .iter()
            .map(|p| p.lambda_max)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn hessian_extremes(w: &NetworkWeights, data: &Dataset) -> Result<(f64, f64)> {
    let h = match w {
        NetworkWeights::Fcn(w) => batch_hessian_fcn(w, data)?,
        NetworkWeights::Cnn(w) => batch_hessian_cnn(w, data)?,
    };
    let eig = h.symmetric_eigen();
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let max = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((min, max))
}

fn perturbed(truth: &NetworkWeights, dir: &[f64], radius: f64) -> NetworkWeights {
    let mut w = truth.clone();
    match &mut w {
        NetworkWeights::Fcn(f) => {
            for (v, &u) in f.mat.iter_mut().zip(dir) {
                *v += radius * u;
            }
        }
        NetworkWeights::Cnn(c) => {
            for (v, &u) in c.filter.iter_mut().zip(dir) {
                *v += radius * u;
            }
        }
    }
    w
}

/// Evaluate min/max Hessian eigenvalues at the ground truth and at `points`
/// uniform-in-volume draws from the Frobenius ball of radius `radius`.
pub fn hessian_spectrum_probe(
    data: &Dataset,
    truth: &NetworkWeights,
    radius: f64,
    points: usize,
    stream: &mut RngStream,
) -> Result<GeometryReport> {
    if points < 1 {
        return Err(RecoverError::InvalidArgument("points must be >= 1".into()));
    }
    let plen = truth.to_flat().len();
    if plen > HESSIAN_DIM_CAP {
        return Err(RecoverError::HessianSizeCap {
            cap: HESSIAN_DIM_CAP,
            requested: plen,
        });
    }
    let (cond, rho) = match truth {
        NetworkWeights::Fcn(w) => {
            let c = conditioning(w)?;
            let rho = rho_fcn(*c.singular_values.last().unwrap())?;
            (Some(c), rho)
        }
        NetworkWeights::Cnn(w) => (None, rho_cnn(w.filter.norm())?),
    };
    let mut probes = Vec::with_capacity(points);
    let (min0, max0) = hessian_extremes(truth, data)?;
    probes.push(ProbePoint {
        dist: 0.0,
        lambda_min: min0,
        lambda_max: max0,
    });
    for _ in 1..points {
        let dir = stream.unit_vector(plen);
        let r = radius * stream.uniform().powf(1.0 / plen as f64);
        let w = perturbed(truth, &dir, r);
        let (lmin, lmax) = hessian_extremes(&w, data)?;
        probes.push(ProbePoint {
            dist: r,
            lambda_min: lmin,
            lambda_max: lmax,
        });
    }
    Ok(GeometryReport {
        conditioning: cond,
        rho,
        radius,
        probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    #[test]
    fn sigmoid_symmetry_identities() {
        for &sigma in &[0.1, 1.0, 2.0] {
            let m = activation_moments(sigma).unwrap();
            assert_abs_diff_eq!(m.gamma[0], 0.5, epsilon = 1e-10);
            assert_abs_diff_eq!(m.gamma[2], 0.5, epsilon = 1e-10);
            assert_abs_diff_eq!(m.gamma[4], 1.5, epsilon = 1e-10);
            assert_abs_diff_eq!(m.alpha[1], 0.0, epsilon = 1e-10);
            // m_2 = gamma_2 - gamma_0 and m_4 = gamma_4 + 3 gamma_0 - 6 gamma_2
            assert_abs_diff_eq!(m.gamma[2] - m.gamma[0], 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(
                m.gamma[4] + 3.0 * m.gamma[0] - 6.0 * m.gamma[2],
                0.0,
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn gamma1_positive_and_increasing() {
        let mut prev = 0.0;
        for i in 1..=20 {
            let sigma = 0.1 * i as f64;
            let g = gamma1(sigma);
            assert!(g > prev, "gamma1 not increasing at sigma={sigma}");
            prev = g;
        }
        // Stein identity: gamma_1(sigma) = sigma E[phi'(sigma z)]
        let m = activation_moments(0.8).unwrap();
        assert_abs_diff_eq!(gamma1(0.8), 0.8 * m.alpha[0], epsilon = 1e-10);
    }

    #[test]
    fn rho_positive_and_cnn_dominates() {
        for p in rho_curve(0.05, 2.0, 40).unwrap() {
            assert!(p.rho_fcn > 0.0, "rho_fcn <= 0 at sigma={}", p.sigma);
            assert!(p.rho_cnn > 0.0, "rho_cnn <= 0 at sigma={}", p.sigma);
            assert!(
                p.rho_cnn > p.rho_fcn,
                "ordering fails at sigma={}",
                p.sigma
            );
        }
    }

    #[test]
    fn rho_cnn_small_sigma_limit() {
        // E[phi'(z)^2] -> 1/16 as sigma -> 0
        let q = GaussHermite::new(DEFAULT_NODES);
        let v = q.expect(|u| phi1(1e-4 * u).powi(2));
        assert_abs_diff_eq!(v, 1.0 / 16.0, epsilon = 1e-6);
    }

    #[test]
    fn quadrature_matches_monte_carlo() {
        let sigma = 1.0;
        let m = activation_moments(sigma).unwrap();
        let mut rng = crate::rng::RngStream::new(2, crate::rng::StreamId::new("mc", 0));
        let n = 1_000_000;
        let mut s_g1 = 0.0;
        let mut s_b0 = 0.0;
        let mut sq_g1 = 0.0;
        let mut sq_b0 = 0.0;
        for _ in 0..n {
            let z = rng.normal();
            let g1 = sigmoid(sigma * z) * z;
            let b0 = phi1(sigma * z).powi(2);
            s_g1 += g1;
            sq_g1 += g1 * g1;
            s_b0 += b0;
            sq_b0 += b0 * b0;
        }
        let nf = n as f64;
        let check = |mean_mc: f64, var_sum: f64, exact: f64| {
            let mean = mean_mc / nf;
            let var = var_sum / nf - mean * mean;
            let se = (var / nf).sqrt();
            assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact}");
        };
        check(s_g1, sq_g1, m.gamma[1]);
        check(s_b0, sq_b0, m.beta0);
    }

    #[test]
    fn node_refinement_is_stable() {
        for &sigma in &[0.05, 0.7, 2.0] {
            let a = activation_moments_with(sigma, DEFAULT_NODES, MomentConvention::ArgScaled).unwrap();
            let b = activation_moments_with(sigma, 2 * DEFAULT_NODES - 1, MomentConvention::ArgScaled).unwrap();
            for j in 0..5 {
                assert_abs_diff_eq!(a.gamma[j], b.gamma[j], epsilon = 1e-12);
            }
            for q in 0..3 {
                assert_abs_diff_eq!(a.alpha[q], b.alpha[q], epsilon = 1e-12);
            }
            assert_abs_diff_eq!(a.beta0, b.beta0, epsilon = 1e-12);
            assert_abs_diff_eq!(a.beta2, b.beta2, epsilon = 1e-12);
            assert_abs_diff_eq!(
                rho_cnn_with(sigma, DEFAULT_NODES).unwrap(),
                rho_cnn_with(sigma, 2 * DEFAULT_NODES - 1).unwrap(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn conditioning_of_orthonormal_columns() {
        let mat = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let c = conditioning(&FcnWeights::new(mat)).unwrap();
        assert_abs_diff_eq!(c.kappa, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.lambda, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn singular_values_match_gram_eigendecomposition() {
        let mut rng = crate::rng::RngStream::new(4, crate::rng::StreamId::new("svd", 0));
        let (d, k) = (6, 3);
        let mut buf = vec![0.0; d * k];
        rng.fill_normal(&mut buf);
        let w = FcnWeights::new(DMatrix::from_column_slice(d, k, &buf));
        let c = conditioning(&w).unwrap();
        let gram = w.mat.transpose() * &w.mat;
        let mut eig: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (s, e) in c.singular_values.iter().zip(&eig) {
            assert_abs_diff_eq!(s * s, *e, epsilon = 1e-10);
        }
    }

    #[test]
    fn rank_deficient_rejected() {
        let mat = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        assert!(conditioning(&FcnWeights::new(mat)).is_err());
    }

    #[test]
    fn rho_curve_endpoints() {
        let pts = rho_curve(0.5, 1.5, 2).unwrap();
        assert_eq!(pts.len(), 2);
        assert_abs_diff_eq!(pts[0].sigma, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(pts[1].sigma, 1.5, epsilon = 1e-15);
    }

    #[test]
    fn probe_at_truth_only() {
        use crate::datagen::{make_ground_truth, sample_dataset, GroundTruthSpec, ModelKind};
        let truth = make_ground_truth(&GroundTruthSpec {
            kind: ModelKind::Fcn,
            d: 6,
            k: 2,
            scale: 0.9,
            seed: 3,
        })
        .unwrap();
        let mut stream = crate::rng::RngStream::new(3, crate::rng::StreamId::new("probe", 0));
        let data = sample_dataset(&truth, 2000, &mut stream).unwrap();
        let report = hessian_spectrum_probe(&data, &truth, 0.0, 1, &mut stream).unwrap();
        assert_eq!(report.probes.len(), 1);
        assert_eq!(report.probes[0].dist, 0.0);
        assert!(report.probes[0].lambda_min <= report.probes[0].lambda_max);
    }
}
