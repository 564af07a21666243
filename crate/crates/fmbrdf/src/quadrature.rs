//! Hemisphere quadrature: Gauss-Legendre in cos(theta) crossed with midpoint
//! nodes in phi, plus a seeded Monte-Carlo estimator used as a test oracle.
//!
//! Gauss-Legendre over cos(theta) makes cosine-weighted normalization
//! integrals near-exact, which is what the microfacet distribution and the
//! body-scattering integrand look like. Nodes and weights come from Newton
//! iteration on the Legendre polynomials; for the orders used here that is
//! accurate to machine precision.

use crate::geometry::Direction;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

/// Gauss-Legendre nodes and weights on [-1, 1].
///
/// Initial guesses are the Chebyshev-like asymptotic roots; three or four
/// Newton steps converge to machine precision for any order used here.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Evaluate P_n and P_n' by the three-term recurrence.
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 1 { x } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// One quadrature node: a direction on the upper hemisphere and its solid
/// angle weight.
#[derive(Debug, Clone, Copy)]
pub struct RuleNode {
    pub dir: Direction,
    pub weight: f64,
    pub theta: f64,
    pub phi: f64,
}

/// Product rule over the upper hemisphere about +Z.
#[derive(Debug, Clone)]
pub struct HemisphereRule {
    pub nodes: Vec<RuleNode>,
    pub n_theta: usize,
    pub n_phi: usize,
    /// Distinct polar angles, ascending, shared by all azimuth rings.
    pub thetas: Vec<f64>,
    /// Gauss-Legendre weight in cos(theta) for each ring.
    pub theta_weights: Vec<f64>,
}

impl HemisphereRule {
    pub fn build(n_theta: usize, n_phi: usize) -> HemisphereRule {
        assert!(n_theta >= 2 && n_phi >= 4, "rule too coarse");
        let (xs, ws) = gauss_legendre(n_theta);
        // Map [-1,1] to cos(theta) in [0,1]; GL nodes come out descending in
        // x, so sort ascending in theta.
        let mut rings: Vec<(f64, f64)> = xs
            .iter()
            .zip(&ws)
            .map(|(&x, &w)| {
                let cos_theta = 0.5 * (x + 1.0);
                (cos_theta.acos(), 0.5 * w)
            })
            .collect();
        rings.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let dphi = 2.0 * PI / n_phi as f64;
        let mut nodes = Vec::with_capacity(n_theta * n_phi);
        for &(theta, wt) in &rings {
            for j in 0..n_phi {
                let phi = (j as f64 + 0.5) * dphi;
                nodes.push(RuleNode {
                    dir: Direction::from_spherical(theta, phi),
                    weight: wt * dphi,
                    theta,
                    phi,
                });
            }
        }
        HemisphereRule {
            nodes,
            n_theta,
            n_phi,
            thetas: rings.iter().map(|r| r.0).collect(),
            theta_weights: rings.iter().map(|r| r.1 * 2.0 * PI).collect(),
        }
    }

    /// Weighted sum of `f` over the nodes.
    pub fn integrate<F: Fn(Direction) -> f64>(&self, f: F) -> Result<f64> {
        let mut acc = 0.0;
        for node in &self.nodes {
            let v = f(node.dir);
            if !v.is_finite() {
                return Err(Error::NonFiniteIntegrand);
            }
            acc += node.weight * v;
        }
        Ok(acc)
    }
}

/// Uniform-hemisphere Monte-Carlo estimate of an integral over solid angle.
/// Deterministic for a fixed seed; returns (mean, standard error).
pub fn mc_estimate<F: Fn(Direction) -> f64>(
    f: F,
    n_samples: usize,
    seed: u64,
) -> (f64, f64) {
    assert!(n_samples >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_samples {
        let cos_theta: f64 = rng.gen::<f64>();
        let phi = 2.0 * PI * rng.gen::<f64>();
        let d = Direction::from_spherical(cos_theta.acos(), phi);
        // Uniform hemisphere density is 1/(2π).
        let v = 2.0 * PI * f(d);
        sum += v;
        sum_sq += v * v;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) / n.max(2.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_low_orders_match_closed_forms() {
        let (x, w) = gauss_legendre(2);
        let r = 1.0 / 3.0_f64.sqrt();
        assert!((x[0].abs() - r).abs() < 1e-15 && (x[1].abs() - r).abs() < 1e-15);
        assert!((w[0] - 1.0).abs() < 1e-15 && (w[1] - 1.0).abs() < 1e-15);
        let (x, w) = gauss_legendre(3);
        assert!(x.iter().any(|v| v.abs() < 1e-15));
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
        let r = (3.0 / 5.0_f64).sqrt();
        assert!(x.iter().any(|v| (v - r).abs() < 1e-15));
    }

    #[test]
    fn rule_weight_sums() {
        let rule = HemisphereRule::build(8, 16);
        let total: f64 = rule.nodes.iter().map(|n| n.weight).sum();
        assert!((total - 2.0 * PI).abs() < 1e-9 * 2.0 * PI);
        let proj = rule.integrate(|d| d.z).unwrap();
        assert!((proj - PI).abs() < 1e-10 * PI);
    }

    #[test]
    fn integrate_is_linear() {
        let rule = HemisphereRule::build(8, 16);
        let f = |d: Direction| d.z * d.z;
        let g = |d: Direction| (3.0 * d.x).sin();
        let lhs = rule.integrate(|d| 2.5 * f(d) + 0.3 * g(d)).unwrap();
        let rhs = 2.5 * rule.integrate(f).unwrap() + 0.3 * rule.integrate(g).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn integrate_flags_non_finite() {
        let rule = HemisphereRule::build(4, 8);
        let err = rule.integrate(|d| 1.0 / (d.z - d.z));
        assert!(matches!(err, Err(Error::NonFiniteIntegrand)));
    }

    #[test]
    fn mc_constant_is_exact_and_seeded() {
        let (mean, stderr) = mc_estimate(|_| 1.0, 1000, 7);
        assert!((mean - 2.0 * PI).abs() < 1e-12);
        assert!(stderr < 1e-12);
        let a = mc_estimate(|d| d.z * d.x.abs(), 1000, 42);
        let b = mc_estimate(|d| d.z * d.x.abs(), 1000, 42);
        assert_eq!(a, b);
    }

    #[test]
    fn mc_matches_cosine_integral() {
        let (mean, stderr) = mc_estimate(|d| d.z, 200_000, 3);
        assert!((mean - PI).abs() < 3.0 * stderr);
    }

    #[test]
    fn quadrature_agrees_with_mc_on_smooth_integrands() {
        let rule = HemisphereRule::build(16, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a: f64 = rng.gen_range(0.5..3.0);
            let b: f64 = rng.gen_range(-2.0..2.0);
            let c: f64 = rng.gen_range(0.0..2.0);
            let f = move |d: Direction| (a * d.z + b * d.x * d.y).exp() * (1.0 + c * d.z * d.z);
            let exact = rule.integrate(f).unwrap();
            let (mc, stderr) = mc_estimate(f, 1_000_000, 99);
            assert!(
                (exact - mc).abs() < 3.0 * stderr.max(1e-9),
                "quadrature {exact} vs MC {mc} ± {stderr}"
            );
        }
    }

    #[test]
    fn refinement_converges_on_peaked_integrand() {
        // Surrogate for the body-scattering integrand: a forward-scattering
        // lobe times a transmittance-like smooth factor.
        let f = |d: Direction| (8.0 * (d.z - 1.0)).exp() * d.z + 0.1 * d.x.abs();
        let vals: Vec<f64> = [8usize, 16, 32, 64]
            .iter()
            .map(|&n| HemisphereRule::build(n, 2 * n).integrate(f).unwrap())
            .collect();
        let rel = |a: f64, b: f64| ((a - b) / b).abs();
        let e1 = rel(vals[0], vals[1]);
        let e2 = rel(vals[1], vals[2]);
        let e3 = rel(vals[2], vals[3]);
        assert!(e2 < e1 && e3 < e2, "refinement errors {e1} {e2} {e3}");
    }
}
