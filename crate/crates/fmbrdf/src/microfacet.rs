//! Microgeometry statistics: the generalized normal facet distribution,
//! numerically derived Smith masking, and the von Mises-Fisher microfacet
//! correlation function.
//!
//! The facet distribution D(theta) = C exp(-(theta/alpha)^beta) has no closed
//! forms for its normalization constant, its Smith masking integral, or the
//! correlation normalization, so all three are built numerically at
//! construction time and cached in small tables. Construction cost is a few
//! hundred milliseconds for the Smith table and microseconds for the rest;
//! evaluation afterwards is a table lookup.

use crate::geometry::Direction;
use crate::quadrature::{gauss_legendre, HemisphereRule};
use crate::{Error, Result};
use std::f64::consts::{FRAC_PI_2, PI};
use std::io::{Read as _, Write as _};
use std::path::Path;

/// Below this roughness the distribution is treated as a mirror delta; the
/// normalization integral underflows long before this.
pub const DELTA_ALPHA: f64 = 1e-4;

/// Generalized normal distribution of facet normals, normalized so that
/// its cosine-weighted integral over the hemisphere is one.
#[derive(Debug, Clone, Copy)]
pub struct Ndf {
    pub alpha: f64,
    pub beta: f64,
    pub norm_c: f64,
}

impl Ndf {
    pub fn new(alpha: f64, beta: f64) -> Ndf {
        assert!(alpha > 0.0 && beta > 0.0, "roughness parameters must be positive");
        if alpha <= DELTA_ALPHA {
            return Ndf { alpha, beta, norm_c: f64::INFINITY };
        }
        let integral = integrate_panels(
            |theta| (-(theta / alpha).powf(beta)).exp() * theta.cos() * theta.sin(),
            FRAC_PI_2,
        );
        Ndf {
            alpha,
            beta,
            norm_c: 1.0 / (2.0 * PI * integral),
        }
    }

    /// Facet density per steradian at polar angle `theta_h` from the
    /// macroscopic normal; zero at and beyond the horizon.
    pub fn eval(&self, theta_h: f64) -> f64 {
        if theta_h >= FRAC_PI_2 {
            return 0.0;
        }
        self.norm_c * (-(theta_h / self.alpha).powf(self.beta)).exp()
    }

    /// Unnormalized profile exp(-(theta/alpha)^beta).
    pub fn profile(&self, theta_h: f64) -> f64 {
        if theta_h >= FRAC_PI_2 {
            return 0.0;
        }
        (-(theta_h / self.alpha).powf(self.beta)).exp()
    }

    /// True when the distribution is too narrow to integrate and the surface
    /// must be treated as an ideal mirror.
    pub fn is_delta(&self) -> bool {
        self.alpha <= DELTA_ALPHA
    }
}

/// Integrates f over [0, upper] with Gauss-Legendre panels refined
/// geometrically toward zero, where the integrand may have a cusp.
fn integrate_panels<F: Fn(f64) -> f64>(f: F, upper: f64) -> f64 {
    let (xs, ws) = gauss_legendre(16);
    let mut total = 0.0;
    let mut hi = upper;
    for _ in 0..48 {
        let lo = hi * 0.5;
        let (c, h) = (0.5 * (hi + lo), 0.5 * (hi - lo));
        for (&x, &w) in xs.iter().zip(&ws) {
            total += w * h * f(c + h * x);
        }
        hi = lo;
    }
    total
}

/// Tabulated Smith masking term Lambda(theta_v) for one facet distribution.
///
/// Stored as a(theta_v) = Lambda * cot(theta_v), which stays bounded and
/// smooth all the way to grazing, so the cubic interpolation does not fight
/// the tan(theta_v) blowup.
#[derive(Debug, Clone)]
pub struct SmithTable {
    pub alpha: f64,
    pub beta: f64,
    /// a(theta_v) on a uniform grid over [0, pi/2], inclusive.
    pub a: Vec<f64>,
}

pub const SMITH_TABLE_NODES: usize = 257;

impl SmithTable {
    pub fn build(ndf: &Ndf) -> SmithTable {
        SmithTable::build_with_nodes(ndf, SMITH_TABLE_NODES)
    }

    /// All-zero table (Lambda identically zero), for callers that account
    /// for masking separately.
    pub fn flat(ndf: &Ndf) -> SmithTable {
        SmithTable {
            alpha: ndf.alpha,
            beta: ndf.beta,
            a: vec![0.0; 16],
        }
    }

    pub fn build_with_nodes(ndf: &Ndf, nodes: usize) -> SmithTable {
        assert!(nodes >= 16);
        if ndf.is_delta() {
            return SmithTable {
                alpha: ndf.alpha,
                beta: ndf.beta,
                a: vec![0.0; nodes],
            };
        }
        let (xs, ws) = gauss_legendre(96);
        // Slope-space density marginal along the view azimuth:
        // P2m(p) = 2 * int_0^inf D(atan r) / (1 + p^2 + q^2)^2 dq, q = tan u.
        let marginal = |p: f64| -> f64 {
            let mut acc = 0.0;
            for (&x, &w) in xs.iter().zip(&ws) {
                let u = FRAC_PI_2 * 0.5 * (x + 1.0);
                let (su, cu) = u.sin_cos();
                let q = su / cu;
                let r2 = p * p + q * q;
                let d = ndf.eval(r2.sqrt().atan());
                acc += w * d / ((1.0 + r2) * (1.0 + r2)) / (cu * cu);
            }
            2.0 * acc * FRAC_PI_2 * 0.5
        };
        // a(mu) = integral over p in [mu, inf) of (p - mu) P2m(p) dp,
        // p = mu + tan s. Lambda = a / mu.
        let a_of_mu = |mu: f64| -> f64 {
            let mut acc = 0.0;
            for (&x, &w) in xs.iter().zip(&ws) {
                let s = FRAC_PI_2 * 0.5 * (x + 1.0);
                let (ss, cs) = s.sin_cos();
                let t = ss / cs;
                acc += w * t * marginal(mu + t) / (cs * cs);
            }
            acc * FRAC_PI_2 * 0.5
        };
        let a = (0..nodes)
            .map(|i| {
                let theta_v = FRAC_PI_2 * i as f64 / (nodes - 1) as f64;
                if i == 0 {
                    0.0
                } else {
                    a_of_mu(1.0 / theta_v.tan())
                }
            })
            .collect();
        SmithTable {
            alpha: ndf.alpha,
            beta: ndf.beta,
            a,
        }
    }

    /// Smith Lambda at view angle `theta_v` from the macroscopic normal.
    pub fn lambda(&self, theta_v: f64) -> Result<f64> {
        if !(0.0..FRAC_PI_2).contains(&theta_v) {
            return Err(Error::GrazingMaskingUndefined);
        }
        let a = catmull_rom_uniform(&self.a, theta_v / FRAC_PI_2);
        Ok((a * theta_v.tan()).max(0.0))
    }

    /// Directional masking factor G1 for direction `v` against facet normal
    /// `facet_n`, on a surface with macroscopic normal `n_macro`.
    pub fn g1(&self, v: Direction, n_macro: Direction, facet_n: Direction) -> Result<f64> {
        if v.dot(facet_n) <= 0.0 {
            return Ok(0.0);
        }
        let theta_v = n_macro.angle_to(v);
        Ok(1.0 / (1.0 + self.lambda(theta_v)?))
    }

    /// Separable masking-shadowing G(H) = G1(L) * G1(V).
    pub fn masking_shadowing(
        &self,
        l: Direction,
        v: Direction,
        n_macro: Direction,
        h: Direction,
    ) -> Result<f64> {
        Ok(self.g1(l, n_macro, h)? * self.g1(v, n_macro, h)?)
    }
}

/// Catmull-Rom interpolation on a uniform grid over [0, 1] with clamped ends.
fn catmull_rom_uniform(values: &[f64], t: f64) -> f64 {
    let n = values.len();
    let x = t.clamp(0.0, 1.0) * (n - 1) as f64;
    let i = (x.floor() as usize).min(n - 2);
    let f = x - i as f64;
    let get = |j: isize| values[j.clamp(0, n as isize - 1) as usize];
    let (p0, p1, p2, p3) = (get(i as isize - 1), get(i as isize), get(i as isize + 1), get(i as isize + 2));
    let m1 = 0.5 * (p2 - p0);
    let m2 = 0.5 * (p3 - p1);
    let f2 = f * f;
    let f3 = f2 * f;
    p1 * (2.0 * f3 - 3.0 * f2 + 1.0)
        + m1 * (f3 - 2.0 * f2 + f)
        + p2 * (-2.0 * f3 + 3.0 * f2)
        + m2 * (f3 - f2)
}

/// Spatial correlation of facet orientations: a von Mises-Fisher kernel in
/// the facet normals, scaled so that its D-weighted marginal over either
/// argument is one on the hemisphere rule it was built for.
///
/// The scaling is the symmetric fixed point u(t) u(ti) exp(kappa n.ni); a
/// one-sided factor would satisfy the marginal in one argument but make the
/// body reflection non-reciprocal, which shows up immediately at the BRDF
/// level. Everything is kept in the overflow-safe form exp(kappa (n.ni - 1)).
#[derive(Debug, Clone)]
pub struct CorrelationFn {
    pub kappa: f64,
    /// Polar angles of the rule's rings, ascending.
    pub thetas: Vec<f64>,
    /// Scale factor u at each ring, satisfying the marginal condition.
    pub u: Vec<f64>,
}

impl CorrelationFn {
    pub fn build(ndf: &Ndf, kappa: f64, rule: &HemisphereRule) -> CorrelationFn {
        assert!(kappa >= 0.0, "concentration must be nonnegative");
        let a = marginal_matrix(ndf, kappa, rule);
        let m = rule.thetas.len();
        // Solve u_i * sum_j a[i][j] u_j = 1 by damped multiplicative
        // iteration; a is strictly positive so the fixed point is unique.
        let mut u = vec![0.0; m];
        for i in 0..m {
            let row: f64 = a[i].iter().sum();
            u[i] = 1.0 / row.sqrt();
        }
        for _ in 0..20_000 {
            let mut worst: f64 = 0.0;
            let av: Vec<f64> = (0..m)
                .map(|i| a[i].iter().zip(&u).map(|(aij, uj)| aij * uj).sum())
                .collect();
            for i in 0..m {
                let r = u[i] * av[i];
                worst = worst.max((r - 1.0).abs());
                u[i] /= r.sqrt();
            }
            if worst < 1e-14 {
                break;
            }
        }
        CorrelationFn {
            kappa,
            thetas: rule.thetas.clone(),
            u,
        }
    }

    /// Scale factor u at an arbitrary polar angle, interpolated between the
    /// rings and extrapolated linearly past the first and last ring.
    pub fn u_at(&self, theta: f64) -> f64 {
        let ts = &self.thetas;
        let n = ts.len();
        if theta <= ts[0] {
            let slope = (self.u[1] - self.u[0]) / (ts[1] - ts[0]);
            return self.u[0] + slope * (theta - ts[0]);
        }
        if theta >= ts[n - 1] {
            let slope = (self.u[n - 1] - self.u[n - 2]) / (ts[n - 1] - ts[n - 2]);
            return self.u[n - 1] + slope * (theta - ts[n - 1]);
        }
        let i = ts.partition_point(|&t| t < theta).max(1) - 1;
        hermite_nonuniform(ts, &self.u, i, theta)
    }

    /// Correlation density f(n, ni).
    pub fn eval(&self, n: Direction, ni: Direction) -> f64 {
        let (tn, _) = n.to_spherical();
        let (ti, _) = ni.to_spherical();
        self.u_at(tn) * self.u_at(ti) * (self.kappa * (n.dot(ni) - 1.0)).exp()
    }

    /// Residual of the marginal condition at every ring: u_i (A u)_i - 1.
    pub fn marginal_residuals(&self, ndf: &Ndf, rule: &HemisphereRule) -> Vec<f64> {
        let a = marginal_matrix(ndf, self.kappa, rule);
        (0..self.u.len())
            .map(|i| {
                let s: f64 = a[i].iter().zip(&self.u).map(|(aij, uj)| aij * uj).sum();
                self.u[i] * s - 1.0
            })
            .collect()
    }
}

/// Ring-collapsed kernel matrix: entry (i, j) is the quadrature mass of
/// exp(kappa (n.ni - 1)) D(theta_n) over ring j, with ni anywhere on ring i.
/// Azimuthal symmetry of the product rule makes the choice of ni's azimuth
/// irrelevant, so the whole double integral reduces to ring pairs.
fn marginal_matrix(ndf: &Ndf, kappa: f64, rule: &HemisphereRule) -> Vec<Vec<f64>> {
    let m = rule.thetas.len();
    let n_phi = rule.n_phi;
    let dphi = 2.0 * PI / n_phi as f64;
    let cos_dphi: Vec<f64> = (0..n_phi).map(|k| (k as f64 * dphi).cos()).collect();
    let sc: Vec<(f64, f64)> = rule.thetas.iter().map(|&t| t.sin_cos()).collect();
    (0..m)
        .map(|i| {
            (0..m)
                .map(|j| {
                    let (si, ci) = sc[i];
                    let (sj, cj) = sc[j];
                    let ring: f64 = cos_dphi
                        .iter()
                        .map(|&c| (kappa * (ci * cj + si * sj * c - 1.0)).exp())
                        .sum();
                    rule.theta_weights[j] * ndf.eval(rule.thetas[j]) * ring / n_phi as f64
                })
                .collect()
        })
        .collect()
}

/// Piecewise cubic Hermite interpolation with finite-difference slopes on a
/// nonuniform grid; `i` indexes the left knot of the containing interval.
fn hermite_nonuniform(xs: &[f64], ys: &[f64], i: usize, x: f64) -> f64 {
    let n = xs.len();
    let h = xs[i + 1] - xs[i];
    let slope = |k: usize| -> f64 {
        if k == 0 {
            (ys[1] - ys[0]) / (xs[1] - xs[0])
        } else if k == n - 1 {
            (ys[n - 1] - ys[n - 2]) / (xs[n - 1] - xs[n - 2])
        } else {
            (ys[k + 1] - ys[k - 1]) / (xs[k + 1] - xs[k - 1])
        }
    };
    let (m0, m1) = (slope(i), slope(i + 1));
    let t = (x - xs[i]) / h;
    let t2 = t * t;
    let t3 = t2 * t;
    ys[i] * (2.0 * t3 - 3.0 * t2 + 1.0)
        + m0 * h * (t3 - 2.0 * t2 + t)
        + ys[i + 1] * (-2.0 * t3 + 3.0 * t2)
        + m1 * h * (t3 - t2)
}

impl SmithTable {
    /// Like `build`, but consults the binary cache directory first and
    /// stores the freshly built table there on a miss.
    pub fn build_cached(ndf: &Ndf, cache_dir: Option<&Path>) -> SmithTable {
        let res = SMITH_TABLE_NODES as u32;
        let key = (0u8, ndf.alpha, ndf.beta, 0.0, res);
        if let Some(dir) = cache_dir {
            let path = dir.join(cache_file_name("smith", key));
            if let Some(a) = load_table_cache(&path, key.0, key.1, key.2, key.3, key.4) {
                return SmithTable { alpha: ndf.alpha, beta: ndf.beta, a };
            }
            let table = SmithTable::build(ndf);
            let _ = std::fs::create_dir_all(dir);
            let _ = save_table_cache(&path, key.0, key.1, key.2, key.3, key.4, &table.a);
            return table;
        }
        SmithTable::build(ndf)
    }
}

impl CorrelationFn {
    /// Like `build`, but consults the binary cache directory first. The
    /// cached grid is the scale factors on the rule's rings, so the key
    /// includes both rule resolutions.
    pub fn build_cached(
        ndf: &Ndf,
        kappa: f64,
        rule: &HemisphereRule,
        cache_dir: Option<&Path>,
    ) -> CorrelationFn {
        let res = ((rule.n_theta as u32) << 16) | rule.n_phi as u32;
        let key = (1u8, ndf.alpha, ndf.beta, kappa, res);
        if let Some(dir) = cache_dir {
            let path = dir.join(cache_file_name("corr", key));
            if let Some(u) = load_table_cache(&path, key.0, key.1, key.2, key.3, key.4) {
                if u.len() == rule.thetas.len() {
                    return CorrelationFn {
                        kappa,
                        thetas: rule.thetas.clone(),
                        u,
                    };
                }
            }
            let corr = CorrelationFn::build(ndf, kappa, rule);
            let _ = std::fs::create_dir_all(dir);
            let _ = save_table_cache(&path, key.0, key.1, key.2, key.3, key.4, &corr.u);
            return corr;
        }
        CorrelationFn::build(ndf, kappa, rule)
    }
}

fn cache_file_name(prefix: &str, key: (u8, f64, f64, f64, u32)) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update([key.0]);
    hasher.update(key.1.to_le_bytes());
    hasher.update(key.2.to_le_bytes());
    hasher.update(key.3.to_le_bytes());
    hasher.update(key.4.to_le_bytes());
    let digest = hasher.finalize();
    let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    format!("{prefix}_{hex}.bin")
}

const CACHE_MAGIC: &[u8; 4] = b"FMTB";
const CACHE_VERSION: u32 = 1;

/// Writes a table grid to the binary cache: versioned header followed by the
/// raw little-endian f64 grid.
pub fn save_table_cache(
    path: &Path,
    kind: u8,
    alpha: f64,
    beta: f64,
    kappa: f64,
    resolution: u32,
    grid: &[f64],
) -> Result<()> {
    let mut buf = Vec::with_capacity(41 + grid.len() * 8);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.push(kind);
    for v in [alpha, beta, kappa] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&resolution.to_le_bytes());
    buf.extend_from_slice(&(grid.len() as u32).to_le_bytes());
    for v in grid {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Reads a table grid back; returns None when the file is absent or its
/// header does not match the requested key exactly.
pub fn load_table_cache(
    path: &Path,
    kind: u8,
    alpha: f64,
    beta: f64,
    kappa: f64,
    resolution: u32,
) -> Option<Vec<f64>> {
    let mut buf = Vec::new();
    std::fs::File::open(path).ok()?.read_to_end(&mut buf).ok()?;
    if buf.len() < 41 || &buf[0..4] != CACHE_MAGIC {
        return None;
    }
    let rd_u32 = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    let rd_f64 = |o: usize| f64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
    if rd_u32(4) != CACHE_VERSION || buf[8] != kind {
        return None;
    }
    if rd_f64(9) != alpha || rd_f64(17) != beta || rd_f64(25) != kappa || rd_u32(33) != resolution {
        return None;
    }
    let len = rd_u32(37) as usize;
    if buf.len() != 41 + len * 8 {
        return None;
    }
    Some((0..len).map(|i| rd_f64(41 + i * 8)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent trapezoid integration of the cosine-weighted profile,
    /// dense enough to resolve the cusp at zero for beta < 1.
    fn norm_integral_oracle(alpha: f64, beta: f64) -> f64 {
        let n = 4_000_000;
        let h = FRAC_PI_2 / n as f64;
        let f = |theta: f64| (-(theta / alpha).powf(beta)).exp() * theta.cos() * theta.sin();
        let mut acc = 0.5 * (f(0.0) + f(FRAC_PI_2));
        for i in 1..n {
            acc += f(i as f64 * h);
        }
        2.0 * PI * acc * h
    }

    #[test]
    fn norm_constant_matches_oracle() {
        let ndf = Ndf::new(0.3, 2.0);
        let oracle = 1.0 / norm_integral_oracle(0.3, 2.0);
        assert!(
            ((ndf.norm_c - oracle) / oracle).abs() < 1e-9,
            "normC {} vs oracle {}",
            ndf.norm_c,
            oracle
        );
    }

    #[test]
    fn cosine_weighted_mass_is_one_across_parameter_grid() {
        for &alpha in &[0.05, 0.3, 1.2] {
            for &beta in &[0.6, 1.0, 2.0, 4.0] {
                let ndf = Ndf::new(alpha, beta);
                let mass = ndf.norm_c * norm_integral_oracle(alpha, beta);
                assert!(
                    (mass - 1.0).abs() < 1e-6,
                    "mass {mass} at alpha={alpha} beta={beta}"
                );
            }
        }
    }

    #[test]
    fn gaussian_shape_at_beta_two() {
        let ndf = Ndf::new(0.4, 2.0);
        for &theta in &[0.1, 0.3, 0.7] {
            let ratio = ndf.eval(theta) / ndf.eval(0.0);
            assert!((ratio - (-(theta / 0.4_f64).powi(2)).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn ndf_peak_and_decay() {
        let ndf = Ndf::new(0.3, 1.5);
        assert_eq!(ndf.eval(0.0), ndf.norm_c);
        let mut prev = ndf.eval(0.0);
        for i in 1..=90 {
            let v = ndf.eval(i as f64 * FRAC_PI_2 / 90.0);
            assert!(v <= prev);
            prev = v;
        }
        assert_eq!(ndf.eval(FRAC_PI_2), 0.0);
    }

    #[test]
    fn smith_lambda_boundaries() {
        let ndf = Ndf::new(0.4, 2.0);
        let table = SmithTable::build(&ndf);
        assert_eq!(table.lambda(0.0).unwrap(), 0.0);
        assert!(matches!(
            table.lambda(FRAC_PI_2),
            Err(Error::GrazingMaskingUndefined)
        ));
        // Near-mirror roughness masks nothing away from grazing.
        let smooth = SmithTable::build(&Ndf::new(0.01, 2.0));
        assert!(smooth.lambda(80f64.to_radians()).unwrap() < 1e-6);
    }

    #[test]
    fn smith_lambda_monotone() {
        for &(alpha, beta) in &[(0.2, 2.0), (0.6, 1.0), (0.9, 3.0)] {
            let table = SmithTable::build(&Ndf::new(alpha, beta));
            let mut prev = -1.0;
            for i in 0..200 {
                let theta = FRAC_PI_2 * 0.999 * i as f64 / 199.0;
                let l = table.lambda(theta).unwrap();
                assert!(l >= prev - 1e-12, "lambda not monotone at {theta}");
                prev = l;
            }
        }
    }

    /// Monte-Carlo oracle for Lambda: sample facet angles from the
    /// area-weighted density D(theta) cos(theta) sin(theta), uniform azimuth,
    /// and average the masking excess of the slope along the view azimuth.
    fn lambda_mc(ndf: &Ndf, theta_v: f64, n: usize, seed: u64) -> f64 {
        let grid = 8192;
        let mut cdf = vec![0.0; grid + 1];
        for i in 0..grid {
            let t = FRAC_PI_2 * (i as f64 + 0.5) / grid as f64;
            cdf[i + 1] = cdf[i] + ndf.eval(t) * t.cos() * t.sin();
        }
        let total = cdf[grid];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu = 1.0 / theta_v.tan();
        let mut acc = 0.0;
        for _ in 0..n {
            let target = rng.gen::<f64>() * total;
            let k = cdf.partition_point(|&c| c < target).max(1) - 1;
            let frac = (target - cdf[k]) / (cdf[k + 1] - cdf[k]).max(1e-300);
            let theta = FRAC_PI_2 * (k as f64 + frac) / grid as f64;
            let phi = 2.0 * PI * rng.gen::<f64>();
            let p = theta.tan() * phi.cos();
            acc += (p - mu).max(0.0);
        }
        acc / n as f64 / mu
    }

    #[test]
    fn smith_lambda_matches_monte_carlo() {
        let ndf = Ndf::new(0.4, 2.0);
        let table = SmithTable::build(&ndf);
        let theta_v = 70f64.to_radians();
        let exact = table.lambda(theta_v).unwrap();
        let mc = lambda_mc(&ndf, theta_v, 2_000_000, 17);
        assert!(
            ((exact - mc) / mc).abs() < 0.02,
            "lambda {exact} vs MC {mc}"
        );
    }

    #[test]
    fn g1_clamps_and_bounds() {
        let ndf = Ndf::new(0.4, 2.0);
        let table = SmithTable::build(&ndf);
        let n = Direction::new(0.0, 0.0, 1.0);
        assert_eq!(table.g1(n, n, n).unwrap(), 1.0);
        let v = Direction::from_spherical(0.4, 0.0);
        let back = Direction::from_spherical(2.6, PI);
        assert_eq!(table.g1(v, n, back).unwrap(), 0.0);
        let l = Direction::from_spherical(1.1, 2.0);
        let h = crate::geometry::halfway(l, v).unwrap();
        let g = table.masking_shadowing(l, v, n, h).unwrap();
        let g1l = table.g1(l, n, h).unwrap();
        let g1v = table.g1(v, n, h).unwrap();
        assert!(g <= g1l.min(g1v) + 1e-15);
        assert!((0.0..=1.0).contains(&g));
    }

    #[test]
    fn g1_nonincreasing_in_view_angle() {
        let table = SmithTable::build(&Ndf::new(0.5, 1.2));
        let n = Direction::new(0.0, 0.0, 1.0);
        let mut prev = 2.0;
        for i in 0..90 {
            let v = Direction::from_spherical(i as f64 * FRAC_PI_2 * 0.99 / 89.0, 0.3);
            let g = table.g1(v, n, n).unwrap();
            assert!(g <= prev + 1e-12);
            prev = g;
        }
    }

    #[test]
    fn correlation_uniform_at_zero_concentration() {
        let rule = HemisphereRule::build(32, 64);
        let ndf = Ndf::new(0.3, 2.0);
        let corr = CorrelationFn::build(&ndf, 0.0, &rule);
        // With no concentration the density is the constant 1 / (D mass).
        let mass = rule.integrate(|d| ndf.eval(d.to_spherical().0)).unwrap();
        let n = Direction::from_spherical(0.3, 1.0);
        let ni = Direction::from_spherical(1.2, 4.0);
        assert!((corr.eval(n, ni) - 1.0 / mass).abs() < 1e-6 / mass);
        // And it is the same constant everywhere.
        let other = corr.eval(Direction::from_spherical(0.9, 0.2), ni);
        assert!((corr.eval(n, ni) - other).abs() < 1e-9 / mass);
    }

    #[test]
    fn correlation_marginals_hold_across_concentrations() {
        let rule = HemisphereRule::build(16, 32);
        let ndf = Ndf::new(0.3, 2.0);
        for &kappa in &[0.0, 1.0, 10.0, 50.0] {
            let corr = CorrelationFn::build(&ndf, kappa, &rule);
            let worst = corr
                .marginal_residuals(&ndf, &rule)
                .into_iter()
                .fold(0.0_f64, |m, r| m.max(r.abs()));
            assert!(worst < 1e-5, "marginal residual {worst} at kappa={kappa}");
        }
    }

    #[test]
    fn correlation_is_symmetric() {
        let rule = HemisphereRule::build(16, 32);
        let corr = CorrelationFn::build(&Ndf::new(0.4, 1.5), 8.0, &rule);
        let n = Direction::from_spherical(0.4, 0.7);
        let ni = Direction::from_spherical(1.1, 3.0);
        let a = corr.eval(n, ni);
        let b = corr.eval(ni, n);
        assert!((a - b).abs() < 1e-15 * a.abs());
    }

    #[test]
    fn high_concentration_localizes_mass() {
        let rule = HemisphereRule::build(64, 128);
        let ndf = Ndf::new(0.1, 2.0);
        let corr = CorrelationFn::build(&ndf, 50.0, &rule);
        let ni = Direction::new(0.0, 0.0, 1.0);
        let cutoff = 15f64.to_radians();
        let near = rule
            .integrate(|d| {
                let (t, _) = d.to_spherical();
                if t < cutoff {
                    corr.eval(d, ni) * ndf.eval(t)
                } else {
                    0.0
                }
            })
            .unwrap();
        assert!(near > 0.95, "mass near pole {near}");
    }

    #[test]
    fn table_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("smith.bin");
        let grid = vec![0.0, 1.5, -2.25, 1e-9];
        save_table_cache(&path, 0, 0.3, 2.0, 0.0, 257, &grid).unwrap();
        let back = load_table_cache(&path, 0, 0.3, 2.0, 0.0, 257).unwrap();
        assert_eq!(back, grid);
        // Key mismatch must miss rather than return the wrong table.
        assert!(load_table_cache(&path, 0, 0.4, 2.0, 0.0, 257).is_none());
        assert!(load_table_cache(&path, 1, 0.3, 2.0, 0.0, 257).is_none());
    }
}
