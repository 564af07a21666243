//! Material estimation from a single polarimetric image with known
//! per-pixel normals and a known directional light.
//!
//! The objective sees two scalars per pixel: total intensity and degree of
//! linear polarization. The angle of polarization never enters, by type:
//! an [`Observation`] simply does not carry it. Intensity residuals are
//! averaged uniformly; polarization residuals are reweighted so the few
//! specular-dominated pixels pull on the objective as hard as the
//! body-dominated majority.
//!
//! Optimization runs unconstrained: every parameter passes through a smooth
//! bijection onto its physical range and Adam steps the preimages. With a
//! surrogate, gradients are assembled analytically for the body term and
//! the masking of the specular term, and by central differences of the
//! cheap closed-form remainder; in oracle mode every partial derivative is
//! a central difference of the full nested-integral model.

use crate::brdf::{Fmbrdf, FmbrdfParams, LightSource, GRAZING_EPS};
use crate::fresnel::Ior;
use crate::geometry::{frame_angle, make_frames, Direction, ShadingGeometry};
use crate::microfacet::Ndf;
use crate::polarization::{reflection_mueller, rotator, StokesVector};
use crate::surrogate::{canonicalize, BodySurrogate, BODY_BOX};
use crate::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::time::Instant;

/// One valid pixel of a polarimetric observation.
#[derive(Debug, Clone, Copy)]
pub struct ObservedPixel {
    /// Image coordinates, kept for error reports.
    pub xy: (u32, u32),
    pub n: Direction,
    /// Observed total intensity (the s0 component).
    pub intensity: f64,
    /// Observed degree of linear polarization.
    pub dolp: f64,
}

/// A masked polarimetric image reduced to what the objective needs, plus
/// the global capture setup. Pixels must already satisfy the scene mask:
/// both N·L and N·V comfortably above grazing, values finite.
#[derive(Debug, Clone)]
pub struct Observation {
    pub pixels: Vec<ObservedPixel>,
    pub l: Direction,
    pub v: Direction,
    pub e0: f64,
}

/// How rendered values are produced during fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Surrogate,
    Oracle,
}

/// Physical ranges for the bounded parameters. The two albedos are
/// positive and unbounded, so they have no entry here.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ParamBounds {
    pub mu: (f64, f64),
    pub alpha: (f64, f64),
    pub beta: (f64, f64),
    pub kappa: (f64, f64),
}

impl Default for ParamBounds {
    fn default() -> ParamBounds {
        ParamBounds {
            mu: (1.05, 3.0),
            alpha: (0.01, 1.2),
            beta: (0.6, 4.0),
            kappa: (0.0, 100.0),
        }
    }
}

/// Smooth bijection from the real line onto one parameter's range.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Map {
    /// lo + (hi - lo) * sigmoid(z).
    Logistic(f64, f64),
    /// exp(z); for the albedos, which are positive and unbounded.
    Exp,
    /// ln(1 + exp(z)); positive with an asymptotically linear far end, so
    /// large concentrations do not saturate the preimage.
    Softplus,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Map {
    fn value(self, z: f64) -> f64 {
        match self {
            Map::Logistic(lo, hi) => lo + (hi - lo) * sigmoid(z),
            Map::Exp => z.exp(),
            Map::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
        }
    }

    fn unmap(self, v: f64) -> f64 {
        match self {
            Map::Logistic(lo, hi) => {
                let t = (v - lo) / (hi - lo);
                t.ln() - (1.0 - t).ln()
            }
            Map::Exp => v.ln(),
            // Inverse of softplus, written to survive large v.
            Map::Softplus => v + (-(-v).exp_m1()).ln(),
        }
    }

    fn slope(self, z: f64) -> f64 {
        match self {
            Map::Logistic(lo, hi) => {
                let s = sigmoid(z);
                (hi - lo) * s * (1.0 - s)
            }
            Map::Exp => z.exp(),
            Map::Softplus => sigmoid(z),
        }
    }
}

fn intersect(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (a.0.max(b.0), a.1.min(b.1))
}

/// Per-parameter bijections, in [`FmbrdfParams`] field order
/// (mu, ks, rk, alpha, beta, kappa).
#[derive(Debug, Clone, Copy)]
pub struct Reparameterization {
    maps: [Map; 6],
}

impl Reparameterization {
    /// In surrogate mode the bounded ranges are intersected with the
    /// surrogate's domain box so no point the optimizer can reach is
    /// refused by the networks; the concentration picks up the box's
    /// finite upper edge and switches from softplus to logistic.
    pub fn for_mode(bounds: &ParamBounds, mode: EvalMode) -> Reparameterization {
        let (mu, alpha, beta, kappa) = match mode {
            EvalMode::Oracle => (bounds.mu, bounds.alpha, bounds.beta, None),
            EvalMode::Surrogate => (
                intersect(bounds.mu, BODY_BOX[6]),
                intersect(bounds.alpha, BODY_BOX[3]),
                intersect(bounds.beta, BODY_BOX[4]),
                Some(intersect(bounds.kappa, BODY_BOX[5])),
            ),
        };
        Reparameterization {
            maps: [
                Map::Logistic(mu.0, mu.1),
                Map::Exp,
                Map::Exp,
                Map::Logistic(alpha.0, alpha.1),
                Map::Logistic(beta.0, beta.1),
                kappa.map_or(Map::Softplus, |(lo, hi)| Map::Logistic(lo, hi)),
            ],
        }
    }

    pub fn to_unconstrained(&self, p: &FmbrdfParams) -> [f64; 6] {
        let v = [p.mu, p.ks, p.rk, p.alpha, p.beta, p.kappa];
        std::array::from_fn(|k| self.maps[k].unmap(v[k]))
    }

    pub fn to_params(&self, z: &[f64; 6]) -> FmbrdfParams {
        let v: [f64; 6] = std::array::from_fn(|k| self.maps[k].value(z[k]));
        FmbrdfParams {
            mu: v[0],
            ks: v[1],
            rk: v[2],
            alpha: v[3],
            beta: v[4],
            kappa: v[5],
        }
    }

    fn slopes(&self, z: &[f64; 6]) -> [f64; 6] {
        std::array::from_fn(|k| self.maps[k].slope(z[k]))
    }

    /// Pulls a parameter vector strictly inside every bounded range so the
    /// preimage is finite; unbounded maps only floor at a positive value.
    fn interior(&self, p: &FmbrdfParams) -> FmbrdfParams {
        let v = [p.mu, p.ks, p.rk, p.alpha, p.beta, p.kappa];
        let c: [f64; 6] = std::array::from_fn(|k| match self.maps[k] {
            Map::Logistic(lo, hi) => {
                let pad = 1e-3 * (hi - lo);
                v[k].clamp(lo + pad, hi - pad)
            }
            Map::Exp => v[k].max(1e-6),
            Map::Softplus => v[k].max(1e-6),
        });
        FmbrdfParams {
            mu: c[0],
            ks: c[1],
            rk: c[2],
            alpha: c[3],
            beta: c[4],
            kappa: c[5],
        }
    }
}

/// Everything the optimizer needs besides the observation itself.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub init: FmbrdfParams,
    pub bounds: ParamBounds,
    pub mode: EvalMode,
    pub step: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub iterations: usize,
    /// DoLP outlier threshold in median absolute deviations.
    pub outlier_mads: f64,
    /// Quadrature rule for oracle-mode evaluation.
    pub oracle_res: (usize, usize),
    /// Three starts, the extra two with the initial parameters perturbed
    /// by up to twenty percent; the best final loss wins.
    pub multi_start: bool,
    pub seed: u64,
    /// With this off the DoLP residual drops out of the objective and the
    /// fit becomes intensity-only; the rest of the pipeline is unchanged.
    pub polarization: bool,
}

impl Default for FitConfig {
    fn default() -> FitConfig {
        FitConfig {
            init: FmbrdfParams {
                mu: 1.5,
                ks: 0.1,
                rk: 1.0,
                alpha: 0.3,
                beta: 2.0,
                kappa: 1.0,
            },
            bounds: ParamBounds::default(),
            mode: EvalMode::Surrogate,
            step: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            iterations: 2000,
            outlier_mads: 2.0,
            oracle_res: (32, 64),
            multi_start: false,
            seed: 0,
            polarization: true,
        }
    }
}

/// Outcome of one fit.
#[derive(Debug, Clone, serde::Serialize)]
pub struct FitReport {
    pub params: FmbrdfParams,
    /// Objective value at the start of every iteration.
    pub loss_trajectory: Vec<f64>,
    pub rms_intensity: f64,
    pub rms_dolp: f64,
    pub wall_time_s: f64,
    pub converged: bool,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Weights for the polarization residual. Pixels whose observed DoLP sits
/// more than `mads` median absolute deviations above the median are taken
/// to be specular-dominated outliers and get the inlier/outlier count
/// ratio; everything else gets one. No outliers means uniform weights.
pub fn compute_weights(obs: &Observation, mads: f64) -> Result<Vec<f64>> {
    if obs.pixels.is_empty() {
        return Err(Error::NoValidPixels);
    }
    let mut d: Vec<f64> = obs.pixels.iter().map(|p| p.dolp).collect();
    let med = median(&mut d);
    let mut dev: Vec<f64> = obs.pixels.iter().map(|p| (p.dolp - med).abs()).collect();
    let mad = median(&mut dev);
    let cut = med + mads * mad;
    let flags: Vec<bool> = obs.pixels.iter().map(|p| p.dolp > cut).collect();
    let n_out = flags.iter().filter(|&&f| f).count();
    if n_out == 0 {
        return Ok(vec![1.0; flags.len()]);
    }
    let w_out = (flags.len() - n_out) as f64 / n_out as f64;
    Ok(flags
        .into_iter()
        .map(|f| if f { w_out } else { 1.0 })
        .collect())
}

/// How rendered pixel values are produced.
pub enum Evaluator<'a> {
    /// Trained networks for the body term and the specular masking; the
    /// rest of the specular term in closed form. Everything the optimizer
    /// differentiates is exactly what this evaluates.
    Surrogate(&'a BodySurrogate),
    /// The nested-integral model at the given quadrature resolution.
    Oracle { n_theta: usize, n_phi: usize },
}

/// Angles of one pixel that depend only on geometry, hoisted out of the
/// optimization loop.
#[derive(Debug, Clone, Copy)]
struct PixelGeom {
    xy: (u32, u32),
    ibar: f64,
    rho_bar: f64,
    weight: f64,
    /// Canonical surrogate inputs; slots 3..7 are filled per iterate.
    inputs: [f64; 7],
    /// Observed s2 flips sign relative to the canonical frame.
    mirrored: bool,
    theta_h: f64,
    theta_d: f64,
    cos_nv: f64,
    phi_i: f64,
    phi_o: f64,
}

fn pixel_geometry(obs: &Observation, weights: &[f64]) -> Result<Vec<PixelGeom>> {
    if weights.len() != obs.pixels.len() {
        return Err(Error::Format(
            "weights not aligned with observation pixels".into(),
        ));
    }
    obs.pixels
        .iter()
        .zip(weights)
        .map(|(px, &w)| {
            let geom = ShadingGeometry::new(px.n, obs.l, obs.v)?;
            let (inc, out) = make_frames(px.n, obs.l, obs.v)?;
            let c = canonicalize(px.n, obs.l, obs.v);
            Ok(PixelGeom {
                xy: px.xy,
                ibar: px.intensity,
                rho_bar: px.dolp,
                weight: w,
                inputs: [c.theta_l, c.theta_v, c.dphi, 0.0, 0.0, 0.0, 0.0],
                mirrored: c.mirrored,
                theta_h: geom.theta_h,
                theta_d: geom.theta_d,
                cos_nv: geom.cos_nv,
                // A halfway vector parallel to a frame axis multiplies a
                // zero off-diagonal term, so its angle may be taken as zero.
                phi_i: frame_angle(&inc, geom.h).unwrap_or(0.0),
                phi_o: frame_angle(&out, geom.h).unwrap_or(0.0),
            })
        })
        .collect()
}

/// Specular Stokes with the masking factor supplied by the caller; the
/// scalar radiance is its s0 row. Matches the oracle's specular path
/// except for where the masking comes from.
fn specular_stokes(g: &PixelGeom, mu: f64, ks_d: f64, mask: f64, e0: f64) -> StokesVector {
    let pre = ks_d * mask / (4.0 * g.cos_nv.max(GRAZING_EPS));
    let chain = rotator(g.phi_o)
        .compose(&reflection_mueller(Ior::new(mu), g.theta_d))
        .compose(&rotator(-g.phi_i));
    chain.apply(StokesVector::unpolarized(e0)).scale(pre)
}

fn dolp_of(s: &StokesVector) -> f64 {
    let r = (s.s1 * s.s1 + s.s2 * s.s2).sqrt();
    if s.s0 > 0.0 {
        r / s.s0
    } else {
        0.0
    }
}

/// Renders (intensity, DoLP) for every pixel under the given evaluator.
fn render_pixels(
    p: &FmbrdfParams,
    obs: &Observation,
    ctx: &[PixelGeom],
    ev: &Evaluator,
) -> Result<Vec<(f64, f64)>> {
    let light = LightSource::unpolarized(obs.l, obs.e0);
    match ev {
        Evaluator::Oracle { n_theta, n_phi } => {
            let model = Fmbrdf::new(*p, *n_theta, *n_phi)?;
            obs.pixels
                .par_iter()
                .map(|px| {
                    let (i, s) = model.eval_total(px.n, obs.l, obs.v, &light, None)?;
                    let rho = dolp_of(&s);
                    if !i.is_finite() || !rho.is_finite() {
                        return Err(Error::PixelEvaluation(px.xy.0, px.xy.1));
                    }
                    Ok((i, rho))
                })
                .collect()
        }
        Evaluator::Surrogate(sur) => {
            let ndf = Ndf::new(p.alpha, p.beta);
            ctx.par_iter()
                .map(|g| {
                    let s = forward_pixel(sur, &ndf, g, p, obs.e0)?;
                    let rho = dolp_of(&s);
                    if !s.s0.is_finite() || !rho.is_finite() {
                        return Err(Error::PixelEvaluation(g.xy.0, g.xy.1));
                    }
                    Ok((s.s0, rho))
                })
                .collect()
        }
    }
}

/// Total Stokes of one pixel in surrogate mode: network body term plus the
/// closed-form specular term with network masking.
fn forward_pixel(
    sur: &BodySurrogate,
    ndf: &Ndf,
    g: &PixelGeom,
    p: &FmbrdfParams,
    e0: f64,
) -> Result<StokesVector> {
    let mut inputs = g.inputs;
    inputs[3] = p.alpha;
    inputs[4] = p.beta;
    inputs[5] = p.kappa;
    inputs[6] = p.mu;
    let out = sur.infer(&inputs)?;
    let s0b = out.s0_unit * p.kb() * e0;
    let sgn = if g.mirrored { -1.0 } else { 1.0 };
    let body = StokesVector::new(s0b, s0b * out.q1, s0b * out.q2 * sgn, 0.0);
    let (sl, _) = sur.smith_ln_one_plus_lambda(g.inputs[0], p.alpha, p.beta)?;
    let (sv, _) = sur.smith_ln_one_plus_lambda(g.inputs[1], p.alpha, p.beta)?;
    let mask = (-(sl + sv)).exp();
    let surf = specular_stokes(g, p.mu, p.ks * ndf.eval(g.theta_h), mask, e0);
    Ok(body.add(surf))
}

fn assemble_loss(vals: &[(f64, f64)], ctx: &[PixelGeom]) -> (f64, f64, f64) {
    let m = ctx.len() as f64;
    // All-zero weights mean the polarization term is switched off entirely.
    let wnorm = weight_norm(ctx);
    let mut qi = 0.0;
    let mut qr = 0.0;
    for (g, &(i, rho)) in ctx.iter().zip(vals) {
        let ei = i - g.ibar;
        let er = rho - g.rho_bar;
        qi += ei * ei;
        qr += g.weight * er * er;
    }
    (
        qi / m + qr * wnorm,
        (qi / m).sqrt(),
        (qr * wnorm).sqrt(),
    )
}

/// 1 / sum of DoLP weights, or zero when every weight is zero.
fn weight_norm(ctx: &[PixelGeom]) -> f64 {
    let wsum: f64 = ctx.iter().map(|g| g.weight).sum();
    if wsum > 0.0 {
        1.0 / wsum
    } else {
        0.0
    }
}

/// Weighted least squares over intensity and DoLP:
/// mean squared intensity residual plus the weighted mean squared DoLP
/// residual. `weights` must align with `obs.pixels`.
pub fn loss(
    p: &FmbrdfParams,
    obs: &Observation,
    weights: &[f64],
    ev: &Evaluator,
) -> Result<f64> {
    if obs.pixels.is_empty() {
        return Err(Error::NoValidPixels);
    }
    let ctx = pixel_geometry(obs, weights)?;
    let vals = render_pixels(p, obs, &ctx, ev)?;
    Ok(assemble_loss(&vals, &ctx).0)
}

/// Per-pixel intensity and DoLP with their six parameter gradients,
/// surrogate mode. Gradient order matches [`FmbrdfParams`] fields.
struct PixelDiff {
    i: f64,
    rho: f64,
    di: [f64; 6],
    drho: [f64; 6],
}

fn diff_pixel(
    sur: &BodySurrogate,
    ndfs: &[Ndf; 5],
    g: &PixelGeom,
    p: &FmbrdfParams,
    e0: f64,
    h_mu: f64,
    h_alpha: f64,
    h_beta: f64,
) -> Result<PixelDiff> {
    let [ndf, ndf_am, ndf_ap, ndf_bm, ndf_bp] = ndfs;
    let mut inputs = g.inputs;
    inputs[3] = p.alpha;
    inputs[4] = p.beta;
    inputs[5] = p.kappa;
    inputs[6] = p.mu;
    let out = sur.infer(&inputs)?;
    let kb_e0 = p.kb() * e0;
    let s0b = out.s0_unit * kb_e0;
    let sgn = if g.mirrored { -1.0 } else { 1.0 };
    let body = StokesVector::new(s0b, s0b * out.q1, s0b * out.q2 * sgn, 0.0);

    // Body gradients. Input columns: alpha 3, beta 4, kappa 5, mu 6; the
    // albedos enter only through the linear kb factor.
    let mut d_body = [StokesVector::default(); 6];
    for (param, col) in [(0usize, 6usize), (3, 3), (4, 4), (5, 5)] {
        let ds0 = out.d_s0_unit[col] * kb_e0;
        d_body[param] = StokesVector::new(
            ds0,
            ds0 * out.q1 + s0b * out.d_q1[col],
            (ds0 * out.q2 + s0b * out.d_q2[col]) * sgn,
            0.0,
        );
    }
    d_body[1] = body.scale(1.0 / p.ks);
    d_body[2] = body.scale(1.0 / p.rk);

    // Specular term and gradients. Masking comes from the network with its
    // analytic derivatives; the distribution's roughness dependence is a
    // central difference of its log; the Fresnel chain's index dependence
    // is a central difference of the Mueller column.
    let (sl, slg) = sur.smith_ln_one_plus_lambda(g.inputs[0], p.alpha, p.beta)?;
    let (sv, svg) = sur.smith_ln_one_plus_lambda(g.inputs[1], p.alpha, p.beta)?;
    let mask = (-(sl + sv)).exp();
    let d = ndf.eval(g.theta_h);
    let surf = specular_stokes(g, p.mu, p.ks * d, mask, e0);
    let mut d_surf = [StokesVector::default(); 6];
    let surf_mu_p = specular_stokes(g, p.mu + h_mu, p.ks * d, mask, e0);
    let surf_mu_m = specular_stokes(g, p.mu - h_mu, p.ks * d, mask, e0);
    d_surf[0] = surf_mu_p.add(surf_mu_m.scale(-1.0)).scale(0.5 / h_mu);
    d_surf[1] = surf.scale(1.0 / p.ks);
    let dln_d_alpha = (ndf_ap.eval(g.theta_h).ln() - ndf_am.eval(g.theta_h).ln()) / (2.0 * h_alpha);
    let dln_d_beta = (ndf_bp.eval(g.theta_h).ln() - ndf_bm.eval(g.theta_h).ln()) / (2.0 * h_beta);
    d_surf[3] = surf.scale(dln_d_alpha - slg[1] - svg[1]);
    d_surf[4] = surf.scale(dln_d_beta - slg[2] - svg[2]);

    let total = body.add(surf);
    if !total.s0.is_finite() {
        return Err(Error::PixelEvaluation(g.xy.0, g.xy.1));
    }
    let r = (total.s1 * total.s1 + total.s2 * total.s2).sqrt();
    let rho = if total.s0 > 0.0 { r / total.s0 } else { 0.0 };
    let mut di = [0.0; 6];
    let mut drho = [0.0; 6];
    for k in 0..6 {
        let dt = d_body[k].add(d_surf[k]);
        di[k] = dt.s0;
        // The DoLP is nonsmooth where both linear components vanish; the
        // residual there is against an equally unpolarized observation, so
        // a zero derivative is the correct subgradient.
        if r > total.s0.abs() * 1e-12 && total.s0 > 0.0 {
            drho[k] = (total.s1 * dt.s1 + total.s2 * dt.s2) / (r * total.s0)
                - r * dt.s0 / (total.s0 * total.s0);
        }
    }
    Ok(PixelDiff {
        i: total.s0,
        rho,
        di,
        drho,
    })
}

/// Loss and its gradient in parameter space, surrogate mode.
fn loss_grad_surrogate(
    sur: &BodySurrogate,
    ctx: &[PixelGeom],
    p: &FmbrdfParams,
    e0: f64,
) -> Result<(f64, [f64; 6])> {
    let h_mu = 1e-4 * p.mu;
    let h_alpha = 1e-4 * p.alpha;
    let h_beta = 1e-4 * p.beta;
    let ndfs = [
        Ndf::new(p.alpha, p.beta),
        Ndf::new(p.alpha - h_alpha, p.beta),
        Ndf::new(p.alpha + h_alpha, p.beta),
        Ndf::new(p.alpha, p.beta - h_beta),
        Ndf::new(p.alpha, p.beta + h_beta),
    ];
    let diffs: Vec<PixelDiff> = ctx
        .par_iter()
        .map(|g| diff_pixel(sur, &ndfs, g, p, e0, h_mu, h_alpha, h_beta))
        .collect::<Result<_>>()?;
    let m = ctx.len() as f64;
    let wnorm = weight_norm(ctx);
    let mut l = 0.0;
    let mut grad = [0.0; 6];
    for (g, d) in ctx.iter().zip(&diffs) {
        let ei = d.i - g.ibar;
        let er = d.rho - g.rho_bar;
        l += ei * ei / m + g.weight * er * er * wnorm;
        for k in 0..6 {
            grad[k] += 2.0 * ei * d.di[k] / m + 2.0 * g.weight * er * d.drho[k] * wnorm;
        }
    }
    Ok((l, grad))
}

/// Loss and central-difference gradient in parameter space, oracle mode.
/// Steps are relative per parameter and shrink near a bounded range's edge
/// so both probes stay physical.
fn loss_grad_oracle(
    obs: &Observation,
    ctx: &[PixelGeom],
    p: &FmbrdfParams,
    repar: &Reparameterization,
    res: (usize, usize),
) -> Result<(f64, [f64; 6])> {
    let ev = Evaluator::Oracle {
        n_theta: res.0,
        n_phi: res.1,
    };
    let base = assemble_loss(&render_pixels(p, obs, ctx, &ev)?, ctx).0;
    let v = [p.mu, p.ks, p.rk, p.alpha, p.beta, p.kappa];
    let mut grad = [0.0; 6];
    for k in 0..6 {
        let mut h = 1e-4 * v[k].abs().max(1e-3);
        if let Map::Logistic(lo, hi) = repar.maps[k] {
            h = h.min(0.49 * (v[k] - lo).min(hi - v[k]).max(0.0));
        }
        if h == 0.0 {
            continue;
        }
        let probe = |val: f64| -> Result<f64> {
            let mut vv = v;
            vv[k] = val;
            let q = FmbrdfParams {
                mu: vv[0],
                ks: vv[1],
                rk: vv[2],
                alpha: vv[3],
                beta: vv[4],
                kappa: vv[5].max(0.0),
            };
            Ok(assemble_loss(&render_pixels(&q, obs, ctx, &ev)?, ctx).0)
        };
        grad[k] = (probe(v[k] + h)? - probe(v[k] - h)?) / (2.0 * h);
    }
    Ok((base, grad))
}

struct StartOutcome {
    report: FitReport,
    final_loss: f64,
}

fn run_start(
    obs: &Observation,
    ctx: &[PixelGeom],
    cfg: &FitConfig,
    repar: &Reparameterization,
    surrogate: Option<&BodySurrogate>,
    init: FmbrdfParams,
) -> Result<StartOutcome> {
    let t0 = Instant::now();
    let mut z = repar.to_unconstrained(&repar.interior(&init));
    let mut m = [0.0; 6];
    let mut v = [0.0; 6];
    let mut traj = Vec::with_capacity(cfg.iterations);
    let mut diverged = false;
    // Loss at or below this is an exact fit up to rounding; Adam's
    // sign-normalized steps would otherwise wander there, because a
    // numerically zero gradient still steps at full size.
    let m_px = ctx.len() as f64;
    let wnorm = weight_norm(ctx);
    let floor = 1e-14
        * (ctx.iter().map(|g| g.ibar * g.ibar).sum::<f64>() / m_px
            + ctx.iter().map(|g| g.weight * g.rho_bar * g.rho_bar).sum::<f64>() * wnorm);
    for t in 1..=cfg.iterations {
        let p = repar.to_params(&z);
        let (l, grad_p) = match cfg.mode {
            EvalMode::Surrogate => {
                let sur = surrogate.expect("checked by fit");
                loss_grad_surrogate(sur, ctx, &p, obs.e0)?
            }
            EvalMode::Oracle => loss_grad_oracle(obs, ctx, &p, repar, cfg.oracle_res)?,
        };
        traj.push(l);
        if l <= floor {
            break;
        }
        if !l.is_finite() || grad_p.iter().any(|g| !g.is_finite()) {
            diverged = true;
            break;
        }
        let slopes = repar.slopes(&z);
        let corr = (1.0 - cfg.beta2.powi(t as i32)).sqrt() / (1.0 - cfg.beta1.powi(t as i32));
        for k in 0..6 {
            let g = grad_p[k] * slopes[k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            z[k] -= cfg.step * corr * m[k] / (v[k].sqrt() + cfg.eps);
        }
    }
    let params = repar.to_params(&z);
    let ev = match cfg.mode {
        EvalMode::Surrogate => Evaluator::Surrogate(surrogate.expect("checked by fit")),
        EvalMode::Oracle => Evaluator::Oracle {
            n_theta: cfg.oracle_res.0,
            n_phi: cfg.oracle_res.1,
        },
    };
    let (final_loss, rms_intensity, rms_dolp) =
        assemble_loss(&render_pixels(&params, obs, ctx, &ev)?, ctx);
    let converged = !diverged
        && final_loss.is_finite()
        && traj.first().is_none_or(|&first| final_loss <= first);
    Ok(StartOutcome {
        report: FitReport {
            params,
            loss_trajectory: traj,
            rms_intensity,
            rms_dolp,
            wall_time_s: t0.elapsed().as_secs_f64(),
            converged,
        },
        final_loss,
    })
}

/// Estimates material parameters from one observation. Deterministic for a
/// fixed seed; per-pixel work is parallel but reduced in pixel order, so
/// thread count does not change the result.
pub fn fit(
    obs: &Observation,
    cfg: &FitConfig,
    surrogate: Option<&BodySurrogate>,
) -> Result<FitReport> {
    if cfg.iterations == 0 {
        return Err(Error::Format("fit needs at least one iteration".into()));
    }
    if cfg.mode == EvalMode::Surrogate && surrogate.is_none() {
        return Err(Error::Format(
            "surrogate-mode fitting needs a trained surrogate".into(),
        ));
    }
    let weights = if cfg.polarization {
        compute_weights(obs, cfg.outlier_mads)?
    } else {
        vec![0.0; obs.pixels.len()]
    };
    let ctx = pixel_geometry(obs, &weights)?;
    let repar = Reparameterization::for_mode(&cfg.bounds, cfg.mode);
    let t0 = Instant::now();
    let starts = if cfg.multi_start { 3 } else { 1 };
    let mut best: Option<StartOutcome> = None;
    for s in 0..starts {
        let init = if s == 0 {
            cfg.init
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(s as u64));
            let f = |rng: &mut ChaCha8Rng| 1.0 + 0.2 * rng.gen_range(-1.0..1.0);
            FmbrdfParams {
                mu: cfg.init.mu * f(&mut rng),
                ks: cfg.init.ks * f(&mut rng),
                rk: cfg.init.rk * f(&mut rng),
                alpha: cfg.init.alpha * f(&mut rng),
                beta: cfg.init.beta * f(&mut rng),
                kappa: cfg.init.kappa * f(&mut rng),
            }
        };
        let outcome = run_start(obs, &ctx, cfg, &repar, surrogate, init)?;
        let better = best
            .as_ref()
            .is_none_or(|b| outcome.final_loss < b.final_loss);
        if better {
            best = Some(outcome);
        }
    }
    let mut out = best.expect("at least one start ran");
    out.report.wall_time_s = t0.elapsed().as_secs_f64();
    Ok(out.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surrogate::{Mlp, Normalizer, ValidationMetrics, BODY_FEATURES};
    use proptest::prelude::*;

    const Z: Direction = Direction {
        x: 0.0,
        y: 0.0,
        z: 1.0,
    };

    fn truth() -> FmbrdfParams {
        FmbrdfParams {
            mu: 1.5,
            ks: 0.3,
            rk: 2.0,
            alpha: 0.3,
            beta: 2.0,
            kappa: 5.0,
        }
    }

    /// A band of sphere-like normals tilted away from both L and V.
    fn test_observation(n_px: usize, params: &FmbrdfParams, res: (usize, usize)) -> Observation {
        let l = Direction::from_spherical(0.6, 0.2);
        let v = Direction::from_spherical(0.3, 2.1);
        let model = Fmbrdf::new(*params, res.0, res.1).unwrap();
        let light = LightSource::unpolarized(l, 1.0);
        let pixels = (0..n_px)
            .map(|i| {
                let t = i as f64 / n_px as f64;
                let n = Direction::from_spherical(0.9 * t, 2.0 * std::f64::consts::PI * t + 0.4);
                let (intensity, s) = model.eval_total(n, l, v, &light, None).unwrap();
                ObservedPixel {
                    xy: (i as u32, 0),
                    n,
                    intensity,
                    dolp: dolp_of(&s),
                }
            })
            .collect();
        Observation {
            pixels,
            l,
            v,
            e0: 1.0,
        }
    }

    /// Untrained networks stand in for a trained surrogate: the gradient
    /// assembly does not care whether the weights mean anything.
    fn random_surrogate(seed: u64) -> BodySurrogate {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BodySurrogate {
            body: Mlp::new(&[BODY_FEATURES, 16, 3], &mut rng),
            smith: Mlp::new(&[3, 8, 1], &mut rng),
            body_norms: vec![
                Normalizer {
                    mean: -1.0,
                    std: 0.5,
                },
                Normalizer {
                    mean: 0.1,
                    std: 0.2,
                },
                Normalizer {
                    mean: 0.0,
                    std: 0.2,
                },
            ],
            smith_norm: Normalizer {
                mean: 0.2,
                std: 0.3,
            },
            metrics: ValidationMetrics::default(),
            seed,
            n_samples: 0,
            rule_res: (0, 0),
        }
    }

    #[test]
    fn weights_uniform_without_outliers() {
        let obs = Observation {
            pixels: (0..50)
                .map(|i| ObservedPixel {
                    xy: (i, 0),
                    n: Z,
                    intensity: 1.0,
                    dolp: 0.25,
                })
                .collect(),
            l: Z,
            v: Z,
            e0: 1.0,
        };
        assert_eq!(compute_weights(&obs, 2.0).unwrap(), vec![1.0; 50]);
    }

    #[test]
    fn weights_balance_outlier_mass() {
        let pixels: Vec<ObservedPixel> = (0..1000)
            .map(|i| ObservedPixel {
                xy: (i, 0),
                n: Z,
                intensity: 1.0,
                dolp: if i < 10 { 0.9 } else { 0.1 + 1e-4 * (i % 7) as f64 },
            })
            .collect();
        let obs = Observation {
            pixels,
            l: Z,
            v: Z,
            e0: 1.0,
        };
        let w = compute_weights(&obs, 2.0).unwrap();
        assert_eq!(w[0], 99.0);
        assert_eq!(w[500], 1.0);
        assert_eq!(w.iter().filter(|&&x| x == 99.0).count(), 10);
    }

    #[test]
    fn loss_zero_when_observation_matches_model() {
        let p = truth();
        let obs = test_observation(6, &p, (8, 16));
        let w = vec![1.0; 6];
        let ev = Evaluator::Oracle {
            n_theta: 8,
            n_phi: 16,
        };
        let l = loss(&p, &obs, &w, &ev).unwrap();
        assert!(l < 1e-22, "self-rendered loss {l}");
    }

    #[test]
    fn intensity_term_is_quadratic_in_residual() {
        let p = truth();
        let base = test_observation(6, &p, (8, 16));
        let w = vec![1.0; 6];
        let ev = Evaluator::Oracle {
            n_theta: 8,
            n_phi: 16,
        };
        let shifted = |d: f64| {
            let mut o = base.clone();
            for px in &mut o.pixels {
                px.intensity += d * (1.0 + px.n.x);
            }
            o
        };
        let l0 = loss(&p, &base, &w, &ev).unwrap();
        let l1 = loss(&p, &shifted(0.01), &w, &ev).unwrap();
        let l2 = loss(&p, &shifted(0.02), &w, &ev).unwrap();
        let ratio = (l2 - l0) / (l1 - l0);
        assert!((ratio - 4.0).abs() < 1e-6, "ratio {ratio}");
    }

    #[test]
    fn loss_matches_direct_summation() {
        let p = truth();
        let mut obs = test_observation(10, &p, (8, 16));
        for (i, px) in obs.pixels.iter_mut().enumerate() {
            px.intensity *= 1.0 + 0.03 * (i as f64).sin();
            px.dolp = (px.dolp + 0.01 * (i as f64).cos()).clamp(0.0, 1.0);
        }
        let weights: Vec<f64> = (0..10).map(|i| if i % 3 == 0 { 5.0 } else { 1.0 }).collect();
        let ev = Evaluator::Oracle {
            n_theta: 8,
            n_phi: 16,
        };
        let got = loss(&p, &obs, &weights, &ev).unwrap();

        let model = Fmbrdf::new(p, 8, 16).unwrap();
        let light = LightSource::unpolarized(obs.l, obs.e0);
        let mut qi = 0.0;
        let mut qr = 0.0;
        for (px, &w) in obs.pixels.iter().zip(&weights) {
            let (i, s) = model.eval_total(px.n, obs.l, obs.v, &light, None).unwrap();
            qi += (i - px.intensity).powi(2);
            qr += w * (dolp_of(&s) - px.dolp).powi(2);
        }
        let expect = qi / 10.0 + qr / weights.iter().sum::<f64>();
        assert!((got - expect).abs() < 1e-15 * expect.max(1.0));
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let sur = random_surrogate(11);
        let p = truth();
        let mut obs = test_observation(5, &p, (8, 16));
        // Residuals must be nonzero or the gradient degenerates.
        for px in &mut obs.pixels {
            px.intensity *= 1.1;
            px.dolp = (px.dolp + 0.05).min(1.0);
        }
        let weights = vec![1.0; obs.pixels.len()];
        let ctx = pixel_geometry(&obs, &weights).unwrap();
        let repar = Reparameterization::for_mode(&ParamBounds::default(), EvalMode::Surrogate);
        let z = repar.to_unconstrained(&repar.interior(&p));
        let q = repar.to_params(&z);
        let (_, grad_p) = loss_grad_surrogate(&sur, &ctx, &q, obs.e0).unwrap();
        let slopes = repar.slopes(&z);
        for k in 0..6 {
            let h = 1e-5;
            let mut zp = z;
            zp[k] += h;
            let mut zm = z;
            zm[k] -= h;
            let ev = Evaluator::Surrogate(&sur);
            let lp = loss(&repar.to_params(&zp), &obs, &weights, &ev).unwrap();
            let lm = loss(&repar.to_params(&zm), &obs, &weights, &ev).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let an = grad_p[k] * slopes[k];
            let denom = fd.abs().max(an.abs()).max(1e-10);
            assert!(
                ((an - fd) / denom).abs() < 1e-3,
                "param {k}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn fit_stays_at_ground_truth() {
        let p = truth();
        let obs = test_observation(8, &p, (8, 16));
        let cfg = FitConfig {
            init: p,
            mode: EvalMode::Oracle,
            oracle_res: (8, 16),
            iterations: 30,
            ..FitConfig::default()
        };
        let report = fit(&obs, &cfg, None).unwrap();
        assert!(report.converged);
        let rel = |a: f64, b: f64| ((a - b) / b).abs();
        assert!(rel(report.params.mu, p.mu) < 0.01, "{:?}", report.params);
        assert!(rel(report.params.ks, p.ks) < 0.01);
        assert!(rel(report.params.rk, p.rk) < 0.01);
        assert!(rel(report.params.alpha, p.alpha) < 0.01);
        assert!(rel(report.params.beta, p.beta) < 0.01);
        assert!(rel(report.params.kappa, p.kappa) < 0.01);
    }

    #[test]
    fn albedo_gradient_positive_when_rendering_too_bright() {
        let sur = random_surrogate(3);
        let p = truth();
        let mut obs = test_observation(5, &p, (8, 16));
        let weights = vec![1.0; obs.pixels.len()];
        let ctx = pixel_geometry(&obs, &weights).unwrap();
        // Surrogate renders whatever it renders; observe half of it so the
        // rendered intensity uniformly exceeds the observation.
        let ev = Evaluator::Surrogate(&sur);
        let ndf = Ndf::new(p.alpha, p.beta);
        for (g, px) in ctx.iter().zip(&mut obs.pixels) {
            px.intensity = 0.5 * forward_pixel(&sur, &ndf, g, &p, 1.0).unwrap().s0;
            px.dolp = 0.0;
        }
        let ctx = pixel_geometry(&obs, &weights).unwrap();
        let (_, grad) = loss_grad_surrogate(&sur, &ctx, &p, obs.e0).unwrap();
        assert!(grad[1] > 0.0, "d loss / d ks = {}", grad[1]);
        drop(ev);
    }

    #[test]
    fn multi_start_is_deterministic() {
        let p = truth();
        let obs = test_observation(4, &p, (8, 16));
        let cfg = FitConfig {
            init: p,
            mode: EvalMode::Oracle,
            oracle_res: (8, 16),
            iterations: 3,
            multi_start: true,
            seed: 7,
            ..FitConfig::default()
        };
        let a = fit(&obs, &cfg, None).unwrap();
        let b = fit(&obs, &cfg, None).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.loss_trajectory, b.loss_trajectory);
    }

    #[test]
    fn surrogate_mode_requires_model() {
        let obs = test_observation(4, &truth(), (8, 16));
        let cfg = FitConfig::default();
        assert!(fit(&obs, &cfg, None).is_err());
    }

    proptest! {
        #[test]
        fn reparameterization_round_trips(
            mu in 1.06_f64..2.99,
            ks in 1e-4_f64..20.0,
            rk in 1e-4_f64..20.0,
            alpha in 0.011_f64..1.19,
            beta in 0.61_f64..3.99,
            kappa in 1e-4_f64..99.0,
            surrogate_mode in any::<bool>(),
        ) {
            let mode = if surrogate_mode { EvalMode::Surrogate } else { EvalMode::Oracle };
            let repar = Reparameterization::for_mode(&ParamBounds::default(), mode);
            let p = FmbrdfParams { mu, ks, rk, alpha, beta, kappa };
            let p = repar.interior(&p);
            let z = repar.to_unconstrained(&p);
            let q = repar.to_params(&z);
            for (a, b) in [
                (p.mu, q.mu), (p.ks, q.ks), (p.rk, q.rk),
                (p.alpha, q.alpha), (p.beta, q.beta), (p.kappa, q.kappa),
            ] {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }
}
