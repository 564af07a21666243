//! The reflectance model itself: specular reflection off the facet field and
//! body scattering that refracts in, diffuses, and refracts back out. Both
//! components come in a radiometric (scalar radiance) and a polarimetric
//! (Stokes vector) flavor.
//!
//! The scalar paths are written with exactly the same factor groupings as the
//! s0 rows of the Stokes paths, so for unpolarized input the two agree to the
//! last bit rather than merely to rounding. Keep them in lockstep when
//! editing either one.

use crate::fresnel::{fresnel_rs_rp, Ior};
use crate::geometry::{frame_angle, make_frames, Direction, PolarizationFrame, ShadingGeometry};
use crate::microfacet::{CorrelationFn, Ndf, SmithTable};
use crate::polarization::{reflection_mueller, rotator, StokesVector};
use crate::quadrature::HemisphereRule;
use crate::surrogate::BodySurrogate;
use crate::{Error, Result};
use std::f64::consts::PI;
use std::path::Path;

/// Floor for foreshortening denominators; configurations closer to grazing
/// than this are excluded from fitting masks by the scene module.
pub const GRAZING_EPS: f64 = 1e-6;

/// Material parameters of the reflectance model. The default is the
/// reference material used across the synthetic evaluations.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FmbrdfParams {
    /// Relative index of refraction, >= 1.
    pub mu: f64,
    /// Surface reflection albedo, >= 0.
    pub ks: f64,
    /// Body-to-surface albedo ratio, >= 0.
    pub rk: f64,
    /// Roughness scale of the facet distribution, radians, > 0.
    pub alpha: f64,
    /// Shape exponent of the facet distribution, > 0.
    pub beta: f64,
    /// Concentration of the facet correlation, >= 0.
    pub kappa: f64,
}

impl Default for FmbrdfParams {
    fn default() -> FmbrdfParams {
        FmbrdfParams {
            mu: 1.5,
            ks: 0.3,
            rk: 2.0,
            alpha: 0.3,
            beta: 2.0,
            kappa: 5.0,
        }
    }
}

impl FmbrdfParams {
    pub fn ior(&self) -> Ior {
        Ior::new(self.mu)
    }

    /// Body reflection albedo kb = ks * rk.
    pub fn kb(&self) -> f64 {
        self.ks * self.rk
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.mu.is_finite()
            && self.mu >= 1.0
            && self.ks >= 0.0
            && self.rk >= 0.0
            && self.alpha > 0.0
            && self.beta > 0.0
            && self.kappa >= 0.0
            && [self.ks, self.rk, self.alpha, self.beta, self.kappa]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Format(format!("invalid material parameters {self:?}")))
        }
    }
}

/// Directional light source.
#[derive(Debug, Clone, Copy)]
pub struct LightSource {
    pub l: Direction,
    pub e0: f64,
    pub stokes_in: StokesVector,
}

impl LightSource {
    pub fn unpolarized(l: Direction, e0: f64) -> LightSource {
        LightSource {
            l,
            e0,
            stokes_in: StokesVector::unpolarized(e0),
        }
    }
}

/// A parameter set with its derived tables, ready to evaluate.
///
/// Building one costs a Smith table (a few hundred milliseconds, cacheable)
/// plus the correlation scaling (microseconds); evaluation afterwards is
/// read-only and safe to share across threads.
pub struct Fmbrdf {
    pub params: FmbrdfParams,
    pub ndf: Ndf,
    pub smith: SmithTable,
    pub corr: Option<CorrelationFn>,
    pub rule: HemisphereRule,
    /// Per-node weight * D * u, hoisted out of the double integral.
    wdu: Vec<f64>,
}

impl Fmbrdf {
    pub fn new(params: FmbrdfParams, n_theta: usize, n_phi: usize) -> Result<Fmbrdf> {
        Fmbrdf::with_cache(params, n_theta, n_phi, None)
    }

    pub fn with_cache(
        params: FmbrdfParams,
        n_theta: usize,
        n_phi: usize,
        cache_dir: Option<&Path>,
    ) -> Result<Fmbrdf> {
        params.validate()?;
        let ndf = Ndf::new(params.alpha, params.beta);
        let rule = HemisphereRule::build(n_theta, n_phi);
        let smith = SmithTable::build_cached(&ndf, cache_dir);
        if ndf.is_delta() {
            return Ok(Fmbrdf {
                params,
                ndf,
                smith,
                corr: None,
                rule,
                wdu: Vec::new(),
            });
        }
        let corr = CorrelationFn::build_cached(&ndf, params.kappa, &rule, cache_dir);
        let n_phi_f = rule.n_phi;
        let wdu = rule
            .nodes
            .iter()
            .enumerate()
            .map(|(idx, node)| {
                let ring = idx / n_phi_f;
                node.weight * ndf.eval(node.theta) * corr.u[ring]
            })
            .collect();
        Ok(Fmbrdf {
            params,
            ndf,
            smith,
            corr: Some(corr),
            rule,
            wdu,
        })
    }

    /// Variant for surrogate target generation: the Smith table is flat, so
    /// body evaluations come out without the masking division, and the
    /// surface paths must not be used. None of the precomputed tables depend
    /// on the refractive index, which `body_stokes_for_mu` may override.
    pub fn for_body_training(params: FmbrdfParams, n_theta: usize, n_phi: usize) -> Result<Fmbrdf> {
        params.validate()?;
        let ndf = Ndf::new(params.alpha, params.beta);
        assert!(!ndf.is_delta(), "training models need a spread distribution");
        let rule = HemisphereRule::build(n_theta, n_phi);
        let smith = SmithTable::flat(&ndf);
        let corr = CorrelationFn::build(&ndf, params.kappa, &rule);
        let n_phi_f = rule.n_phi;
        let wdu = rule
            .nodes
            .iter()
            .enumerate()
            .map(|(idx, node)| {
                let ring = idx / n_phi_f;
                node.weight * ndf.eval(node.theta) * corr.u[ring]
            })
            .collect();
        Ok(Fmbrdf {
            params,
            ndf,
            smith,
            corr: Some(corr),
            rule,
            wdu,
        })
    }

    /// Body Stokes under unpolarized unit irradiance with the refractive
    /// index overridden. Pairs with `for_body_training`.
    pub fn body_stokes_for_mu(
        &self,
        n: Direction,
        l: Direction,
        v: Direction,
        mu: f64,
    ) -> Result<StokesVector> {
        self.body_stokes_inner(n, l, v, &StokesVector::unpolarized(1.0), true, Ior::new(mu))
    }

    /// Deterministic local basis with the macroscopic normal on +Z; the
    /// model is isotropic, so the azimuth convention cancels out.
    fn to_local(&self, n: Direction, w: Direction) -> Direction {
        let f = PolarizationFrame::from_z_and_up(n, Direction { x: 1.0, y: 0.0, z: 0.0 });
        Direction::new(w.dot(f.x_axis), w.dot(f.y_axis), w.dot(f.z_axis))
    }

    /// Specular radiance reflected toward V.
    pub fn surface_radiance(&self, geom: &ShadingGeometry, e0: f64) -> Result<f64> {
        if self.params.ks == 0.0 {
            return Ok(0.0);
        }
        if self.ndf.is_delta() {
            return Ok(0.0);
        }
        let (rs, rp) = fresnel_rs_rp(self.params.ior(), geom.theta_d);
        let pre = self.surface_prefactor(geom)?;
        Ok(pre * (0.5 * (rs + rp) * e0))
    }

    /// Specular Stokes vector toward V, in the outgoing frame of
    /// `make_frames(N, L, V)`.
    pub fn surface_stokes(&self, geom: &ShadingGeometry, light: &LightSource) -> Result<StokesVector> {
        if self.params.ks == 0.0 || self.ndf.is_delta() {
            return Ok(StokesVector::default());
        }
        let (inc, out) = make_frames(geom.n, geom.l, geom.v)?;
        // The facet normal is the halfway vector; when it is parallel to a
        // frame axis the rotator multiplies a zero off-diagonal term, so the
        // angle may be taken as zero.
        let phi_i = frame_angle(&inc, geom.h).unwrap_or(0.0);
        let phi_o = frame_angle(&out, geom.h).unwrap_or(0.0);
        let chain = rotator(phi_o)
            .compose(&reflection_mueller(self.params.ior(), geom.theta_d))
            .compose(&rotator(-phi_i));
        let pre = self.surface_prefactor(geom)?;
        Ok(chain.apply(light.stokes_in).scale(pre))
    }

    /// Common scalar factor ks * D * G / (4 N.V) of both surface paths.
    fn surface_prefactor(&self, geom: &ShadingGeometry) -> Result<f64> {
        let lam_l = self.smith.lambda(geom.n.angle_to(geom.l))?;
        let lam_v = self.smith.lambda(geom.n.angle_to(geom.v))?;
        let g = 1.0 / ((1.0 + lam_l) * (1.0 + lam_v));
        let d = self.ndf.eval(geom.theta_h);
        Ok(self.params.ks * d * g / (4.0 * geom.cos_nv.max(GRAZING_EPS)))
    }

    /// Body radiance toward V through the nested facet integral.
    pub fn body_radiance(
        &self,
        n: Direction,
        l: Direction,
        v: Direction,
        e0: f64,
    ) -> Result<f64> {
        let s = self.body_stokes_inner(
            n,
            l,
            v,
            &StokesVector::unpolarized(e0),
            false,
            self.params.ior(),
        )?;
        Ok(s.s0)
    }

    /// Body Stokes vector toward V, in the outgoing frame of
    /// `make_frames(N, L, V)`.
    pub fn body_stokes(
        &self,
        n: Direction,
        l: Direction,
        v: Direction,
        light: &LightSource,
    ) -> Result<StokesVector> {
        self.body_stokes_inner(n, l, v, &light.stokes_in, true, self.params.ior())
    }

    fn body_stokes_inner(
        &self,
        n: Direction,
        l: Direction,
        v: Direction,
        s_in: &StokesVector,
        with_polarization: bool,
        ior: Ior,
    ) -> Result<StokesVector> {
        let kb = self.params.kb();
        let cos_nl = n.dot(l);
        let cos_nv = n.dot(v);
        if cos_nl <= 0.0 || cos_nv <= 0.0 {
            return Err(Error::BelowHorizon);
        }
        if kb == 0.0 {
            return Ok(StokesVector::default());
        }
        if self.ndf.is_delta() {
            return self.body_stokes_delta(n, l, v, s_in, ior);
        }
        let l_loc = self.to_local(n, l);
        let v_loc = self.to_local(n, v);
        let n_loc = Direction { x: 0.0, y: 0.0, z: 1.0 };
        let (inc, out) = make_frames(n_loc, l_loc, v_loc)?;
        let lam_l = self.smith.lambda(n.angle_to(l))?;
        let lam_v = self.smith.lambda(n.angle_to(v))?;
        let kappa = self.params.kappa;

        // Incident-side scalar per node: quadrature mass times the s0 the
        // depolarizer sees after transmission at this facet. Everything else
        // of the incident chain is annihilated.
        let nodes = &self.rule.nodes;
        let m = nodes.len();
        let mut b = vec![0.0; m];
        for (i, node) in nodes.iter().enumerate() {
            let dot = l_loc.dot(node.dir);
            if dot <= 0.0 {
                continue;
            }
            let (tp, tm) = trans_pm(ior, dot);
            let transmitted = if with_polarization && (s_in.s1 != 0.0 || s_in.s2 != 0.0) {
                let phi = frame_angle(&inc, node.dir).unwrap_or(0.0);
                let (s2p, c2p) = (2.0 * phi).sin_cos();
                tp * s_in.s0 + tm * (c2p * s_in.s1 - s2p * s_in.s2)
            } else {
                tp * s_in.s0
            };
            b[i] = self.wdu[i] * dot * transmitted;
        }

        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for (o, node) in nodes.iter().enumerate() {
            let vdot = v_loc.dot(node.dir);
            if vdot <= 0.0 {
                continue;
            }
            let d_o = node.dir;
            let mut inner = 0.0;
            for (i, node_i) in nodes.iter().enumerate() {
                let bi = b[i];
                if bi != 0.0 {
                    inner += bi * (kappa * (d_o.dot(node_i.dir) - 1.0)).exp();
                }
            }
            if inner == 0.0 {
                continue;
            }
            let mass = self.wdu[o] * vdot * inner;
            let (tp, tm) = trans_pm(ior, vdot);
            s0 += tp * mass;
            if with_polarization {
                let phi = frame_angle(&out, node.dir).unwrap_or(0.0);
                let (s2p, c2p) = (2.0 * phi).sin_cos();
                s1 += tm * c2p * mass;
                s2 += tm * s2p * mass;
            }
        }
        let scale = (kb / PI) / (cos_nv.max(GRAZING_EPS) * (1.0 + lam_l) * (1.0 + lam_v));
        if !(s0.is_finite() && s1.is_finite() && s2.is_finite()) {
            return Err(Error::NonFiniteIntegrand);
        }
        Ok(StokesVector::new(s0 * scale, s1 * scale, s2 * scale, 0.0))
    }

    /// Mirror-limit body term: the facet distribution collapses onto the
    /// macroscopic normal, the double integral reduces to the single facet
    /// N, and the correlation factor is pinned to one by its normalization.
    fn body_stokes_delta(
        &self,
        n: Direction,
        l: Direction,
        v: Direction,
        s_in: &StokesVector,
        ior: Ior,
    ) -> Result<StokesVector> {
        let cos_nl = n.dot(l);
        // Both rotator angles vanish: the frame y-axes point along the
        // projection of N by construction.
        let (tp_i, tm_i) = trans_pm(ior, cos_nl);
        let (tp_o, tm_o) = trans_pm(ior, n.dot(v));
        let transmitted = tp_i * s_in.s0 + tm_i * s_in.s1;
        let scale = (self.params.kb() / PI) * cos_nl * transmitted;
        Ok(StokesVector::new(tp_o * scale, tm_o * scale, 0.0, 0.0))
    }

    /// Sum of the surface and body components: scalar radiance plus the
    /// Stokes vector in the outgoing frame. Pass a surrogate to replace the
    /// body integral with its trained approximation.
    pub fn eval_total(
        &self,
        n: Direction,
        l: Direction,
        v: Direction,
        light: &LightSource,
        surrogate: Option<&BodySurrogate>,
    ) -> Result<(f64, StokesVector)> {
        let geom = ShadingGeometry::new(n, l, v)?;
        let s_surf = self.surface_stokes(&geom, light)?;
        let rad_surf = self.surface_radiance(&geom, light.e0)?;
        let (rad_body, s_body) = match surrogate {
            Some(sur) => sur.eval(&self.params, n, l, v, light)?,
            None => {
                let s = self.body_stokes(n, l, v, light)?;
                (s.s0, s)
            }
        };
        Ok((rad_surf + rad_body, s_surf.add(s_body)))
    }
}

/// Transmission coefficients (T+, T-) = ((Ts+Tp)/2, (Ts-Tp)/2) at the
/// incidence whose cosine is `cos_theta`. Shared by the scalar and Stokes
/// body paths so their s0 arithmetic is identical.
fn trans_pm(ior: Ior, cos_theta: f64) -> (f64, f64) {
    let (rs, rp) = fresnel_rs_rp(ior, cos_theta.clamp(-1.0, 1.0).acos());
    let (ts, tp) = (1.0 - rs, 1.0 - rp);
    (0.5 * (ts + tp), 0.5 * (ts - tp))
}
