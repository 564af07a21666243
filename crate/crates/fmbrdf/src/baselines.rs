//! Reference reflectance models used for comparison plots and ablations:
//! Lambertian, Oren-Nayar, Torrance-Sparrow, and a flat-surface polarimetric
//! diffuse+specular model. All radiometric outputs are outgoing radiance for
//! a directional source of irradiance `e0`, matching the main model, and all
//! Stokes outputs use the same outgoing reference frame.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::brdf::{Fmbrdf, FmbrdfParams, LightSource};
use crate::fresnel::Ior;
use crate::geometry::{Direction, ShadingGeometry};
use crate::polarization::{depolarizer, transmission_mueller, StokesVector};
use crate::{Error, Result};

/// Lambertian radiance. View-independent by construction.
pub fn lambertian(albedo: f64, n: Direction, l: Direction, e0: f64) -> f64 {
    albedo / PI * n.dot(l).max(0.0) * e0
}

/// Qualitative rough-diffuse radiance (first-order Oren-Nayar form) with
/// facet slope deviation `sigma` in radians. Reduces to Lambertian at
/// sigma = 0.
pub fn oren_nayar(
    albedo: f64,
    sigma: f64,
    n: Direction,
    l: Direction,
    v: Direction,
    e0: f64,
) -> f64 {
    let cos_nl = n.dot(l);
    if cos_nl <= 0.0 {
        return 0.0;
    }
    let cos_nv = n.dot(v).clamp(-1.0, 1.0);
    let theta_i = cos_nl.clamp(-1.0, 1.0).acos();
    let theta_v = cos_nv.acos();
    let s2 = sigma * sigma;
    let a = 1.0 - 0.5 * s2 / (s2 + 0.33);
    let b = 0.45 * s2 / (s2 + 0.09);
    // Azimuth difference between L and V around N, from their tangent-plane
    // projections. At normal incidence or normal view the projection vanishes
    // and so does the sin*tan factor, so the azimuth term is irrelevant there.
    let lp = (l.x - cos_nl * n.x, l.y - cos_nl * n.y, l.z - cos_nl * n.z);
    let vp = (v.x - cos_nv * n.x, v.y - cos_nv * n.y, v.z - cos_nv * n.z);
    let lp_norm = (lp.0 * lp.0 + lp.1 * lp.1 + lp.2 * lp.2).sqrt();
    let vp_norm = (vp.0 * vp.0 + vp.1 * vp.1 + vp.2 * vp.2).sqrt();
    let cos_dphi = if lp_norm < 1e-12 || vp_norm < 1e-12 {
        0.0
    } else {
        ((lp.0 * vp.0 + lp.1 * vp.1 + lp.2 * vp.2) / (lp_norm * vp_norm)).clamp(-1.0, 1.0)
    };
    let alpha = theta_i.max(theta_v);
    let beta = theta_i.min(theta_v);
    albedo / PI * cos_nl * e0 * (a + b * cos_dphi.max(0.0) * alpha.sin() * beta.tan())
}

/// Torrance-Sparrow specular model: the main model's surface term with the
/// Gaussian-tailed slope profile pinned at its Beckmann shape (beta = 2) and
/// no body component. Evaluating through the shared surface path keeps the
/// two models bit-identical where they are meant to coincide.
pub struct TorranceSparrow {
    model: Fmbrdf,
}

impl TorranceSparrow {
    pub fn new(ks: f64, sigma: f64, mu: f64) -> Result<TorranceSparrow> {
        let params = FmbrdfParams {
            mu,
            ks,
            rk: 0.0,
            alpha: sigma,
            beta: 2.0,
            kappa: 0.0,
        };
        // The quadrature rule only feeds the body integral, which is zero
        // here; the smallest rule keeps construction cheap.
        Ok(TorranceSparrow {
            model: Fmbrdf::new(params, 4, 8)?,
        })
    }

    pub fn radiance(&self, geom: &ShadingGeometry, e0: f64) -> Result<f64> {
        self.model.surface_radiance(geom, e0)
    }

    pub fn stokes(&self, geom: &ShadingGeometry, light: &LightSource) -> Result<StokesVector> {
        self.model.surface_stokes(geom, light)
    }
}

/// One-shot Torrance-Sparrow radiance. Builds the masking table on every
/// call; use the struct for sweeps.
pub fn torrance_sparrow(
    ks: f64,
    sigma: f64,
    mu: f64,
    geom: &ShadingGeometry,
    e0: f64,
) -> Result<f64> {
    TorranceSparrow::new(ks, sigma, mu)?.radiance(geom, e0)
}

/// Flat-surface polarimetric model: diffuse light refracts through the
/// macroscopic interface, depolarizes in the body, and refracts back out,
/// while the specular part is the Torrance-Sparrow term above. Unlike the
/// main model, the diffuse Fresnel factors see only the global normal, so
/// roughness never reaches the diffuse polarization.
pub struct PbrdfFlat {
    pub mu: f64,
    pub kd: f64,
    specular: TorranceSparrow,
}

impl PbrdfFlat {
    pub fn new(mu: f64, kd: f64, ks: f64, sigma: f64) -> Result<PbrdfFlat> {
        if !(mu.is_finite() && mu >= 1.0 && kd.is_finite() && kd >= 0.0) {
            return Err(Error::Format(format!(
                "invalid flat-model parameters mu={mu} kd={kd}"
            )));
        }
        Ok(PbrdfFlat {
            mu,
            kd,
            specular: TorranceSparrow::new(ks, sigma, mu)?,
        })
    }

    pub fn stokes(
        &self,
        n: Direction,
        l: Direction,
        v: Direction,
        light: &LightSource,
    ) -> Result<StokesVector> {
        let geom = ShadingGeometry::new(n, l, v)?;
        let ior = Ior::new(self.mu);
        // Both reference frames from make_frames aim their y-axis at N, which
        // is exactly the plane-of-incidence axis of a flat interface, so the
        // transmission Mueller matrices apply without rotators. The interior
        // depolarizer passes only s0, making the chain frame-safe end to end.
        let theta_i = geom.cos_nl.clamp(-1.0, 1.0).acos();
        let theta_o = geom.cos_nv.clamp(-1.0, 1.0).acos();
        let chain = transmission_mueller(ior, theta_o)
            .compose(&depolarizer(self.kd / PI * geom.cos_nl))
            .compose(&transmission_mueller(ior, theta_i));
        let diffuse = chain.apply(light.stokes_in);
        let spec = self.specular.stokes(&geom, light)?;
        Ok(diffuse.add(spec))
    }

    pub fn radiance(
        &self,
        n: Direction,
        l: Direction,
        v: Direction,
        light: &LightSource,
    ) -> Result<f64> {
        Ok(self.stokes(n, l, v, light)?.s0)
    }
}

/// Parameter set selecting one of the reference models, as stored in scene
/// configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaselineParams {
    Lambertian { albedo: f64 },
    OrenNayar { albedo: f64, sigma: f64 },
    TorranceSparrow { ks: f64, sigma: f64, mu: f64 },
    PbrdfFlat { mu: f64, kd: f64, ks: f64, sigma: f64 },
}

impl BaselineParams {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            BaselineParams::Lambertian { albedo } => albedo.is_finite() && albedo >= 0.0,
            BaselineParams::OrenNayar { albedo, sigma } => {
                albedo.is_finite() && albedo >= 0.0 && sigma.is_finite() && sigma >= 0.0
            }
            BaselineParams::TorranceSparrow { ks, sigma, mu } => {
                ks.is_finite() && ks >= 0.0 && sigma > 0.0 && mu.is_finite() && mu >= 1.0
            }
            BaselineParams::PbrdfFlat { mu, kd, ks, sigma } => {
                mu.is_finite()
                    && mu >= 1.0
                    && kd.is_finite()
                    && kd >= 0.0
                    && ks.is_finite()
                    && ks >= 0.0
                    && sigma > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Format(format!("invalid baseline parameters {self:?}")))
        }
    }
}

/// A reference model ready to evaluate per pixel. Precomputes the masking
/// table for the specular variants once.
pub enum Baseline {
    Lambertian { albedo: f64 },
    OrenNayar { albedo: f64, sigma: f64 },
    TorranceSparrow(TorranceSparrow),
    PbrdfFlat(PbrdfFlat),
}

impl Baseline {
    pub fn build(params: &BaselineParams) -> Result<Baseline> {
        params.validate()?;
        Ok(match *params {
            BaselineParams::Lambertian { albedo } => Baseline::Lambertian { albedo },
            BaselineParams::OrenNayar { albedo, sigma } => Baseline::OrenNayar { albedo, sigma },
            BaselineParams::TorranceSparrow { ks, sigma, mu } => {
                Baseline::TorranceSparrow(TorranceSparrow::new(ks, sigma, mu)?)
            }
            BaselineParams::PbrdfFlat { mu, kd, ks, sigma } => {
                Baseline::PbrdfFlat(PbrdfFlat::new(mu, kd, ks, sigma)?)
            }
        })
    }

    /// Outgoing Stokes vector at one shading point. The purely radiometric
    /// models emit unpolarized light.
    pub fn stokes(
        &self,
        n: Direction,
        l: Direction,
        v: Direction,
        light: &LightSource,
    ) -> Result<StokesVector> {
        match self {
            Baseline::Lambertian { albedo } => Ok(StokesVector::unpolarized(lambertian(
                *albedo, n, l, light.e0,
            ))),
            Baseline::OrenNayar { albedo, sigma } => Ok(StokesVector::unpolarized(oren_nayar(
                *albedo, *sigma, n, l, v, light.e0,
            ))),
            Baseline::TorranceSparrow(ts) => {
                let geom = ShadingGeometry::new(n, l, v)?;
                ts.stokes(&geom, light)
            }
            Baseline::PbrdfFlat(p) => p.stokes(n, l, v, light),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fresnel::transmittances;
    use crate::polarization::dolp;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_upper(rng: &mut ChaCha8Rng) -> Direction {
        let theta = rng.gen_range(0.0..1.45);
        let phi = rng.gen_range(0.0..2.0 * PI);
        Direction::from_spherical(theta, phi)
    }

    #[test]
    fn lambertian_closed_cases() {
        let n = Direction::new(0.0, 0.0, 1.0);
        let r = lambertian(0.7, n, n, 2.0);
        assert!((r - 0.7 / PI * 2.0).abs() < 1e-15);
        let horizon = Direction::new(1.0, 0.0, 0.0);
        assert_eq!(lambertian(0.7, n, horizon, 2.0), 0.0);
        let below = Direction::new(0.3, 0.0, -0.8);
        assert_eq!(lambertian(0.7, n, below, 2.0), 0.0);
    }

    #[test]
    fn oren_nayar_reduces_to_lambertian_at_zero_sigma() {
        let n = Direction::new(0.0, 0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let l = random_upper(&mut rng);
            let v = random_upper(&mut rng);
            let on = oren_nayar(0.6, 0.0, n, l, v, 1.5);
            let lam = lambertian(0.6, n, l, 1.5);
            assert!((on - lam).abs() < 1e-15, "on={on} lam={lam}");
        }
    }

    #[test]
    fn oren_nayar_normal_incidence_keeps_only_the_flat_term() {
        let n = Direction::new(0.0, 0.0, 1.0);
        let sigma = 0.5f64;
        let s2 = sigma * sigma;
        let a = 1.0 - 0.5 * s2 / (s2 + 0.33);
        let r = oren_nayar(0.6, sigma, n, n, n, 1.0);
        assert!((r - a * lambertian(0.6, n, n, 1.0)).abs() < 1e-15);
    }

    #[test]
    fn oren_nayar_peaks_toward_retroreflection() {
        let n = Direction::new(0.0, 0.0, 1.0);
        let l = Direction::from_spherical(0.9, 0.0);
        let retro = oren_nayar(0.6, 0.5, n, l, l, 1.0);
        let mirror = oren_nayar(0.6, 0.5, n, l, Direction::from_spherical(0.9, PI), 1.0);
        assert!(
            retro > mirror,
            "retro={retro} should exceed mirror={mirror}"
        );
    }

    #[test]
    fn torrance_sparrow_matches_shared_surface_path() {
        let ts = TorranceSparrow::new(0.3, 0.25, 1.5).unwrap();
        let full = Fmbrdf::new(
            FmbrdfParams {
                mu: 1.5,
                ks: 0.3,
                rk: 2.0,
                alpha: 0.25,
                beta: 2.0,
                kappa: 5.0,
            },
            8,
            16,
        )
        .unwrap();
        let n = Direction::new(0.0, 0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let l = random_upper(&mut rng);
            let v = random_upper(&mut rng);
            let geom = ShadingGeometry::new(n, l, v).unwrap();
            let a = ts.radiance(&geom, 1.0).unwrap();
            let b = full.surface_radiance(&geom, 1.0).unwrap();
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "a={a} b={b}");
        }
    }

    #[test]
    fn torrance_sparrow_peaks_at_mirror_configuration() {
        let ts = TorranceSparrow::new(0.3, 0.2, 1.5).unwrap();
        let n = Direction::new(0.0, 0.0, 1.0);
        let l = Direction::from_spherical(0.5, 0.0);
        let mirror = Direction::from_spherical(0.5, PI);
        let geom_m = ShadingGeometry::new(n, l, mirror).unwrap();
        let peak = ts.radiance(&geom_m, 1.0).unwrap();
        for phi in [0.0, 0.5 * PI, 0.75 * PI] {
            let v = Direction::from_spherical(0.5, phi);
            let geom = ShadingGeometry::new(n, l, v).unwrap();
            assert!(ts.radiance(&geom, 1.0).unwrap() < peak);
        }
    }

    #[test]
    fn torrance_sparrow_brdf_is_reciprocal() {
        let ts = TorranceSparrow::new(0.3, 0.3, 1.6).unwrap();
        let n = Direction::new(0.0, 0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..40 {
            let l = random_upper(&mut rng);
            let v = random_upper(&mut rng);
            let g_lv = ShadingGeometry::new(n, l, v).unwrap();
            let g_vl = ShadingGeometry::new(n, v, l).unwrap();
            let f_lv = ts.radiance(&g_lv, 1.0).unwrap() / g_lv.cos_nl;
            let f_vl = ts.radiance(&g_vl, 1.0).unwrap() / g_vl.cos_nl;
            assert!(
                (f_lv - f_vl).abs() <= 1e-12 * f_lv.abs().max(1e-12),
                "f_lv={f_lv} f_vl={f_vl}"
            );
        }
    }

    #[test]
    fn pbrdf_flat_diffuse_intensity_matches_transmittance_product() {
        let model = PbrdfFlat::new(1.5, 0.5, 0.0, 0.2).unwrap();
        let n = Direction::new(0.0, 0.0, 1.0);
        let l = Direction::from_spherical(0.7, 0.0);
        let v = Direction::from_spherical(0.4, 2.1);
        let light = LightSource::unpolarized(l, 2.0);
        let s = model.stokes(n, l, v, &light).unwrap();
        let ior = Ior::new(1.5);
        let t_i = {
            let (ts, tp, _) = transmittances(ior, 0.7);
            0.5 * (ts + tp)
        };
        let t_o = {
            let (ts, tp, _) = transmittances(ior, 0.4);
            0.5 * (ts + tp)
        };
        let expect = t_o * 0.5 / PI * t_i * 0.7f64.cos() * 2.0;
        assert!(
            (s.s0 - expect).abs() < 1e-12,
            "s0={} expect={expect}",
            s.s0
        );
    }

    #[test]
    fn pbrdf_flat_diffuse_polarization_grows_with_view_angle() {
        let model = PbrdfFlat::new(1.5, 0.5, 0.0, 0.2).unwrap();
        let n = Direction::new(0.0, 0.0, 1.0);
        let l = Direction::from_spherical(0.3, 0.0);
        let light = LightSource::unpolarized(l, 1.0);
        let mut last = -1.0;
        for theta_o in [1e-7, 0.3, 0.6, 0.9, 1.2, 1.4] {
            let v = Direction::from_spherical(theta_o, 2.0);
            let s = model.stokes(n, l, v, &light).unwrap();
            let d = dolp(s).unwrap();
            assert!(d > last, "dolp {d} at theta_o={theta_o} not above {last}");
            last = d;
        }
        // Straight-down view leaves the diffuse term unpolarized.
        let v0 = Direction::new(0.0, 0.0, 1.0);
        let s0 = model.stokes(n, l, v0, &light).unwrap();
        assert!(dolp(s0).unwrap() < 1e-12);
    }

    #[test]
    fn baseline_dispatch_matches_direct_calls() {
        let n = Direction::new(0.0, 0.0, 1.0);
        let l = Direction::from_spherical(0.6, 0.2);
        let v = Direction::from_spherical(0.8, 2.5);
        let light = LightSource::unpolarized(l, 1.3);
        let cases = [
            BaselineParams::Lambertian { albedo: 0.4 },
            BaselineParams::OrenNayar {
                albedo: 0.4,
                sigma: 0.4,
            },
            BaselineParams::TorranceSparrow {
                ks: 0.3,
                sigma: 0.25,
                mu: 1.5,
            },
            BaselineParams::PbrdfFlat {
                mu: 1.5,
                kd: 0.4,
                ks: 0.2,
                sigma: 0.25,
            },
        ];
        for params in &cases {
            params.validate().unwrap();
            let model = Baseline::build(params).unwrap();
            let s = model.stokes(n, l, v, &light).unwrap();
            assert!(s.s0.is_finite() && s.s0 >= 0.0);
            assert!(s.is_realizable());
        }
        let direct = lambertian(0.4, n, l, 1.3);
        let via = Baseline::build(&cases[0])
            .unwrap()
            .stokes(n, l, v, &light)
            .unwrap();
        assert_eq!(via.s0, direct);
    }

    #[test]
    fn baseline_params_round_trip_through_json() {
        let p = BaselineParams::PbrdfFlat {
            mu: 1.5,
            kd: 0.4,
            ks: 0.2,
            sigma: 0.25,
        };
        let text = serde_json::to_string(&p).unwrap();
        let back: BaselineParams = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
        assert!(text.contains("\"model\":\"pbrdf_flat\""));
    }

    #[test]
    fn invalid_baseline_params_are_rejected() {
        assert!(BaselineParams::Lambertian { albedo: -0.1 }.validate().is_err());
        assert!(BaselineParams::TorranceSparrow {
            ks: 0.3,
            sigma: 0.0,
            mu: 1.5
        }
        .validate()
        .is_err());
        assert!(BaselineParams::PbrdfFlat {
            mu: 0.9,
            kd: 0.4,
            ks: 0.2,
            sigma: 0.25
        }
        .validate()
        .is_err());
    }
}
