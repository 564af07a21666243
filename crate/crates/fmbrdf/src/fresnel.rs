//! Fresnel reflectance and transmittance for a dielectric interface.
//!
//! Only the energy (intensity-ratio) forms are needed: Rs and Rp straight from
//! the squared-ratio formulas, with transmittance as their complement. The
//! relative index is always >= 1 here (light entering the denser medium), so
//! Snell refraction never hits total internal reflection.

use std::f64::consts::FRAC_PI_2;

/// Relative index of refraction of the material, >= 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ior {
    pub mu: f64,
}

impl Ior {
    pub fn new(mu: f64) -> Ior {
        assert!(mu >= 1.0, "relative index must be >= 1");
        Ior { mu }
    }

    /// Brewster angle arctan(mu), where Rp vanishes.
    pub fn brewster(self) -> f64 {
        self.mu.atan()
    }
}

/// Snaps an angle of incidence into [0, pi/2]. Quadrature nodes can land a
/// hair outside; anything worse than 1e-9 is a caller bug.
fn clamp_theta(theta: f64) -> f64 {
    debug_assert!(
        theta > -1e-9 && theta < FRAC_PI_2 + 1e-9,
        "incidence angle {theta} outside [0, pi/2]"
    );
    theta.clamp(0.0, FRAC_PI_2)
}

/// Refraction angle from Snell's law, asin(sin(theta) / mu).
pub fn snell_theta_t(ior: Ior, theta: f64) -> f64 {
    let theta = clamp_theta(theta);
    (theta.sin() / ior.mu).clamp(-1.0, 1.0).asin()
}

/// Perpendicular and parallel intensity reflectances (Rs, Rp).
pub fn fresnel_rs_rp(ior: Ior, theta: f64) -> (f64, f64) {
    let theta = clamp_theta(theta);
    let theta_t = snell_theta_t(ior, theta);
    let (ci, ct) = (theta.cos(), theta_t.cos());
    let mu = ior.mu;
    let rs = ((ci - mu * ct) / (ci + mu * ct)).powi(2);
    let rp = ((mu * ci - ct) / (mu * ci + ct)).powi(2);
    (rs.min(1.0), rp.min(1.0))
}

/// Intensity transmittances (Ts, Tp) and the unpolarized average.
pub fn transmittances(ior: Ior, theta: f64) -> (f64, f64, f64) {
    let (rs, rp) = fresnel_rs_rp(ior, theta);
    let (ts, tp) = (1.0 - rs, 1.0 - rp);
    (ts, tp, 0.5 * (ts + tp))
}
