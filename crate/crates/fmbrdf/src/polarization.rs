//! Stokes vectors and the Mueller matrices the model composes.
//!
//! Linear polarization only: s3 is carried through the 4x4 algebra as a
//! structural zero so the matrices keep the shape they are usually printed
//! in, but nothing in the crate ever produces circular polarization.

use crate::fresnel::{fresnel_rs_rp, transmittances, Ior};
use crate::{Error, Result};

/// Stokes vector (s0, s1, s2, s3) in radiance-scaled units.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StokesVector {
    pub s0: f64,
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
}

impl StokesVector {
    pub fn new(s0: f64, s1: f64, s2: f64, s3: f64) -> StokesVector {
        StokesVector { s0, s1, s2, s3 }
    }

    pub fn unpolarized(s0: f64) -> StokesVector {
        StokesVector::new(s0, 0.0, 0.0, 0.0)
    }

    /// Physical realizability: s0 >= 0 and linear polarization magnitude not
    /// exceeding s0, with 1e-9 relative slack for accumulated rounding.
    pub fn is_realizable(self) -> bool {
        self.s0 >= 0.0
            && (self.s1 * self.s1 + self.s2 * self.s2).sqrt()
                <= self.s0 * (1.0 + 1e-9) + 1e-12
    }

    pub fn scale(self, k: f64) -> StokesVector {
        StokesVector::new(k * self.s0, k * self.s1, k * self.s2, k * self.s3)
    }

    pub fn add(self, o: StokesVector) -> StokesVector {
        StokesVector::new(
            self.s0 + o.s0,
            self.s1 + o.s1,
            self.s2 + o.s2,
            self.s3 + o.s3,
        )
    }
}

/// Intensity behind a linear polarization filter at angle `phi_c`.
pub fn filter_intensity(s: StokesVector, phi_c: f64) -> f64 {
    0.5 * (s.s0 + s.s1 * (2.0 * phi_c).cos() + s.s2 * (2.0 * phi_c).sin())
}

/// Reconstructs a Stokes vector from intensities at filter angles
/// 0, 45, 90, and 135 degrees.
pub fn stokes_from_four(i0: f64, i45: f64, i90: f64, i135: f64) -> Result<StokesVector> {
    let s = StokesVector::new(i0 + i90, i0 - i90, i45 - i135, 0.0);
    if !s.is_realizable() {
        return Err(Error::InconsistentFilterIntensities);
    }
    Ok(s)
}

/// Degree of linear polarization, in [0, 1].
pub fn dolp(s: StokesVector) -> Result<f64> {
    if s.s0 <= 0.0 {
        return Err(Error::ZeroRadianceStokes);
    }
    Ok(((s.s1 * s.s1 + s.s2 * s.s2).sqrt() / s.s0).min(1.0))
}

/// Angle of linear polarization in (-pi/2, pi/2]; 0 for unpolarized input.
pub fn aolp(s: StokesVector) -> Result<f64> {
    if s.s0 <= 0.0 {
        return Err(Error::ZeroRadianceStokes);
    }
    if s.s1 == 0.0 && s.s2 == 0.0 {
        return Ok(0.0);
    }
    let mut a = 0.5 * s.s2.atan2(s.s1);
    if a <= -std::f64::consts::FRAC_PI_2 {
        a += std::f64::consts::PI;
    }
    Ok(a)
}

/// 4x4 real Mueller matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuellerMatrix {
    pub m: [[f64; 4]; 4],
}

impl MuellerMatrix {
    pub fn identity() -> MuellerMatrix {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        MuellerMatrix { m }
    }

    pub fn apply(&self, s: StokesVector) -> StokesVector {
        let v = [s.s0, s.s1, s.s2, s.s3];
        let mut out = [0.0; 4];
        for (o, row) in out.iter_mut().zip(&self.m) {
            *o = row[0] * v[0] + row[1] * v[1] + row[2] * v[2] + row[3] * v[3];
        }
        StokesVector::new(out[0], out[1], out[2], out[3])
    }

    pub fn compose(&self, rhs: &MuellerMatrix) -> MuellerMatrix {
        let mut m = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                m[i][j] = (0..4).map(|k| self.m[i][k] * rhs.m[k][j]).sum();
            }
        }
        MuellerMatrix { m }
    }
}

/// Frame rotator C(phi): rotates the polarization reference by phi about the
/// propagation axis, acting on (s1, s2) through double angles.
pub fn rotator(phi: f64) -> MuellerMatrix {
    let (s, c) = (2.0 * phi).sin_cos();
    MuellerMatrix {
        m: [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, c, -s, 0.0],
            [0.0, s, c, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ],
    }
}

/// Mueller matrix of specular reflection off the dielectric at incidence
/// `theta`. The retardance term cos(delta) is -1 below the Brewster angle
/// and +1 above it.
pub fn reflection_mueller(ior: Ior, theta: f64) -> MuellerMatrix {
    let (rs, rp) = fresnel_rs_rp(ior, theta);
    let rplus = 0.5 * (rs + rp);
    let rminus = 0.5 * (rs - rp);
    let rcross = (rs * rp).sqrt();
    let cos_delta = if theta < ior.brewster() { -1.0 } else { 1.0 };
    let tail = rcross * cos_delta;
    MuellerMatrix {
        m: [
            [rplus, rminus, 0.0, 0.0],
            [rminus, rplus, 0.0, 0.0],
            [0.0, 0.0, tail, 0.0],
            [0.0, 0.0, 0.0, tail],
        ],
    }
}

/// Mueller matrix of transmission through the dielectric interface at
/// incidence `theta`.
pub fn transmission_mueller(ior: Ior, theta: f64) -> MuellerMatrix {
    let (ts, tp, _) = transmittances(ior, theta);
    let tplus = 0.5 * (ts + tp);
    let tminus = 0.5 * (ts - tp);
    let tcross = (ts * tp).sqrt();
    MuellerMatrix {
        m: [
            [tplus, tminus, 0.0, 0.0],
            [tminus, tplus, 0.0, 0.0],
            [0.0, 0.0, tcross, 0.0],
            [0.0, 0.0, 0.0, tcross],
        ],
    }
}

/// Ideal depolarizer: passes k times the radiance, strips all polarization.
pub fn depolarizer(k: f64) -> MuellerMatrix {
    let mut m = [[0.0; 4]; 4];
    m[0][0] = k;
    MuellerMatrix { m }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    #[test]
    fn filter_intensity_closed_cases() {
        let s = StokesVector::new(2.0, 0.0, 0.0, 0.0);
        for phi in [0.0, 0.4, 1.3] {
            assert!((filter_intensity(s, phi) - 1.0).abs() < 1e-15);
        }
        let s = StokesVector::new(1.0, 1.0, 0.0, 0.0);
        assert!((filter_intensity(s, 0.0) - 1.0).abs() < 1e-15);
        assert!(filter_intensity(s, FRAC_PI_2).abs() < 1e-15);
        let s = StokesVector::new(2.0, 1.0, 0.0, 0.0);
        assert!((filter_intensity(s, FRAC_PI_4) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn four_filter_reconstruction() {
        let s = stokes_from_four(1.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(s, StokesVector::new(2.0, 0.0, 0.0, 0.0));
        let s = stokes_from_four(1.0, 0.5, 0.0, 0.5).unwrap();
        assert_eq!(s, StokesVector::new(1.0, 1.0, 0.0, 0.0));
        assert!(matches!(
            stokes_from_four(1.0, 0.0, 0.0, 1.5),
            Err(Error::InconsistentFilterIntensities)
        ));
    }

    #[test]
    fn dolp_aolp_closed_cases() {
        assert!((dolp(StokesVector::new(2.0, 1.0, 0.0, 0.0)).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(aolp(StokesVector::new(2.0, 1.0, 0.0, 0.0)).unwrap(), 0.0);
        assert_eq!(dolp(StokesVector::unpolarized(1.0)).unwrap(), 0.0);
        assert_eq!(aolp(StokesVector::unpolarized(1.0)).unwrap(), 0.0);
        let s = StokesVector::new(1.0, 0.0, 1.0, 0.0);
        assert!((dolp(s).unwrap() - 1.0).abs() < 1e-15);
        assert!((aolp(s).unwrap() - FRAC_PI_4).abs() < 1e-15);
        assert!(matches!(
            dolp(StokesVector::unpolarized(0.0)),
            Err(Error::ZeroRadianceStokes)
        ));
    }

    #[test]
    fn rotator_cases() {
        let id = rotator(0.0);
        assert_eq!(id, MuellerMatrix::identity());
        let s = rotator(FRAC_PI_2).apply(StokesVector::new(1.0, 1.0, 0.0, 0.0));
        assert!((s.s0 - 1.0).abs() < 1e-15 && (s.s1 + 1.0).abs() < 1e-12);
    }

    #[test]
    fn reflection_mueller_cases() {
        let ior = Ior::new(1.5);
        let m = reflection_mueller(ior, 0.0);
        assert!((m.m[0][0] - 0.04).abs() < 1e-15);
        assert!(m.m[0][1].abs() < 1e-15);
        // At Brewster, reflecting unpolarized light yields DoLP 1.
        let s = reflection_mueller(ior, ior.brewster()).apply(StokesVector::unpolarized(1.0));
        assert!((dolp(s).unwrap() - 1.0).abs() < 1e-9);
        // The retardance tail flips sign across Brewster.
        let below = reflection_mueller(ior, ior.brewster() - 0.01).m[3][3];
        let above = reflection_mueller(ior, ior.brewster() + 0.01).m[3][3];
        assert!(below < 0.0 && above > 0.0);
    }

    #[test]
    fn transmission_mueller_cases() {
        assert_eq!(transmission_mueller(Ior::new(1.0), 0.9), MuellerMatrix::identity());
        let m = transmission_mueller(Ior::new(1.5), 0.0);
        assert!((m.m[0][0] - 0.96).abs() < 1e-15);
        assert!(m.m[0][1].abs() < 1e-15);
    }

    #[test]
    fn unpolarized_throughput_matches_scalar_fresnel() {
        let ior = Ior::new(1.5);
        for i in 0..=20 {
            let theta = FRAC_PI_2 * i as f64 / 20.0;
            let (rs, rp) = fresnel_rs_rp(ior, theta);
            let (_, _, tu) = transmittances(ior, theta);
            let r = reflection_mueller(ior, theta).apply(StokesVector::unpolarized(1.0));
            let t = transmission_mueller(ior, theta).apply(StokesVector::unpolarized(1.0));
            assert!((r.s0 - 0.5 * (rs + rp)).abs() < 1e-15);
            assert!((t.s0 - tu).abs() < 1e-15);
        }
    }

    #[test]
    fn depolarizer_cases() {
        let s = depolarizer(1.0).apply(StokesVector::new(1.0, 1.0, 1.0, 0.0));
        assert_eq!(s, StokesVector::unpolarized(1.0));
        let s = depolarizer(0.0).apply(StokesVector::new(1.0, 0.5, 0.2, 0.0));
        assert_eq!(s, StokesVector::unpolarized(0.0));
    }

    fn arb_realizable() -> impl Strategy<Value = StokesVector> {
        (0.01..10.0_f64, 0.0..1.0_f64, 0.0..(2.0 * PI))
            .prop_map(|(s0, p, ang)| {
                StokesVector::new(s0, s0 * p * ang.cos(), s0 * p * ang.sin(), 0.0)
            })
    }

    proptest! {
        #[test]
        fn reconstruction_round_trip(s in arb_realizable()) {
            let i0 = filter_intensity(s, 0.0);
            let i45 = filter_intensity(s, FRAC_PI_4);
            let i90 = filter_intensity(s, FRAC_PI_2);
            let i135 = filter_intensity(s, 3.0 * FRAC_PI_4);
            let r = stokes_from_four(i0, i45, i90, i135).unwrap();
            prop_assert!((r.s0 - s.s0).abs() < 1e-12 * s.s0.max(1.0));
            prop_assert!((r.s1 - s.s1).abs() < 1e-12 * s.s0.max(1.0));
            prop_assert!((r.s2 - s.s2).abs() < 1e-12 * s.s0.max(1.0));
        }

        #[test]
        fn rotator_group_property(a in -PI..PI, b in -PI..PI, s in arb_realizable()) {
            let lhs = rotator(a).compose(&rotator(b)).apply(s);
            let rhs = rotator(a + b).apply(s);
            prop_assert!((lhs.s0 - rhs.s0).abs() < 1e-12);
            prop_assert!((lhs.s1 - rhs.s1).abs() < 1e-9);
            prop_assert!((lhs.s2 - rhs.s2).abs() < 1e-9);
        }

        #[test]
        fn constructors_preserve_realizability(
            s in arb_realizable(),
            theta in 0.0..FRAC_PI_2,
            phi in -PI..PI,
            k in 0.0..1.0_f64,
        ) {
            let ior = Ior::new(1.5);
            for m in [
                rotator(phi),
                reflection_mueller(ior, theta),
                transmission_mueller(ior, theta),
                depolarizer(k),
            ] {
                prop_assert!(m.apply(s).is_realizable());
            }
        }
    }
}
