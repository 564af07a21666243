//! Unit vectors, shading configurations, and polarization reference frames.
//!
//! Everything downstream measures angles against the frames built here, so the
//! frame convention is pinned down exactly once: the z-axis of a frame is the
//! propagation direction (L for incident light, -V for outgoing), and the
//! y-axis is the component of the macroscopic normal orthogonal to z. Stokes
//! vectors produced anywhere in the crate are reproducible bit for bit because
//! this construction has no arbitrary choices left.

use crate::{Error, Result};

/// Unit 3-vector. Construction normalizes and rejects near-zero input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Direction {
    /// Builds a unit vector from arbitrary components.
    ///
    /// Panics if the input norm is below 1e-12; callers that can feed a
    /// degenerate vector guard against it first.
    pub fn new(x: f64, y: f64, z: f64) -> Direction {
        let n = (x * x + y * y + z * z).sqrt();
        assert!(n > 1e-12, "cannot normalize near-zero vector");
        Direction {
            x: x / n,
            y: y / n,
            z: z / n,
        }
    }

    pub fn dot(self, o: Direction) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Direction) -> (f64, f64, f64) {
        (
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn neg(self) -> Direction {
        Direction {
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Spherical angles about +Z: returns (theta, phi) with theta ∈ [0, π],
    /// phi ∈ (−π, π].
    pub fn to_spherical(self) -> (f64, f64) {
        let theta = self.z.clamp(-1.0, 1.0).acos();
        let phi = if self.x == 0.0 && self.y == 0.0 {
            0.0
        } else {
            self.y.atan2(self.x)
        };
        (theta, phi)
    }

    /// Unit vector at spherical angles (theta, phi) about +Z.
    pub fn from_spherical(theta: f64, phi: f64) -> Direction {
        let st = theta.sin();
        Direction {
            x: st * phi.cos(),
            y: st * phi.sin(),
            z: theta.cos(),
        }
    }

    /// Angle in radians to another unit vector, in [0, π].
    pub fn angle_to(self, o: Direction) -> f64 {
        self.dot(o).clamp(-1.0, 1.0).acos()
    }
}

/// Halfway vector between two directions sharing a hemisphere.
pub fn halfway(l: Direction, v: Direction) -> Result<Direction> {
    let (x, y, z) = (l.x + v.x, l.y + v.y, l.z + v.z);
    let n = (x * x + y * y + z * z).sqrt();
    if n < 1e-9 {
        return Err(Error::AntipodalDirections);
    }
    Ok(Direction {
        x: x / n,
        y: y / n,
        z: z / n,
    })
}

/// The full set of angles a BRDF evaluation needs for one (N, L, V) triple.
#[derive(Debug, Clone, Copy)]
pub struct ShadingGeometry {
    pub n: Direction,
    pub l: Direction,
    pub v: Direction,
    pub h: Direction,
    /// Angle between N and the halfway vector.
    pub theta_h: f64,
    /// Angle between L (equivalently V) and the halfway vector.
    pub theta_d: f64,
    pub cos_nl: f64,
    pub cos_nv: f64,
}

impl ShadingGeometry {
    pub fn new(n: Direction, l: Direction, v: Direction) -> Result<ShadingGeometry> {
        let cos_nl = n.dot(l);
        let cos_nv = n.dot(v);
        if cos_nl <= 0.0 || cos_nv <= 0.0 {
            return Err(Error::BelowHorizon);
        }
        let h = halfway(l, v)?;
        Ok(ShadingGeometry {
            n,
            l,
            v,
            h,
            theta_h: n.angle_to(h),
            theta_d: l.angle_to(h),
            cos_nl,
            cos_nv,
        })
    }
}

/// Right-handed orthonormal basis carried with a propagating Stokes vector.
#[derive(Debug, Clone, Copy)]
pub struct PolarizationFrame {
    pub x_axis: Direction,
    pub y_axis: Direction,
    pub z_axis: Direction,
}

impl PolarizationFrame {
    /// Frame whose y-axis is the component of `up_hint` orthogonal to `z`.
    ///
    /// Falls back to global +X, then +Y, when the hint is parallel to z; the
    /// fallback order is part of the output contract, not a free choice.
    pub fn from_z_and_up(z: Direction, up_hint: Direction) -> PolarizationFrame {
        let mut y = orthogonal_component(up_hint, z);
        if y.is_none() {
            y = orthogonal_component(Direction { x: 1.0, y: 0.0, z: 0.0 }, z);
        }
        if y.is_none() {
            y = orthogonal_component(Direction { x: 0.0, y: 1.0, z: 0.0 }, z);
        }
        let y = y.expect("two fallback axes cannot both be parallel to z");
        let (cx, cy, cz) = y.cross(z);
        PolarizationFrame {
            x_axis: Direction::new(cx, cy, cz),
            y_axis: y,
            z_axis: z,
        }
    }
}

fn orthogonal_component(v: Direction, z: Direction) -> Option<Direction> {
    let d = v.dot(z);
    let (x, y, w) = (v.x - d * z.x, v.y - d * z.y, v.z - d * z.z);
    let n = (x * x + y * y + w * w).sqrt();
    if n < 1e-9 {
        None
    } else {
        Some(Direction {
            x: x / n,
            y: y / n,
            z: w / n,
        })
    }
}

/// Incident and outgoing polarization frames for a shading configuration.
///
/// Incident z = L, outgoing z = −V; both y-axes point toward the macroscopic
/// normal so the two frames agree on what "vertical" means.
pub fn make_frames(
    n: Direction,
    l: Direction,
    v: Direction,
) -> Result<(PolarizationFrame, PolarizationFrame)> {
    if n.dot(l) <= 0.0 || n.dot(v) <= 0.0 {
        return Err(Error::BelowHorizon);
    }
    Ok((
        PolarizationFrame::from_z_and_up(l, n),
        PolarizationFrame::from_z_and_up(v.neg(), n),
    ))
}

/// Signed angle in (−π, π] from the frame's y-axis to the projection of `m`
/// onto the frame's x-y plane, measured about +z.
pub fn frame_angle(frame: &PolarizationFrame, m: Direction) -> Result<f64> {
    let a = m.dot(frame.x_axis);
    let b = m.dot(frame.y_axis);
    if (a * a + b * b).sqrt() < 1e-12 {
        return Err(Error::NormalParallelToPropagation);
    }
    // atan2(a, b) measures from +y toward +x, which is clockwise about +z;
    // negate to get the counterclockwise convention used by the rotators.
    let phi = -a.atan2(b);
    Ok(if phi <= -std::f64::consts::PI {
        phi + 2.0 * std::f64::consts::PI
    } else {
        phi
    })
}
