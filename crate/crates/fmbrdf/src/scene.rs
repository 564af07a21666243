//! Synthetic polarimetric imaging: sphere and plane scenes with known
//! per-pixel normals under a directional light and an orthographic camera.
//! Renders per-pixel Stokes vectors, optionally pushes Gaussian noise
//! through the four simulated filter intensities, and reduces images to
//! the angle-binned evaluation curves.

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::baselines::{Baseline, BaselineParams};
use crate::brdf::{Fmbrdf, FmbrdfParams, LightSource};
use crate::geometry::{Direction, PolarizationFrame};
use crate::polarization::{dolp, filter_intensity, stokes_from_four, StokesVector};
use crate::reflectometry::{Observation, ObservedPixel};
use crate::surrogate::BodySurrogate;
use crate::{Error, Result};

/// Pixels with N dot V below this are cut from the sphere limb, and the
/// observation builder applies the same floor to N dot L. Staying above it
/// keeps every served pixel inside the surrogate's angle box.
pub const LIMB_COS_MIN: f64 = 0.1;

/// Sphere radius in normalized device coordinates; the silhouette stays
/// clear of the image border.
const SPHERE_NDC_RADIUS: f64 = 0.95;

/// Number of angle bins for the evaluation curves.
pub const CURVE_BINS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneShape {
    Sphere,
    Plane,
}

/// Additive Gaussian noise on the four simulated filter intensities,
/// in absolute radiance units. Zero sigma disables the noise pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> NoiseSpec {
        NoiseSpec { sigma: 0.0, seed: 0 }
    }
}

/// Reflectance model attached to the scene geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SceneModel {
    Fmbrdf(FmbrdfParams),
    Baseline(BaselineParams),
}

/// Complete synthetic capture description. The view axis points from the
/// surface toward the camera.
#[derive(Debug, Clone, Copy)]
pub struct SceneSpec {
    pub shape: SceneShape,
    pub width: u32,
    pub height: u32,
    pub v: Direction,
    pub light: LightSource,
    pub model: SceneModel,
    pub noise: NoiseSpec,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::Format(format!(
                "resolution {}x{} below the 8x8 minimum",
                self.width, self.height
            )));
        }
        if !(self.light.e0.is_finite() && self.light.e0 > 0.0) {
            return Err(Error::Format(format!(
                "light irradiance {} must be positive",
                self.light.e0
            )));
        }
        if !(self.noise.sigma.is_finite() && self.noise.sigma >= 0.0) {
            return Err(Error::Format(format!(
                "noise sigma {} must be nonnegative",
                self.noise.sigma
            )));
        }
        match &self.model {
            SceneModel::Fmbrdf(p) => p.validate(),
            SceneModel::Baseline(p) => p.validate(),
        }
    }

    /// Stable hash of every field, recorded in rendered images so an image
    /// can be traced back to the exact capture description.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update([match self.shape {
            SceneShape::Sphere => 1u8,
            SceneShape::Plane => 2u8,
        }]);
        h.update(self.width.to_le_bytes());
        h.update(self.height.to_le_bytes());
        let mut feed = |v: f64| h.update(v.to_le_bytes());
        for d in [self.v, self.light.l] {
            feed(d.x);
            feed(d.y);
            feed(d.z);
        }
        feed(self.light.e0);
        let s = self.light.stokes_in;
        for c in [s.s0, s.s1, s.s2, s.s3] {
            feed(c);
        }
        match &self.model {
            SceneModel::Fmbrdf(p) => {
                feed(3.0);
                for v in [p.mu, p.ks, p.rk, p.alpha, p.beta, p.kappa] {
                    feed(v);
                }
            }
            SceneModel::Baseline(p) => {
                feed(4.0);
                for b in serde_json::to_string(p).expect("baseline params serialize").bytes() {
                    feed(b as f64);
                }
            }
        }
        feed(self.noise.sigma);
        h.update(self.noise.seed.to_le_bytes());
        let digest = h.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Rendered polarimetric capture. Masked pixels hold zero Stokes vectors;
/// their stored normals are placeholders.
#[derive(Debug, Clone)]
pub struct PolarimetricImage {
    pub width: u32,
    pub height: u32,
    pub stokes: Vec<StokesVector>,
    pub normals: Vec<Direction>,
    pub mask: Vec<bool>,
    pub spec_hash: String,
}

impl PolarimetricImage {
    pub fn idx(&self, x: u32, y: u32) -> usize {
        (y * self.width + x) as usize
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Evaluation plumbing that is not part of the capture description: the
/// body-integral quadrature rule, an optional trained surrogate to replace
/// it, and the masking-table cache directory.
#[derive(Clone, Copy, Default)]
pub struct RenderOptions<'a> {
    pub rule: Option<(usize, usize)>,
    pub surrogate: Option<&'a BodySurrogate>,
    pub cache_dir: Option<&'a Path>,
}

/// Default quadrature for image rendering.
pub const RENDER_RULE: (usize, usize) = (32, 64);

enum Shader<'a> {
    Model(Box<Fmbrdf>, Option<&'a BodySurrogate>),
    Reference(Baseline),
}

impl Shader<'_> {
    fn eval(&self, n: Direction, light: &LightSource, v: Direction) -> Result<StokesVector> {
        match self {
            Shader::Model(model, sur) => {
                Ok(model.eval_total(n, light.l, v, light, *sur)?.1)
            }
            Shader::Reference(b) => b.stokes(n, light.l, v, light),
        }
    }
}

/// Renders the scene. Pixels are independent and evaluated in parallel;
/// the result is ordered by pixel index, so identical specs and options
/// produce identical images regardless of thread count. Per-pixel
/// evaluation failures (horizon, surrogate domain) turn into masked
/// pixels rather than aborting the image.
pub fn render(spec: &SceneSpec, opts: &RenderOptions) -> Result<PolarimetricImage> {
    spec.validate()?;
    let rule = opts.rule.unwrap_or(RENDER_RULE);
    let shader = match &spec.model {
        SceneModel::Fmbrdf(p) => Shader::Model(
            Box::new(Fmbrdf::with_cache(*p, rule.0, rule.1, opts.cache_dir)?),
            opts.surrogate,
        ),
        SceneModel::Baseline(p) => Shader::Reference(Baseline::build(p)?),
    };
    // World +Y as the camera up hint keeps image x aligned with world x for
    // the common straight-down view; the frame falls back gracefully when V
    // is parallel to it.
    let up = Direction { x: 0.0, y: 1.0, z: 0.0 };
    let frame = PolarizationFrame::from_z_and_up(spec.v, up);
    let (w, h) = (spec.width, spec.height);
    let npx = (w as usize) * (h as usize);
    let pixels: Vec<(StokesVector, Direction, bool)> = (0..npx)
        .into_par_iter()
        .map(|i| {
            let dummy = (StokesVector::default(), spec.v, false);
            let Some(n) = pixel_normal(spec, &frame, i) else {
                return dummy;
            };
            if n.dot(spec.v) < LIMB_COS_MIN {
                return dummy;
            }
            match shader.eval(n, &spec.light, spec.v) {
                Ok(s) => (s, n, true),
                Err(_) => dummy,
            }
        })
        .collect();
    let mut img = PolarimetricImage {
        width: w,
        height: h,
        stokes: pixels.iter().map(|p| p.0).collect(),
        normals: pixels.iter().map(|p| p.1).collect(),
        mask: pixels.iter().map(|p| p.2).collect(),
        spec_hash: spec.fingerprint(),
    };
    if spec.noise.sigma > 0.0 {
        apply_noise(&mut img, &spec.noise);
    }
    Ok(img)
}

/// Surface normal seen by pixel `i`, or None for background. The camera is
/// orthographic along -V with the image y-axis matching the world up
/// direction as closely as V allows.
fn pixel_normal(spec: &SceneSpec, frame: &PolarizationFrame, i: usize) -> Option<Direction> {
    match spec.shape {
        SceneShape::Plane => Some(Direction { x: 0.0, y: 0.0, z: 1.0 }),
        SceneShape::Sphere => {
            let (w, h) = (spec.width as usize, spec.height as usize);
            let (px, py) = (i % w, i / w);
            let u = ((px as f64 + 0.5) / w as f64) * 2.0 - 1.0;
            let t = 1.0 - ((py as f64 + 0.5) / h as f64) * 2.0;
            let r2 = (u * u + t * t) / (SPHERE_NDC_RADIUS * SPHERE_NDC_RADIUS);
            if r2 > 1.0 {
                return None;
            }
            let (nx, ny) = (u / SPHERE_NDC_RADIUS, t / SPHERE_NDC_RADIUS);
            let nz = (1.0 - r2).sqrt();
            let (fx, fy, fz) = (frame.x_axis, frame.y_axis, frame.z_axis);
            Some(Direction::new(
                nx * fx.x + ny * fy.x + nz * fz.x,
                nx * fx.y + ny * fy.y + nz * fz.y,
                nx * fx.z + ny * fy.z + nz * fz.z,
            ))
        }
    }
}

/// Measurement noise: each valid pixel's Stokes vector is expanded into the
/// four filter intensities, perturbed, clipped at zero, and reassembled.
/// Runs sequentially in pixel order so the draw sequence is scheduling
/// independent. A perturbation that lands outside the realizable cone masks
/// the pixel, as a saturated or broken measurement would.
fn apply_noise(img: &mut PolarimetricImage, noise: &NoiseSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    for i in 0..img.stokes.len() {
        if !img.mask[i] {
            continue;
        }
        let s = img.stokes[i];
        let mut iv = [0.0; 4];
        for (k, slot) in iv.iter_mut().enumerate() {
            let clean = filter_intensity(s, k as f64 * PI / 4.0);
            *slot = (clean + noise.sigma * gaussian(&mut rng)).max(0.0);
        }
        match stokes_from_four(iv[0], iv[1], iv[2], iv[3]) {
            Ok(noisy) => img.stokes[i] = noisy,
            Err(_) => {
                img.stokes[i] = StokesVector::default();
                img.mask[i] = false;
            }
        }
    }
}

/// Standard normal draw via Box-Muller; keeps the log argument positive.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Curve bin over the angle axis, in degrees for direct export.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveBin {
    pub angle_deg: f64,
    pub value: f64,
    pub count: usize,
}

/// Per-pixel scatter samples (angle in radians) plus their binned means.
#[derive(Debug, Clone)]
pub struct Curve {
    pub samples: Vec<(f64, f64)>,
    pub bins: Vec<CurveBin>,
}

fn binned(samples: &[(f64, f64)]) -> Vec<CurveBin> {
    let width = FRAC_PI_2 / CURVE_BINS as f64;
    let mut sums = vec![(0.0_f64, 0usize); CURVE_BINS];
    for &(angle, value) in samples {
        let b = ((angle / width) as usize).min(CURVE_BINS - 1);
        sums[b].0 += value;
        sums[b].1 += 1;
    }
    sums.iter()
        .enumerate()
        .map(|(b, &(sum, count))| CurveBin {
            angle_deg: (b as f64 + 0.5) * width * 180.0 / PI,
            value: if count > 0 { sum / count as f64 } else { 0.0 },
            count,
        })
        .collect()
}

fn curve_of(
    img: &PolarimetricImage,
    axis: Direction,
    value: impl Fn(StokesVector) -> Option<f64>,
) -> Result<Curve> {
    let mut samples = Vec::new();
    for i in 0..img.stokes.len() {
        if !img.mask[i] {
            continue;
        }
        let Some(v) = value(img.stokes[i]) else {
            continue;
        };
        let angle = img.normals[i].dot(axis).clamp(-1.0, 1.0).acos();
        samples.push((angle, v));
    }
    if samples.is_empty() {
        return Err(Error::NoValidPixels);
    }
    let bins = binned(&samples);
    Ok(Curve { samples, bins })
}

/// DoLP as a function of the angle between the normal and the view axis.
/// Pixels whose radiance is zero carry no polarization information and are
/// skipped.
pub fn dolp_curve(img: &PolarimetricImage, v: Direction) -> Result<Curve> {
    curve_of(img, v, |s| dolp(s).ok())
}

/// Radiance as a function of the angle between the normal and the light.
pub fn intensity_curve(img: &PolarimetricImage, l: Direction) -> Result<Curve> {
    curve_of(img, l, |s| Some(s.s0))
}

/// Model under a planar camera sweep.
pub enum SweepModel<'a> {
    Fmbrdf {
        model: &'a Fmbrdf,
        surrogate: Option<&'a BodySurrogate>,
    },
    Reference(&'a Baseline),
}

/// Rotates the camera around a flat sample in the plane containing the
/// light and the normal, and records radiance per camera angle. Angles are
/// measured from the normal, signed toward the light at positive values;
/// every angle must stay strictly inside (-pi/2, pi/2). A directional
/// light and an orthographic camera make the patch uniform, so its mean
/// radiance is the single-configuration value.
pub fn planar_sweep(
    model: &SweepModel,
    light: &LightSource,
    angles: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if light.l.y.abs() > 1e-9 {
        return Err(Error::Format(format!(
            "sweep light must lie in the x-z plane, got y component {}",
            light.l.y
        )));
    }
    let n = Direction { x: 0.0, y: 0.0, z: 1.0 };
    let mut out = Vec::with_capacity(angles.len());
    for &a in angles {
        if !(a.abs() < FRAC_PI_2) {
            return Err(Error::Format(format!(
                "sweep angle {a} outside (-pi/2, pi/2)"
            )));
        }
        let v = Direction::new(a.sin() * light.l.x.signum(), 0.0, a.cos());
        let s0 = match model {
            SweepModel::Fmbrdf { model, surrogate } => {
                model.eval_total(n, light.l, v, light, *surrogate)?.0
            }
            SweepModel::Reference(b) => b.stokes(n, light.l, v, light)?.s0,
        };
        out.push((a, s0));
    }
    Ok(out)
}

/// Converts a rendered image into fitter observations. Pixels must be
/// valid, lit and viewed above the angle floor, and carry positive
/// radiance; the same floor on both cosines keeps every observation
/// inside the surrogate's serving box.
pub fn to_observation(
    img: &PolarimetricImage,
    light: &LightSource,
    v: Direction,
) -> Result<Observation> {
    let mut pixels = Vec::new();
    for y in 0..img.height {
        for x in 0..img.width {
            let i = img.idx(x, y);
            if !img.mask[i] {
                continue;
            }
            let n = img.normals[i];
            if n.dot(light.l) < LIMB_COS_MIN || n.dot(v) < LIMB_COS_MIN {
                continue;
            }
            let s = img.stokes[i];
            let Ok(d) = dolp(s) else {
                continue;
            };
            pixels.push(ObservedPixel {
                xy: (x, y),
                n,
                intensity: s.s0,
                dolp: d,
            });
        }
    }
    if pixels.is_empty() {
        return Err(Error::NoValidPixels);
    }
    Ok(Observation {
        pixels,
        l: light.l,
        v,
        e0: light.e0,
    })
}
