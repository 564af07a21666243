//! Command-line front end. Renders synthetic polarimetric scenes, fits
//! material parameters to rendered images, exports angle curves, trains the
//! body-reflection surrogate, and runs a fast invariant suite.
//!
//! Every command is deterministic for a fixed config: the thread cap only
//! changes wall time, never results, and each output directory gets a
//! manifest with content hashes of the config, the inputs, and the files
//! written. Angles cross the CLI boundary in degrees.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fmbrdf::brdf::{Fmbrdf, FmbrdfParams, LightSource};
use fmbrdf::config::Config;
use fmbrdf::fresnel::{fresnel_rs_rp, Ior};
use fmbrdf::geometry::Direction;
use fmbrdf::io;
use fmbrdf::microfacet::{Ndf, SmithTable};
use fmbrdf::polarization::{
    dolp, filter_intensity, reflection_mueller, rotator, stokes_from_four, StokesVector,
};
use fmbrdf::quadrature::{gauss_legendre, HemisphereRule};
use fmbrdf::reflectometry::{self, EvalMode};
use fmbrdf::scene::{self, CurveBin, NoiseSpec, RenderOptions, SceneSpec};
use fmbrdf::surrogate::{generate_training_set, BodySurrogate};
use fmbrdf::{Error, Result};

#[derive(Parser)]
#[command(name = "fmbrdf", version, about = "Polarimetric reflectance toolkit")]
struct Cli {
    /// Cap on worker threads. Results never depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the configured scene to Stokes PFM images, PNG previews, and curve CSVs.
    Render(RenderCmd),
    /// Recover material parameters from a rendered polarimetric image.
    Fit(FitCmd),
    /// Export DoLP and intensity curves of the configured model, optionally against an image.
    Curves(CurvesCmd),
    /// Train the body-reflection surrogate, or re-check a trained model file.
    TrainSurrogate(TrainCmd),
    /// Run the fast invariant checks and exit 0/1.
    Selftest,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Oracle,
    Surrogate,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> EvalMode {
        match m {
            ModeArg::Oracle => EvalMode::Oracle,
            ModeArg::Surrogate => EvalMode::Surrogate,
        }
    }
}

#[derive(Args)]
struct RenderCmd {
    /// Scene config JSON; omitted fields take their documented defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// How the main model is evaluated.
    #[arg(long, value_enum, default_value = "oracle")]
    mode: ModeArg,
    /// Trained surrogate binary; required in surrogate mode.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct FitCmd {
    /// Config JSON; the scene section describes the capture (light, view,
    /// irradiance) and the fit section the solver.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Image stem as written by `render` (the path before `.s0.pfm`).
    #[arg(long)]
    image: PathBuf,
    /// Output directory for the fit report and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Override the configured evaluation mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Drop the polarization residual and fit intensity only.
    #[arg(long)]
    no_polarization: bool,
    /// Trained surrogate binary; required in surrogate mode.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct CurvesCmd {
    /// Config JSON naming the model to plot.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for CSVs and plots.
    #[arg(long)]
    out: PathBuf,
    /// Existing image stem. When given, its curves are exported and the
    /// configured model is rendered noise-free for comparison.
    #[arg(long)]
    image: Option<PathBuf>,
    /// How the model is evaluated for its predicted curves.
    #[arg(long, value_enum, default_value = "oracle")]
    mode: ModeArg,
    /// Trained surrogate binary; required in surrogate mode.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct TrainCmd {
    /// Config JSON; the training section selects set size, oracle rule, and
    /// network shape.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the model binary and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Instead of training, load the model, regenerate its validation set
    /// from the embedded seed, and compare the stored error.
    #[arg(long)]
    validate: bool,
    /// Model path; defaults to `<out>/model.bin`.
    #[arg(long)]
    model: Option<PathBuf>,
}

/// Validation bars a trained surrogate must meet before exit code 0:
/// relative error on the intensity output and absolute error on the
/// polarization outputs over held-out samples.
const QUALITY_MAX_REL_S0: f64 = 0.02;
const QUALITY_MAX_ABS_DOLP: f64 = 0.02;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // Fails only if a pool already exists, which cannot happen this
        // early; the default pool is fine in that case anyway.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    let result = match cli.command {
        Command::Render(args) => cmd_render(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Curves(args) => cmd_curves(args),
        Command::TrainSurrogate(args) => cmd_train(args),
        Command::Selftest => cmd_selftest(),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Io(_) | Error::Format(_) => 2,
                Error::TrainingDiverged(_) => 4,
                _ => 3,
            })
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn cache_dir() -> Option<PathBuf> {
    std::env::var_os("FMBRDF_CACHE_DIR").map(PathBuf::from)
}

fn load_model_if(mode: ModeArg, model: &Option<PathBuf>) -> Result<Option<BodySurrogate>> {
    match mode {
        ModeArg::Oracle => Ok(None),
        ModeArg::Surrogate => {
            let path = model.as_ref().ok_or_else(|| {
                Error::Format("surrogate mode needs --model <file>".into())
            })?;
            Ok(Some(BodySurrogate::load(path)?))
        }
    }
}

fn sha256_str(data: &str) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(data.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Reproducibility record written next to every command's outputs. Content
/// hashes only, no timestamps, so identical runs produce identical bytes.
#[derive(serde::Serialize)]
struct Manifest {
    version: u32,
    command: &'static str,
    config_sha256: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    summary: serde_json::Value,
}

impl Manifest {
    fn new(command: &'static str, cfg: &Config) -> Result<Manifest> {
        let canonical = serde_json::to_string(cfg)
            .map_err(|e| Error::Format(format!("serializing config: {e}")))?;
        Ok(Manifest {
            version: 1,
            command,
            config_sha256: sha256_str(&canonical),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            summary: serde_json::Value::Null,
        })
    }

    fn add_input(&mut self, path: &Path) -> Result<()> {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        self.inputs.insert(name, io::sha256_hex(path)?);
        Ok(())
    }

    fn add_output(&mut self, path: &Path) -> Result<()> {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        self.outputs.insert(name, io::sha256_hex(path)?);
        Ok(())
    }

    fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("serializing manifest: {e}")))?;
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

fn render_spec(spec: &SceneSpec, sur: Option<&BodySurrogate>) -> Result<scene::PolarimetricImage> {
    let cache = cache_dir();
    let opts = RenderOptions {
        rule: None,
        surrogate: sur,
        cache_dir: cache.as_deref(),
    };
    scene::render(spec, &opts)
}

fn cmd_render(args: RenderCmd) -> Result<u8> {
    let cfg = load_config(&args.config)?;
    let spec = cfg.scene.to_scene_spec()?;
    let sur = load_model_if(args.mode, &args.model)?;
    std::fs::create_dir_all(&args.out)?;
    eprintln!("rendering {}x{} ...", spec.width, spec.height);
    let img = render_spec(&spec, sur.as_ref())?;

    let mut manifest = Manifest::new("render", &cfg)?;
    if let Some(m) = &args.model {
        manifest.add_input(m)?;
    }
    let stem = args.out.join("render");
    for path in io::write_image(&img, &stem)? {
        manifest.add_output(&path)?;
    }
    let previews = [
        ("render_intensity.png", 0),
        ("render_dolp.png", 1),
        ("render_aolp.png", 2),
    ];
    for (name, kind) in previews {
        let path = args.out.join(name);
        match kind {
            0 => io::write_intensity_png(&img, &path, None)?,
            1 => io::write_dolp_png(&img, &path)?,
            _ => io::write_aolp_png(&img, &path)?,
        }
        manifest.add_output(&path)?;
    }
    let dolp_c = scene::dolp_curve(&img, spec.v)?;
    let int_c = scene::intensity_curve(&img, spec.light.l)?;
    for (name, curve) in [("dolp_curve.csv", &dolp_c), ("intensity_curve.csv", &int_c)] {
        let path = args.out.join(name);
        io::write_curve_csv(&curve.bins, &path)?;
        manifest.add_output(&path)?;
    }
    manifest.summary = serde_json::json!({
        "width": img.width,
        "height": img.height,
        "valid_pixels": img.valid_count(),
    });
    manifest.write(&args.out)?;
    println!(
        "rendered {} valid pixels to {}",
        img.valid_count(),
        args.out.display()
    );
    Ok(0)
}

fn image_paths(stem: &Path) -> Vec<PathBuf> {
    ["s0.pfm", "s1.pfm", "s2.pfm", "normals.pfm", "meta.json"]
        .iter()
        .map(|ext| stem.with_extension(ext))
        .collect()
}

fn cmd_fit(args: FitCmd) -> Result<u8> {
    let cfg = load_config(&args.config)?;
    let spec = cfg.scene.to_scene_spec()?;
    let img = io::read_image(&args.image)?;
    let obs = scene::to_observation(&img, &spec.light, spec.v)?;
    let mut fit_cfg = cfg.fit.to_fit_config();
    if let Some(mode) = args.mode {
        fit_cfg.mode = mode.into();
    }
    if args.no_polarization {
        fit_cfg.polarization = false;
    }
    let sur = match fit_cfg.mode {
        EvalMode::Oracle => None,
        EvalMode::Surrogate => load_model_if(ModeArg::Surrogate, &args.model)?,
    };
    eprintln!(
        "fitting {} pixels, {} iterations ...",
        obs.pixels.len(),
        fit_cfg.iterations
    );
    let report = reflectometry::fit(&obs, &fit_cfg, sur.as_ref())?;

    std::fs::create_dir_all(&args.out)?;
    let mut manifest = Manifest::new("fit", &cfg)?;
    for path in image_paths(&args.image) {
        manifest.add_input(&path)?;
    }
    if let Some(m) = &args.model {
        manifest.add_input(m)?;
    }
    let report_path = args.out.join("fit_report.json");
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Format(format!("serializing report: {e}")))?;
    std::fs::write(&report_path, text)?;
    manifest.add_output(&report_path)?;
    let p = report.params;
    manifest.summary = serde_json::json!({
        "params": p,
        "rms_intensity": report.rms_intensity,
        "rms_dolp": report.rms_dolp,
        "converged": report.converged,
    });
    manifest.write(&args.out)?;
    println!(
        "fit: mu {:.4}  ks {:.4}  rk {:.4}  alpha {:.4}  beta {:.4}  kappa {:.4}",
        p.mu, p.ks, p.rk, p.alpha, p.beta, p.kappa
    );
    println!(
        "fit: rms intensity {:.6}  rms dolp {:.6}  converged {}",
        report.rms_intensity, report.rms_dolp, report.converged
    );
    Ok(0)
}

fn rmse_between(a: &[CurveBin], b: &[CurveBin]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for (x, y) in a.iter().zip(b) {
        if x.count > 0 && y.count > 0 {
            sum += (x.value - y.value).powi(2);
            n += 1;
        }
    }
    (if n > 0 { (sum / n as f64).sqrt() } else { 0.0 }, n)
}

fn cmd_curves(args: CurvesCmd) -> Result<u8> {
    let cfg = load_config(&args.config)?;
    let mut spec = cfg.scene.to_scene_spec()?;
    // Predicted curves describe the model itself, never sensor noise.
    spec.noise = NoiseSpec::default();
    let sur = load_model_if(args.mode, &args.model)?;
    std::fs::create_dir_all(&args.out)?;
    eprintln!("rendering model curves at {}x{} ...", spec.width, spec.height);
    let model_img = render_spec(&spec, sur.as_ref())?;
    let model_dolp = scene::dolp_curve(&model_img, spec.v)?;
    let model_int = scene::intensity_curve(&model_img, spec.light.l)?;

    let mut manifest = Manifest::new("curves", &cfg)?;
    if let Some(m) = &args.model {
        manifest.add_input(m)?;
    }
    let write_csv = |name: &str, bins: &[CurveBin], man: &mut Manifest| -> Result<()> {
        let path = args.out.join(name);
        io::write_curve_csv(bins, &path)?;
        man.add_output(&path)
    };

    if let Some(image_stem) = &args.image {
        let img = io::read_image(image_stem)?;
        for path in image_paths(image_stem) {
            manifest.add_input(&path)?;
        }
        let obs_dolp = scene::dolp_curve(&img, spec.v)?;
        let obs_int = scene::intensity_curve(&img, spec.light.l)?;
        write_csv("dolp_curve.csv", &obs_dolp.bins, &mut manifest)?;
        write_csv("intensity_curve.csv", &obs_int.bins, &mut manifest)?;
        write_csv("model_dolp_curve.csv", &model_dolp.bins, &mut manifest)?;
        write_csv("model_intensity_curve.csv", &model_int.bins, &mut manifest)?;
        let (rd, nd) = rmse_between(&obs_dolp.bins, &model_dolp.bins);
        let (ri, ni) = rmse_between(&obs_int.bins, &model_int.bins);
        let summary_path = args.out.join("summary.csv");
        std::fs::write(
            &summary_path,
            format!("curve,rmse,bins\ndolp,{rd},{nd}\nintensity,{ri},{ni}\n"),
        )?;
        manifest.add_output(&summary_path)?;
        manifest.summary = serde_json::json!({
            "dolp_rmse": rd,
            "intensity_rmse": ri,
        });
        let dplot = args.out.join("dolp_curve.png");
        plot_curves(
            &dplot,
            &[
                ("observed", &obs_dolp.bins, [202, 75, 49]),
                ("model", &model_dolp.bins, [38, 90, 166]),
            ],
        )?;
        manifest.add_output(&dplot)?;
        let iplot = args.out.join("intensity_curve.png");
        plot_curves(
            &iplot,
            &[
                ("observed", &obs_int.bins, [202, 75, 49]),
                ("model", &model_int.bins, [38, 90, 166]),
            ],
        )?;
        manifest.add_output(&iplot)?;
        println!("curves: dolp rmse {rd:.6} over {nd} bins, intensity rmse {ri:.6} over {ni} bins");
    } else {
        write_csv("dolp_curve.csv", &model_dolp.bins, &mut manifest)?;
        write_csv("intensity_curve.csv", &model_int.bins, &mut manifest)?;
        let dplot = args.out.join("dolp_curve.png");
        plot_curves(&dplot, &[("model", &model_dolp.bins, [38, 90, 166])])?;
        manifest.add_output(&dplot)?;
        let iplot = args.out.join("intensity_curve.png");
        plot_curves(&iplot, &[("model", &model_int.bins, [38, 90, 166])])?;
        manifest.add_output(&iplot)?;
        manifest.summary = serde_json::json!({
            "valid_pixels": model_img.valid_count(),
        });
        println!("curves written to {}", args.out.display());
    }
    manifest.write(&args.out)?;
    Ok(0)
}

fn cmd_train(args: TrainCmd) -> Result<u8> {
    let model_path = args
        .model
        .clone()
        .unwrap_or_else(|| args.out.join("model.bin"));
    if args.validate {
        let sur = BodySurrogate::load(&model_path)?;
        eprintln!(
            "replaying validation: {} samples, {}x{} oracle, seed {:#x} ...",
            sur.n_samples, sur.rule_res.0, sur.rule_res.1, sur.seed
        );
        let set = generate_training_set(sur.n_samples, sur.rule_res, sur.seed)?;
        let (rel_s0, abs_dolp) = sur.validation_errors(&set);
        println!(
            "stored:   rel s0 {:.8}  dolp {:.8}",
            sur.metrics.max_rel_s0, sur.metrics.max_abs_dolp
        );
        println!("replayed: rel s0 {rel_s0:.8}  dolp {abs_dolp:.8}");
        let dr = (rel_s0 - sur.metrics.max_rel_s0).abs();
        let dd = (abs_dolp - sur.metrics.max_abs_dolp).abs();
        if dr <= 1e-6 && dd <= 1e-6 {
            println!("validation replay: ok");
            Ok(0)
        } else {
            eprintln!("validation replay mismatch: d(rel s0) {dr:.3e}, d(dolp) {dd:.3e}");
            Ok(4)
        }
    } else {
        let cfg = load_config(&args.config)?;
        let opts = cfg.training.to_train_options();
        eprintln!(
            "training on {} samples, {}x{} oracle ...",
            opts.n_samples, opts.rule.0, opts.rule.1
        );
        let sur = BodySurrogate::train(&opts)?;
        std::fs::create_dir_all(&args.out)?;
        sur.save(&model_path)?;
        let mut manifest = Manifest::new("train-surrogate", &cfg)?;
        manifest.add_output(&model_path)?;
        manifest.summary = serde_json::json!({
            "max_rel_s0": sur.metrics.max_rel_s0,
            "max_abs_dolp": sur.metrics.max_abs_dolp,
            "max_smith_ln": sur.metrics.max_smith_ln,
            "n_samples": sur.n_samples,
        });
        manifest.write(&args.out)?;
        println!(
            "trained: rel s0 {:.5}  dolp {:.5}  smith {:.5}  -> {}",
            sur.metrics.max_rel_s0,
            sur.metrics.max_abs_dolp,
            sur.metrics.max_smith_ln,
            model_path.display()
        );
        if sur.metrics.max_rel_s0 <= QUALITY_MAX_REL_S0
            && sur.metrics.max_abs_dolp <= QUALITY_MAX_ABS_DOLP
        {
            Ok(0)
        } else {
            eprintln!(
                "validation error above threshold (rel s0 {} > {} or dolp {} > {})",
                sur.metrics.max_rel_s0,
                QUALITY_MAX_REL_S0,
                sur.metrics.max_abs_dolp,
                QUALITY_MAX_ABS_DOLP
            );
            Ok(4)
        }
    }
}

/// Plots binned curves as polylines over a fixed 0..90 degree axis. No text
/// labels, just axes, light gridlines, and one color per series.
fn plot_curves(path: &Path, series: &[(&str, &[CurveBin], [u8; 3])]) -> Result<()> {
    use image::{Rgb, RgbImage};
    let (w, h) = (720u32, 480u32);
    let (ml, mr, mt, mb) = (50i64, 15i64, 15i64, 35i64);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let y_max = series
        .iter()
        .flat_map(|(_, bins, _)| bins.iter())
        .filter(|b| b.count > 0)
        .map(|b| b.value)
        .fold(0.0_f64, f64::max)
        .max(1e-9)
        * 1.05;
    let px = |deg: f64, val: f64| -> (i64, i64) {
        let x = ml as f64 + (deg / 90.0) * (w as i64 - ml - mr) as f64;
        let y = (h as i64 - mb) as f64 - (val / y_max) * (h as i64 - mt - mb) as f64;
        (x.round() as i64, y.round() as i64)
    };
    let mut put = |x: i64, y: i64, c: [u8; 3]| {
        if (0..w as i64).contains(&x) && (0..h as i64).contains(&y) {
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    };
    let mut line = |x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]| {
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = x0 as f64 + t * (x1 - x0) as f64;
            let y = y0 as f64 + t * (y1 - y0) as f64;
            put(x.round() as i64, y.round() as i64, c);
        }
    };
    let grid = [230, 230, 230];
    for tick in (0..=90).step_by(15) {
        let (x, _) = px(tick as f64, 0.0);
        line(x, mt, x, h as i64 - mb, grid);
    }
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0 / 1.05;
        let (_, y) = px(0.0, v);
        line(ml, y, w as i64 - mr, y, grid);
    }
    let black = [0, 0, 0];
    line(ml, mt, ml, h as i64 - mb, black);
    line(ml, h as i64 - mb, w as i64 - mr, h as i64 - mb, black);
    for (_, bins, color) in series {
        let mut prev: Option<(i64, i64)> = None;
        for b in bins.iter().filter(|b| b.count > 0) {
            let p = px(b.angle_deg, b.value);
            if let Some((x0, y0)) = prev {
                line(x0, y0, p.0, p.1, *color);
            }
            prev = Some(p);
        }
    }
    img.save(path)
        .map_err(|e| Error::Format(format!("writing {}: {e}", path.display())))
}

struct Selftest {
    failures: usize,
}

impl Selftest {
    fn check(&mut self, name: &str, pass: bool, detail: impl FnOnce() -> String) {
        if pass {
            println!("ok      {name}");
        } else {
            self.failures += 1;
            println!("FAIL    {name}: {}", detail());
        }
    }
}

fn cmd_selftest() -> Result<u8> {
    let mut t = Selftest { failures: 0 };

    let ior = Ior::new(1.5);
    let (_, rp) = fresnel_rs_rp(ior, ior.brewster());
    t.check("fresnel_brewster_extinction", rp < 1e-20, || {
        format!("Rp at Brewster = {rp:e}")
    });

    let mut worst = 0.0_f64;
    for mu in [1.05, 1.33, 1.5, 2.0, 2.5] {
        let (rs, rp) = fresnel_rs_rp(Ior::new(mu), 0.0);
        let expect = ((mu - 1.0) / (mu + 1.0)).powi(2);
        worst = worst.max((rs - expect).abs()).max((rp - expect).abs());
    }
    t.check("fresnel_normal_incidence", worst < 1e-14, || {
        format!("worst deviation {worst:e}")
    });

    let basis = [
        StokesVector::new(1.0, 0.0, 0.0, 0.0),
        StokesVector::new(1.0, 0.8, 0.0, 0.0),
        StokesVector::new(1.0, 0.0, 0.8, 0.0),
        StokesVector::new(1.0, 0.3, -0.4, 0.0),
    ];
    let mut worst = 0.0_f64;
    let (composed, direct) = (rotator(0.3).compose(&rotator(0.5)), rotator(0.8));
    for s in basis {
        let (a, b) = (composed.apply(s), direct.apply(s));
        worst = worst
            .max((a.s0 - b.s0).abs())
            .max((a.s1 - b.s1).abs())
            .max((a.s2 - b.s2).abs())
            .max((a.s3 - b.s3).abs());
    }
    t.check("mueller_rotator_composition", worst < 1e-12, || {
        format!("worst component deviation {worst:e}")
    });

    let s = StokesVector::new(1.0, 0.3, -0.2, 0.0);
    let angles = [0.0, 45.0, 90.0, 135.0].map(|d: f64| d.to_radians());
    let i = angles.map(|a| filter_intensity(s, a));
    let back = stokes_from_four(i[0], i[1], i[2], i[3])?;
    let err = (back.s0 - s.s0)
        .abs()
        .max((back.s1 - s.s1).abs())
        .max((back.s2 - s.s2).abs());
    t.check("stokes_filter_round_trip", err < 1e-14, || {
        format!("component error {err:e}")
    });

    let refl = reflection_mueller(ior, ior.brewster());
    let d = dolp(refl.apply(StokesVector::unpolarized(1.0)))?;
    t.check("brewster_reflection_fully_polarized", (d - 1.0).abs() < 1e-12, || {
        format!("DoLP {d}")
    });

    let (nodes, weights) = gauss_legendre(8);
    let mut worst = 0.0_f64;
    for k in 0..=15u32 {
        let got: f64 = nodes
            .iter()
            .zip(&weights)
            .map(|(x, w)| w * x.powi(k as i32))
            .sum();
        let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
        worst = worst.max((got - exact).abs());
    }
    t.check("gauss_legendre_polynomial_exactness", worst < 1e-13, || {
        format!("worst moment error {worst:e}")
    });

    let mut worst = 0.0_f64;
    for (alpha, beta) in [(0.3, 2.0), (0.6, 1.2)] {
        let ndf = Ndf::new(alpha, beta);
        let rule = HemisphereRule::build(128, 4);
        let mass = rule.integrate(|w| ndf.eval(w.z.clamp(-1.0, 1.0).acos()) * w.z)?;
        worst = worst.max((mass - 1.0).abs());
    }
    t.check("ndf_projected_area_normalized", worst < 1e-6, || {
        format!("worst |mass - 1| {worst:e}")
    });

    let ndf = Ndf::new(0.3, 2.0);
    let table = SmithTable::build(&ndf);
    let z = Direction { x: 0.0, y: 0.0, z: 1.0 };
    let mut prev = f64::INFINITY;
    let mut monotone = true;
    let mut bounded = true;
    for k in 1..=14 {
        let theta = 0.1 * k as f64;
        let v = Direction::from_spherical(theta, 0.4);
        let g1 = table.g1(v, z, z)?;
        bounded &= g1 > 0.0 && g1 <= 1.0 + 1e-12;
        monotone &= g1 <= prev + 1e-12;
        prev = g1;
    }
    t.check("smith_masking_bounded_and_monotone", bounded && monotone, || {
        format!("bounded {bounded}, monotone {monotone}")
    });

    let params = FmbrdfParams::default();
    let model = Fmbrdf::new(params, 16, 32)?;
    let l = Direction::from_spherical(0.7, 0.3);
    let v = Direction::from_spherical(1.1, 2.0);
    let light_l = LightSource::unpolarized(l, 1.0);
    let light_v = LightSource::unpolarized(v, 1.0);
    let f_lv = model.eval_total(z, l, v, &light_l, None)?.0 / l.z;
    let f_vl = model.eval_total(z, v, l, &light_v, None)?.0 / v.z;
    let rel = (f_lv - f_vl).abs() / f_lv.abs().max(1e-300);
    t.check("brdf_reciprocity_spot", rel < 1e-6, || {
        format!("relative asymmetry {rel:e}")
    });

    let (radiance, stokes) = model.eval_total(z, l, v, &light_l, None)?;
    let dark = model
        .eval_total(z, l, v, &LightSource::unpolarized(l, 0.0), None)?
        .0;
    t.check(
        "radiance_consistent_and_linear_in_light",
        (radiance - stokes.s0).abs() < 1e-12 && dark == 0.0 && radiance > 0.0,
        || format!("radiance {radiance}, s0 {}, dark {dark}", stokes.s0),
    );

    let junk = std::env::temp_dir().join("fmbrdf_selftest_magic.bin");
    std::fs::write(&junk, b"not a model file at all")?;
    let rejected = BodySurrogate::load(&junk).is_err();
    let _ = std::fs::remove_file(&junk);
    t.check("model_magic_guard", rejected, || {
        "junk bytes loaded as a model".into()
    });

    if t.failures == 0 {
        println!("selftest: all checks passed");
        Ok(0)
    } else {
        println!("selftest: {} check(s) failed", t.failures);
        Ok(1)
    }
}
