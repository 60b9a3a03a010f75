//! The `dnf` command line.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data or format
//! error, 4 numerical failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::ablation::{self, AblationConfig, Arm};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::flow::{encode_image, LatentCode, LatentRole};
use crate::fsutil::{write_atomic, write_atomic_str};
use crate::genrender::{pack_stack, sample_renderer};
use crate::lightfit::{fit_lights, relight, FitConfig, FitMethod, GeometryProxy, LightParams};
use crate::model::Checkpoint;
use crate::scenegen::{generate_corpus, load_intrinsics_dir, load_sample_dir, ConditionId, Corpus, IntrinsicSet, Split, FAR_PLANE};
use crate::tensor::{read_map, write_map, Map};
use crate::train::{self, checkpoint_config, load_renderer, predict, AdapterMode, Dataset, Mode, RunConfig, ROLE_BASE, ROLE_RENDERER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "dnf", version, about = "Image-to-intrinsic flow matching at desk scale")]
struct Cli {
    /// Log verbosity (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic scene corpus.
    Gen(GenArgs),
    /// Train an estimator arm, the renderer, or the base network.
    Train(TrainArgs),
    /// Predict intrinsic maps for one image.
    Infer(InferArgs),
    /// Evaluate a checkpoint on a corpus split and write metrics.csv.
    Eval(EvalArgs),
    /// Fit point lights to an image given intrinsics.
    Lightfit(LightfitArgs),
    /// Re-render intrinsics (optionally edited) under given lights.
    Relight(RelightArgs),
    /// Sample the generative renderer on a (possibly edited) intrinsic stack.
    Render(RenderArgs),
    /// Train and evaluate an arm matrix under one master seed.
    Ablate(AblateArgs),
    /// Render ablation outputs as a text table and step-sweep curve.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    train: usize,
    #[arg(long)]
    test: usize,
    #[arg(long, default_value_t = 32)]
    res: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

/// Flags shared by `train` and `ablate`; unset flags keep config values.
#[derive(Args, Debug, Default)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    lora_rank: Option<usize>,
    #[arg(long)]
    lora_scale: Option<f64>,
    /// Euler steps for flow arms.
    #[arg(long)]
    steps: Option<usize>,
    /// Sampler steps for diffusion arms.
    #[arg(long)]
    ddpm_steps: Option<usize>,
    #[arg(long)]
    train_limit: Option<usize>,
    /// Comma-separated training conditions.
    #[arg(long, value_delimiter = ',')]
    conditions: Option<Vec<String>>,
    #[arg(long)]
    rec_warmup_epochs: Option<usize>,
    #[arg(long)]
    renderer: Option<PathBuf>,
    #[arg(long)]
    base: Option<PathBuf>,
}

impl TrainFlags {
    fn apply(&self, c: &mut RunConfig) -> Result<()> {
        macro_rules! set {
            ($($f:ident => $g:ident),*) => {$(if let Some(v) = &self.$f { c.$g = v.clone(); })*};
        }
        set!(epochs => epochs, batch => batch, lr => lr, weight_decay => weight_decay, base_channels => base_channels,
             lora_rank => lora_rank, lora_scale => lora_scale, steps => euler_steps, ddpm_steps => ddpm_steps,
             rec_warmup_epochs => rec_warmup_epochs);
        if let Some(v) = self.train_limit {
            c.train_limit = Some(v);
        }
        if let Some(list) = &self.conditions {
            c.conditions = parse_list(list, "--conditions")?;
        }
        if self.renderer.is_some() {
            c.renderer.clone_from(&self.renderer);
        }
        if self.base.is_some() {
            c.base.clone_from(&self.base);
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// What to train: an estimator arm, the renderer, or the base network.
    #[arg(long, default_value = "arm", value_parser = ["arm", "renderer", "base"])]
    role: String,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    adapter_mode: Option<String>,
    /// Reconstruction weight; defaults to 0.1 when a renderer is given, else 0.
    #[arg(long)]
    lambda_rec: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// A sample directory (reads image.dnt) or an image `.dnt` file.
    #[arg(long)]
    input: PathBuf,
    /// A property name or `all`.
    #[arg(long, default_value = "all")]
    property: String,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "albedo,metallic,roughness,normal,depth")]
    properties: Vec<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Material overrides applied to masked pixels.
#[derive(Args, Debug, Default)]
struct EditFlags {
    /// Replace albedo with `r,g,b`.
    #[arg(long, value_delimiter = ',')]
    albedo: Option<Vec<f32>>,
    #[arg(long)]
    metallic: Option<f32>,
    #[arg(long)]
    roughness: Option<f32>,
}

impl EditFlags {
    fn apply(&self, set: &mut IntrinsicSet) -> Result<()> {
        let unit = |v: f32, what: &str| {
            if (0.0..=1.0).contains(&v) {
                Ok(v)
            } else {
                Err(Error::Config(format!("--{what} value {v} outside [0,1]")))
            }
        };
        if self.albedo.as_ref().is_some_and(|a| a.len() != 3) {
            return Err(Error::Config("--albedo takes exactly three values `r,g,b`".into()));
        }
        let (h, w) = (set.height(), set.width());
        for y in 0..h {
            for x in 0..w {
                if !set.valid(y, x) {
                    continue;
                }
                if let Some(a) = &self.albedo {
                    for c in 0..3 {
                        set.albedo.set(c, y, x, unit(a[c], "albedo")?);
                    }
                }
                if let Some(m) = self.metallic {
                    set.metallic.set(0, y, x, unit(m, "metallic")?);
                }
                if let Some(r) = self.roughness {
                    set.roughness.set(0, y, x, unit(r, "roughness")?);
                }
            }
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
struct LightfitArgs {
    /// Sample directory with image.dnt and scene.json (for the camera).
    #[arg(long)]
    sample: PathBuf,
    /// Intrinsics directory to fit with instead of the sample's ground truth.
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    /// Initial lights; without it the scene lights perturbed by `--perturb` are used.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    perturb: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    #[arg(long, default_value = "gauss-newton", value_parser = ["gauss-newton", "gradient"])]
    method: String,
    #[arg(long)]
    out: PathBuf,
    /// Also write the re-rendered image (`.dnt` plus `.png` preview).
    #[arg(long)]
    relit: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RelightArgs {
    #[arg(long)]
    sample: PathBuf,
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    #[arg(long)]
    lights: PathBuf,
    #[command(flatten)]
    edits: EditFlags,
    /// Output image path (`.dnt`; a `.png` preview is written alongside).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    renderer: PathBuf,
    #[arg(long)]
    sample: PathBuf,
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    #[command(flatten)]
    edits: EditFlags,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "flow,noise_flow,image_ddpm_v")]
    arms: Vec<String>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Master seed; every arm shares the per-repeat seeds derived from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    lambda_rec: f64,
    #[arg(long)]
    test_limit: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "albedo")]
    properties: Vec<String>,
    /// Sampler step counts for the albedo PSNR sweep.
    #[arg(long, value_delimiter = ',')]
    sweep_steps: Vec<usize>,
    /// Epochs for renderer and base pretraining when they are trained here.
    #[arg(long)]
    aux_epochs: Option<usize>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory written by `dnf ablate`.
    #[arg(long)]
    dir: PathBuf,
}

fn parse_list<T: FromStr<Err = Error>>(items: &[String], flag: &str) -> Result<Vec<T>> {
    items
        .iter()
        .map(|s| s.trim().parse::<T>().map_err(|e| Error::Config(format!("{flag}: {e}"))))
        .collect()
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::InvalidInput(_) | Error::Format { .. } | Error::Io { .. } => EXIT_DATA,
        Error::Numerical { .. } => EXIT_NUMERICAL,
    }
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).try_init();
    let name = match &cli.cmd {
        Cmd::Gen(_) => "gen",
        Cmd::Train(_) => "train",
        Cmd::Infer(_) => "infer",
        Cmd::Eval(_) => "eval",
        Cmd::Lightfit(_) => "lightfit",
        Cmd::Relight(_) => "relight",
        Cmd::Render(_) => "render",
        Cmd::Ablate(_) => "ablate",
        Cmd::Report(_) => "report",
    };
    let result = match cli.cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Lightfit(a) => cmd_lightfit(a),
        Cmd::Relight(a) => cmd_relight(a),
        Cmd::Render(a) => cmd_render(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("dnf {name}: {e}");
            exit_code(&e)
        }
    }
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let m = generate_corpus(a.train, a.test, [a.res, a.res], a.seed, &a.out, a.jobs)?;
    println!("wrote {} train and {} test samples to {}", m.counts.train, m.counts.test, a.out.display());
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut c = match &a.config {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = &a.mode {
        c.mode = m.parse().map_err(|e| Error::Config(format!("--mode: {e}")))?;
    }
    if let Some(m) = &a.adapter_mode {
        c.adapter_mode = m.parse().map_err(|e| Error::Config(format!("--adapter-mode: {e}")))?;
    }
    if let Some(s) = a.seed {
        c.seed = s;
    }
    if a.corpus.is_some() {
        c.corpus.clone_from(&a.corpus);
    }
    if a.out.is_some() {
        c.out.clone_from(&a.out);
    }
    a.flags.apply(&mut c)?;
    match a.lambda_rec {
        Some(l) => c.lambda_rec = l,
        None if a.config.is_none() => c.lambda_rec = if c.renderer.is_some() && a.role == "arm" { 0.1 } else { 0.0 },
        None => {}
    }
    Ok(c)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let c = resolve_train_config(&a)?;
    let role = match a.role.as_str() {
        "renderer" => Some(ROLE_RENDERER),
        "base" => Some(ROLE_BASE),
        _ => None,
    };
    let out = train::train_to_dir(&c, role)?;
    let last = out.log.last().expect("at least one epoch");
    println!(
        "trained {} for {} steps; final loss_flow {:.6}; {} trainable parameters",
        role.unwrap_or(c.mode.name()),
        out.global_step,
        last.loss_flow,
        out.model.trainable_count()
    );
    Ok(())
}

fn load_image(input: &Path) -> Result<Map> {
    if input.is_dir() {
        read_map(&input.join("image.dnt"))
    } else {
        read_map(input)
    }
}

fn load_estimator(path: &Path) -> Result<(Checkpoint, RunConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = checkpoint_config(&ckpt).map_err(|e| e.with_path(path))?;
    Ok((ckpt, cfg))
}

fn properties(list: &str) -> Result<Vec<ConditionId>> {
    if list == "all" {
        Ok(ConditionId::ALL.to_vec())
    } else {
        parse_list(&list.split(',').map(String::from).collect::<Vec<_>>(), "--property")
    }
}

/// Display mapping to `[0,1]`: normals from `[-1,1]`, depth by the far plane.
fn preview_values(map: &Map, cond: Option<ConditionId>) -> Map {
    match cond {
        Some(ConditionId::Normal) => map.map(|v| (v + 1.0) * 0.5),
        Some(ConditionId::Depth) => map.map(|v| v / FAR_PLANE as f32),
        _ => map.clone(),
    }
}

/// 8-bit PNG preview of a 1- or 3-channel map with values in `[0,1]`.
pub fn png_bytes(map: &Map) -> Result<Vec<u8>> {
    let color = match map.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::invalid(format!("png preview needs 1 or 3 channels, got {c}"))),
    };
    let pixels: Vec<u8> = map.to_hwc().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, map.width as u32, map.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::invalid(format!("png header: {e}")))?;
        w.write_image_data(&pixels).map_err(|e| Error::invalid(format!("png data: {e}")))?;
    }
    Ok(out)
}

fn write_with_preview(path: &Path, map: &Map, cond: Option<ConditionId>) -> Result<()> {
    write_map(path, map)?;
    write_atomic(&path.with_extension("png"), &png_bytes(&preview_values(map, cond))?)
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let (ckpt, cfg) = load_estimator(&a.ckpt)?;
    let image = load_image(&a.input)?;
    let z = encode_image(&image)?.to_f32();
    let steps = a.steps.unwrap_or(cfg.sampler_steps());
    let seed = a.seed.unwrap_or(cfg.seed);
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for p in properties(&a.property)? {
        let d = predict(&ckpt.model, cfg.mode, &z, p, steps, seed)?;
        if !d.degenerate.is_empty() {
            log::warn!("{p}: {} pixels fell back to the default normal", d.degenerate.len());
        }
        write_with_preview(&a.out.join(format!("{p}.dnt")), &d.map, Some(p))?;
    }
    if a.property == "all" {
        write_map(&a.out.join("mask.dnt"), &Map::filled(1, image.height, image.width, 1.0))?;
    }
    println!("wrote predictions for {} to {}", a.input.display(), a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (ckpt, cfg) = load_estimator(&a.ckpt)?;
    let split: Split = a.split.parse().map_err(|e: Error| Error::Config(format!("--split: {e}")))?;
    let corpus = Corpus::open(&a.corpus)?;
    let samples = corpus.load_split(split, a.limit)?;
    let props: Vec<ConditionId> = parse_list(&a.properties, "--properties")?;
    let steps = a.steps.unwrap_or(cfg.sampler_steps());
    let seed = a.seed.unwrap_or(cfg.seed);
    let e = evaluate(&ckpt.model, cfg.mode, &samples, &props, steps, seed, a.jobs)?;
    write_atomic_str(&a.out, &e.to_csv())?;
    let resolved = serde_json::json!({
        "checkpoint": a.ckpt, "corpus": a.corpus, "corpus_fingerprint": corpus.fingerprint(),
        "split": split.name(), "samples": samples.len(), "properties": props, "steps": steps, "seed": seed,
        "mode": cfg.mode, "run_config": cfg,
    });
    write_atomic_str(&a.out.with_extension("config.json"), &serde_json::to_string_pretty(&resolved).expect("json"))?;
    for p in &props {
        let m = e.mean(*p);
        let f = |v: Option<f64>| v.map_or("-".into(), |v| format!("{v:.4}"));
        println!("{p:<10} psnr {} ssim {} ae {} amre {} whdr {}", f(m.psnr), f(m.ssim), f(m.ae_deg), f(m.amre), f(m.whdr));
    }
    Ok(())
}

fn sample_intrinsics(sample: &Path, intrinsics: Option<&Path>) -> Result<(crate::scenegen::Sample, IntrinsicSet)> {
    let s = load_sample_dir(sample)?;
    let set = match intrinsics {
        Some(d) => load_intrinsics_dir(d)?,
        None => s.intrinsics.clone(),
    };
    set.validate()?;
    Ok((s, set))
}

fn cmd_lightfit(a: LightfitArgs) -> Result<()> {
    let (s, set) = sample_intrinsics(&a.sample, a.intrinsics.as_deref())?;
    let frame = s.scene.camera.frame()?;
    let init = match &a.init {
        Some(p) => LightParams::load(p)?,
        None => LightParams {
            lights: s.scene.lights.clone(),
            ambient: s.scene.ambient,
        }
        .perturbed(a.perturb, a.seed),
    };
    let config = FitConfig {
        iters: a.iters,
        method: if a.method == "gradient" { FitMethod::Gradient } else { FitMethod::GaussNewton },
        ..FitConfig::default()
    };
    let proxy = GeometryProxy::new(&set, frame);
    let r = fit_lights(&s.image, &proxy, &init, &config)?;
    r.params.save(&a.out)?;
    if let Some(p) = &a.relit {
        write_with_preview(p, &relight(&set, &frame, &r.params)?, None)?;
    }
    println!("fitted {} light(s) in {} iterations; loss {:.3e}", r.params.lights.len(), r.iterations, r.loss);
    Ok(())
}

fn cmd_relight(a: RelightArgs) -> Result<()> {
    let (s, mut set) = sample_intrinsics(&a.sample, a.intrinsics.as_deref())?;
    a.edits.apply(&mut set)?;
    let lights = LightParams::load(&a.lights)?;
    let img = relight(&set, &s.scene.camera.frame()?, &lights)?;
    write_with_preview(&a.out, &img, None)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let renderer = load_renderer(&a.renderer)?;
    let (_, mut set) = sample_intrinsics(&a.sample, a.intrinsics.as_deref())?;
    a.edits.apply(&mut set)?;
    let stack = pack_stack(&set)?;
    let z = sample_renderer(&renderer, stack.tensor(), a.steps, a.seed)?;
    let img = crate::flow::decode_image(&LatentCode::from_f32(&z, LatentRole::Image).z);
    write_with_preview(&a.out, &img, None)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let arms: Vec<Arm> = parse_list(&a.arms, "--arms")?;
    let mut template = RunConfig {
        corpus: Some(a.corpus.clone()),
        ..RunConfig::default()
    };
    a.flags.apply(&mut template)?;
    let cfg = AblationConfig {
        arms,
        repeats: a.repeats,
        master_seed: a.seed,
        template,
        lambda_rec: a.lambda_rec,
        properties: parse_list(&a.properties, "--properties")?,
        sweep_steps: a.sweep_steps.clone(),
        jobs: a.jobs,
    };
    for arm in &cfg.arms {
        cfg.run_config(arm, 0).validate().map_err(|e| Error::Config(format!("arm {}: {e}", arm.name)))?;
    }
    let corpus = Corpus::open(&a.corpus)?;
    let train_set = Dataset::load(&corpus, Split::Train, cfg.template.train_limit)?;
    let test = corpus.load_split(Split::Test, a.test_limit)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let aux = RunConfig {
        epochs: a.aux_epochs.unwrap_or(cfg.template.epochs),
        seed: ablation::run_seed(a.seed, usize::MAX),
        adapter_mode: AdapterMode::Scratch,
        mode: Mode::Flow,
        ..cfg.template.clone()
    };
    let renderer = if cfg.arms.iter().any(Arm::needs_renderer) {
        Some(match &cfg.template.renderer {
            Some(p) => load_renderer(p)?,
            None => {
                log::info!("training renderer for {} epochs", aux.epochs);
                let out = train::train_renderer(&aux, &train_set, |_| {})?;
                out.checkpoint(ROLE_RENDERER, &aux, train_set.fingerprint.clone()).save(&a.out.join("renderer.dnfc"))?;
                load_renderer(&a.out.join("renderer.dnfc"))?
            }
        })
    } else {
        None
    };
    let base = if cfg.arms.iter().any(Arm::needs_base) {
        Some(match &cfg.template.base {
            Some(p) => {
                let c = RunConfig { base: Some(p.clone()), adapter_mode: AdapterMode::FullFinetune, ..RunConfig::default() };
                train::load_base(&c)?.expect("base requested")
            }
            None => {
                log::info!("pretraining base for {} epochs", aux.epochs);
                let out = train::train_base(&aux, &train_set, |_| {})?;
                out.checkpoint(ROLE_BASE, &aux, train_set.fingerprint.clone()).save(&a.out.join("base.dnfc"))?;
                out.model
            }
        })
    } else {
        None
    };
    let logs = a.out.join("logs");
    let results = ablation::run_ablation(&cfg, &train_set, &test, renderer.as_ref(), base.as_ref(), |r| {
        let _ = write_atomic_str(&logs.join(format!("{}_{}.csv", r.arm, r.repeat)), &train::log_csv(&r.log));
        if let Some(s) = r.score(ConditionId::Albedo) {
            log::info!("{} repeat {}: albedo psnr {:.3}", r.arm, r.repeat, s.psnr.unwrap_or(f64::NAN));
        }
    })?;
    let resolved = serde_json::json!({
        "arms": a.arms, "repeats": a.repeats, "master_seed": a.seed, "lambda_rec": a.lambda_rec,
        "properties": cfg.properties, "sweep_steps": cfg.sweep_steps, "template": cfg.template,
        "corpus_fingerprint": corpus.fingerprint(),
    });
    write_atomic_str(&a.out.join("config.json"), &serde_json::to_string_pretty(&resolved).expect("json"))?;
    write_atomic_str(&a.out.join("runs.csv"), &ablation::runs_csv(&results))?;
    write_atomic_str(&a.out.join("steps.csv"), &ablation::steps_csv(&results))?;
    let rows = ablation::table(&results);
    write_atomic_str(&a.out.join("ablation.csv"), &ablation::table_csv(&rows))?;
    print!("{}", ablation::render_report(&rows, &[]));
    Ok(())
}

fn read_text(p: &Path) -> Result<String> {
    std::fs::read_to_string(p).map_err(|e| Error::io(p, e))
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let table_path = a.dir.join("ablation.csv");
    let rows = ablation::parse_table_csv(&read_text(&table_path)?).map_err(|e| e.with_path(&table_path))?;
    let steps_path = a.dir.join("steps.csv");
    let curve = if steps_path.exists() {
        ablation::sweep_curve(&read_text(&steps_path)?).map_err(|e| e.with_path(&steps_path))?
    } else {
        Vec::new()
    };
    let text = ablation::render_report(&rows, &curve);
    write_atomic_str(&a.dir.join("report.txt"), &text)?;
    write_atomic_str(&a.dir.join("step_sweep.csv"), &ablation::sweep_curve_csv(&curve))?;
    print!("{text}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> i32 {
        run(std::iter::once("dnf").chain(args.iter().copied()))
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_args(&["bogus"]), EXIT_USAGE);
        assert_eq!(run_args(&["gen", "--train", "x", "--test", "1", "--out", "o"]), EXIT_USAGE);
        assert_eq!(run_args(&["train", "--mode", "nope", "--corpus", "c", "--out", "o"]), EXIT_USAGE);
    }

    #[test]
    fn missing_data_exits_3() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nothing");
        assert_eq!(run_args(&["report", "--dir", missing.to_str().unwrap()]), EXIT_DATA);
    }

    #[test]
    fn png_preview_shapes() {
        let m = Map::from_fn(3, 2, 4, |c, y, x| (c + y + x) as f32 / 8.0);
        let bytes = png_bytes(&m).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
        assert!(png_bytes(&Map::filled(2, 2, 2, 0.0)).is_err());
    }
}
