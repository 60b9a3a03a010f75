//! Run configuration and training loops: the four estimator arms, the
//! generative renderer, and the self-reconstruction base used for adapter
//! fine-tuning. Also prediction for every arm.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ddpm::{self, NoiseSchedule, DEFAULT_T};
use crate::error::{Error, Result};
use crate::flow::{self, decode, encode, encode_image, Decoded, ImageConditioned};
use crate::fsutil::write_atomic_str;
use crate::genrender::{self, pack_stack, renderer_config, Renderer};
use crate::model::{AdamW, AdamWConfig, Checkpoint, Grads, Tensor, TrainMode, UNetConfig, VelocityModel};
use crate::scenegen::{ConditionId, Corpus, Sample, Split};

pub const ROLE_RENDERER: &str = "renderer";
pub const ROLE_BASE: &str = "base";

/// Which estimator is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Image-to-intrinsic flow matching.
    Flow,
    /// Noise-to-intrinsic flow matching with the image concatenated.
    NoiseFlow,
    /// v-prediction diffusion where the image latent takes the noise role.
    ImageDdpmV,
    /// Image-conditioned noise-to-intrinsic diffusion with eps-prediction.
    DdpmBaseline,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Flow, Mode::NoiseFlow, Mode::ImageDdpmV, Mode::DdpmBaseline];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Flow => "flow",
            Mode::NoiseFlow => "noise_flow",
            Mode::ImageDdpmV => "image_ddpm_v",
            Mode::DdpmBaseline => "ddpm_baseline",
        }
    }

    pub fn in_channels(self) -> usize {
        match self {
            Mode::Flow | Mode::ImageDdpmV => 3,
            Mode::NoiseFlow | Mode::DdpmBaseline => 6,
        }
    }

    pub fn is_diffusion(self) -> bool {
        matches!(self, Mode::ImageDdpmV | Mode::DdpmBaseline)
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?} (expected flow, noise_flow, image_ddpm_v or ddpm_baseline)")))
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    Scratch,
    FullFinetune,
    Lora,
}

impl AdapterMode {
    pub fn name(self) -> &'static str {
        match self {
            AdapterMode::Scratch => "scratch",
            AdapterMode::FullFinetune => "full_finetune",
            AdapterMode::Lora => "lora",
        }
    }
}

impl FromStr for AdapterMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<AdapterMode> {
        match s {
            "scratch" => Ok(AdapterMode::Scratch),
            "full_finetune" => Ok(AdapterMode::FullFinetune),
            "lora" => Ok(AdapterMode::Lora),
            _ => Err(Error::Config(format!("unknown adapter mode {s:?} (expected scratch, full_finetune or lora)"))),
        }
    }
}

/// Everything that determines a training run. Serialized into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub adapter_mode: AdapterMode,
    pub lambda_rec: f64,
    pub rec_warmup_epochs: usize,
    /// Euler steps for flow arms.
    pub euler_steps: usize,
    /// Sampler steps for diffusion arms.
    pub ddpm_steps: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub base_channels: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    /// Use only the first `n` training samples.
    pub train_limit: Option<usize>,
    /// Conditions sampled during training.
    pub conditions: Vec<ConditionId>,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub renderer: Option<PathBuf>,
    pub base: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Flow,
            adapter_mode: AdapterMode::Scratch,
            lambda_rec: 0.0,
            rec_warmup_epochs: 0,
            euler_steps: flow::DEFAULT_STEPS,
            ddpm_steps: 50,
            epochs: 10,
            batch: 16,
            lr: 1e-4,
            weight_decay: 1e-2,
            seed: 0,
            base_channels: 32,
            lora_rank: 8,
            lora_scale: 1.0,
            train_limit: None,
            conditions: ConditionId::ALL.to_vec(),
            corpus: None,
            out: None,
            renderer: None,
            base: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch == 0 {
            return bad("epochs and batch must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("invalid optimizer settings lr={} weight_decay={}", self.lr, self.weight_decay));
        }
        if self.euler_steps == 0 || self.ddpm_steps == 0 || self.ddpm_steps > DEFAULT_T {
            return bad(format!("step counts must be in 1..={DEFAULT_T}"));
        }
        if self.base_channels == 0 || self.base_channels > 256 {
            return bad(format!("base_channels {} outside 1..=256", self.base_channels));
        }
        if !(self.lambda_rec >= 0.0 && self.lambda_rec.is_finite()) {
            return bad(format!("lambda_rec {} must be finite and non-negative", self.lambda_rec));
        }
        if self.lambda_rec > 0.0 {
            if self.mode != Mode::Flow {
                return bad(format!("the reconstruction loss applies to the flow mode only, not {}", self.mode));
            }
            if self.renderer.is_none() {
                return bad("lambda_rec > 0 needs a renderer checkpoint".into());
            }
        }
        if self.conditions.is_empty() {
            return bad("at least one training condition is required".into());
        }
        if self.train_limit == Some(0) {
            return bad("train_limit must be positive".into());
        }
        match self.adapter_mode {
            AdapterMode::Scratch => {}
            AdapterMode::FullFinetune | AdapterMode::Lora => {
                if self.base.is_none() {
                    return bad(format!("adapter mode {} needs a base checkpoint", self.adapter_mode.name()));
                }
                if self.adapter_mode == AdapterMode::Lora && (self.lora_rank == 0 || !(self.lora_scale > 0.0)) {
                    return bad("lora rank and scale must be positive".into());
                }
            }
        }
        Ok(())
    }

    pub fn network(&self) -> UNetConfig {
        UNetConfig {
            base_channels: self.base_channels,
            ..UNetConfig::velocity(self.mode.in_channels())
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Sampler steps used at inference for this mode.
    pub fn sampler_steps(&self) -> usize {
        if self.mode.is_diffusion() {
            self.ddpm_steps
        } else {
            self.euler_steps
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }

    pub fn from_json_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: Some(path.to_path_buf()),
            offset: 0,
            msg: e.to_string(),
        })
    }
}

/// One training/test sample in model range.
#[derive(Clone, Debug)]
pub struct Example {
    pub image: Tensor<f32>,
    /// Encoded targets in [`ConditionId`] order.
    pub targets: Vec<Tensor<f32>>,
    pub stack: Tensor<f32>,
}

impl Example {
    pub fn from_sample(s: &Sample) -> Result<Example> {
        Ok(Example {
            image: encode_image(&s.image)?.to_f32(),
            targets: ConditionId::ALL
                .iter()
                .map(|c| encode(c.of(&s.intrinsics), *c).map(|l| l.to_f32()))
                .collect::<Result<_>>()?,
            stack: pack_stack(&s.intrinsics)?.into_tensor(),
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub fingerprint: Option<String>,
}

impl Dataset {
    pub fn from_samples(samples: &[Sample]) -> Result<Dataset> {
        Ok(Dataset {
            examples: samples.iter().map(Example::from_sample).collect::<Result<_>>()?,
            fingerprint: None,
        })
    }

    pub fn load(corpus: &Corpus, split: Split, limit: Option<usize>) -> Result<Dataset> {
        let n = limit.map_or(corpus.count(split), |l| l.min(corpus.count(split)));
        let examples = (0..n)
            .map(|i| Example::from_sample(&corpus.load_sample(split, i)?))
            .collect::<Result<_>>()?;
        Ok(Dataset {
            examples,
            fingerprint: Some(corpus.fingerprint()),
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub loss_flow: f64,
    pub loss_rec: f64,
    pub lr: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("epoch,step,loss_flow,loss_rec,lr\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.9e},{:.9e},{:e}\n", r.epoch, r.step, r.loss_flow, r.loss_rec, r.lr));
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: VelocityModel<f32>,
    pub optimizer: AdamW<f32>,
    pub log: Vec<LogRow>,
    pub global_step: u64,
}

impl TrainOutcome {
    pub fn checkpoint(&self, role: &str, config: &RunConfig, fingerprint: Option<String>) -> Checkpoint {
        let mode = if config.adapter_mode == AdapterMode::Lora {
            TrainMode::AdapterOnly
        } else {
            TrainMode::Full
        };
        Checkpoint::new(role, self.model.clone(), Some(self.optimizer.clone()), config.to_json(), fingerprint, self.global_step, mode)
    }
}

/// Per-item objective: accumulate `scale * dL/dθ` into `grads`, return `L`.
trait Objective {
    fn item(&mut self, model: &VelocityModel<f32>, ex: &Example, rng: &mut ChaCha8Rng, grads: &mut Grads<f32>, scale: f32) -> Result<f64>;

    /// Extra per-batch term; returns its logged value.
    fn batch_extra(&mut self, _model: &VelocityModel<f32>, _batch: &[&Example], _epoch: usize, _grads: &mut Grads<f32>) -> Result<f64> {
        Ok(0.0)
    }
}

/// Regress the model output onto `target`; adds the MSE gradient.
fn regress(model: &VelocityModel<f32>, x: &Tensor<f32>, t: f64, cond: Option<usize>, target: &Tensor<f32>, grads: &mut Grads<f32>, scale: f32) -> Result<f64> {
    let (y, tape) = model.forward_tape(x, t, cond)?;
    let n = y.data.len() as f32;
    let diff: Vec<f32> = y.data.iter().zip(&target.data).map(|(a, b)| a - b).collect();
    let loss = diff.iter().map(|d| (*d as f64).powi(2)).sum::<f64>() / n as f64;
    let k = 2.0 * scale / n;
    let dy = Tensor {
        data: diff.iter().map(|d| d * k).collect(),
        ..y
    };
    model.backward(&tape, &dy, grads, false);
    Ok(loss)
}

fn lerp(a: &Tensor<f32>, b: &Tensor<f32>, wa: f64, wb: f64) -> Tensor<f32> {
    let (wa, wb) = (wa as f32, wb as f32);
    Tensor {
        data: a.data.iter().zip(&b.data).map(|(x, y)| wa * x + wb * y).collect(),
        ..a.clone()
    }
}

fn noise_like(x: &Tensor<f32>, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    ddpm::standard_normal(x.c, x.h, x.w, rng)
}

struct ArmObjective<'a> {
    mode: Mode,
    conditions: &'a [ConditionId],
    schedule: &'a NoiseSchedule,
    rec: Option<RecTerm<'a>>,
}

impl Objective for ArmObjective<'_> {
    fn item(&mut self, model: &VelocityModel<f32>, ex: &Example, rng: &mut ChaCha8Rng, grads: &mut Grads<f32>, scale: f32) -> Result<f64> {
        let cond = self.conditions[rng.random_range(0..self.conditions.len())];
        let zi = &ex.targets[cond.index()];
        let z = &ex.image;
        let c = Some(cond.index());
        match self.mode {
            Mode::Flow => {
                let t: f64 = rng.random();
                let zt = lerp(z, zi, 1.0 - t, t);
                regress(model, &zt, t, c, &lerp(zi, z, 1.0, -1.0), grads, scale)
            }
            Mode::NoiseFlow => {
                let eps = noise_like(zi, rng);
                let t: f64 = rng.random();
                let zt = lerp(&eps, zi, 1.0 - t, t);
                regress(model, &Tensor::concat(&zt, z), t, c, &lerp(zi, &eps, 1.0, -1.0), grads, scale)
            }
            Mode::DdpmBaseline => {
                let t = rng.random_range(1..=self.schedule.t_max());
                let eps = noise_like(zi, rng);
                let xt = self.schedule.forward_noise(zi, t, &eps)?;
                regress(model, &Tensor::concat(&xt, z), self.schedule.model_time(t), c, &eps, grads, scale)
            }
            Mode::ImageDdpmV => {
                let t = rng.random_range(1..=self.schedule.t_max());
                let ab = self.schedule.alpha_bar(t)?;
                let xt = lerp(zi, z, ab.sqrt(), (1.0 - ab).sqrt());
                let v = lerp(z, zi, ab.sqrt(), -(1.0 - ab).sqrt());
                regress(model, &xt, self.schedule.model_time(t), c, &v, grads, scale)
            }
        }
    }

    fn batch_extra(&mut self, model: &VelocityModel<f32>, batch: &[&Example], epoch: usize, grads: &mut Grads<f32>) -> Result<f64> {
        match &mut self.rec {
            Some(rec) if epoch >= rec.warmup_epochs => rec.apply(model, batch[0], grads),
            _ => Ok(0.0),
        }
    }
}

/// Score-distillation reconstruction term through a frozen renderer.
pub struct RecTerm<'a> {
    pub renderer: &'a Renderer<f32>,
    pub lambda: f64,
    pub warmup_epochs: usize,
    pub rng: ChaCha8Rng,
}

impl RecTerm<'_> {
    /// One-step estimates of all five properties, one SDS draw, and the
    /// resulting parameter gradient scaled by `lambda`. Returns the mean
    /// squared residual.
    pub fn apply(&mut self, model: &VelocityModel<f32>, ex: &Example, grads: &mut Grads<f32>) -> Result<f64> {
        let mut tapes = Vec::with_capacity(5);
        let mut latents = Vec::with_capacity(5);
        for c in ConditionId::ALL {
            let (mu, tape) = model.forward_tape(&ex.image, 0.0, Some(c.index()))?;
            latents.push(lerp(&ex.image, &mu, 1.0, 1.0));
            tapes.push(tape);
        }
        let stack = genrender::stack_from_latents(&latents)?;
        let s = genrender::sds_reconstruction_grad(self.renderer, &self.renderer.schedule, &ex.image, &stack, &mut self.rng)?;
        let dl = genrender::stack_from_latents_vjp(&latents, &s.grad);
        let lam = self.lambda as f32;
        for (tape, d) in tapes.iter().zip(dl) {
            let d = Tensor {
                data: d.data.iter().map(|v| v * lam).collect(),
                ..d
            };
            model.backward(tape, &d, grads, false);
        }
        Ok(s.residual)
    }
}

struct RendererObjective<'a> {
    schedule: &'a NoiseSchedule,
}

impl Objective for RendererObjective<'_> {
    fn item(&mut self, model: &VelocityModel<f32>, ex: &Example, rng: &mut ChaCha8Rng, grads: &mut Grads<f32>, scale: f32) -> Result<f64> {
        let t = rng.random_range(1..=self.schedule.t_max());
        let eps = noise_like(&ex.image, rng);
        let zt = self.schedule.forward_noise(&ex.image, t, &eps)?;
        regress(model, &Tensor::concat(&zt, &ex.stack), self.schedule.model_time(t), None, &eps, grads, scale)
    }
}

/// Noise-to-image flow used to pretrain the base network.
struct BaseObjective;

impl Objective for BaseObjective {
    fn item(&mut self, model: &VelocityModel<f32>, ex: &Example, rng: &mut ChaCha8Rng, grads: &mut Grads<f32>, scale: f32) -> Result<f64> {
        let eps = noise_like(&ex.image, rng);
        let t: f64 = rng.random();
        let zt = lerp(&eps, &ex.image, 1.0 - t, t);
        regress(model, &zt, t, None, &lerp(&ex.image, &eps, 1.0, -1.0), grads, scale)
    }
}

#[derive(Clone, Copy, Debug)]
struct LoopSettings {
    epochs: usize,
    batch: usize,
    seed: u64,
}

fn run_loop(model: &mut VelocityModel<f32>, optimizer: &mut AdamW<f32>, data: &Dataset, s: LoopSettings, objective: &mut impl Objective, mut on_epoch: impl FnMut(&LogRow)) -> Result<(Vec<LogRow>, u64)> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(s.epochs);
    let mut step = optimizer.step;
    for epoch in 0..s.epochs {
        order.shuffle(&mut rng);
        let (mut sum_flow, mut sum_rec, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(s.batch) {
            let mut grads = model.zero_grads();
            let scale = 1.0 / chunk.len() as f32;
            let mut loss = 0.0;
            for &i in chunk {
                loss += objective.item(model, &data.examples[i], &mut rng, &mut grads, scale)?;
            }
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data.examples[i]).collect();
            let rec = objective.batch_extra(model, &batch, epoch, &mut grads)?;
            loss /= chunk.len() as f64;
            if !loss.is_finite() || !rec.is_finite() || !grads.is_finite() {
                return Err(Error::Numerical {
                    what: "training loss".into(),
                    step: step as usize,
                });
            }
            optimizer.update(&mut model.params, &grads);
            step += 1;
            sum_flow += loss;
            sum_rec += rec;
            batches += 1;
        }
        let row = LogRow {
            epoch,
            step,
            loss_flow: sum_flow / batches as f64,
            loss_rec: sum_rec / batches as f64,
            lr: optimizer.config.lr,
        };
        on_epoch(&row);
        log.push(row);
    }
    Ok((log, step))
}

fn load_role(path: &Path, role: &str) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.meta.role != role {
        return Err(Error::Config(format!("{} holds a {:?} checkpoint, expected {role:?}", path.display(), ckpt.meta.role)));
    }
    Ok(ckpt)
}

/// Load a renderer checkpoint and freeze it.
pub fn load_renderer(path: &Path) -> Result<Renderer<f32>> {
    let ckpt = load_role(path, ROLE_RENDERER)?;
    let mut r = Renderer::new(ckpt.model, NoiseSchedule::cosine(DEFAULT_T)?)?;
    r.freeze();
    Ok(r)
}

/// Initial network for a run, honoring the adapter mode.
pub fn initial_model(config: &RunConfig, base: Option<&VelocityModel<f32>>) -> Result<VelocityModel<f32>> {
    match config.adapter_mode {
        AdapterMode::Scratch => VelocityModel::new(config.network(), config.seed),
        AdapterMode::FullFinetune | AdapterMode::Lora => {
            let base = base.ok_or_else(|| Error::Config("fine-tuning needs a base model".into()))?;
            if base.config.in_channels != config.mode.in_channels() || base.config.num_conditions == 0 {
                return Err(Error::Config(format!(
                    "base network takes {} channels (conditions: {}), mode {} needs {} with a condition table",
                    base.config.in_channels,
                    base.config.num_conditions,
                    config.mode,
                    config.mode.in_channels()
                )));
            }
            let mut m = base.clone();
            m.params.set_trainable(|_| true);
            if config.adapter_mode == AdapterMode::Lora {
                m.attach_adapters(config.lora_rank, config.lora_scale, config.seed)?;
                m.set_train_mode(&TrainMode::AdapterOnly)?;
            } else {
                m.set_train_mode(&TrainMode::Full)?;
            }
            Ok(m)
        }
    }
}

/// Train one estimator arm. `renderer` is consulted only when
/// `lambda_rec > 0`; `base` only for fine-tuning modes.
pub fn train_arm(config: &RunConfig, data: &Dataset, renderer: Option<&Renderer<f32>>, base: Option<&VelocityModel<f32>>, on_epoch: impl FnMut(&LogRow)) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model = initial_model(config, base)?;
    let mut optimizer = AdamW::new(config.adamw(), &model.params);
    let schedule = NoiseSchedule::cosine(DEFAULT_T)?;
    let rec = if config.lambda_rec > 0.0 {
        let renderer = renderer.ok_or_else(|| Error::Config("lambda_rec > 0 needs a renderer".into()))?;
        Some(RecTerm {
            renderer,
            lambda: config.lambda_rec,
            warmup_epochs: config.rec_warmup_epochs,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5d5_0001),
        })
    } else {
        None
    };
    let mut objective = ArmObjective {
        mode: config.mode,
        conditions: &config.conditions,
        schedule: &schedule,
        rec,
    };
    let settings = LoopSettings {
        epochs: config.epochs,
        batch: config.batch,
        seed: config.seed,
    };
    let (log, global_step) = run_loop(&mut model, &mut optimizer, data, settings, &mut objective, on_epoch)?;
    Ok(TrainOutcome {
        model,
        optimizer,
        log,
        global_step,
    })
}

/// Train the intrinsic-conditioned renderer (`mode` and adapter fields of
/// `config` are ignored).
pub fn train_renderer(config: &RunConfig, data: &Dataset, on_epoch: impl FnMut(&LogRow)) -> Result<TrainOutcome> {
    let mut model = VelocityModel::new(renderer_config(config.base_channels), config.seed)?;
    let mut optimizer = AdamW::new(config.adamw(), &model.params);
    let schedule = NoiseSchedule::cosine(DEFAULT_T)?;
    let settings = LoopSettings {
        epochs: config.epochs,
        batch: config.batch,
        seed: config.seed,
    };
    let (log, global_step) = run_loop(&mut model, &mut optimizer, data, settings, &mut RendererObjective { schedule: &schedule }, on_epoch)?;
    Ok(TrainOutcome {
        model,
        optimizer,
        log,
        global_step,
    })
}

/// Pretrain a 3-channel base network on noise-to-image flow (image
/// self-reconstruction); its condition table stays at initialization.
pub fn train_base(config: &RunConfig, data: &Dataset, on_epoch: impl FnMut(&LogRow)) -> Result<TrainOutcome> {
    let net = UNetConfig {
        base_channels: config.base_channels,
        ..UNetConfig::velocity(3)
    };
    let mut model = VelocityModel::new(net, config.seed)?;
    let mut optimizer = AdamW::new(config.adamw(), &model.params);
    let settings = LoopSettings {
        epochs: config.epochs,
        batch: config.batch,
        seed: config.seed,
    };
    let (log, global_step) = run_loop(&mut model, &mut optimizer, data, settings, &mut BaseObjective, on_epoch)?;
    Ok(TrainOutcome {
        model,
        optimizer,
        log,
        global_step,
    })
}

/// Load the base network named in `config`, if the adapter mode needs one.
pub fn load_base(config: &RunConfig) -> Result<Option<VelocityModel<f32>>> {
    match (&config.base, config.adapter_mode) {
        (Some(p), AdapterMode::FullFinetune | AdapterMode::Lora) => Ok(Some(load_role(p, ROLE_BASE)?.model)),
        _ => Ok(None),
    }
}

/// Train with file I/O: reads the corpus and linked checkpoints named in
/// `config`, writes `model.dnfc`, `train_log.csv` and `config.json` under
/// `config.out`.
pub fn train_to_dir(config: &RunConfig, role: Option<&str>) -> Result<TrainOutcome> {
    config.validate()?;
    let corpus_path = config.corpus.as_ref().ok_or_else(|| Error::Config("no corpus given".into()))?;
    let out = config.out.as_ref().ok_or_else(|| Error::Config("no output directory given".into()))?;
    let corpus = Corpus::open(corpus_path)?;
    let data = Dataset::load(&corpus, Split::Train, config.train_limit)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic_str(&out.join("config.json"), &serde_json::to_string_pretty(config).expect("config serializes"))?;
    let progress = |r: &LogRow| log::info!("epoch {} step {} loss_flow {:.6} loss_rec {:.6}", r.epoch, r.step, r.loss_flow, r.loss_rec);
    let (outcome, role) = match role {
        Some(ROLE_RENDERER) => (train_renderer(config, &data, progress)?, ROLE_RENDERER),
        Some(ROLE_BASE) => (train_base(config, &data, progress)?, ROLE_BASE),
        Some(other) => return Err(Error::Config(format!("unknown training role {other:?}"))),
        None => {
            let renderer = match (&config.renderer, config.lambda_rec > 0.0) {
                (Some(p), true) => Some(load_renderer(p)?),
                _ => None,
            };
            let base = load_base(config)?;
            (train_arm(config, &data, renderer.as_ref(), base.as_ref(), progress)?, config.mode.name())
        }
    };
    write_atomic_str(&out.join("train_log.csv"), &log_csv(&outcome.log))?;
    outcome.checkpoint(role, config, data.fingerprint.clone()).save(&out.join("model.dnfc"))?;
    Ok(outcome)
}

/// Per-sample seed for stochastic samplers.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Predicted latent for `cond` under `mode`. `seed` only matters for arms
/// that start from noise.
pub fn predict_latent(model: &VelocityModel<f32>, mode: Mode, image: &Tensor<f32>, cond: ConditionId, steps: usize, seed: u64) -> Result<Tensor<f32>> {
    match mode {
        Mode::Flow => flow::euler_integrate(model, image, cond, steps),
        Mode::NoiseFlow => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z0 = noise_like(image, &mut rng);
            flow::euler_integrate(&ImageConditioned { model, image }, &z0, cond, steps)
        }
        Mode::DdpmBaseline => {
            let sched = NoiseSchedule::cosine(DEFAULT_T)?;
            ddpm::sample_noise_to_intrinsic(model, image, cond, steps, 0.0, seed, &sched)
        }
        Mode::ImageDdpmV => {
            let sched = NoiseSchedule::cosine(DEFAULT_T)?;
            ddpm::sample_image_to_intrinsic_v(model, image, cond, steps, &sched)
        }
    }
}

pub fn predict(model: &VelocityModel<f32>, mode: Mode, image: &Tensor<f32>, cond: ConditionId, steps: usize, seed: u64) -> Result<Decoded> {
    let z = predict_latent(model, mode, image, cond, steps, seed)?;
    decode(&flow::LatentCode::from_f32(&z, flow::LatentRole::Intrinsic(cond)).z, cond)
}

/// Recover the run config and mode from an estimator checkpoint.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<RunConfig> {
    if ckpt.meta.role == ROLE_RENDERER || ckpt.meta.role == ROLE_BASE {
        return Err(Error::Config(format!("{} checkpoints cannot predict intrinsics", ckpt.meta.role)));
    }
    serde_json::from_value(ckpt.meta.run_config.clone()).map_err(|e| Error::format(0, format!("checkpoint run config: {e}")))
}
