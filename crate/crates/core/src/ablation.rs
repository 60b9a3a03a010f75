//! Arm-matrix experiments: every arm trained under matched seeds, evaluated
//! on the test split, summarized as an ablation table and a sampler-step
//! sweep.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, Scores};
use crate::genrender::Renderer;
use crate::model::VelocityModel;
use crate::scenegen::{ConditionId, Sample};
use crate::train::{train_arm, AdapterMode, Dataset, LogRow, Mode, RunConfig};

/// One column of the ablation matrix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub mode: Mode,
    pub adapter_mode: AdapterMode,
    /// Train with the reconstruction term.
    pub rec: bool,
}

impl Arm {
    pub const NAMES: [&'static str; 7] = ["flow", "noise_flow", "image_ddpm_v", "ddpm_baseline", "flow_rec", "flow_lora", "flow_full"];

    pub fn needs_renderer(&self) -> bool {
        self.rec
    }

    pub fn needs_base(&self) -> bool {
        self.adapter_mode != AdapterMode::Scratch
    }
}

impl FromStr for Arm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Arm> {
        let arm = |mode, adapter_mode, rec| Arm {
            name: s.to_string(),
            mode,
            adapter_mode,
            rec,
        };
        Ok(match s {
            "flow_rec" => arm(Mode::Flow, AdapterMode::Scratch, true),
            "flow_lora" => arm(Mode::Flow, AdapterMode::Lora, false),
            "flow_full" => arm(Mode::Flow, AdapterMode::FullFinetune, false),
            _ => match s.parse::<Mode>() {
                Ok(m) => arm(m, AdapterMode::Scratch, false),
                Err(_) => return Err(Error::Config(format!("unknown arm {s:?}; known arms: {}", Arm::NAMES.join(", ")))),
            },
        })
    }
}

/// Seed of repeat `r`, shared by every arm.
pub fn run_seed(master: u64, repeat: usize) -> u64 {
    master.wrapping_mul(1_000_003).wrapping_add(repeat as u64)
}

#[derive(Clone, Debug)]
pub struct AblationConfig {
    pub arms: Vec<Arm>,
    pub repeats: usize,
    pub master_seed: u64,
    /// Shared training settings; mode, adapter mode, seed and lambda are set per arm.
    pub template: RunConfig,
    /// Reconstruction weight for arms with `rec`.
    pub lambda_rec: f64,
    pub properties: Vec<ConditionId>,
    /// Albedo PSNR is also recorded at each of these sampler step counts.
    pub sweep_steps: Vec<usize>,
    pub jobs: usize,
}

impl AblationConfig {
    pub fn run_config(&self, arm: &Arm, repeat: usize) -> RunConfig {
        let mut c = self.template.clone();
        c.mode = arm.mode;
        c.adapter_mode = arm.adapter_mode;
        c.seed = run_seed(self.master_seed, repeat);
        c.lambda_rec = if arm.rec { self.lambda_rec } else { 0.0 };
        if arm.rec && c.renderer.is_none() {
            c.renderer = Some("<in-memory renderer>".into());
        }
        if arm.needs_base() && c.base.is_none() {
            c.base = Some("<in-memory base>".into());
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub arm: String,
    pub repeat: usize,
    pub seed: u64,
    pub scores: Vec<(ConditionId, Scores)>,
    /// `(steps, mean albedo PSNR)`.
    pub sweep: Vec<(usize, f64)>,
    pub trainable: usize,
    pub log: Vec<LogRow>,
}

impl RunResult {
    pub fn score(&self, p: ConditionId) -> Option<&Scores> {
        self.scores.iter().find(|(q, _)| *q == p).map(|(_, s)| s)
    }

    pub fn sweep_psnr(&self, steps: usize) -> Option<f64> {
        self.sweep.iter().find(|(k, _)| *k == steps).map(|(_, v)| *v)
    }
}

/// Train and evaluate one (arm, repeat) cell.
pub fn run_cell(cfg: &AblationConfig, arm: &Arm, repeat: usize, train: &Dataset, test: &[Sample], renderer: Option<&Renderer<f32>>, base: Option<&VelocityModel<f32>>) -> Result<RunResult> {
    let rc = cfg.run_config(arm, repeat);
    if arm.needs_renderer() && renderer.is_none() {
        return Err(Error::Config(format!("arm {} needs a renderer", arm.name)));
    }
    if arm.needs_base() && base.is_none() {
        return Err(Error::Config(format!("arm {} needs a base model", arm.name)));
    }
    log::info!("training arm {} repeat {repeat} (seed {})", arm.name, rc.seed);
    let out = train_arm(&rc, train, renderer, base, |r| log::debug!("{} epoch {} loss {:.6}", arm.name, r.epoch, r.loss_flow))?;
    let eval = evaluate(&out.model, arm.mode, test, &cfg.properties, rc.sampler_steps(), rc.seed, cfg.jobs)?;
    let scores = cfg.properties.iter().map(|&p| (p, eval.mean(p))).collect();
    let mut sweep = Vec::with_capacity(cfg.sweep_steps.len());
    for &k in &cfg.sweep_steps {
        let e = if k == rc.sampler_steps() && cfg.properties.contains(&ConditionId::Albedo) {
            eval.clone()
        } else {
            evaluate(&out.model, arm.mode, test, &[ConditionId::Albedo], k, rc.seed, cfg.jobs)?
        };
        sweep.push((k, e.mean(ConditionId::Albedo).psnr.expect("albedo has psnr")));
    }
    Ok(RunResult {
        arm: arm.name.clone(),
        repeat,
        seed: rc.seed,
        scores,
        sweep,
        trainable: out.model.trainable_count(),
        log: out.log,
    })
}

pub fn run_ablation(cfg: &AblationConfig, train: &Dataset, test: &[Sample], renderer: Option<&Renderer<f32>>, base: Option<&VelocityModel<f32>>, mut on_result: impl FnMut(&RunResult)) -> Result<Vec<RunResult>> {
    if cfg.arms.is_empty() || cfg.repeats == 0 {
        return Err(Error::Config("ablation needs at least one arm and one repeat".into()));
    }
    let mut out = Vec::new();
    for arm in &cfg.arms {
        for r in 0..cfg.repeats {
            let res = run_cell(cfg, arm, r, train, test, renderer, base)?;
            on_result(&res);
            out.push(res);
        }
    }
    Ok(out)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

pub fn runs_csv(results: &[RunResult]) -> String {
    let mut s = String::from("arm,repeat,seed,property,psnr,ssim,ae_deg,amre,whdr,trainable_params\n");
    for r in results {
        for (p, sc) in &r.scores {
            let _ = writeln!(
                s,
                "{},{},{},{p},{},{},{},{},{},{}",
                r.arm,
                r.repeat,
                r.seed,
                cell(sc.psnr),
                cell(sc.ssim),
                cell(sc.ae_deg),
                cell(sc.amre),
                cell(sc.whdr),
                r.trainable
            );
        }
    }
    s
}

pub fn steps_csv(results: &[RunResult]) -> String {
    let mut s = String::from("arm,repeat,steps,psnr\n");
    for r in results {
        for (k, v) in &r.sweep {
            let _ = writeln!(s, "{},{},{k},{v:.6}", r.arm, r.repeat);
        }
    }
    s
}

/// One row of the ablation table: an (arm, property) mean over repeats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub arm: String,
    pub property: ConditionId,
    pub runs: usize,
    pub scores: Scores,
    /// Sample standard deviation of PSNR over repeats.
    pub psnr_std: Option<f64>,
    pub trainable_params: usize,
}

pub fn table(results: &[RunResult]) -> Vec<TableRow> {
    let mut rows = Vec::new();
    let mut arms: Vec<&str> = Vec::new();
    for r in results {
        if !arms.contains(&r.arm.as_str()) {
            arms.push(&r.arm);
        }
    }
    for arm in arms {
        let runs: Vec<&RunResult> = results.iter().filter(|r| r.arm == arm).collect();
        let mut props: Vec<ConditionId> = runs.iter().flat_map(|r| r.scores.iter().map(|(p, _)| *p)).collect();
        props.sort();
        props.dedup();
        for p in props {
            let scores: Vec<&Scores> = runs.iter().filter_map(|r| r.score(p)).collect();
            let mean = Scores::mean(scores.iter().copied());
            let psnrs: Vec<f64> = scores.iter().filter_map(|s| s.psnr).collect();
            let psnr_std = (psnrs.len() > 1).then(|| {
                let m = psnrs.iter().sum::<f64>() / psnrs.len() as f64;
                (psnrs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (psnrs.len() - 1) as f64).sqrt()
            });
            rows.push(TableRow {
                arm: arm.to_string(),
                property: p,
                runs: scores.len(),
                scores: mean,
                psnr_std,
                trainable_params: runs[0].trainable,
            });
        }
    }
    rows
}

const TABLE_HEADER: &str = "arm,property,runs,psnr,psnr_std,ssim,lpips,ae_deg,amre,whdr,trainable_params";

/// The ablation table as CSV. LPIPS is not computed and reads `n/a`.
pub fn table_csv(rows: &[TableRow]) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    for r in rows {
        let sc = &r.scores;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},n/a,{},{},{},{}",
            r.arm,
            r.property,
            r.runs,
            cell(sc.psnr),
            cell(r.psnr_std),
            cell(sc.ssim),
            cell(sc.ae_deg),
            cell(sc.amre),
            cell(sc.whdr),
            r.trainable_params
        );
    }
    s
}

fn parse_err(what: &str, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::format(0, format!("{what} line {line}: {msg}"))
}

fn opt(v: &str, what: &str, line: usize) -> Result<Option<f64>> {
    if v.is_empty() || v == "n/a" {
        Ok(None)
    } else {
        v.parse().map(Some).map_err(|e| parse_err(what, line, e))
    }
}

pub fn parse_table_csv(text: &str) -> Result<Vec<TableRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(TABLE_HEADER) {
        return Err(parse_err("ablation table", 1, "unexpected header"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let n = i + 2;
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 11 {
                return Err(parse_err("ablation table", n, format!("expected 11 fields, got {}", f.len())));
            }
            Ok(TableRow {
                arm: f[0].to_string(),
                property: f[1].parse().map_err(|e| parse_err("ablation table", n, e))?,
                runs: f[2].parse().map_err(|e| parse_err("ablation table", n, e))?,
                scores: Scores {
                    psnr: opt(f[3], "ablation table", n)?,
                    ssim: opt(f[5], "ablation table", n)?,
                    ae_deg: opt(f[7], "ablation table", n)?,
                    amre: opt(f[8], "ablation table", n)?,
                    whdr: opt(f[9], "ablation table", n)?,
                },
                psnr_std: opt(f[4], "ablation table", n)?,
                trainable_params: f[10].parse().map_err(|e| parse_err("ablation table", n, e))?,
            })
        })
        .collect()
}

/// `(arm, steps, mean psnr, runs)` from a `steps.csv` body.
pub fn sweep_curve(steps_csv: &str) -> Result<Vec<(String, usize, f64, usize)>> {
    let mut lines = steps_csv.lines();
    if lines.next() != Some("arm,repeat,steps,psnr") {
        return Err(parse_err("step sweep", 1, "unexpected header"));
    }
    let mut acc: Vec<(String, usize, f64, usize)> = Vec::new();
    for (i, l) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != 4 {
            return Err(parse_err("step sweep", i + 2, "expected 4 fields"));
        }
        let k: usize = f[2].parse().map_err(|e| parse_err("step sweep", i + 2, e))?;
        let v: f64 = f[3].parse().map_err(|e| parse_err("step sweep", i + 2, e))?;
        match acc.iter_mut().find(|(a, s, _, _)| a == f[0] && *s == k) {
            Some(e) => {
                e.2 += v;
                e.3 += 1;
            }
            None => acc.push((f[0].to_string(), k, v, 1)),
        }
    }
    for e in &mut acc {
        e.2 /= e.3 as f64;
    }
    Ok(acc)
}

pub fn sweep_curve_csv(curve: &[(String, usize, f64, usize)]) -> String {
    let mut s = String::from("arm,steps,psnr,runs\n");
    for (a, k, v, n) in curve {
        let _ = writeln!(s, "{a},{k},{v:.6},{n}");
    }
    s
}

/// Plain-text rendering of the ablation table and the step sweep.
pub fn render_report(rows: &[TableRow], curve: &[(String, usize, f64, usize)]) -> String {
    let f = |v: Option<f64>, d: usize| v.map_or_else(|| "-".to_string(), |v| format!("{v:.d$}"));
    let mut s = String::new();
    let _ = writeln!(s, "{:<16} {:<10} {:>4} {:>14} {:>7} {:>6} {:>8} {:>7} {:>6} {:>10}", "arm", "property", "runs", "PSNR", "SSIM", "LPIPS", "AE(deg)", "AMRE", "WHDR", "trainable");
    for r in rows {
        let psnr = match (r.scores.psnr, r.psnr_std) {
            (Some(p), Some(sd)) => format!("{p:.2} ± {sd:.2}"),
            (p, _) => f(p, 2),
        };
        let _ = writeln!(
            s,
            "{:<16} {:<10} {:>4} {:>14} {:>7} {:>6} {:>8} {:>7} {:>6} {:>10}",
            r.arm,
            r.property.name(),
            r.runs,
            psnr,
            f(r.scores.ssim, 3),
            "n/a",
            f(r.scores.ae_deg, 2),
            f(r.scores.amre, 4),
            f(r.scores.whdr, 3),
            r.trainable_params
        );
    }
    if !curve.is_empty() {
        let _ = writeln!(s, "\nalbedo PSNR vs sampler steps");
        let mut arms: Vec<&str> = Vec::new();
        for (a, ..) in curve {
            if !arms.contains(&a.as_str()) {
                arms.push(a);
            }
        }
        for a in arms {
            let pts: Vec<String> = curve.iter().filter(|c| c.0 == a).map(|c| format!("K={}: {:.2}", c.1, c.2)).collect();
            let _ = writeln!(s, "{a:<16} {}", pts.join("  "));
        }
    }
    s
}
