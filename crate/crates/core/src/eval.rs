//! Test-split evaluation of a trained estimator and the `metrics.csv` layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::encode_image;
use crate::metrics::{amre, angular_error, psnr, ssim, synthesize_judgments, whdr, WHDR_DELTA};
use crate::model::VelocityModel;
use crate::scenegen::{ConditionId, IntrinsicSet, Sample};
use crate::tensor::Map;
use crate::train::{predict, sample_seed, Mode};

/// Judgment pairs synthesized per test image for WHDR.
pub const WHDR_PAIRS: usize = 200;

/// Metrics for one property. Entries that do not apply are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub ae_deg: Option<f64>,
    pub amre: Option<f64>,
    pub whdr: Option<f64>,
}

impl Scores {
    fn fields(&self) -> [Option<f64>; 5] {
        [self.psnr, self.ssim, self.ae_deg, self.amre, self.whdr]
    }

    fn from_fields(f: [Option<f64>; 5]) -> Scores {
        Scores {
            psnr: f[0],
            ssim: f[1],
            ae_deg: f[2],
            amre: f[3],
            whdr: f[4],
        }
    }

    /// Field-wise mean over the scores where a field is present.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a Scores>) -> Scores {
        let mut sums = [0.0; 5];
        let mut counts = [0usize; 5];
        for s in items {
            for (k, v) in s.fields().into_iter().enumerate() {
                if let Some(v) = v {
                    sums[k] += v;
                    counts[k] += 1;
                }
            }
        }
        Scores::from_fields(std::array::from_fn(|k| (counts[k] > 0).then(|| sums[k] / counts[k] as f64)))
    }
}

/// Score a predicted property map against ground truth.
pub fn score(pred: &Map, gt: &IntrinsicSet, cond: ConditionId, judgment_seed: u64) -> Result<Scores> {
    let target = cond.of(gt);
    Ok(match cond {
        ConditionId::Albedo => {
            let judgments = synthesize_judgments(target, Some(&gt.mask), WHDR_PAIRS, judgment_seed, WHDR_DELTA);
            Scores {
                psnr: Some(psnr(pred, target, 1.0)?),
                ssim: Some(ssim(pred, target)?),
                whdr: Some(whdr(pred, &judgments)?.value),
                ..Scores::default()
            }
        }
        ConditionId::Metallic | ConditionId::Roughness => Scores {
            psnr: Some(psnr(pred, target, 1.0)?),
            ssim: Some(ssim(pred, target)?),
            ..Scores::default()
        },
        ConditionId::Normal => Scores {
            ae_deg: Some(angular_error(pred, target, &gt.mask)?),
            ..Scores::default()
        },
        ConditionId::Depth => Scores {
            amre: Some(amre(pred, target, &gt.mask, true)?.value),
            ..Scores::default()
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub sample: usize,
    pub property: ConditionId,
    pub scores: Scores,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub rows: Vec<EvalRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

impl Evaluation {
    pub fn mean(&self, property: ConditionId) -> Scores {
        Scores::mean(self.rows.iter().filter(|r| r.property == property).map(|r| &r.scores))
    }

    pub fn properties(&self) -> Vec<ConditionId> {
        let mut p: Vec<ConditionId> = self.rows.iter().map(|r| r.property).collect();
        p.sort();
        p.dedup();
        p
    }

    /// One row per (sample, property) plus one `mean` row per property.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample,property,psnr,ssim,ae_deg,amre,whdr\n");
        let line = |s: &mut String, name: &str, p: ConditionId, sc: &Scores| {
            let cells: Vec<String> = sc.fields().into_iter().map(cell).collect();
            s.push_str(&format!("{name},{p},{}\n", cells.join(",")));
        };
        for r in &self.rows {
            line(&mut s, &format!("{:05}", r.sample), r.property, &r.scores);
        }
        for p in self.properties() {
            line(&mut s, "mean", p, &self.mean(p));
        }
        s
    }
}

/// Predict and score `properties` on every sample. Results do not depend on
/// `jobs`.
pub fn evaluate(model: &VelocityModel<f32>, mode: Mode, samples: &[Sample], properties: &[ConditionId], steps: usize, seed: u64, jobs: usize) -> Result<Evaluation> {
    if samples.is_empty() || properties.is_empty() {
        return Err(Error::invalid("evaluation needs samples and properties"));
    }
    let one = |i: usize| -> Result<Vec<EvalRow>> {
        let s = &samples[i];
        let image = encode_image(&s.image)?.to_f32();
        properties
            .iter()
            .map(|&p| {
                let pred = predict(model, mode, &image, p, steps, sample_seed(seed, i))?;
                Ok(EvalRow {
                    sample: i,
                    property: p,
                    scores: score(&pred.map, &s.intrinsics, p, sample_seed(seed ^ 0x3a3a, i))?,
                })
            })
            .collect()
    };
    let idx: Vec<usize> = (0..samples.len()).collect();
    let parts: Vec<Result<Vec<EvalRow>>> = if jobs <= 1 {
        idx.iter().map(|&i| one(i)).collect()
    } else {
        let chunk = idx.len().div_ceil(jobs);
        std::thread::scope(|scope| {
            let handles: Vec<_> = idx
                .chunks(chunk)
                .map(|c| scope.spawn(|| c.iter().map(|&i| one(i)).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
        })
    };
    let mut rows = Vec::new();
    for p in parts {
        rows.extend(p?);
    }
    Ok(Evaluation { rows })
}
