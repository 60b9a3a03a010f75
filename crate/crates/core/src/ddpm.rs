//! Diffusion baselines: cosine noise schedule, forward noising, the DDIM
//! update, v-prediction, and the two diffusion samplers used in ablations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{Real, Tensor, VelocityModel};
use crate::scenegen::ConditionId;

/// Training timesteps of the default schedule.
pub const DEFAULT_T: usize = 1000;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// `alpha_bar[t]` for `t = 0..=T`, with `alpha_bar[0] = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule with per-step betas clipped at 0.999.
    pub fn cosine(t_max: usize) -> Result<Self> {
        if t_max < 2 {
            return Err(Error::Config(format!("schedule needs at least 2 steps, got {t_max}")));
        }
        let f = |t: usize| {
            let x = (t as f64 / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let mut alpha_bar = vec![1.0];
        for t in 1..=t_max {
            let beta = (1.0 - f(t) / f(t - 1)).min(MAX_BETA);
            let prev = alpha_bar[t - 1];
            alpha_bar.push(prev * (1.0 - beta));
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    pub fn t_max(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("timestep {t} outside 0..={}", self.t_max())))
    }

    /// `sqrt(alpha_bar)`.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar(t)?.sqrt())
    }

    /// `sqrt(1 - alpha_bar)`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok((1.0 - self.alpha_bar(t)?).sqrt())
    }

    /// Network time input for timestep `t`.
    pub fn model_time(&self, t: usize) -> f64 {
        t as f64 / self.t_max() as f64
    }

    /// Uniformly strided descending timesteps, each paired with its successor
    /// (the last pair ends at 0).
    pub fn strided(&self, steps: usize) -> Result<Vec<(usize, usize)>> {
        let t_max = self.t_max();
        if steps == 0 || steps > t_max {
            return Err(Error::invalid(format!("sampler steps must be in 1..={t_max}, got {steps}")));
        }
        let ts: Vec<usize> = (0..=steps).map(|i| (i * t_max + steps / 2) / steps).collect();
        Ok((1..=steps).rev().map(|i| (ts[i], ts[i - 1])).collect())
    }

    /// `sqrt(ab_t) x0 + sqrt(1-ab_t) eps`.
    pub fn forward_noise<T: Real>(&self, x0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        forward_noise(x0, eps, self.alpha_bar(t)?)
    }
}

fn same_shape<T>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if (a.c, a.h, a.w) != (b.c, b.h, b.w) {
        return Err(Error::invalid("tensor shapes differ"));
    }
    Ok(())
}

fn lincomb<T: Real>(a: &Tensor<T>, wa: f64, b: &Tensor<T>, wb: f64) -> Tensor<T> {
    let (wa, wb) = (T::lit(wa), T::lit(wb));
    Tensor {
        c: a.c,
        h: a.h,
        w: a.w,
        data: a.data.iter().zip(&b.data).map(|(x, y)| wa * *x + wb * *y).collect(),
    }
}

/// Forward noising at an explicit `alpha_bar`.
pub fn forward_noise<T: Real>(x0: &Tensor<T>, eps: &Tensor<T>, alpha_bar: f64) -> Result<Tensor<T>> {
    same_shape(x0, eps)?;
    check_alpha_bar(alpha_bar)?;
    Ok(lincomb(x0, alpha_bar.sqrt(), eps, (1.0 - alpha_bar).sqrt()))
}

fn check_alpha_bar(ab: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ab) {
        return Err(Error::invalid(format!("alpha_bar {ab} outside [0,1]")));
    }
    Ok(())
}

/// One DDIM update from `alpha_bar_t` to `alpha_bar_prev`.
///
/// With `tau = 0` the step is deterministic and `eps_new` is ignored.
pub fn ddim_step<T: Real>(x_t: &Tensor<T>, eps_pred: &Tensor<T>, alpha_bar_t: f64, alpha_bar_prev: f64, tau: f64, eps_new: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    same_shape(x_t, eps_pred)?;
    check_alpha_bar(alpha_bar_prev)?;
    if !(alpha_bar_t > 0.0 && alpha_bar_t <= 1.0) {
        return Err(Error::invalid(format!("alpha_bar_t {alpha_bar_t} must be in (0,1]")));
    }
    let rest = 1.0 - alpha_bar_prev - tau * tau;
    if tau < 0.0 || rest < -1e-12 {
        return Err(Error::invalid(format!("tau {tau} violates tau^2 <= 1 - alpha_bar_prev = {}", 1.0 - alpha_bar_prev)));
    }
    let x0 = lincomb(x_t, 1.0 / alpha_bar_t.sqrt(), eps_pred, -(1.0 - alpha_bar_t).sqrt() / alpha_bar_t.sqrt());
    let mut out = lincomb(&x0, alpha_bar_prev.sqrt(), eps_pred, rest.max(0.0).sqrt());
    if tau > 0.0 {
        let noise = eps_new.ok_or_else(|| Error::invalid("tau > 0 needs fresh noise"))?;
        same_shape(&out, noise)?;
        let tau = T::lit(tau);
        out.data.iter_mut().zip(&noise.data).for_each(|(o, n)| *o += tau * *n);
    }
    Ok(out)
}

/// `v = sqrt(ab) eps - sqrt(1-ab) x0`.
pub fn v_target<T: Real>(x0: &Tensor<T>, eps: &Tensor<T>, alpha_bar: f64) -> Result<Tensor<T>> {
    same_shape(x0, eps)?;
    check_alpha_bar(alpha_bar)?;
    Ok(lincomb(eps, alpha_bar.sqrt(), x0, -(1.0 - alpha_bar).sqrt()))
}

/// Clean-sample estimate from a noise prediction.
pub fn x0_from_eps<T: Real>(x_t: &Tensor<T>, eps: &Tensor<T>, alpha_bar: f64) -> Tensor<T> {
    lincomb(x_t, 1.0 / alpha_bar.sqrt(), eps, -((1.0 - alpha_bar) / alpha_bar).sqrt())
}

/// Clean-sample estimate from a v prediction.
pub fn x0_from_v<T: Real>(x_t: &Tensor<T>, v: &Tensor<T>, alpha_bar: f64) -> Tensor<T> {
    lincomb(x_t, alpha_bar.sqrt(), v, -(1.0 - alpha_bar).sqrt())
}

/// Noise estimate from a v prediction.
pub fn eps_from_v<T: Real>(x_t: &Tensor<T>, v: &Tensor<T>, alpha_bar: f64) -> Tensor<T> {
    lincomb(x_t, (1.0 - alpha_bar).sqrt(), v, alpha_bar.sqrt())
}

/// Mean squared error between predicted and true noise.
pub fn eps_loss(predictor: impl Fn(&Tensor<f32>, usize) -> Result<Tensor<f32>>, x0: &Tensor<f32>, eps: &Tensor<f32>, t: usize, schedule: &NoiseSchedule) -> Result<f64> {
    let x_t = schedule.forward_noise(x0, t, eps)?;
    let pred = predictor(&x_t, t)?;
    same_shape(&pred, eps)?;
    Ok(crate::flow::mse(&pred.data, &eps.data))
}

/// Noise estimate consistent with the clean estimate clipped to `[-1,1]`.
///
/// Near `alpha_bar = 0` the unclipped clean estimate divides the noise error
/// by `sqrt(alpha_bar)`; clipping keeps early sampler steps in data range.
pub fn clip_eps<T: Real>(x_t: &Tensor<T>, eps: &Tensor<T>, alpha_bar: f64) -> Tensor<T> {
    let one = T::one();
    let mut x0 = x0_from_eps(x_t, eps, alpha_bar);
    x0.data.iter_mut().for_each(|v| *v = v.max(-one).min(one));
    lincomb(x_t, 1.0 / (1.0 - alpha_bar).sqrt(), &x0, -(alpha_bar / (1.0 - alpha_bar)).sqrt())
}

pub fn standard_normal(c: usize, h: usize, w: usize, rng: &mut impl rand::Rng) -> Tensor<f32> {
    Tensor {
        c,
        h,
        w,
        data: (0..c * h * w).map(|_| StandardNormal.sample(rng)).collect(),
    }
}

fn finite_or_abort(x: &Tensor<f32>, what: &str, step: usize) -> Result<()> {
    if x.data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical {
            what: what.to_string(),
            step,
        })
    }
}

/// Image-conditioned noise-to-intrinsic DDIM sampling. The network sees
/// `concat(x_t, image)` and predicts noise.
pub fn sample_noise_to_intrinsic(model: &VelocityModel<f32>, image: &Tensor<f32>, cond: ConditionId, steps: usize, tau: f64, seed: u64, schedule: &NoiseSchedule) -> Result<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = standard_normal(3, image.h, image.w, &mut rng);
    let c = (model.config.num_conditions > 0).then_some(cond.index());
    for (i, (t, prev)) in schedule.strided(steps)?.into_iter().enumerate() {
        let ab = schedule.alpha_bar(t)?;
        let eps = clip_eps(&x, &model.forward(&Tensor::concat(&x, image), schedule.model_time(t), c)?, ab);
        let fresh = (tau > 0.0).then(|| standard_normal(3, image.h, image.w, &mut rng));
        x = ddim_step(&x, &eps, ab, schedule.alpha_bar(prev)?, tau, fresh.as_ref())?;
        finite_or_abort(&x, "ddim sampler", i)?;
    }
    Ok(x)
}

/// Image-to-intrinsic sampling with a v-prediction network, where the image
/// latent plays the role of the noise endpoint.
pub fn sample_image_to_intrinsic_v(model: &VelocityModel<f32>, image: &Tensor<f32>, cond: ConditionId, steps: usize, schedule: &NoiseSchedule) -> Result<Tensor<f32>> {
    let mut x = image.clone();
    let c = (model.config.num_conditions > 0).then_some(cond.index());
    for (i, (t, prev)) in schedule.strided(steps)?.into_iter().enumerate() {
        let ab = schedule.alpha_bar(t)?;
        let v = model.forward(&x, schedule.model_time(t), c)?;
        let eps = clip_eps(&x, &eps_from_v(&x, &v, ab), ab);
        x = ddim_step(&x, &eps, ab, schedule.alpha_bar(prev)?, 0.0, None)?;
        finite_or_abort(&x, "v-prediction sampler", i)?;
    }
    Ok(x)
}
