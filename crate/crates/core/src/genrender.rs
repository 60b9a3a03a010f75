//! The generative renderer: a noise-to-image denoiser conditioned on the
//! 9-channel intrinsic stack, and the score-distillation signal it provides
//! for the flow model.
//!
//! Stack channel order: albedo RGB (0-2), metallic (3), roughness (4),
//! normal xyz (5-7), depth (8). All channels are in `[-1,1]`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::ddpm::NoiseSchedule;
use crate::error::{Error, Result};
use crate::flow::{decode, encode, MIN_DEPTH, NORMAL_EPS};
use crate::model::{Real, Tensor, UNetConfig, VelocityModel};
use crate::scenegen::{ConditionId, IntrinsicSet, FAR_PLANE};
use crate::tensor::Map;

pub const STACK_CHANNELS: usize = 9;
/// First stack channel of each property, in [`ConditionId`] order.
pub const STACK_OFFSETS: [usize; 5] = [0, 3, 4, 5, 8];

/// The renderer's conditioning input.
#[derive(Clone, Debug, PartialEq)]
pub struct IntrinsicStack(Tensor<f32>);

impl IntrinsicStack {
    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }
}

/// Pack an intrinsic set at native widths using the latent range rules.
pub fn pack_stack(set: &IntrinsicSet) -> Result<IntrinsicStack> {
    let (h, w) = (set.height(), set.width());
    let hw = h * w;
    let mut data = Vec::with_capacity(STACK_CHANNELS * hw);
    for cond in ConditionId::ALL {
        let z = encode(cond.of(set), cond)?.z;
        data.extend(z.data[..cond.native_channels() * hw].iter().map(|v| *v as f32));
    }
    Ok(IntrinsicStack(Tensor {
        c: STACK_CHANNELS,
        h,
        w,
        data,
    }))
}

/// Inverse of [`pack_stack`]. The mask is not part of the stack and is set to 1.
pub fn unpack_stack(stack: &IntrinsicStack) -> Result<IntrinsicSet> {
    let t = &stack.0;
    let hw = t.hw();
    let mut maps = Vec::with_capacity(5);
    for cond in ConditionId::ALL {
        let off = STACK_OFFSETS[cond.index()];
        let n = cond.native_channels();
        let mut data = Vec::with_capacity(3 * hw);
        for c in 0..3 {
            let src = off + if n == 1 { 0 } else { c };
            data.extend(t.data[src * hw..(src + 1) * hw].iter().map(|v| *v as f64));
        }
        let z = Tensor { c: 3, h: t.h, w: t.w, data };
        maps.push(decode(&z, cond)?.map);
    }
    let mut it = maps.into_iter();
    let mut next = || it.next().expect("five maps");
    Ok(IntrinsicSet {
        albedo: next(),
        metallic: next(),
        roughness: next(),
        normal: next(),
        depth: next(),
        mask: Map::filled(1, t.h, t.w, 1.0),
    })
}

/// Network config for a renderer: noisy image plus stack in, noise out.
pub fn renderer_config(base_channels: usize) -> UNetConfig {
    UNetConfig {
        in_channels: 3 + STACK_CHANNELS,
        out_channels: 3,
        base_channels,
        num_conditions: 0,
        ..UNetConfig::velocity(3)
    }
}

/// A denoiser conditioned on an intrinsic stack.
pub trait ConditionalDenoiser<T: Real> {
    fn eps(&self, z_t: &Tensor<T>, t: usize, stack: &Tensor<T>) -> Result<Tensor<T>>;

    /// Residual `eps_hat - eps` and the gradient of `<sg(r), eps_hat> / n`
    /// with respect to the stack, where `n` is the element count of `r`.
    fn residual_and_stack_grad(&self, z_t: &Tensor<T>, t: usize, stack: &Tensor<T>, eps: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)>;
}

/// Renderer network plus the schedule it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Renderer<T> {
    pub model: VelocityModel<T>,
    pub schedule: NoiseSchedule,
}

impl<T: Real> Renderer<T> {
    pub fn new(model: VelocityModel<T>, schedule: NoiseSchedule) -> Result<Self> {
        if model.config.in_channels != 3 + STACK_CHANNELS || model.config.out_channels != 3 {
            return Err(Error::Config(format!(
                "renderer network must map {} to 3 channels, got {} to {}",
                3 + STACK_CHANNELS,
                model.config.in_channels,
                model.config.out_channels
            )));
        }
        Ok(Renderer { model, schedule })
    }

    /// Mark every parameter as frozen.
    pub fn freeze(&mut self) {
        self.model.params.set_trainable(|_| false);
    }

    fn input(&self, z_t: &Tensor<T>, stack: &Tensor<T>) -> Result<Tensor<T>> {
        if z_t.c != 3 || stack.c != STACK_CHANNELS || (z_t.h, z_t.w) != (stack.h, stack.w) {
            return Err(Error::invalid(format!(
                "renderer expects 3-channel latent and 9-channel stack of equal size, got {}x{}x{} and {}x{}x{}",
                z_t.c, z_t.h, z_t.w, stack.c, stack.h, stack.w
            )));
        }
        Ok(Tensor::concat(z_t, stack))
    }
}

impl<T: Real> ConditionalDenoiser<T> for Renderer<T> {
    fn eps(&self, z_t: &Tensor<T>, t: usize, stack: &Tensor<T>) -> Result<Tensor<T>> {
        self.model.forward(&self.input(z_t, stack)?, self.schedule.model_time(t), None)
    }

    fn residual_and_stack_grad(&self, z_t: &Tensor<T>, t: usize, stack: &Tensor<T>, eps: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let x = self.input(z_t, stack)?;
        let (eps_hat, tape) = self.model.forward_tape(&x, self.schedule.model_time(t), None)?;
        let scale = T::lit(1.0 / eps_hat.data.len() as f64);
        let r = Tensor {
            data: eps_hat.data.iter().zip(&eps.data).map(|(a, b)| *a - *b).collect(),
            ..eps_hat
        };
        let dy = Tensor {
            data: r.data.iter().map(|v| *v * scale).collect(),
            ..r.clone()
        };
        // Weights never receive gradient here.
        let mut none = self.model.params.no_grads();
        let dx = self.model.backward(&tape, &dy, &mut none, true).expect("input gradient requested");
        let (_, dstack) = dx.split(3);
        Ok((r, dstack))
    }
}

/// One score-distillation draw.
#[derive(Clone, Debug, PartialEq)]
pub struct SdsSample<T> {
    /// Gradient with respect to the stack.
    pub grad: Tensor<T>,
    /// Mean squared residual `|eps_hat - eps|^2 / n`.
    pub residual: f64,
    pub t: usize,
}

/// Draw `t ~ U{1..T}` and `eps ~ N(0, I)`, noise the image latent and return
/// the residual-weighted gradient with respect to the stack. The denoiser
/// weights are never differentiated.
pub fn sds_reconstruction_grad<T: Real, D: ConditionalDenoiser<T>>(renderer: &D, schedule: &NoiseSchedule, image_latent: &Tensor<T>, stack: &Tensor<T>, rng: &mut impl Rng) -> Result<SdsSample<T>> {
    let t = rng.random_range(1..=schedule.t_max());
    let eps = Tensor {
        data: (0..image_latent.data.len())
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect(),
        ..image_latent.clone()
    };
    sds_at(renderer, schedule, image_latent, stack, t, &eps)
}

/// [`sds_reconstruction_grad`] at a fixed draw.
pub fn sds_at<T: Real, D: ConditionalDenoiser<T>>(renderer: &D, schedule: &NoiseSchedule, image_latent: &Tensor<T>, stack: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<SdsSample<T>> {
    let z_t = schedule.forward_noise(image_latent, t, eps)?;
    let (r, grad) = renderer.residual_and_stack_grad(&z_t, t, stack, eps)?;
    let residual = r.data.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>() / r.data.len() as f64;
    Ok(SdsSample { grad, residual, t })
}

/// Deterministic DDIM sampling of an image latent conditioned on `stack`.
pub fn sample_renderer(renderer: &Renderer<f32>, stack: &Tensor<f32>, steps: usize, seed: u64) -> Result<Tensor<f32>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let sched = &renderer.schedule;
    let mut x = crate::ddpm::standard_normal(3, stack.h, stack.w, &mut rng);
    for (i, (t, prev)) in sched.strided(steps)?.into_iter().enumerate() {
        let eps = renderer.eps(&x, t, stack)?;
        x = crate::ddpm::ddim_step(&x, &eps, sched.alpha_bar(t)?, sched.alpha_bar(prev)?, 0.0, None)?;
        if !x.data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical {
                what: "renderer sampler".into(),
                step: i,
            });
        }
    }
    Ok(x)
}

fn clamp_unit<T: Real>(v: T) -> (T, bool) {
    let one = T::one();
    if v > one {
        (one, false)
    } else if v < -one {
        (-one, false)
    } else {
        (v, true)
    }
}

fn depth_floor() -> f64 {
    2.0 * MIN_DEPTH / FAR_PLANE - 1.0
}

/// Stack of decoded one-step latents (one 3-channel latent per property, in
/// [`ConditionId`] order), expressed in stack range. Matches
/// `pack_stack(decode(..))` up to rounding.
pub fn stack_from_latents<T: Real>(latents: &[Tensor<T>]) -> Result<Tensor<T>> {
    if latents.len() != 5 || latents.iter().any(|l| l.c != 3 || (l.h, l.w) != (latents[0].h, latents[0].w)) {
        return Err(Error::invalid("need five 3-channel latents of equal size"));
    }
    let (h, w) = (latents[0].h, latents[0].w);
    let hw = h * w;
    let mut out = Tensor::zeros(STACK_CHANNELS, h, w);
    let third = T::lit(1.0 / 3.0);
    for i in 0..hw {
        let px = |l: &Tensor<T>, c: usize| l.data[c * hw + i];
        let mean = |l: &Tensor<T>| (px(l, 0) + px(l, 1) + px(l, 2)) * third;
        for c in 0..3 {
            out.data[c * hw + i] = clamp_unit(px(&latents[0], c)).0;
        }
        out.data[3 * hw + i] = clamp_unit(mean(&latents[1])).0;
        out.data[4 * hw + i] = clamp_unit(mean(&latents[2])).0;
        let v = [0, 1, 2].map(|c| clamp_unit(px(&latents[3], c)).0);
        let n = unit_or_up(v);
        for c in 0..3 {
            out.data[(5 + c) * hw + i] = n.0[c];
        }
        out.data[8 * hw + i] = clamp_unit(mean(&latents[4])).0.max(T::lit(depth_floor()));
    }
    Ok(out)
}

fn unit_or_up<T: Real>(v: [T; 3]) -> ([T; 3], Option<T>) {
    let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if len.to_f64_lossy() < NORMAL_EPS {
        ([T::zero(), T::zero(), T::one()], None)
    } else {
        (v.map(|x| x / len), Some(len))
    }
}

/// Vector-Jacobian product of [`stack_from_latents`]: gradients with respect
/// to each latent given the gradient `dstack` with respect to the stack.
pub fn stack_from_latents_vjp<T: Real>(latents: &[Tensor<T>], dstack: &Tensor<T>) -> Vec<Tensor<T>> {
    let (h, w) = (latents[0].h, latents[0].w);
    let hw = h * w;
    let mut grads: Vec<Tensor<T>> = (0..5).map(|_| Tensor::zeros(3, h, w)).collect();
    let third = T::lit(1.0 / 3.0);
    for i in 0..hw {
        let px = |l: &Tensor<T>, c: usize| l.data[c * hw + i];
        let ds = |c: usize| dstack.data[c * hw + i];
        for c in 0..3 {
            if clamp_unit(px(&latents[0], c)).1 {
                grads[0].data[c * hw + i] = ds(c);
            }
        }
        for (k, ch) in [(1usize, 3usize), (2, 4)] {
            let m = (px(&latents[k], 0) + px(&latents[k], 1) + px(&latents[k], 2)) * third;
            if clamp_unit(m).1 {
                for c in 0..3 {
                    grads[k].data[c * hw + i] = ds(ch) * third;
                }
            }
        }
        let clamped = [0, 1, 2].map(|c| clamp_unit(px(&latents[3], c)));
        let (n, len) = unit_or_up(clamped.map(|p| p.0));
        if let Some(len) = len {
            let d = [ds(5), ds(6), ds(7)];
            let dot = n[0] * d[0] + n[1] * d[1] + n[2] * d[2];
            for c in 0..3 {
                if clamped[c].1 {
                    grads[3].data[c * hw + i] = (d[c] - n[c] * dot) / len;
                }
            }
        }
        let m = (px(&latents[4], 0) + px(&latents[4], 1) + px(&latents[4], 2)) * third;
        let (cm, inside) = clamp_unit(m);
        if inside && cm > T::lit(depth_floor()) {
            for c in 0..3 {
                grads[4].data[c * hw + i] = ds(8) * third;
            }
        }
    }
    grads
}
