use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    avg_pool2, avg_pool2_backward, silu_backward, silu_vec, upsample2, upsample2_backward, Affine, Conv, ConvCache,
    Tensor,
};
use super::{Grads, ParamId, ParamStore, Real};
use crate::error::{Error, Result};

/// Architecture of the U-shaped conv network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub depth_levels: usize,
    pub embed_dim: usize,
    /// Number of learned condition rows (0 disables the table).
    pub num_conditions: usize,
}

impl UNetConfig {
    pub fn velocity(in_channels: usize) -> Self {
        UNetConfig {
            in_channels,
            out_channels: 3,
            base_channels: 32,
            depth_levels: 3,
            embed_dim: 32,
            num_conditions: 5,
        }
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth_levels == 0 || self.base_channels == 0 || self.embed_dim < 2 || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("invalid network config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Every base parameter trains.
    #[default]
    Full,
    /// Only low-rank adapter factors train.
    AdapterOnly,
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    conv_a: Conv,
    conv_b: Conv,
    proj: Affine,
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    conv_a: Option<ConvCache<T>>,
    conv_b: Option<ConvCache<T>>,
    proj_w: Vec<T>,
    pre_a: Vec<T>,
    pre_b: Vec<T>,
}

/// Intermediate values from one forward pass, consumed by [`VelocityModel::backward`].
#[derive(Clone, Debug)]
pub struct Tape<T> {
    temb: Vec<T>,
    t1_w: Vec<T>,
    h1: Vec<T>,
    a1: Vec<T>,
    t2_w: Vec<T>,
    e: Vec<T>,
    se: Vec<T>,
    enc: Vec<BlockCache<T>>,
    dec: Vec<BlockCache<T>>,
    out_cache: Option<ConvCache<T>>,
    skip_channels: Vec<usize>,
    cond: Option<usize>,
}

/// Conditional velocity / noise estimator: a small U-Net whose levels receive
/// the timestep (plus optional condition) embedding as per-channel biases.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityModel<T> {
    pub config: UNetConfig,
    pub params: ParamStore<T>,
    time1: Affine,
    time2: Affine,
    cond_table: Option<ParamId>,
    enc: Vec<Block>,
    dec: Vec<Block>,
    out: Conv,
}

pub fn sinusoidal_embedding<T: Real>(t: f64, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let scaled = t * 1000.0;
    let mut out = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    out.extend(freqs.iter().map(|f| T::lit((scaled * f).sin())));
    out.extend(freqs.iter().map(|f| T::lit((scaled * f).cos())));
    out
}

impl<T: Real> VelocityModel<T> {
    /// Randomly initialized model; the seed fully determines the parameters.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let e = config.embed_dim;
        let emb_std = (1.0 / e as f64).sqrt();
        let time1 = Affine::new(&mut params, "time.lin1", e, e, emb_std, &mut rng);
        let time2 = Affine::new(&mut params, "time.lin2", e, e, emb_std, &mut rng);
        let cond_table =
            (config.num_conditions > 0).then(|| params.add_normal("cond.table", &[config.num_conditions, e], 1.0, &mut rng));
        let mut enc = Vec::new();
        let mut cin = config.in_channels;
        for l in 0..config.depth_levels {
            let ch = config.channels_at(l);
            enc.push(Block {
                conv_a: Conv::new(&mut params, &format!("enc{l}.conv_a"), cin, ch, 3, &mut rng),
                conv_b: Conv::new(&mut params, &format!("enc{l}.conv_b"), ch, ch, 3, &mut rng),
                proj: Affine::new(&mut params, &format!("enc{l}.proj"), e, ch, emb_std, &mut rng),
            });
            cin = ch;
        }
        let mut dec = Vec::new();
        for l in (0..config.depth_levels - 1).rev() {
            let ch = config.channels_at(l);
            let below = config.channels_at(l + 1);
            dec.push(Block {
                conv_a: Conv::new(&mut params, &format!("dec{l}.conv_a"), below + ch, ch, 3, &mut rng),
                conv_b: Conv::new(&mut params, &format!("dec{l}.conv_b"), ch, ch, 3, &mut rng),
                proj: Affine::new(&mut params, &format!("dec{l}.proj"), e, ch, emb_std, &mut rng),
            });
        }
        let out = Conv::new(&mut params, "out", config.base_channels, config.out_channels, 1, &mut rng);
        Ok(VelocityModel {
            config,
            params,
            time1,
            time2,
            cond_table,
            enc,
            dec,
            out,
        })
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeros(config: UNetConfig) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        for p in m.params.iter_mut() {
            p.data.iter_mut().for_each(|v| *v = T::zero());
        }
        Ok(m)
    }

    fn affines(&self) -> Vec<&Affine> {
        let mut v = vec![&self.time1, &self.time2];
        for b in self.enc.iter().chain(&self.dec) {
            v.extend([&b.conv_a.lin, &b.conv_b.lin, &b.proj]);
        }
        v.push(&self.out.lin);
        v
    }

    fn affines_mut(&mut self) -> Vec<&mut Affine> {
        let mut v = vec![&mut self.time1, &mut self.time2];
        for b in self.enc.iter_mut().chain(self.dec.iter_mut()) {
            v.extend([&mut b.conv_a.lin, &mut b.conv_b.lin, &mut b.proj]);
        }
        v.push(&mut self.out.lin);
        v
    }

    /// Attach rank-`rank` adapters to every linear map and conv kernel.
    pub fn attach_adapters(&mut self, rank: usize, scale: f64, seed: u64) -> Result<()> {
        if rank == 0 {
            return Err(Error::Config("adapter rank must be positive".into()));
        }
        if self.has_adapters() {
            return Err(Error::Config("adapters already attached".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x10fa_da97);
        let mut params = std::mem::take(&mut self.params);
        for a in self.affines_mut() {
            a.attach_adapter(&mut params, rank, scale, &mut rng);
        }
        self.params = params;
        Ok(())
    }

    pub fn has_adapters(&self) -> bool {
        self.time1.adapter.is_some()
    }

    pub fn adapter_rank(&self) -> Option<(usize, f64)> {
        self.time1.adapter.map(|a| (a.rank, a.scale))
    }

    /// `sum r * (in + out)` over adapted maps.
    pub fn adapter_param_count(&self) -> usize {
        self.affines().iter().map(|a| a.adapter_param_count()).sum()
    }

    /// Parameters of the model without adapters.
    pub fn base_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.name.contains(".lora_"))
            .map(|p| p.data.len())
            .sum()
    }

    pub fn set_train_mode(&mut self, mode: &TrainMode) -> Result<()> {
        match mode {
            TrainMode::Full => self.params.set_trainable(|n| !n.contains(".lora_")),
            TrainMode::AdapterOnly => {
                if !self.has_adapters() {
                    return Err(Error::Config("adapter-only training requires attached adapters".into()));
                }
                self.params.set_trainable(|n| n.contains(".lora_"));
            }
        }
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        self.params.trainable_count()
    }

    fn check_input(&self, x: &Tensor<T>, t: f64, cond: Option<usize>) -> Result<()> {
        if x.c != self.config.in_channels {
            return Err(Error::invalid(format!("expected {} input channels, got {}", self.config.in_channels, x.c)));
        }
        let div = 1usize << (self.config.depth_levels - 1);
        if !x.h.is_multiple_of(div) || !x.w.is_multiple_of(div) || x.h == 0 || x.w == 0 {
            return Err(Error::invalid(format!("spatial size {}x{} not divisible by {div}", x.h, x.w)));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("timestep {t} outside [0,1]")));
        }
        if !x.data.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite model input"));
        }
        match (cond, self.cond_table) {
            (Some(c), Some(_)) if c >= self.config.num_conditions => Err(Error::invalid(format!("condition id {c} out of range"))),
            (Some(_), None) => Err(Error::invalid("model has no condition table")),
            _ => Ok(()),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, t: f64, cond: Option<usize>) -> Result<Tensor<T>> {
        self.check_input(x, t, cond)?;
        Ok(self.run(x, t, cond, None))
    }

    pub fn forward_tape(&self, x: &Tensor<T>, t: f64, cond: Option<usize>) -> Result<(Tensor<T>, Tape<T>)> {
        self.check_input(x, t, cond)?;
        let mut tape = None;
        let y = self.run(x, t, cond, Some(&mut tape));
        Ok((y, tape.expect("tape recorded")))
    }

    fn run_block(&self, block: &Block, x: &Tensor<T>, se: &[T], cache: Option<&mut BlockCache<T>>) -> Tensor<T> {
        let proj_w = block.proj.effective_weight(&self.params);
        let bias = block.proj.forward_vec(&self.params, &proj_w, se);
        let (mut ca, mut cb) = (None, None);
        let recording = cache.is_some();
        let mut za = block.conv_a.forward(&self.params, x, recording.then_some(&mut ca));
        let hw = za.hw();
        for (c, b) in bias.iter().enumerate() {
            za.data[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v += *b);
        }
        let aa = Tensor {
            data: silu_vec(&za.data),
            ..za.clone()
        };
        let zb = block.conv_b.forward(&self.params, &aa, recording.then_some(&mut cb));
        let out = Tensor {
            data: silu_vec(&zb.data),
            ..zb.clone()
        };
        if let Some(c) = cache {
            *c = BlockCache {
                conv_a: ca,
                conv_b: cb,
                proj_w,
                pre_a: za.data,
                pre_b: zb.data,
            };
        }
        out
    }

    fn run(&self, x: &Tensor<T>, t: f64, cond: Option<usize>, tape: Option<&mut Option<Tape<T>>>) -> Tensor<T> {
        let p = &self.params;
        let temb: Vec<T> = sinusoidal_embedding(t, self.config.embed_dim);
        let t1_w = self.time1.effective_weight(p);
        let h1 = self.time1.forward_vec(p, &t1_w, &temb);
        let a1 = silu_vec(&h1);
        let t2_w = self.time2.effective_weight(p);
        let mut e = self.time2.forward_vec(p, &t2_w, &a1);
        if let (Some(c), Some(table)) = (cond, self.cond_table) {
            let row = &p.get(table)[c * self.config.embed_dim..(c + 1) * self.config.embed_dim];
            e.iter_mut().zip(row).for_each(|(v, r)| *v += *r);
        }
        let se = silu_vec(&e);

        let recording = tape.is_some();
        let empty = || BlockCache {
            conv_a: None,
            conv_b: None,
            proj_w: Vec::new(),
            pre_a: Vec::new(),
            pre_b: Vec::new(),
        };
        let mut enc_caches: Vec<BlockCache<T>> = Vec::new();
        let mut dec_caches: Vec<BlockCache<T>> = Vec::new();
        let mut skips = Vec::new();
        let mut h = x.clone();
        let levels = self.enc.len();
        for (l, block) in self.enc.iter().enumerate() {
            let mut cache = empty();
            h = self.run_block(block, &h, &se, recording.then_some(&mut cache));
            enc_caches.push(cache);
            if l + 1 < levels {
                skips.push(h.clone());
                h = avg_pool2(&h);
            }
        }
        let skip_channels: Vec<usize> = skips.iter().map(|s| s.c).collect();
        for block in &self.dec {
            let skip = skips.pop().expect("one skip per decoder level");
            let up = upsample2(&h);
            let cat = Tensor::concat(&up, &skip);
            let mut cache = empty();
            h = self.run_block(block, &cat, &se, recording.then_some(&mut cache));
            dec_caches.push(cache);
        }
        let mut out_cache = None;
        let y = self.out.forward(p, &h, recording.then_some(&mut out_cache));
        if let Some(slot) = tape {
            *slot = Some(Tape {
                temb,
                t1_w,
                h1,
                a1,
                t2_w,
                e,
                se,
                enc: enc_caches,
                dec: dec_caches,
                out_cache,
                skip_channels,
                cond,
            });
        }
        y
    }

    /// Backward through a block. Returns `(dx, d(silu(e)))`.
    fn block_backward(&self, block: &Block, cache: &BlockCache<T>, se: &[T], dout: &Tensor<T>, grads: &mut Grads<T>, want_dx: bool) -> (Option<Tensor<T>>, Vec<T>) {
        let dzb = Tensor {
            data: silu_backward(&cache.pre_b, &dout.data),
            ..dout.clone()
        };
        let daa = block
            .conv_b
            .backward(&self.params, grads, cache.conv_b.as_ref().expect("recorded"), &dzb, true)
            .expect("dx requested");
        let dza = Tensor {
            data: silu_backward(&cache.pre_a, &daa.data),
            ..daa
        };
        let hw = dza.hw();
        let dbias: Vec<T> = (0..dza.c)
            .map(|c| dza.data[c * hw..(c + 1) * hw].iter().copied().sum())
            .collect();
        let dse = block.proj.backward_vec(&self.params, grads, &cache.proj_w, se, &dbias);
        let dx = block
            .conv_a
            .backward(&self.params, grads, cache.conv_a.as_ref().expect("recorded"), &dza, want_dx);
        (dx, dse)
    }

    /// Accumulate `d<out, dy>/dθ` into `grads` for trainable parameters and
    /// optionally return the gradient with respect to the input.
    pub fn backward(&self, tape: &Tape<T>, dy: &Tensor<T>, grads: &mut Grads<T>, want_dx: bool) -> Option<Tensor<T>> {
        let p = &self.params;
        let mut dse = vec![T::zero(); self.config.embed_dim];
        let add = |acc: &mut Vec<T>, v: Vec<T>| acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);

        let mut dh = self
            .out
            .backward(p, grads, tape.out_cache.as_ref().expect("recorded"), dy, true)
            .expect("dx requested");
        let levels = self.enc.len();
        let mut dskips: Vec<Option<Tensor<T>>> = vec![None; levels.saturating_sub(1)];
        for (i, (block, cache)) in self.dec.iter().zip(&tape.dec).enumerate().rev() {
            let level = levels - 2 - i;
            let (dcat, d) = self.block_backward(block, cache, &tape.se, &dh, grads, true);
            add(&mut dse, d);
            let dcat = dcat.expect("dx requested");
            let (dup, dskip) = dcat.split(dcat.c - tape.skip_channels[level]);
            dskips[level] = Some(dskip);
            dh = upsample2_backward(&dup);
        }
        let mut dx = None;
        for l in (0..levels).rev() {
            if l + 1 < levels {
                dh = avg_pool2_backward(&dh);
                let ds = dskips[l].as_ref().expect("skip gradient");
                dh.data.iter_mut().zip(&ds.data).for_each(|(a, b)| *a += *b);
            }
            let need = l > 0 || want_dx;
            let (d, d_se) = self.block_backward(&self.enc[l], &tape.enc[l], &tape.se, &dh, grads, need);
            add(&mut dse, d_se);
            if l > 0 {
                dh = d.expect("dx requested");
            } else {
                dx = d;
            }
        }

        let de = silu_backward(&tape.e, &dse);
        if let (Some(c), Some(table)) = (tape.cond, self.cond_table) {
            if let Some(g) = grads.get_mut(table) {
                let e = self.config.embed_dim;
                g[c * e..(c + 1) * e].iter_mut().zip(&de).for_each(|(a, b)| *a += *b);
            }
        }
        let da1 = self.time2.backward_vec(p, grads, &tape.t2_w, &tape.a1, &de);
        let dh1 = silu_backward(&tape.h1, &da1);
        self.time1.backward_vec(p, grads, &tape.t1_w, &tape.temb, &dh1);
        dx
    }

    pub fn zero_grads(&self) -> Grads<T> {
        self.params.zero_grads()
    }

    /// Same architecture and adapters in another scalar type.
    pub fn cast<U: Real>(&self) -> VelocityModel<U> {
        VelocityModel {
            config: self.config.clone(),
            params: self.params.cast(),
            time1: self.time1.clone(),
            time2: self.time2.clone(),
            cond_table: self.cond_table,
            enc: self.enc.clone(),
            dec: self.dec.clone(),
            out: self.out.clone(),
        }
    }
}

impl<T: Real> VelocityModel<T> {
    /// Scalar-output convenience for tests: `sum(w * forward(x))`.
    pub fn weighted_sum(&self, x: &Tensor<T>, t: f64, cond: Option<usize>, w: &[T]) -> Result<T> {
        Ok(self.forward(x, t, cond)?.data.iter().zip(w).map(|(a, b)| *a * *b).sum())
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn tiny(in_channels: usize, levels: usize) -> UNetConfig {
        UNetConfig {
            in_channels,
            out_channels: 3,
            base_channels: 3,
            depth_levels: levels,
            embed_dim: 6,
            num_conditions: 5,
        }
    }

    fn random_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor {
            c,
            h,
            w,
            data: (0..c * h * w).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }

    fn fd_check(model: &mut VelocityModel<f64>, cond: Option<usize>) {
        let x = random_tensor(model.config.in_channels, 8, 8, 1);
        let wts = random_tensor(3, 8, 8, 2).data;
        let t = 0.37;
        let (_, tape) = model.forward_tape(&x, t, cond).unwrap();
        let mut grads = model.zero_grads();
        let dy = Tensor { c: 3, h: 8, w: 8, data: wts.clone() };
        let dx = model.backward(&tape, &dy, &mut grads, true).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let rel = |a: f64, b: f64| (a - b).abs() / (a.abs() + b.abs()).max(1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
        for name in names {
            let id = model.params.id(&name).unwrap();
            if !model.params.is_trainable(id) {
                assert!(grads.get(id).is_empty(), "{name} frozen but has gradient buffer");
                continue;
            }
            let n = model.params.get(id).len();
            for _ in 0..4 {
                let i = rng.random_range(0..n);
                let orig = model.params.get(id)[i];
                model.params.get_mut(id)[i] = orig + h;
                let fp = model.weighted_sum(&x, t, cond, &wts).unwrap();
                model.params.get_mut(id)[i] = orig - h;
                let fm = model.weighted_sum(&x, t, cond, &wts).unwrap();
                model.params.get_mut(id)[i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = grads.get(id)[i];
                if fd.abs() + an.abs() > 1e-7 {
                    let e = rel(fd, an);
                    assert!(e < 1e-4, "{name}[{i}]: analytic {an} vs fd {fd}");
                    worst = worst.max(e);
                }
            }
        }
        for i in (0..x.data.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (model.weighted_sum(&xp, t, cond, &wts).unwrap() - model.weighted_sum(&xm, t, cond, &wts).unwrap()) / (2.0 * h);
            assert!(rel(fd, dx.data[i]) < 1e-4 || (fd - dx.data[i]).abs() < 1e-9, "dx[{i}]: {} vs {fd}", dx.data[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = VelocityModel::<f64>::new(tiny(4, 3), 5).unwrap();
        fd_check(&mut m, Some(2));
        let mut m = VelocityModel::<f64>::new(tiny(2, 2), 6).unwrap();
        fd_check(&mut m, None);
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let mut m = VelocityModel::<f64>::new(tiny(3, 2), 7).unwrap();
        m.attach_adapters(2, 0.5, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for p in m.params.iter_mut().filter(|p| p.name.ends_with("lora_b")) {
            p.data.iter_mut().for_each(|v| *v = 0.3 * rng.sample::<f64, _>(StandardNormal));
        }
        m.set_train_mode(&TrainMode::AdapterOnly).unwrap();
        fd_check(&mut m, Some(4));
    }

    #[test]
    fn fresh_adapters_leave_outputs_unchanged() {
        let base = VelocityModel::<f64>::new(tiny(3, 3), 11).unwrap();
        let mut adapted = base.clone();
        adapted.attach_adapters(4, 2.0, 99).unwrap();
        let x = random_tensor(3, 8, 8, 4);
        let a = base.forward(&x, 0.5, Some(1)).unwrap();
        let b = adapted.forward(&x, 0.5, Some(1)).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn adapter_only_touches_only_adapters() {
        let mut m = VelocityModel::<f32>::new(UNetConfig::velocity(3), 1).unwrap();
        let base = m.base_param_count();
        m.attach_adapters(8, 1.0, 1).unwrap();
        m.set_train_mode(&TrainMode::AdapterOnly).unwrap();
        assert_eq!(m.trainable_count(), m.adapter_param_count());
        assert_eq!(m.params.total_count(), base + m.adapter_param_count());
        let expected: usize = m.affines().iter().map(|a| 8 * (a.fan_in + a.fan_out)).sum();
        assert_eq!(m.adapter_param_count(), expected);

        let x = Tensor::<f32>::zeros(3, 16, 16);
        let (y, tape) = m.forward_tape(&x, 0.2, Some(0)).unwrap();
        let mut g = m.zero_grads();
        m.backward(&tape, &Tensor { data: vec![1.0; y.data.len()], ..y }, &mut g, false);
        for (name, grad) in g.named(&m.params) {
            assert_eq!(!grad.is_empty(), name.contains(".lora_"), "{name}");
        }
    }

    #[test]
    fn condition_rows_change_the_output() {
        let m = VelocityModel::<f64>::new(tiny(3, 2), 2).unwrap();
        let x = random_tensor(3, 8, 8, 6);
        let outs: Vec<_> = (0..5).map(|c| m.forward(&x, 0.5, Some(c)).unwrap().data).collect();
        for i in 0..5 {
            for j in i + 1..5 {
                assert_ne!(outs[i], outs[j]);
            }
        }
    }

    #[test]
    fn zero_model_outputs_zero() {
        let m = VelocityModel::<f32>::zeros(tiny(3, 3)).unwrap();
        let x = Tensor {
            c: 3,
            h: 8,
            w: 8,
            data: (0..192).map(|i| (i as f32).sin()).collect(),
        };
        assert!(m.forward(&x, 0.9, Some(3)).unwrap().data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn construction_is_deterministic() {
        let a = VelocityModel::<f32>::new(tiny(3, 3), 42).unwrap();
        let b = VelocityModel::<f32>::new(tiny(3, 3), 42).unwrap();
        let c = VelocityModel::<f32>::new(tiny(3, 3), 43).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        assert_ne!(a.params.checksum(), c.params.checksum());
    }

    #[test]
    fn bad_inputs_rejected() {
        let m = VelocityModel::<f32>::new(tiny(3, 3), 1).unwrap();
        assert!(m.forward(&Tensor::zeros(2, 8, 8), 0.5, None).is_err());
        assert!(m.forward(&Tensor::zeros(3, 6, 8), 0.5, None).is_err());
        assert!(m.forward(&Tensor::zeros(3, 8, 8), 1.5, None).is_err());
        assert!(m.forward(&Tensor::zeros(3, 8, 8), 0.5, Some(5)).is_err());
        let mut nan = Tensor::zeros(3, 8, 8);
        nan.data[3] = f32::NAN;
        assert!(m.forward(&nan, 0.5, None).is_err());
    }
}
