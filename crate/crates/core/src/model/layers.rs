//! Conv / linear layers with optional low-rank adapters, plus the small
//! pointwise and resampling ops the U-Net needs. Every op has a hand-written
//! backward pass.

use super::{Grads, ParamId, ParamStore, Real};
use crate::tensor::Map;

/// Planar `C x H x W` activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn from_map(m: &Map) -> Self {
        Tensor {
            c: m.channels,
            h: m.height,
            w: m.width,
            data: m.data.iter().map(|&v| T::lit(v as f64)).collect(),
        }
    }

    pub fn to_map(&self) -> Map {
        Map {
            channels: self.c,
            height: self.h,
            width: self.w,
            data: self.data.iter().map(|v| v.to_f64_lossy() as f32).collect(),
        }
    }

    #[inline]
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn concat(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        assert_eq!((a.h, a.w), (b.h, b.w));
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor {
            c: a.c + b.c,
            h: a.h,
            w: a.w,
            data,
        }
    }

    /// Inverse of [`Tensor::concat`] for gradients.
    pub fn split(&self, first: usize) -> (Tensor<T>, Tensor<T>) {
        let n = first * self.hw();
        (
            Tensor {
                c: first,
                h: self.h,
                w: self.w,
                data: self.data[..n].to_vec(),
            },
            Tensor {
                c: self.c - first,
                h: self.h,
                w: self.w,
                data: self.data[n..].to_vec(),
            },
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdapterIds {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scale: f64,
}

/// A linear map `W: out x in` with bias and an optional low-rank correction
/// `scale * B A` (`B: out x r`, `A: r x in`). Convolutions reuse it with
/// `in = cin * k * k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub adapter: Option<AdapterIds>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Affine {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, std: f64, rng: &mut impl rand::Rng) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), &[fan_out, fan_in], std, rng);
        let bias = store.add_zeros(format!("{name}.bias"), &[fan_out]);
        Affine {
            name: name.to_string(),
            weight,
            bias,
            adapter: None,
            fan_in,
            fan_out,
        }
    }

    /// Attach a rank-`rank` adapter with `A ~ N(0, 1/in)` and `B = 0`.
    pub fn attach_adapter<T: Real>(&mut self, store: &mut ParamStore<T>, rank: usize, scale: f64, rng: &mut impl rand::Rng) {
        let a = store.add_normal(format!("{}.lora_a", self.name), &[rank, self.fan_in], (1.0 / self.fan_in as f64).sqrt(), rng);
        let b = store.add_zeros(format!("{}.lora_b", self.name), &[self.fan_out, rank]);
        self.adapter = Some(AdapterIds { a, b, rank, scale });
    }

    pub fn adapter_param_count(&self) -> usize {
        self.adapter.map_or(0, |ad| ad.rank * (self.fan_in + self.fan_out))
    }

    /// `W + scale * B A`; exactly `W` when `B A == 0`.
    pub fn effective_weight<T: Real>(&self, store: &ParamStore<T>) -> Vec<T> {
        let mut w = store.get(self.weight).to_vec();
        if let Some(ad) = self.adapter {
            let mut delta = vec![T::zero(); self.fan_out * self.fan_in];
            T::gemm(self.fan_out, ad.rank, self.fan_in, T::lit(ad.scale), store.get(ad.b), false, store.get(ad.a), false, T::zero(), &mut delta);
            for (wi, di) in w.iter_mut().zip(&delta) {
                *wi += *di;
            }
        }
        w
    }

    /// Route `dW_eff` into the base weight and adapter factors.
    pub fn accumulate_weight_grad<T: Real>(&self, store: &ParamStore<T>, grads: &mut Grads<T>, dw: &[T]) {
        if let Some(g) = grads.get_mut(self.weight) {
            for (gi, di) in g.iter_mut().zip(dw) {
                *gi += *di;
            }
        }
        if let Some(ad) = self.adapter {
            let s = T::lit(ad.scale);
            if let Some(gb) = grads.get_mut(ad.b) {
                // dB = s * dW A^T
                T::gemm(self.fan_out, self.fan_in, ad.rank, s, dw, false, store.get(ad.a), true, T::one(), gb);
            }
            if let Some(ga) = grads.get_mut(ad.a) {
                // dA = s * B^T dW
                T::gemm(ad.rank, self.fan_out, self.fan_in, s, store.get(ad.b), true, dw, false, T::one(), ga);
            }
        }
    }

    fn wants_weight_grad<T: Real>(&self, grads: &Grads<T>) -> bool {
        !grads.get(self.weight).is_empty()
            || self
                .adapter
                .is_some_and(|ad| !grads.get(ad.a).is_empty() || !grads.get(ad.b).is_empty())
    }

    /// `y = W x + b` for a single vector.
    pub fn forward_vec<T: Real>(&self, store: &ParamStore<T>, w_eff: &[T], x: &[T]) -> Vec<T> {
        let mut y = store.get(self.bias).to_vec();
        T::gemm(self.fan_out, self.fan_in, 1, T::one(), w_eff, false, x, false, T::one(), &mut y);
        y
    }

    /// Backward of [`Affine::forward_vec`]; returns `dx`.
    pub fn backward_vec<T: Real>(&self, store: &ParamStore<T>, grads: &mut Grads<T>, w_eff: &[T], x: &[T], dy: &[T]) -> Vec<T> {
        if let Some(gb) = grads.get_mut(self.bias) {
            for (g, d) in gb.iter_mut().zip(dy) {
                *g += *d;
            }
        }
        if self.wants_weight_grad(grads) {
            let mut dw = vec![T::zero(); self.fan_out * self.fan_in];
            T::gemm(self.fan_out, 1, self.fan_in, T::one(), dy, false, x, false, T::zero(), &mut dw);
            self.accumulate_weight_grad(store, grads, &dw);
        }
        let mut dx = vec![T::zero(); self.fan_in];
        T::gemm(self.fan_in, self.fan_out, 1, T::one(), w_eff, true, dy, false, T::zero(), &mut dx);
        dx
    }
}

/// Same-padded 3x3 or 1x1 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub lin: Affine,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

/// What a convolution keeps for its backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    w_eff: Vec<T>,
    h: usize,
    w: usize,
}

impl Conv {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, rng: &mut impl rand::Rng) -> Self {
        assert!(k == 1 || k == 3, "only 1x1 and 3x3 kernels");
        let fan_in = cin * k * k;
        let lin = Affine::new(store, name, fan_in, cout, (1.0 / fan_in as f64).sqrt(), rng);
        Conv { lin, cin, cout, k }
    }

    fn im2col<T: Real>(&self, x: &Tensor<T>) -> Vec<T> {
        if self.k == 1 {
            return x.data.clone();
        }
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let mut cols = vec![T::zero(); self.cin * 9 * hw];
        for ci in 0..self.cin {
            let plane = &x.data[ci * hw..(ci + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &plane[sy as usize * w..][..w];
                        let dst = &mut row[y * w..][..w];
                        match kx {
                            0 => dst[1..].copy_from_slice(&src[..w - 1]),
                            1 => dst.copy_from_slice(src),
                            _ => dst[..w - 1].copy_from_slice(&src[1..]),
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T], h: usize, w: usize) -> Tensor<T> {
        if self.k == 1 {
            return Tensor {
                c: self.cin,
                h,
                w,
                data: cols.to_vec(),
            };
        }
        let hw = h * w;
        let mut out = Tensor::zeros(self.cin, h, w);
        for ci in 0..self.cin {
            let plane = &mut out.data[ci * hw..(ci + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[sy as usize * w..][..w];
                        let src = &row[y * w..][..w];
                        match kx {
                            0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += *s),
                            1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s),
                            _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += *s),
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>, cache: Option<&mut Option<ConvCache<T>>>) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "{}: channel mismatch", self.lin.name);
        let hw = x.hw();
        let cols = self.im2col(x);
        let w_eff = self.lin.effective_weight(store);
        let bias = store.get(self.lin.bias);
        let mut y = Tensor::zeros(self.cout, x.h, x.w);
        for (co, b) in bias.iter().enumerate() {
            y.data[co * hw..(co + 1) * hw].fill(*b);
        }
        T::gemm(self.cout, self.lin.fan_in, hw, T::one(), &w_eff, false, &cols, false, T::one(), &mut y.data);
        if let Some(slot) = cache {
            *slot = Some(ConvCache { cols, w_eff, h: x.h, w: x.w });
        }
        y
    }

    /// Accumulates parameter gradients and returns `dx` when requested.
    pub fn backward<T: Real>(&self, store: &ParamStore<T>, grads: &mut Grads<T>, cache: &ConvCache<T>, dy: &Tensor<T>, want_dx: bool) -> Option<Tensor<T>> {
        let hw = cache.h * cache.w;
        if let Some(gb) = grads.get_mut(self.lin.bias) {
            for (co, g) in gb.iter_mut().enumerate() {
                *g += dy.data[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
            }
        }
        if self.lin.wants_weight_grad(grads) {
            let mut dw = vec![T::zero(); self.cout * self.lin.fan_in];
            T::gemm(self.cout, hw, self.lin.fan_in, T::one(), &dy.data, false, &cache.cols, true, T::zero(), &mut dw);
            self.lin.accumulate_weight_grad(store, grads, &dw);
        }
        want_dx.then(|| {
            let mut dcols = vec![T::zero(); self.lin.fan_in * hw];
            T::gemm(self.lin.fan_in, self.cout, hw, T::one(), &cache.w_eff, true, &dy.data, false, T::zero(), &mut dcols);
            self.col2im(&dcols, cache.h, cache.w)
        })
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

pub fn silu_vec<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| silu(v)).collect()
}

/// `dy * silu'(pre)` elementwise.
pub fn silu_backward<T: Real>(pre: &[T], dy: &[T]) -> Vec<T> {
    pre.iter().zip(dy).map(|(&p, &d)| d * silu_grad(p)).collect()
}

pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let quarter = T::lit(0.25);
    let mut y = Tensor::zeros(x.c, h2, w2);
    for c in 0..x.c {
        for yy in 0..h2 {
            for xx in 0..w2 {
                let i = |dy: usize, dx: usize| x.data[(c * x.h + 2 * yy + dy) * x.w + 2 * xx + dx];
                y.data[(c * h2 + yy) * w2 + xx] = (i(0, 0) + i(0, 1) + i(1, 0) + i(1, 1)) * quarter;
            }
        }
    }
    y
}

pub fn avg_pool2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let quarter = T::lit(0.25);
    let mut dx = Tensor::zeros(dy.c, h, w);
    for c in 0..dy.c {
        for y in 0..h {
            for x in 0..w {
                dx.data[(c * h + y) * w + x] = dy.data[(c * dy.h + y / 2) * dy.w + x / 2] * quarter;
            }
        }
    }
    dx
}

pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut y = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        for yy in 0..h {
            for xx in 0..w {
                y.data[(c * h + yy) * w + xx] = x.data[(c * x.h + yy / 2) * x.w + xx / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (h2, w2) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.c, h2, w2);
    for c in 0..dy.c {
        for y in 0..dy.h {
            for x in 0..dy.w {
                dx.data[(c * h2 + y / 2) * w2 + x / 2] += dy.data[(c * dy.h + y) * dy.w + x];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct-loop reference convolution.
    fn conv_reference(store: &ParamStore<f64>, conv: &Conv, x: &Tensor<f64>) -> Tensor<f64> {
        let w = conv.lin.effective_weight(store);
        let b = store.get(conv.lin.bias);
        let r = conv.k as isize / 2;
        let mut y = Tensor::zeros(conv.cout, x.h, x.w);
        for co in 0..conv.cout {
            for yy in 0..x.h as isize {
                for xx in 0..x.w as isize {
                    let mut acc = b[co];
                    for ci in 0..conv.cin {
                        for ky in 0..conv.k as isize {
                            for kx in 0..conv.k as isize {
                                let (sy, sx) = (yy + ky - r, xx + kx - r);
                                if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                    continue;
                                }
                                let wi = ((co * conv.cin + ci) * conv.k + ky as usize) * conv.k + kx as usize;
                                acc += w[wi] * x.data[(ci * x.h + sy as usize) * x.w + sx as usize];
                            }
                        }
                    }
                    y.data[(co * x.h + yy as usize) * x.w + xx as usize] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [1, 3] {
            let mut store = ParamStore::<f64>::new();
            let mut conv = Conv::new(&mut store, "c", 3, 4, k, &mut rng);
            conv.lin.attach_adapter(&mut store, 2, 0.5, &mut rng);
            let b_id = conv.lin.adapter.unwrap().b;
            for v in store.get_mut(b_id) {
                *v = 0.3;
            }
            let bias = conv.lin.bias;
            store.get_mut(bias).copy_from_slice(&[0.1, -0.2, 0.3, 0.0]);
            let mut x = Tensor::zeros(3, 5, 6);
            for (i, v) in x.data.iter_mut().enumerate() {
                *v = ((i * 37 % 11) as f64 - 5.0) / 7.0;
            }
            let y = conv.forward(&store, &x, None);
            let r = conv_reference(&store, &conv, &x);
            for (a, b) in y.data.iter().zip(&r.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pool_and_upsample_are_adjoint_up_to_scale() {
        let mut x = Tensor::<f64>::zeros(2, 4, 4);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = i as f64;
        }
        let mut y = Tensor::<f64>::zeros(2, 2, 2);
        for (i, v) in y.data.iter_mut().enumerate() {
            *v = (i as f64).sin();
        }
        // <pool(x), y> == <x, pool^T(y)>
        let lhs: f64 = avg_pool2(&x).data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&avg_pool2_backward(&y).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let lhs: f64 = upsample2(&y).data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = y.data.iter().zip(&upsample2_backward(&x).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
