//! Image-to-intrinsic flow matching: the identity latent codec, straight-path
//! interpolation, the velocity loss and the K-step Euler sampler.

use crate::error::{Error, Result};
use crate::model::{Tensor, VelocityModel};
use crate::scenegen::{ConditionId, IntrinsicSet, FAR_PLANE};
use crate::tensor::Map;

/// Norm below which a decoded normal is replaced by `(0,0,1)`.
pub const NORMAL_EPS: f64 = 1e-6;
/// Smallest depth produced by decoding (depth must stay positive).
pub const MIN_DEPTH: f64 = 1e-3;
/// Default Euler step count.
pub const DEFAULT_STEPS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentRole {
    Image,
    Intrinsic(ConditionId),
}

/// A 3-channel pixel-space latent in `[-1,1]`.
///
/// Stored in f64 so that encode/decode round trips are exact.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub z: Tensor<f64>,
    pub role: LatentRole,
}

impl LatentCode {
    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            c: self.z.c,
            h: self.z.h,
            w: self.z.w,
            data: self.z.data.iter().map(|v| *v as f32).collect(),
        }
    }

    pub fn from_f32(z: &Tensor<f32>, role: LatentRole) -> LatentCode {
        LatentCode {
            z: Tensor {
                c: z.c,
                h: z.h,
                w: z.w,
                data: z.data.iter().map(|v| *v as f64).collect(),
            },
            role,
        }
    }
}

fn check_range(name: &str, data: &[f32], lo: f32, hi: f32) -> Result<()> {
    match data.iter().find(|v| !(lo..=hi).contains(*v)) {
        Some(v) => Err(Error::invalid(format!("{name} value {v} outside [{lo},{hi}]"))),
        None => Ok(()),
    }
}

/// Map an image in `[0,1]` to `[-1,1]`.
pub fn encode_image(image: &Map) -> Result<LatentCode> {
    if image.channels != 3 {
        return Err(Error::invalid(format!("image must have 3 channels, got {}", image.channels)));
    }
    check_range("image", &image.data, 0.0, 1.0)?;
    Ok(LatentCode {
        z: Tensor {
            c: 3,
            h: image.height,
            w: image.width,
            data: image.data.iter().map(|v| 2.0 * *v as f64 - 1.0).collect(),
        },
        role: LatentRole::Image,
    })
}

/// Inverse of [`encode_image`], clamped to `[0,1]`.
pub fn decode_image(z: &Tensor<f64>) -> Map {
    Map {
        channels: z.c,
        height: z.h,
        width: z.w,
        data: z.data.iter().map(|v| ((v.clamp(-1.0, 1.0) + 1.0) / 2.0) as f32).collect(),
    }
}

/// Map a property in its native range to a 3-channel latent.
///
/// Single-channel properties are replicated across channels. Normals pass
/// through unchanged and depth uses `2d/far - 1`.
pub fn encode(map: &Map, cond: ConditionId) -> Result<LatentCode> {
    let native = cond.native_channels();
    if map.channels != native {
        return Err(Error::invalid(format!("{cond}: expected {native} channels, got {}", map.channels)));
    }
    let forward: fn(f64) -> f64 = match cond {
        ConditionId::Albedo | ConditionId::Metallic | ConditionId::Roughness => {
            check_range(cond.name(), &map.data, 0.0, 1.0)?;
            |v| 2.0 * v - 1.0
        }
        ConditionId::Normal => {
            check_range("normal", &map.data, -1.0, 1.0)?;
            |v| v
        }
        ConditionId::Depth => {
            if let Some(v) = map.data.iter().find(|v| !(**v > 0.0 && **v as f64 <= FAR_PLANE)) {
                return Err(Error::invalid(format!("depth value {v} outside (0, {FAR_PLANE}]")));
            }
            |v| 2.0 * v / FAR_PLANE - 1.0
        }
    };
    let hw = map.pixels();
    let mut data = Vec::with_capacity(3 * hw);
    for c in 0..3 {
        let src = map.plane(if native == 1 { 0 } else { c });
        data.extend(src.iter().map(|v| forward(*v as f64)));
    }
    Ok(LatentCode {
        z: Tensor {
            c: 3,
            h: map.height,
            w: map.width,
            data,
        },
        role: LatentRole::Intrinsic(cond),
    })
}

/// Decoded property map plus the pixels whose normal fell back to `(0,0,1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub map: Map,
    pub degenerate: Vec<(usize, usize)>,
}

/// Inverse of [`encode`]: single-channel targets take the channel mean,
/// normals are renormalized, everything is clamped to its valid range.
pub fn decode(z: &Tensor<f64>, cond: ConditionId) -> Result<Decoded> {
    if z.c != 3 {
        return Err(Error::invalid(format!("latent must have 3 channels, got {}", z.c)));
    }
    let hw = z.hw();
    let ch = |c: usize| &z.data[c * hw..(c + 1) * hw];
    let mean: Vec<f64> = (0..hw).map(|i| (ch(0)[i] + ch(1)[i] + ch(2)[i]) / 3.0).collect();
    let unit = |v: f64| (v.clamp(-1.0, 1.0) + 1.0) / 2.0;
    let mut degenerate = Vec::new();
    let data: Vec<f32> = match cond {
        ConditionId::Albedo => z.data.iter().map(|v| unit(*v) as f32).collect(),
        ConditionId::Metallic | ConditionId::Roughness => mean.iter().map(|v| unit(*v) as f32).collect(),
        ConditionId::Depth => mean
            .iter()
            .map(|v| (unit(*v) * FAR_PLANE).max(MIN_DEPTH) as f32)
            .collect(),
        ConditionId::Normal => {
            let mut out = vec![0f32; 3 * hw];
            for i in 0..hw {
                let v = [ch(0)[i], ch(1)[i], ch(2)[i]].map(|x| x.clamp(-1.0, 1.0));
                let n = normalize_or_up(v);
                if n.is_none() {
                    degenerate.push((i / z.w, i % z.w));
                }
                let n = n.unwrap_or([0.0, 0.0, 1.0]);
                for c in 0..3 {
                    out[c * hw + i] = n[c] as f32;
                }
            }
            out
        }
    };
    Ok(Decoded {
        map: Map {
            channels: cond.native_channels(),
            height: z.h,
            width: z.w,
            data,
        },
        degenerate,
    })
}

fn normalize_or_up(v: [f64; 3]) -> Option<[f64; 3]> {
    let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    (len >= NORMAL_EPS).then(|| v.map(|x| x / len))
}

/// `Z_t = Z (1-t) + Z_i t`.
pub fn interpolate<T: crate::model::Real>(z: &Tensor<T>, zi: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("t = {t} outside [0,1]")));
    }
    ensure_same(z, zi)?;
    let (a, b) = (T::lit(1.0 - t), T::lit(t));
    Ok(Tensor {
        data: z.data.iter().zip(&zi.data).map(|(x, y)| *x * a + *y * b).collect(),
        ..z.clone()
    })
}

/// Velocity along the straight path: `Z_i - Z`.
pub fn flow_target<T: crate::model::Real>(z: &Tensor<T>, zi: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same(z, zi)?;
    Ok(Tensor {
        data: z.data.iter().zip(&zi.data).map(|(x, y)| *y - *x).collect(),
        ..z.clone()
    })
}

fn ensure_same<T>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if (a.c, a.h, a.w) != (b.c, b.h, b.w) {
        return Err(Error::invalid(format!("shape {}x{}x{} vs {}x{}x{}", a.c, a.h, a.w, b.c, b.h, b.w)));
    }
    Ok(())
}

/// Anything that predicts a velocity for `(Z_t, t, condition)`.
pub trait VelocityField {
    fn velocity(&self, z: &Tensor<f32>, t: f64, cond: ConditionId) -> Result<Tensor<f32>>;
}

impl VelocityField for VelocityModel<f32> {
    fn velocity(&self, z: &Tensor<f32>, t: f64, cond: ConditionId) -> Result<Tensor<f32>> {
        let c = (self.config.num_conditions > 0).then_some(cond.index());
        self.forward(z, t, c)
    }
}

/// A network that also sees the source image, concatenated after `Z_t`.
pub struct ImageConditioned<'a> {
    pub model: &'a VelocityModel<f32>,
    pub image: &'a Tensor<f32>,
}

impl VelocityField for ImageConditioned<'_> {
    fn velocity(&self, z: &Tensor<f32>, t: f64, cond: ConditionId) -> Result<Tensor<f32>> {
        let x = Tensor::concat(z, self.image);
        self.model.velocity(&x, t, cond)
    }
}

impl<F: Fn(&Tensor<f32>, f64, ConditionId) -> Tensor<f32>> VelocityField for F {
    fn velocity(&self, z: &Tensor<f32>, t: f64, cond: ConditionId) -> Result<Tensor<f32>> {
        Ok(self(z, t, cond))
    }
}

/// Mean squared error between predicted and target velocities over a batch.
///
/// Each item is `(Z, Z_i, cond, t)`.
pub fn flow_loss(field: &impl VelocityField, batch: &[(Tensor<f32>, Tensor<f32>, ConditionId, f64)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut total = 0.0;
    for (z, zi, cond, t) in batch {
        let zt = interpolate(z, zi, *t)?;
        let target = flow_target(z, zi)?;
        let pred = field.velocity(&zt, *t, *cond)?;
        ensure_same(&pred, &target)?;
        total += mse(&pred.data, &target.data);
    }
    Ok(total / batch.len() as f64)
}

pub(crate) fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.len() as f64
}

/// Integrate `dZ/dt = v(Z, t)` from `t=0` to `t=1` in `k` Euler steps.
pub fn euler_integrate(field: &impl VelocityField, z0: &Tensor<f32>, cond: ConditionId, k: usize) -> Result<Tensor<f32>> {
    if k == 0 {
        return Err(Error::invalid("step count must be at least 1"));
    }
    let dt = 1.0 / k as f64;
    let mut z = z0.clone();
    for step in 0..k {
        let v = field.velocity(&z, step as f64 * dt, cond)?;
        ensure_same(&v, &z)?;
        let h = dt as f32;
        z.data.iter_mut().zip(&v.data).for_each(|(a, b)| *a += h * *b);
        if !z.data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical {
                what: format!("euler sampler ({cond})"),
                step,
            });
        }
    }
    Ok(z)
}

/// Encode `image`, integrate with `k` steps and decode as `cond`.
pub fn euler_sample(field: &impl VelocityField, image: &Map, cond: ConditionId, k: usize) -> Result<Decoded> {
    let z0 = encode_image(image)?.to_f32();
    let z1 = euler_integrate(field, &z0, cond, k)?;
    decode(&LatentCode::from_f32(&z1, LatentRole::Intrinsic(cond)).z, cond)
}

/// All five properties from a single full-length Euler step each.
///
/// The mask is unknown for predictions and is set to 1 everywhere.
pub fn one_step_estimate(field: &impl VelocityField, image: &Map) -> Result<IntrinsicSet> {
    let mut maps = Vec::with_capacity(5);
    for cond in ConditionId::ALL {
        maps.push(euler_sample(field, image, cond, 1)?.map);
    }
    let mut it = maps.into_iter();
    let mut next = || it.next().expect("five maps");
    Ok(IntrinsicSet {
        albedo: next(),
        metallic: next(),
        roughness: next(),
        normal: next(),
        depth: next(),
        mask: Map::filled(1, image.height, image.width, 1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t32(c: usize, h: usize, w: usize, f: impl Fn(usize) -> f32) -> Tensor<f32> {
        Tensor {
            c,
            h,
            w,
            data: (0..c * h * w).map(f).collect(),
        }
    }

    #[test]
    fn encode_examples() {
        let a = encode(&Map::filled(3, 2, 2, 0.5), ConditionId::Albedo).unwrap();
        assert!(a.z.data.iter().all(|v| *v == 0.0));
        let r = encode(&Map::filled(1, 2, 2, 0.25), ConditionId::Roughness).unwrap();
        assert_eq!(r.z.c, 3);
        assert!(r.z.data.iter().all(|v| *v == -0.5));
        let d = encode(&Map::filled(1, 2, 2, FAR_PLANE as f32), ConditionId::Depth).unwrap();
        assert!(d.z.data.iter().all(|v| *v == 1.0));
        assert!(encode(&Map::filled(3, 2, 2, 1.5), ConditionId::Albedo).is_err());
        assert!(encode(&Map::filled(1, 2, 2, 0.0), ConditionId::Depth).is_err());
        assert!(encode(&Map::filled(1, 2, 2, 0.5), ConditionId::Albedo).is_err());
    }

    #[test]
    fn decode_examples() {
        let mut z = Tensor::<f64>::zeros(3, 1, 1);
        z.data = vec![-0.4, -0.5, -0.6];
        let r = decode(&z, ConditionId::Roughness).unwrap();
        assert!((r.map.data[0] - 0.25).abs() < 1e-7);
        z.data = vec![1e-8, 0.0, -1e-8];
        let n = decode(&z, ConditionId::Normal).unwrap();
        assert_eq!(n.map.data, vec![0.0, 0.0, 1.0]);
        assert_eq!(n.degenerate, vec![(0, 0)]);
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let z = t32(3, 2, 2, |i| (i as f32).sin());
        let zi = t32(3, 2, 2, |i| (i as f32).cos());
        assert_eq!(interpolate(&z, &zi, 0.0).unwrap(), z);
        assert_eq!(interpolate(&z, &zi, 1.0).unwrap(), zi);
        let m = interpolate(&t32(3, 2, 2, |_| -1.0), &t32(3, 2, 2, |_| 1.0), 0.5).unwrap();
        assert!(m.data.iter().all(|v| *v == 0.0));
        assert!(interpolate(&z, &zi, 1.01).is_err());
        assert!(interpolate(&z, &zi, -0.01).is_err());
    }

    #[test]
    fn flow_target_examples() {
        let z = t32(3, 2, 2, |i| i as f32 * 0.1);
        assert!(flow_target(&z, &z).unwrap().data.iter().all(|v| *v == 0.0));
        let one = flow_target(&t32(3, 2, 2, |_| 0.0), &t32(3, 2, 2, |_| 1.0)).unwrap();
        assert!(one.data.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn flow_loss_oracle_and_zero_predictor() {
        let z = t32(3, 4, 4, |i| (i as f32 * 0.3).sin());
        let zi = t32(3, 4, 4, |i| (i as f32 * 0.7).cos());
        let target = flow_target(&z, &zi).unwrap();
        let oracle = |_: &Tensor<f32>, _: f64, _: ConditionId| target.clone();
        let batch = vec![(z.clone(), zi.clone(), ConditionId::Albedo, 0.3)];
        assert_eq!(flow_loss(&oracle, &batch).unwrap(), 0.0);
        let zero = |x: &Tensor<f32>, _: f64, _: ConditionId| Tensor::zeros(x.c, x.h, x.w);
        let ones = vec![(t32(3, 4, 4, |_| 0.0), t32(3, 4, 4, |_| 1.0), ConditionId::Depth, 0.8)];
        assert_eq!(flow_loss(&zero, &ones).unwrap(), 1.0);
    }

    #[test]
    fn euler_is_exact_on_constant_fields() {
        let z0 = t32(3, 2, 2, |i| (i as f32 * 0.4).sin() * 0.5);
        let zi = t32(3, 2, 2, |i| (i as f32 * 0.9).cos() * 0.5);
        let v = flow_target(&z0, &zi).unwrap();
        let field = |_: &Tensor<f32>, _: f64, _: ConditionId| v.clone();
        for k in [1, 2, 3, 10, 50] {
            let z1 = euler_integrate(&field, &z0, ConditionId::Albedo, k).unwrap();
            for (a, b) in z1.data.iter().zip(&zi.data) {
                assert!((a - b).abs() < 1e-6, "k={k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn euler_on_linear_field() {
        let field = |z: &Tensor<f32>, _: f64, _: ConditionId| Tensor {
            data: z.data.iter().map(|v| -v).collect(),
            ..z.clone()
        };
        let z0 = t32(1, 1, 1, |_| 1.0);
        let z1 = euler_integrate(&field, &z0, ConditionId::Albedo, 10).unwrap();
        assert!((z1.data[0] as f64 - 0.9f64.powi(10)).abs() < 1e-6);
        assert!((z1.data[0] as f64 - 0.348_678_44).abs() < 1e-6);
        let err = |k: usize| {
            let z = euler_integrate(&field, &z0, ConditionId::Albedo, k).unwrap();
            (z.data[0] as f64 - (-1f64).exp()).abs()
        };
        let ratio = err(64) / err(128);
        assert!((ratio - 2.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn non_finite_velocity_aborts_with_step() {
        let field = |z: &Tensor<f32>, t: f64, _: ConditionId| Tensor {
            data: z.data.iter().map(|v| if t > 0.25 { f32::INFINITY } else { *v }).collect(),
            ..z.clone()
        };
        let z0 = t32(3, 2, 2, |_| 0.1);
        match euler_integrate(&field, &z0, ConditionId::Normal, 10) {
            Err(Error::Numerical { step, .. }) => assert_eq!(step, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn oracle_one_step_estimate_recovers_ground_truth() {
        let spec = crate::scenegen::sample_scene(4, crate::scenegen::Difficulty::Simple);
        let (image, gt) = crate::scenegen::render(&spec, 16, 16).unwrap();
        let zimg = encode_image(&image).unwrap().to_f32();
        let targets: Vec<Tensor<f32>> = ConditionId::ALL
            .iter()
            .map(|c| flow_target(&zimg, &encode(c.of(&gt), *c).unwrap().to_f32()).unwrap())
            .collect();
        let oracle = |_: &Tensor<f32>, _: f64, c: ConditionId| targets[c.index()].clone();
        let est = one_step_estimate(&oracle, &image).unwrap();
        est.validate().unwrap();
        for c in ConditionId::ALL {
            let (a, b) = (c.of(&est), c.of(&gt));
            let tol = if c == ConditionId::Depth { 1e-5 } else { 1e-6 };
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < tol, "{c}: {x} vs {y}");
            }
        }
        assert_eq!(one_step_estimate(&oracle, &image).unwrap(), est);
        assert_eq!(euler_sample(&oracle, &image, ConditionId::Albedo, 1).unwrap().map, est.albedo);
    }

    #[test]
    fn random_model_estimate_is_valid() {
        let m = VelocityModel::<f32>::new(crate::model::UNetConfig { base_channels: 4, ..crate::model::UNetConfig::velocity(3) }, 3).unwrap();
        let image = Map::from_fn(3, 8, 8, |c, y, x| ((c + y * 3 + x) % 7) as f32 / 7.0);
        one_step_estimate(&m, &image).unwrap().validate().unwrap();
    }

    fn unit_map() -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(0.0f32..=1.0, 12)
    }

    proptest! {
        #[test]
        fn codec_round_trip_is_exact(v in unit_map(), d in prop::collection::vec(1e-3f32..=10.0, 4)) {
            let albedo = Map::from_vec(3, 2, 2, v.clone()).unwrap();
            let back = decode(&encode(&albedo, ConditionId::Albedo).unwrap().z, ConditionId::Albedo).unwrap();
            prop_assert_eq!(back.map, albedo);
            let m = Map::from_vec(1, 2, 2, v[..4].to_vec()).unwrap();
            for c in [ConditionId::Metallic, ConditionId::Roughness] {
                prop_assert_eq!(decode(&encode(&m, c).unwrap().z, c).unwrap().map, m.clone());
            }
            let depth = Map::from_vec(1, 2, 2, d).unwrap();
            prop_assert_eq!(decode(&encode(&depth, ConditionId::Depth).unwrap().z, ConditionId::Depth).unwrap().map, depth);
        }

        #[test]
        fn normals_round_trip_up_to_renormalization(a in -1.0f64..1.0, b in -1.0f64..1.0, c in 0.05f64..1.0) {
            let n = crate::geom::Vec3([a, b, c]).normalize();
            let map = Map::from_vec(3, 1, 1, n.0.iter().map(|v| *v as f32).collect()).unwrap();
            let back = decode(&encode(&map, ConditionId::Normal).unwrap().z, ConditionId::Normal).unwrap();
            for (x, y) in back.map.data.iter().zip(&map.data) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn interpolation_endpoints_exact(v in prop::collection::vec(-1.0f32..1.0, 24)) {
            let z = Tensor { c: 3, h: 2, w: 2, data: v[..12].to_vec() };
            let zi = Tensor { c: 3, h: 2, w: 2, data: v[12..].to_vec() };
            prop_assert_eq!(interpolate(&z, &zi, 0.0).unwrap(), z.clone());
            prop_assert_eq!(interpolate(&z, &zi, 1.0).unwrap(), zi.clone());
            let neg = flow_target(&zi, &z).unwrap();
            let pos = flow_target(&z, &zi).unwrap();
            prop_assert!(pos.data.iter().zip(&neg.data).all(|(a, b)| *a == -*b));
        }

        #[test]
        fn flow_loss_nonnegative(v in prop::collection::vec(-2.0f32..2.0, 36), t in 0.0f64..=1.0) {
            let z = Tensor { c: 3, h: 2, w: 2, data: v[..12].to_vec() };
            let zi = Tensor { c: 3, h: 2, w: 2, data: v[12..24].to_vec() };
            let pred = Tensor { c: 3, h: 2, w: 2, data: v[24..].to_vec() };
            let field = |_: &Tensor<f32>, _: f64, _: ConditionId| pred.clone();
            prop_assert!(flow_loss(&field, &[(z, zi, ConditionId::Metallic, t)]).unwrap() >= 0.0);
        }
    }
}
