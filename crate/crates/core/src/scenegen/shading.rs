//! Lambertian diffuse + Blinn-Phong specular point-light shading.
//!
//! This is the single source of truth for pixel radiance: scene rendering,
//! relighting and light fitting all evaluate it on the same stored inputs.

use super::{CameraFrame, IntrinsicSet, PointLight};
use crate::geom::Vec3;
use crate::tensor::Map;

/// Per-pixel shading inputs, positions and normals in camera space.
#[derive(Clone, Copy, Debug)]
pub struct ShadingInput {
    pub albedo: [f32; 3],
    pub metallic: f32,
    pub roughness: f32,
    pub normal: [f32; 3],
    pub position: Vec3,
}

impl ShadingInput {
    pub fn normal_vec(&self) -> Vec3 {
        Vec3::new(self.normal[0] as f64, self.normal[1] as f64, self.normal[2] as f64)
    }

    pub fn shininess(&self) -> f64 {
        let r = 1.0 - self.roughness as f64;
        4.0 + r * r * 252.0
    }

    /// Specular color: white blended toward albedo by metallic, scaled by `0.1 + 0.9 * metallic`.
    pub fn specular_color(&self) -> [f64; 3] {
        let m = self.metallic as f64;
        self.albedo.map(|a| ((1.0 - m) + m * a as f64) * (m * 0.9 + 0.1))
    }

    pub fn diffuse_color(&self) -> [f64; 3] {
        let m = self.metallic as f64;
        self.albedo.map(|a| (1.0 - m) * a as f64)
    }
}

/// Unclamped radiance. `lights` must be in camera space; `visible[l] == false`
/// drops light `l` (hard shadow).
pub fn shade_radiance(input: &ShadingInput, lights: &[PointLight], ambient: f64, visible: Option<&[bool]>) -> [f64; 3] {
    let n = input.normal_vec();
    let p = input.position;
    let view = (-p).normalize();
    let kd = input.diffuse_color();
    let ks = input.specular_color();
    let shininess = input.shininess();
    let mut out = input.albedo.map(|a| ambient * a as f64);
    for (li, light) in lights.iter().enumerate() {
        if visible.is_some_and(|v| !v[li]) {
            continue;
        }
        let to_light = light.position - p;
        let d2 = to_light.dot(to_light);
        let l = to_light * (1.0 / d2.sqrt());
        let ndl = n.dot(l);
        if ndl <= 0.0 {
            continue;
        }
        let h = (l + view).normalize();
        let ndh = n.dot(h).max(0.0);
        let spec = ndh.powf(shininess);
        for c in 0..3 {
            out[c] += (kd[c] * ndl + ks[c] * spec) * light.intensity[c] / d2;
        }
    }
    out
}

pub fn shade_pixel(input: &ShadingInput, lights: &[PointLight], ambient: f64, visible: Option<&[bool]>) -> [f32; 3] {
    shade_radiance(input, lights, ambient, visible).map(|v| v.clamp(0.0, 1.0) as f32)
}

/// World-space lights expressed in camera space.
pub fn lights_to_camera(frame: &CameraFrame, lights: &[PointLight]) -> Vec<PointLight> {
    lights
        .iter()
        .map(|l| PointLight {
            position: frame.point_to_camera(l.position),
            intensity: l.intensity,
        })
        .collect()
}

/// Gather the shading inputs of pixel `(y, x)`; the position is rebuilt from depth.
pub fn pixel_input(set: &IntrinsicSet, frame: &CameraFrame, y: usize, x: usize) -> ShadingInput {
    let (h, w) = (set.height(), set.width());
    ShadingInput {
        albedo: set.albedo_at(y, x),
        metallic: set.metallic.get(0, y, x),
        roughness: set.roughness.get(0, y, x),
        normal: set.normal_at(y, x),
        position: frame.unproject(y, x, h, w, set.depth.get(0, y, x) as f64),
    }
}

/// Shade every pixel of an intrinsic set. Background pixels show their albedo.
/// `visibility`, when given, holds `lights.len()` flags per pixel in row-major order.
pub fn shade_image(
    set: &IntrinsicSet,
    frame: &CameraFrame,
    lights_world: &[PointLight],
    ambient: f64,
    visibility: Option<&[bool]>,
) -> Map {
    let lights = lights_to_camera(frame, lights_world);
    let (h, w) = (set.height(), set.width());
    let mut img = Map::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            let rgb = if set.valid(y, x) {
                let vis = visibility.map(|v| {
                    let base = (y * w + x) * lights.len();
                    &v[base..base + lights.len()]
                });
                shade_pixel(&pixel_input(set, frame, y, x), &lights, ambient, vis)
            } else {
                set.albedo_at(y, x)
            };
            for (c, v) in rgb.into_iter().enumerate() {
                img.set(c, y, x, v);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(albedo: f32, metallic: f32) -> ShadingInput {
        ShadingInput {
            albedo: [albedo; 3],
            metallic,
            roughness: 0.5,
            normal: [0.0, 0.0, 1.0],
            position: Vec3::new(0.0, 0.0, -3.0),
        }
    }

    #[test]
    fn doubling_intensity_doubles_radiance_without_ambient() {
        let light = PointLight {
            position: Vec3::new(0.5, 1.0, -1.0),
            intensity: [2.0, 3.0, 4.0],
        };
        let double = PointLight {
            intensity: light.intensity.map(|v| 2.0 * v),
            ..light
        };
        let i = input(0.6, 0.3);
        let a = shade_radiance(&i, &[light], 0.0, None);
        let b = shade_radiance(&i, &[double], 0.0, None);
        for c in 0..3 {
            assert!((b[c] - 2.0 * a[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn light_behind_surface_contributes_nothing() {
        let light = PointLight {
            position: Vec3::new(0.0, 0.0, -5.0),
            intensity: [10.0; 3],
        };
        let r = shade_radiance(&input(0.7, 0.0), &[light], 0.2, None);
        for v in r {
            assert!((v - 0.2 * 0.7f32 as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_albedo_dielectric_keeps_only_white_specular() {
        // albedo 0, metallic 0: diffuse vanishes, specular stays 0.1-weighted white
        let i = input(0.0, 0.0);
        assert_eq!(i.diffuse_color(), [0.0; 3]);
        assert!(i.specular_color().iter().all(|v| (*v - 0.1).abs() < 1e-12));
    }
}
