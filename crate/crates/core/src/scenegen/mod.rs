//! Procedural toy scenes and their analytic rendering into paired
//! (image, intrinsic maps) samples.

mod camera;
mod corpus;
mod raycast;
mod shading;

pub use camera::{Camera, CameraFrame};
pub use corpus::{
    generate_corpus, load_intrinsics_dir, load_sample_dir, sample_params, save_intrinsics_dir, split_dir, Corpus, Manifest,
    Sample, Split, FORMAT_VERSION,
};
pub use raycast::{render, render_with_frame};
pub use shading::{lights_to_camera, pixel_input, shade_image, shade_pixel, shade_radiance, ShadingInput};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::tensor::Map;

/// Far plane in meters. Background pixels carry this depth.
pub const FAR_PLANE: f64 = 10.0;

/// Background albedo / radiance.
pub const BACKGROUND: [f64; 3] = [0.1, 0.1, 0.1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Sphere,
    Box,
    Plane,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub albedo: [f64; 3],
    pub metallic: f64,
    pub roughness: f64,
}

/// `size` is `[r, _, _]` for spheres and half-extents for boxes; planes ignore it.
/// Planes pass through `position` with normal `R * (0, 1, 0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub position: Vec3,
    /// XYZ Euler angles in radians.
    pub orientation: [f64; 3],
    pub size: [f64; 3],
    pub material: Material,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointLight {
    pub position: Vec3,
    pub intensity: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub lights: Vec<PointLight>,
    pub ambient: f64,
    pub camera: Camera,
    /// Cast hard shadow rays toward each light.
    #[serde(default)]
    pub shadows: bool,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Simple,
    Cluttered,
}

impl std::str::FromStr for Difficulty {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(Difficulty::Simple),
            "cluttered" => Ok(Difficulty::Cluttered),
            other => Err(Error::invalid(format!("unknown difficulty '{other}'"))),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::invalid("scene has no primitives"));
        }
        if self.lights.is_empty() || self.lights.len() > 4 {
            return Err(Error::invalid(format!("scene must have 1-4 lights, found {}", self.lights.len())));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let m = &p.material;
            let scalars = m.albedo.iter().chain([&m.metallic, &m.roughness]);
            if scalars.into_iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!("primitive {i}: material value outside [0,1]")));
            }
            if !p.position.is_finite() || p.size.iter().any(|s| !s.is_finite() || *s < 0.0) {
                return Err(Error::invalid(format!("primitive {i}: bad pose or size")));
            }
        }
        for (i, l) in self.lights.iter().enumerate() {
            if l.intensity.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::invalid(format!("light {i}: negative or non-finite intensity")));
            }
            if !l.position.is_finite() {
                return Err(Error::invalid(format!("light {i}: non-finite position")));
            }
        }
        if !(0.0..=0.3).contains(&self.ambient) {
            return Err(Error::invalid(format!("ambient {} outside [0, 0.3]", self.ambient)));
        }
        self.camera.frame()?;
        Ok(())
    }
}

fn random_material(rng: &mut ChaCha8Rng) -> Material {
    Material {
        albedo: [rng.random(), rng.random(), rng.random()],
        metallic: rng.random(),
        roughness: rng.random(),
    }
}

fn random_object(rng: &mut ChaCha8Rng) -> Primitive {
    let x = rng.random_range(-1.5..1.5);
    let z = rng.random_range(-1.5..1.0);
    if rng.random_bool(0.5) {
        let r = rng.random_range(0.25..0.6);
        Primitive {
            shape: Shape::Sphere,
            position: Vec3::new(x, r, z),
            orientation: [0.0; 3],
            size: [r, r, r],
            material: random_material(rng),
        }
    } else {
        let half = [rng.random_range(0.2..0.5), rng.random_range(0.2..0.5), rng.random_range(0.2..0.5)];
        Primitive {
            shape: Shape::Box,
            position: Vec3::new(x, half[1], z),
            orientation: [0.0, rng.random_range(0.0..std::f64::consts::PI), 0.0],
            size: half,
            material: random_material(rng),
        }
    }
}

fn floor(rng: &mut ChaCha8Rng) -> Primitive {
    Primitive {
        shape: Shape::Plane,
        position: Vec3::ZERO,
        orientation: [0.0; 3],
        size: [0.0; 3],
        material: random_material(rng),
    }
}

fn back_wall(rng: &mut ChaCha8Rng) -> Primitive {
    Primitive {
        shape: Shape::Plane,
        position: Vec3::new(0.0, 0.0, -2.5),
        orientation: [std::f64::consts::FRAC_PI_2, 0.0, 0.0],
        size: [0.0; 3],
        material: random_material(rng),
    }
}

/// Deterministically sample a scene.
///
/// `Simple` scenes hold a floor plus up to two objects and one light;
/// `Cluttered` scenes hold a floor, a back wall, 2-6 objects and 1-4 lights.
pub fn sample_scene(seed: u64, difficulty: Difficulty) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_prims, n_lights) = match difficulty {
        Difficulty::Simple => (rng.random_range(1..=3), 1),
        Difficulty::Cluttered => (rng.random_range(4..=8), rng.random_range(1..=4)),
    };
    let mut primitives = vec![floor(&mut rng)];
    if difficulty == Difficulty::Cluttered {
        primitives.push(back_wall(&mut rng));
    }
    while primitives.len() < n_prims {
        primitives.push(random_object(&mut rng));
    }
    let lights = (0..n_lights)
        .map(|_| {
            let base = rng.random_range(6.0..14.0) / (n_lights as f64).sqrt();
            let tint: [f64; 3] = [rng.random_range(0.8..1.0), rng.random_range(0.8..1.0), rng.random_range(0.8..1.0)];
            PointLight {
                position: Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(2.0..3.5), rng.random_range(-1.0..2.5)),
                intensity: tint.map(|t| base * t),
            }
        })
        .collect();
    let camera = Camera {
        position: Vec3::new(rng.random_range(-0.8..0.8), rng.random_range(1.2..2.0), rng.random_range(3.5..4.5)),
        look_at: Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(0.3..0.7), 0.0),
        fov_deg: rng.random_range(45.0..60.0),
    };
    SceneSpec {
        primitives,
        lights,
        ambient: rng.random_range(0.0..0.3),
        camera,
        shadows: false,
        seed,
    }
}

/// The five per-pixel property maps plus a validity mask.
///
/// Normals are unit vectors in camera space (x right, y up, z toward the
/// viewer). Depth is the distance along the viewing axis in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct IntrinsicSet {
    pub albedo: Map,
    pub metallic: Map,
    pub roughness: Map,
    pub normal: Map,
    pub depth: Map,
    /// 1 on pixels covered by geometry, 0 on background.
    pub mask: Map,
}

impl IntrinsicSet {
    pub fn height(&self) -> usize {
        self.albedo.height
    }

    pub fn width(&self) -> usize {
        self.albedo.width
    }

    pub fn valid(&self, y: usize, x: usize) -> bool {
        self.mask.get(0, y, x) > 0.5
    }

    pub fn normal_at(&self, y: usize, x: usize) -> [f32; 3] {
        [self.normal.get(0, y, x), self.normal.get(1, y, x), self.normal.get(2, y, x)]
    }

    pub fn albedo_at(&self, y: usize, x: usize) -> [f32; 3] {
        [self.albedo.get(0, y, x), self.albedo.get(1, y, x), self.albedo.get(2, y, x)]
    }

    /// Check shapes, value ranges, unit normals and positive depth.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let expect = [
            ("albedo", &self.albedo, 3),
            ("metallic", &self.metallic, 1),
            ("roughness", &self.roughness, 1),
            ("normal", &self.normal, 3),
            ("depth", &self.depth, 1),
            ("mask", &self.mask, 1),
        ];
        for (name, m, c) in expect {
            if m.channels != c || m.height != h || m.width != w {
                return Err(Error::invalid(format!("{name}: expected {c}x{h}x{w}")));
            }
        }
        for (name, m) in [("albedo", &self.albedo), ("metallic", &self.metallic), ("roughness", &self.roughness)] {
            if let Some(v) = m.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::invalid(format!("{name} value {v} outside [0,1]")));
            }
        }
        for y in 0..h {
            for x in 0..w {
                let d = self.depth.get(0, y, x);
                if !(d > 0.0 && d <= FAR_PLANE as f32) {
                    return Err(Error::invalid(format!("depth {d} at ({y},{x}) outside (0, far]")));
                }
                if self.valid(y, x) {
                    let n = self.normal_at(y, x);
                    let len = (n.iter().map(|v| (*v as f64).powi(2)).sum::<f64>()).sqrt();
                    if (len - 1.0).abs() > 1e-4 {
                        return Err(Error::invalid(format!("normal at ({y},{x}) has length {len}")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Stable name/index mapping for the five intrinsic properties.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionId {
    Albedo = 0,
    Metallic = 1,
    Roughness = 2,
    Normal = 3,
    Depth = 4,
}

impl ConditionId {
    pub const ALL: [ConditionId; 5] = [
        ConditionId::Albedo,
        ConditionId::Metallic,
        ConditionId::Roughness,
        ConditionId::Normal,
        ConditionId::Depth,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<ConditionId> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ConditionId::Albedo => "albedo",
            ConditionId::Metallic => "metallic",
            ConditionId::Roughness => "roughness",
            ConditionId::Normal => "normal",
            ConditionId::Depth => "depth",
        }
    }

    /// Native channel count of the property (1 for scalars).
    pub fn native_channels(self) -> usize {
        match self {
            ConditionId::Albedo | ConditionId::Normal => 3,
            _ => 1,
        }
    }

    pub fn of(self, set: &IntrinsicSet) -> &Map {
        match self {
            ConditionId::Albedo => &set.albedo,
            ConditionId::Metallic => &set.metallic,
            ConditionId::Roughness => &set.roughness,
            ConditionId::Normal => &set.normal,
            ConditionId::Depth => &set.depth,
        }
    }
}

impl std::fmt::Display for ConditionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ConditionId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown property '{s}'")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simple_scene_ranges() {
        for seed in 0..200 {
            let s = sample_scene(seed, Difficulty::Simple);
            assert!((1..=3).contains(&s.primitives.len()));
            assert_eq!(s.lights.len(), 1);
            s.validate().unwrap();
        }
        let s = sample_scene(7, Difficulty::Simple);
        assert!((1..=3).contains(&s.primitives.len()));
        assert_eq!(s.lights.len(), 1);
    }

    #[test]
    fn cluttered_scene_ranges() {
        for seed in 0..200 {
            let s = sample_scene(seed, Difficulty::Cluttered);
            assert!((4..=8).contains(&s.primitives.len()), "{}", s.primitives.len());
            assert!((1..=4).contains(&s.lights.len()));
            s.validate().unwrap();
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        assert_eq!(sample_scene(7, Difficulty::Simple), sample_scene(7, Difficulty::Simple));
        assert_ne!(sample_scene(7, Difficulty::Simple), sample_scene(8, Difficulty::Simple));
    }

    #[test]
    fn condition_names_round_trip() {
        for (i, c) in ConditionId::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(ConditionId::from_index(i), Some(*c));
            assert_eq!(c.name().parse::<ConditionId>().unwrap(), *c);
        }
        assert!("specular".parse::<ConditionId>().is_err());
        assert_eq!(ConditionId::from_index(5), None);
    }

    #[test]
    fn validate_rejects_bad_scenes() {
        let mut s = sample_scene(3, Difficulty::Simple);
        s.lights[0].intensity[1] = -1.0;
        assert!(s.validate().is_err());
        let mut s = sample_scene(3, Difficulty::Simple);
        s.primitives[0].material.metallic = 1.5;
        assert!(s.validate().is_err());
        let mut s = sample_scene(3, Difficulty::Simple);
        s.lights.clear();
        assert!(s.validate().is_err());
    }

    #[test]
    fn material_marginals_cover_unit_interval() {
        let bins = 20;
        let mut hist = [[false; 20]; 3];
        for seed in 0..1000 {
            for difficulty in [Difficulty::Simple, Difficulty::Cluttered] {
                for p in sample_scene(seed, difficulty).primitives {
                    let m = p.material;
                    for (k, v) in [m.albedo[seed as usize % 3], m.metallic, m.roughness].into_iter().enumerate() {
                        hist[k][((v * bins as f64) as usize).min(bins - 1)] = true;
                    }
                }
            }
        }
        for h in hist {
            let filled = h.iter().filter(|b| **b).count();
            assert!(filled * 10 >= bins * 9, "only {filled}/{bins} bins populated");
        }
    }
}
