use super::shading::shade_image;
use super::{CameraFrame, IntrinsicSet, Primitive, SceneSpec, Shape, BACKGROUND, FAR_PLANE};
use crate::error::{Error, Result};
use crate::geom::{Mat3, Vec3};
use crate::tensor::Map;

const HIT_EPS: f64 = 1e-6;

struct Hit {
    t: f64,
    normal: Vec3,
    prim: usize,
}

fn intersect(p: &Primitive, origin: Vec3, dir: Vec3) -> Option<(f64, Vec3)> {
    match p.shape {
        Shape::Sphere => {
            let r = p.size[0];
            let oc = origin - p.position;
            let b = oc.dot(dir);
            let c = oc.dot(oc) - r * r;
            let a = dir.dot(dir);
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t = [(-b - sq) / a, (-b + sq) / a].into_iter().find(|t| *t > HIT_EPS)?;
            Some((t, (origin + dir * t - p.position).normalize()))
        }
        Shape::Plane => {
            let n = Mat3::from_euler(p.orientation).apply(Vec3::new(0.0, 1.0, 0.0));
            let denom = n.dot(dir);
            if denom.abs() < 1e-12 {
                return None;
            }
            let t = (p.position - origin).dot(n) / denom;
            (t > HIT_EPS).then_some((t, n))
        }
        Shape::Box => {
            let rot = Mat3::from_euler(p.orientation);
            let o = rot.apply_transpose(origin - p.position);
            let d = rot.apply_transpose(dir);
            let mut t_near = f64::NEG_INFINITY;
            let mut t_far = f64::INFINITY;
            let mut near_axis = 0;
            let mut far_axis = 0;
            for k in 0..3 {
                let half = p.size[k];
                if d.0[k].abs() < 1e-15 {
                    if o.0[k].abs() > half {
                        return None;
                    }
                    continue;
                }
                let t0 = (-half - o.0[k]) / d.0[k];
                let t1 = (half - o.0[k]) / d.0[k];
                let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
                if lo > t_near {
                    t_near = lo;
                    near_axis = k;
                }
                if hi < t_far {
                    t_far = hi;
                    far_axis = k;
                }
            }
            if t_near > t_far {
                return None;
            }
            let (t, axis) = if t_near > HIT_EPS {
                (t_near, near_axis)
            } else if t_far > HIT_EPS {
                (t_far, far_axis)
            } else {
                return None;
            };
            let mut local = Vec3::ZERO;
            local.0[axis] = if (o + d * t).0[axis] > 0.0 { 1.0 } else { -1.0 };
            Some((t, rot.apply(local)))
        }
    }
}

fn trace(spec: &SceneSpec, origin: Vec3, dir: Vec3) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, p) in spec.primitives.iter().enumerate() {
        if let Some((t, normal)) = intersect(p, origin, dir) {
            if best.as_ref().is_none_or(|b| t < b.t) {
                best = Some(Hit { t, normal, prim: i });
            }
        }
    }
    best
}

fn occluded(spec: &SceneSpec, from: Vec3, to: Vec3) -> bool {
    let delta = to - from;
    let dist = delta.norm();
    let dir = delta * (1.0 / dist);
    let start = from + dir * 1e-4;
    spec.primitives
        .iter()
        .any(|p| intersect(p, start, dir).is_some_and(|(t, _)| t < dist - 1e-4))
}

/// Render a scene: ray-cast the intrinsic maps, then shade them.
pub fn render(spec: &SceneSpec, height: usize, width: usize) -> Result<(Map, IntrinsicSet)> {
    let frame = spec.camera.frame()?;
    render_with_frame(spec, &frame, height, width)
}

pub fn render_with_frame(spec: &SceneSpec, frame: &CameraFrame, height: usize, width: usize) -> Result<(Map, IntrinsicSet)> {
    if height < 8 || width < 8 {
        return Err(Error::invalid(format!("resolution {height}x{width} below 8x8")));
    }
    if spec.primitives.is_empty() || spec.lights.is_empty() {
        return Err(Error::invalid("scene needs at least one primitive and one light"));
    }
    let mut set = IntrinsicSet {
        albedo: Map::zeros(3, height, width),
        metallic: Map::zeros(1, height, width),
        roughness: Map::zeros(1, height, width),
        normal: Map::zeros(3, height, width),
        depth: Map::zeros(1, height, width),
        mask: Map::zeros(1, height, width),
    };
    let mut visibility = spec.shadows.then(|| vec![true; height * width * spec.lights.len()]);
    for y in 0..height {
        for x in 0..width {
            let ray_cam = frame.pixel_ray(y, x, height, width);
            let dir = frame.dir_to_world(ray_cam);
            let hit = trace(spec, frame.origin, dir).filter(|h| {
                let depth = h.t * dir.dot(frame.forward);
                depth > 0.0 && depth <= FAR_PLANE
            });
            match hit {
                Some(h) => {
                    let m = spec.primitives[h.prim].material;
                    let mut n_world = h.normal;
                    if n_world.dot(dir) > 0.0 {
                        n_world = -n_world;
                    }
                    let n = frame.dir_to_camera(n_world).normalize();
                    for c in 0..3 {
                        set.albedo.set(c, y, x, m.albedo[c] as f32);
                        set.normal.set(c, y, x, n.0[c] as f32);
                    }
                    set.metallic.set(0, y, x, m.metallic as f32);
                    set.roughness.set(0, y, x, m.roughness as f32);
                    set.depth.set(0, y, x, (h.t * dir.dot(frame.forward)) as f32);
                    set.mask.set(0, y, x, 1.0);
                    if let Some(vis) = visibility.as_mut() {
                        // shadow rays start from the same point shading sees
                        let d = set.depth.get(0, y, x) as f64;
                        let p_world = frame.point_to_world(ray_cam * d);
                        for (l, light) in spec.lights.iter().enumerate() {
                            vis[(y * width + x) * spec.lights.len() + l] = !occluded(spec, p_world, light.position);
                        }
                    }
                }
                None => {
                    for c in 0..3 {
                        set.albedo.set(c, y, x, BACKGROUND[c] as f32);
                    }
                    set.roughness.set(0, y, x, 1.0);
                    set.normal.set(2, y, x, 1.0);
                    set.depth.set(0, y, x, FAR_PLANE as f32);
                }
            }
        }
    }
    let image = shade_image(&set, frame, &spec.lights, spec.ambient, visibility.as_deref());
    Ok((image, set))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{sample_scene, Camera, Difficulty, Material, PointLight};

    fn camera() -> Camera {
        Camera {
            position: Vec3::new(0.0, 0.0, 5.0),
            look_at: Vec3::new(0.0, 0.0, 0.0),
            fov_deg: 40.0,
        }
    }

    fn facing_plane(albedo: f64, metallic: f64) -> Primitive {
        Primitive {
            shape: Shape::Plane,
            position: Vec3::ZERO,
            orientation: [std::f64::consts::FRAC_PI_2, 0.0, 0.0],
            size: [0.0; 3],
            material: Material {
                albedo: [albedo; 3],
                metallic,
                roughness: 0.5,
            },
        }
    }

    #[test]
    fn plane_facing_camera_has_constant_normal() {
        let spec = SceneSpec {
            primitives: vec![facing_plane(0.5, 0.0)],
            lights: vec![PointLight {
                position: Vec3::new(0.0, 1.0, 3.0),
                intensity: [5.0; 3],
            }],
            ambient: 0.1,
            camera: camera(),
            shadows: false,
            seed: 0,
        };
        let (_, set) = render(&spec, 16, 16).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert!(set.valid(y, x));
                let n = set.normal_at(y, x);
                assert!(n[0].abs() < 1e-6 && n[1].abs() < 1e-6 && (n[2] - 1.0).abs() < 1e-6, "{n:?}");
            }
        }
        set.validate().unwrap();
    }

    #[test]
    fn zero_albedo_metal_without_ambient_is_black() {
        // the 0.1 white specular floor of dielectrics vanishes only for metallic = 1
        let spec = SceneSpec {
            primitives: vec![facing_plane(0.0, 1.0)],
            lights: vec![PointLight {
                position: Vec3::new(0.0, 0.0, 2.0),
                intensity: [50.0; 3],
            }],
            ambient: 0.0,
            camera: camera(),
            shadows: false,
            seed: 0,
        };
        let (img, _) = render(&spec, 12, 12).unwrap();
        assert!(img.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lambertian_point_lit_along_normal() {
        let spec = SceneSpec {
            primitives: vec![Primitive {
                shape: Shape::Sphere,
                position: Vec3::ZERO,
                orientation: [0.0; 3],
                size: [1.0; 3],
                material: Material {
                    albedo: [0.5; 3],
                    metallic: 0.0,
                    roughness: 0.0,
                },
            }],
            lights: vec![PointLight {
                position: Vec3::new(0.0, 0.0, 50.0),
                intensity: [0.0; 3],
            }],
            ambient: 0.0,
            camera: camera(),
            shadows: false,
            seed: 0,
        };
        let (h, w) = (32, 32);
        let frame = spec.camera.frame().unwrap();
        let (_, set) = render(&spec, h, w).unwrap();
        // pick a pixel seen at ~60 degrees so the shininess-256 lobe is negligible
        let (mut best, mut best_gap) = ((0, 0), f64::INFINITY);
        for y in 0..h {
            for x in 0..w {
                if !set.valid(y, x) {
                    continue;
                }
                let p = frame.unproject(y, x, h, w, set.depth.get(0, y, x) as f64);
                let n = Vec3(set.normal_at(y, x).map(|v| v as f64));
                let gap = (n.dot((-p).normalize()) - 0.5).abs();
                if gap < best_gap {
                    best_gap = gap;
                    best = (y, x);
                }
            }
        }
        let (y, x) = best;
        let p_cam = frame.unproject(y, x, h, w, set.depth.get(0, y, x) as f64);
        let n_cam = Vec3(set.normal_at(y, x).map(|v| v as f64));
        let dist = 2.0;
        let light_cam = p_cam + n_cam * dist;
        let mut lit = spec.clone();
        lit.lights[0] = PointLight {
            position: frame.point_to_world(light_cam),
            intensity: [0.8 * dist * dist; 3],
        };
        let (img, _) = render(&lit, h, w).unwrap();
        for c in 0..3 {
            assert!((img.get(c, y, x) - 0.4).abs() < 1e-5, "{}", img.get(c, y, x));
        }
    }

    #[test]
    fn too_small_resolution_rejected() {
        let spec = sample_scene(1, Difficulty::Simple);
        assert!(render(&spec, 7, 32).is_err());
    }

    #[test]
    fn render_is_bit_identical_across_calls() {
        let spec = sample_scene(11, Difficulty::Cluttered);
        let a = render(&spec, 24, 24).unwrap();
        let b = render(&spec, 24, 24).unwrap();
        assert_eq!(a.0.data, b.0.data);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn sampled_scenes_satisfy_invariants() {
        for seed in 0..40 {
            for d in [Difficulty::Simple, Difficulty::Cluttered] {
                let mut spec = sample_scene(seed, d);
                spec.shadows = seed % 2 == 0;
                let (img, set) = render(&spec, 16, 16).unwrap();
                set.validate().unwrap();
                assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn shadows_only_darken() {
        let mut spec = sample_scene(5, Difficulty::Cluttered);
        let (lit, _) = render(&spec, 24, 24).unwrap();
        spec.shadows = true;
        let (shadowed, _) = render(&spec, 24, 24).unwrap();
        assert!(lit.data.iter().zip(&shadowed.data).all(|(a, b)| b <= a));
    }
}
