//! Small ray-traced Lambertian scenes lit by a camera-mounted point flash.
//! Produces the frontal-flash capture, ground truth under every light
//! direction, exact depth and normals, poses, and surface samples standing in
//! for a structure-from-motion point cloud.

use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::relighter::{flash_shading, FLASH_OFFSET};
use super::{MultiLightDataset, MultiViewDataset, RelightError, SceneInfo, View};
use crate::camera::CameraPose;
use crate::colorlab::ImageRGB;
use crate::dirmath::{to_world, Direction};
use crate::imageio::{DepthMap, NormalMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Cornell,
    Plane,
    Spheres,
}

impl FromStr for Preset {
    type Err = RelightError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cornell" => Ok(Preset::Cornell),
            "plane" => Ok(Preset::Plane),
            "spheres" => Ok(Preset::Spheres),
            other => Err(RelightError::UnknownPreset(other.into())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub preset: Preset,
    pub train_views: usize,
    pub test_views: usize,
    pub width: usize,
    pub height: usize,
    /// Samples per pixel along each axis.
    pub supersample: usize,
    pub shadows: bool,
    pub points: usize,
    pub seed: u64,
}

impl SynthOptions {
    pub fn new(preset: Preset) -> Self {
        Self { preset, train_views: 6, test_views: 2, width: 64, height: 64, supersample: 3, shadows: false, points: 5000, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    /// Frontal-flash capture of the training views.
    pub train: MultiViewDataset,
    /// Ground truth of the training views under every light.
    pub train_truth: MultiLightDataset,
    /// Held-out views with their ground truth under every light.
    pub test: MultiLightDataset,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Aabb { min: [f64; 3], max: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Object {
    shape: Shape,
    albedo: [f64; 3],
}

struct World {
    objects: Vec<Object>,
    info: SceneInfo,
    target: [f64; 3],
    distance: f64,
    elevation_deg: f64,
    azimuth_span_deg: f64,
    fov_y_deg: f64,
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    t: f64,
    point: Vector3<f64>,
    normal: Vector3<f64>,
    albedo: [f64; 3],
}

fn aabb(min: [f64; 3], max: [f64; 3], albedo: [f64; 3]) -> Object {
    Object { shape: Shape::Aabb { min, max }, albedo }
}

fn sphere(center: [f64; 3], radius: f64, albedo: [f64; 3]) -> Object {
    Object { shape: Shape::Sphere { center, radius }, albedo }
}

fn world(preset: Preset) -> World {
    let white = [0.75, 0.75, 0.72];
    match preset {
        Preset::Cornell => World {
            objects: vec![
                aabb([-1.05, -1.05, -1.05], [1.05, -1.0, 1.0], white),
                aabb([-1.05, 1.0, -1.05], [1.05, 1.05, 1.0], white),
                aabb([-1.05, -1.05, -1.05], [1.05, 1.05, -1.0], white),
                aabb([-1.05, -1.05, -1.05], [-1.0, 1.05, 1.0], [0.75, 0.15, 0.12]),
                aabb([1.0, -1.05, -1.05], [1.05, 1.05, 1.0], [0.15, 0.6, 0.15]),
                aabb([-0.65, -1.0, -0.55], [-0.1, 0.2, 0.0], [0.7, 0.65, 0.5]),
                sphere([0.45, -0.6, 0.3], 0.4, [0.25, 0.35, 0.8]),
            ],
            info: SceneInfo { center: [0.0; 3], radius: 3f64.sqrt(), ambient: 0.15 },
            target: [0.0; 3],
            distance: 3.4,
            elevation_deg: 10.0,
            azimuth_span_deg: 20.0,
            fov_y_deg: 50.0,
        },
        Preset::Plane => World {
            objects: vec![aabb([-1.0, -1.0, -0.05], [1.0, 1.0, 0.0], [0.8, 0.75, 0.7])],
            info: SceneInfo { center: [0.0; 3], radius: 2f64.sqrt(), ambient: 0.15 },
            target: [0.0; 3],
            distance: 3.0,
            elevation_deg: 0.0,
            azimuth_span_deg: 15.0,
            fov_y_deg: 45.0,
        },
        Preset::Spheres => World {
            objects: vec![
                aabb([-1.5, -1.05, -1.5], [1.5, -1.0, 1.5], [0.6, 0.6, 0.6]),
                sphere([-0.6, -0.6, 0.0], 0.4, [0.8, 0.2, 0.2]),
                sphere([0.5, -0.5, -0.3], 0.5, [0.85, 0.75, 0.2]),
                sphere([0.0, -0.75, 0.6], 0.25, [0.2, 0.3, 0.85]),
            ],
            info: SceneInfo { center: [0.0, -0.5, 0.0], radius: 1.6, ambient: 0.15 },
            target: [0.0, -0.5, 0.0],
            distance: 3.6,
            elevation_deg: 20.0,
            azimuth_span_deg: 25.0,
            fov_y_deg: 50.0,
        },
    }
}

fn intersect(obj: &Object, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    const EPS: f64 = 1e-9;
    match obj.shape {
        Shape::Sphere { center, radius } => {
            let oc = o - Vector3::from(center);
            let b = oc.dot(d);
            let c = oc.norm_squared() - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            let t = if -b - s > EPS { -b - s } else { -b + s };
            (t > EPS).then(|| (t, (o + d * t - Vector3::from(center)) / radius))
        }
        Shape::Aabb { min, max } => {
            let mut t_near = f64::NEG_INFINITY;
            let mut t_far = f64::INFINITY;
            let mut near_axis = 0;
            let mut far_axis = 0;
            for a in 0..3 {
                if d[a].abs() < 1e-15 {
                    if o[a] < min[a] || o[a] > max[a] {
                        return None;
                    }
                    continue;
                }
                let t1 = (min[a] - o[a]) / d[a];
                let t2 = (max[a] - o[a]) / d[a];
                let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                if lo > t_near {
                    t_near = lo;
                    near_axis = a;
                }
                if hi < t_far {
                    t_far = hi;
                    far_axis = a;
                }
            }
            if t_near > t_far || t_far <= EPS {
                return None;
            }
            let (t, axis) = if t_near > EPS { (t_near, near_axis) } else { (t_far, far_axis) };
            let mut n = Vector3::zeros();
            n[axis] = -d[axis].signum();
            Some((t, n))
        }
    }
}

fn trace(w: &World, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for obj in &w.objects {
        if let Some((t, mut n)) = intersect(obj, o, d) {
            if best.is_none_or(|b| t < b.t) {
                if n.dot(d) > 0.0 {
                    n = -n;
                }
                best = Some(Hit { t, point: o + d * t, normal: n, albedo: obj.albedo });
            }
        }
    }
    best
}

fn occluded(w: &World, p: &Vector3<f64>, light: &Vector3<f64>) -> bool {
    let to = light - p;
    let dist = to.norm();
    let d = to / dist;
    w.objects.iter().any(|obj| intersect(obj, p, &d).is_some_and(|(t, _)| t < dist - 1e-6))
}

fn camera_at(w: &World, azimuth_deg: f64, width: usize, height: usize) -> Result<CameraPose, RelightError> {
    let (az, el) = (azimuth_deg.to_radians(), w.elevation_deg.to_radians());
    let t = w.target;
    let eye = [t[0] + w.distance * el.cos() * az.sin(), t[1] + w.distance * el.sin(), t[2] + w.distance * el.cos() * az.cos()];
    Ok(CameraPose::look_at(eye, t, [0.0, 1.0, 0.0], w.fov_y_deg, width, height)?)
}

fn azimuths(w: &World, train: usize, test: usize) -> (Vec<f64>, Vec<f64>) {
    let span = w.azimuth_span_deg;
    let train_az: Vec<f64> = if train <= 1 {
        vec![0.0; train]
    } else {
        (0..train).map(|i| -span + 2.0 * span * i as f64 / (train - 1) as f64).collect()
    };
    let test_az = (0..test)
        .map(|j| {
            if train >= 2 {
                // Midpoints of evenly chosen gaps between training cameras.
                let gaps = train - 1;
                let g = (((j as f64 + 0.5) * gaps as f64 / test as f64) as usize).min(gaps - 1);
                0.5 * (train_az[g] + train_az[g + 1])
            } else {
                -span + 2.0 * span * (j as f64 + 0.5) / test as f64
            }
        })
        .collect();
    (train_az, test_az)
}

struct Sample {
    point: Vector3<f64>,
    normal: Vector3<f64>,
    albedo: [f64; 3],
}

struct RenderedView {
    images: Vec<ImageRGB>,
    depth: DepthMap,
    normals: NormalMap,
}

/// Renders one camera under each world-space flash offset direction.
fn render_view(w: &World, cam: &CameraPose, light_dirs_world: &[[f64; 3]], ss: usize, shadows: bool) -> RenderedView {
    let (width, height) = (cam.width(), cam.height());
    let origin = Vector3::from(cam.position);
    let forward = -Vector3::from(cam.rotation.rows().map(|r| r[2]));
    let r_t = cam.rotation.matrix().transpose();
    let offset = FLASH_OFFSET * w.info.radius;
    let lights: Vec<Vector3<f64>> = light_dirs_world.iter().map(|l| origin + Vector3::from(*l) * offset).collect();
    let center = Vector3::from(w.info.center);

    let rows: Vec<(Vec<Vec<f32>>, Vec<f32>, Vec<f32>)> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut imgs = vec![vec![0f32; width * 3]; lights.len()];
            let mut depth = vec![0f32; width];
            let mut normals = vec![0f32; width * 3];
            for x in 0..width {
                let mut samples: Vec<Option<Sample>> = Vec::with_capacity(ss * ss);
                for sy in 0..ss {
                    for sx in 0..ss {
                        let u = x as f64 + (sx as f64 + 0.5) / ss as f64;
                        let v = y as f64 + (sy as f64 + 0.5) / ss as f64;
                        let d = Vector3::from(cam.pixel_ray(u, v));
                        samples.push(trace(w, &origin, &d).map(|h| Sample { point: h.point, normal: h.normal, albedo: h.albedo }));
                    }
                }
                let mid = samples[(ss / 2) * ss + ss / 2].as_ref();
                if let Some(s) = mid {
                    depth[x] = (s.point - origin).dot(&forward) as f32;
                    let n = r_t * s.normal;
                    normals[x * 3..x * 3 + 3].copy_from_slice(&[n.x as f32, n.y as f32, n.z as f32]);
                }
                for (k, light) in lights.iter().enumerate() {
                    let mut acc = [0.0; 3];
                    for s in samples.iter().flatten() {
                        let lit = if shadows && occluded(w, &(s.point + s.normal * 1e-6), light) {
                            w.info.ambient
                        } else {
                            flash_shading(s.normal.into(), s.point.into(), (*light).into(), center.into(), w.info.ambient)
                        };
                        for c in 0..3 {
                            acc[c] += s.albedo[c] * lit;
                        }
                    }
                    for c in 0..3 {
                        imgs[k][x * 3 + c] = (acc[c] / (ss * ss) as f64) as f32;
                    }
                }
            }
            (imgs, depth, normals)
        })
        .collect();

    let mut images = vec![Vec::with_capacity(width * height * 3); lights.len()];
    let mut depth = Vec::with_capacity(width * height);
    let mut normals = Vec::with_capacity(width * height * 3);
    for (imgs, d, n) in rows {
        for (k, row) in imgs.into_iter().enumerate() {
            images[k].extend(row);
        }
        depth.extend(d);
        normals.extend(n);
    }
    RenderedView {
        images: images.into_iter().map(|data| ImageRGB::new(width, height, data).expect("non-empty")).collect(),
        depth: DepthMap { width, height, data: depth },
        normals: NormalMap { width, height, data: normals },
    }
}

fn sample_surface(obj: &Object, rng: &mut impl Rng) -> [f64; 3] {
    match obj.shape {
        Shape::Sphere { center, radius } => loop {
            let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let n = v.norm();
            if n > 0.1 && n <= 1.0 {
                let p: Vector3<f64> = Vector3::from(center) + v / n * radius;
                return p.into();
            }
        },
        Shape::Aabb { min, max } => {
            let e = [max[0] - min[0], max[1] - min[1], max[2] - min[2]];
            let areas = [e[1] * e[2], e[1] * e[2], e[0] * e[2], e[0] * e[2], e[0] * e[1], e[0] * e[1]];
            let mut pick = rng.gen_range(0.0..areas.iter().sum::<f64>());
            let mut face = 0;
            while face < 5 && pick >= areas[face] {
                pick -= areas[face];
                face += 1;
            }
            let mut p = [0, 1, 2].map(|a| rng.gen_range(min[a]..=max[a]));
            let axis = face / 2;
            p[axis] = if face % 2 == 0 { min[axis] } else { max[axis] };
            p
        }
    }
}

fn area(obj: &Object) -> f64 {
    match obj.shape {
        Shape::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
        Shape::Aabb { min, max } => {
            let e = [max[0] - min[0], max[1] - min[1], max[2] - min[2]];
            2.0 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2])
        }
    }
}

/// Uniform surface samples seen unoccluded by at least one camera.
fn surface_points(w: &World, cams: &[CameraPose], count: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5f3d_1a2b);
    let areas: Vec<f64> = w.objects.iter().map(area).collect();
    let total: f64 = areas.iter().sum();
    let mut points = Vec::with_capacity(count);
    let mut attempts = 0;
    while points.len() < count && attempts < count * 50 {
        attempts += 1;
        let mut pick = rng.gen_range(0.0..total);
        let mut i = 0;
        while i + 1 < areas.len() && pick >= areas[i] {
            pick -= areas[i];
            i += 1;
        }
        let p = sample_surface(&w.objects[i], &mut rng);
        let pv = Vector3::from(p);
        let seen = cams.iter().any(|cam| {
            let Some((u, v, _)) = cam.project(p) else { return false };
            if !cam.in_bounds(u, v) {
                return false;
            }
            let o = Vector3::from(cam.position);
            let dist = (pv - o).norm();
            trace(w, &o, &((pv - o) / dist)).is_some_and(|h| h.t > dist - 1e-6)
        });
        if seen {
            points.push(p);
        }
    }
    points
}

fn dataset_for(w: &World, cams: &[CameraPose], prefix: &str, dirs: &[Direction], opts: &SynthOptions) -> Result<(MultiViewDataset, MultiLightDataset), RelightError> {
    let frontal = Direction::camera([0.0, 0.0, 1.0])?;
    let mut views = Vec::new();
    let mut relit = Vec::new();
    for (i, cam) in cams.iter().enumerate() {
        let mut world_dirs = vec![to_world(&frontal, &cam.rotation)?.v()];
        for d in dirs {
            world_dirs.push(to_world(d, &cam.rotation)?.v());
        }
        let mut rendered = render_view(w, cam, &world_dirs, opts.supersample.max(1), opts.shadows);
        let capture = rendered.images.remove(0);
        views.push(View { id: format!("{prefix}{i:02}"), image: capture, depth: Some(rendered.depth), normals: Some(rendered.normals), pose: *cam });
        relit.push(rendered.images);
    }
    let base = MultiViewDataset { views, sfm_points: vec![], scene: w.info };
    let truth = MultiLightDataset { base: base.clone(), light_dirs_camera: dirs.to_vec(), relit };
    Ok((base, truth))
}

/// Renders the preset from cameras on an arc: training views evenly spread,
/// test views between them.
pub fn synth_scene(opts: &SynthOptions, dirs: &[Direction]) -> Result<SynthOutput, RelightError> {
    if opts.train_views == 0 || opts.width == 0 || opts.height == 0 {
        return Err(RelightError::Dataset("synthetic scene needs at least one view and a non-empty image".into()));
    }
    let w = world(opts.preset);
    let (train_az, test_az) = azimuths(&w, opts.train_views, opts.test_views);
    let train_cams = train_az.iter().map(|a| camera_at(&w, *a, opts.width, opts.height)).collect::<Result<Vec<_>, _>>()?;
    let test_cams = test_az.iter().map(|a| camera_at(&w, *a, opts.width, opts.height)).collect::<Result<Vec<_>, _>>()?;
    let (mut train, mut train_truth) = dataset_for(&w, &train_cams, "train_", dirs, opts)?;
    let (_, mut test) = dataset_for(&w, &test_cams, "test_", dirs, opts)?;
    let points = surface_points(&w, &train_cams, opts.points, opts.seed);
    train.sfm_points = points.clone();
    train_truth.base.sfm_points = points.clone();
    test.base.sfm_points = points;
    Ok(SynthOutput { train, train_truth, test })
}
