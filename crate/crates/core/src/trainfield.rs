//! Two-stage training: a warmup on the captured images with the unlit light
//! token, then multi-illumination training with per-view latents, z_near
//! floater culling and optional front-view overweighting.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::camera::CameraPose;
use crate::dirmath::{DirError, Direction, DirectionSet};
use crate::evalkit::{ssim_rgb, SSIM_WINDOW};
use crate::relightgen::{MultiLightDataset, MultiViewDataset, RelightError};
use crate::scenestore::{save_scene, StoreError};
use crate::splatfield::{
    light_encoding, render_field_backprop, AppearanceMlp, AuxLatent, FieldError, SceneMetadata, SplatCloud, SplatScene, FEATURE_DIM, LATENT_DIM,
};

/// Minimum number of visible SfM points for a usable z_near estimate.
pub const MIN_VISIBLE_POINTS: usize = 10;
const ZNEAR_PERCENTILE: f64 = 1.0;
const ZNEAR_SCALE: f64 = 0.9;
const INIT_OPACITY: f32 = 0.1;
const INIT_FEATURE_RANGE: f32 = 0.1;
const ADAM_BETA1: f32 = 0.9;
const ADAM_BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-15;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("view {view} sees {found} SfM points, need at least {MIN_VISIBLE_POINTS}")]
    InsufficientPoints { view: String, found: usize },
    #[error("dataset has no SfM points to seed splats")]
    NoPoints,
    #[error("non-finite loss in {stage} stage at iteration {iteration}")]
    Diverged { stage: &'static str, iteration: usize },
    #[error("scene has no latents")]
    NoLatents,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Data(#[from] RelightError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Dir(#[from] DirError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Multiplied by the scene radius.
    pub positions: f32,
    pub rotations: f32,
    pub scales: f32,
    pub opacities: f32,
    pub features: f32,
    pub mlp: f32,
    pub latents: f32,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { positions: 1.6e-4, rotations: 1e-3, scales: 5e-3, opacities: 5e-2, features: 2.5e-3, mlp: 1e-3, latents: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub warmup_iters: usize,
    pub main_iters: usize,
    /// Scales both iteration counts (desk-scale runs use a fraction).
    pub desk_scale: f64,
    pub lr: LearningRates,
    pub dssim_weight: f64,
    /// Every third main iteration picks one of these views.
    pub overweight_view_ids: Vec<String>,
    pub seed: u64,
    pub background: [f32; 3],
    /// Save a checkpoint every N iterations (0 disables).
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_iters: 5000,
            main_iters: 25000,
            desk_scale: 1.0,
            lr: LearningRates::default(),
            dssim_weight: 0.2,
            overweight_view_ids: vec![],
            seed: 0,
            background: [0.0; 3],
            checkpoint_every: 0,
            log_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn from_json(s: &str) -> Result<Self, TrainError> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.dssim_weight) {
            return Err(TrainError::Config(format!("dssim_weight {} outside [0,1]", self.dssim_weight)));
        }
        if !(self.desk_scale.is_finite() && self.desk_scale >= 0.0) {
            return Err(TrainError::Config(format!("desk_scale {} must be >= 0", self.desk_scale)));
        }
        if !self.background.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(TrainError::Config("background outside [0,1]".into()));
        }
        Ok(())
    }

    pub fn scaled_iters(&self) -> (usize, usize) {
        let s = |n: usize| (n as f64 * self.desk_scale).round() as usize;
        (s(self.warmup_iters), s(self.main_iters))
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-view near-plane depth, in dataset view order.
#[derive(Debug, Clone, PartialEq)]
pub struct ZNearTable {
    pub entries: Vec<(String, f64)>,
}

impl ZNearTable {
    pub fn get(&self, view_id: &str) -> Option<f64> {
        self.entries.iter().find(|(id, _)| id == view_id).map(|(_, z)| *z)
    }
}

/// Linear-interpolated percentile over sorted values, with rank
/// `p/100 * n` counted from 1 and clamped to `[1, n]`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = (p / 100.0 * n as f64).clamp(1.0, n as f64);
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let t = rank - lo as f64;
    sorted[lo - 1] * (1.0 - t) + sorted[hi - 1] * t
}

/// Camera-space depths of points in front of the camera that project
/// inside the image.
pub fn visible_depths(points: &[[f64; 3]], cam: &CameraPose) -> Vec<f64> {
    points.iter().filter_map(|p| cam.project(*p)).filter(|(u, v, _)| cam.in_bounds(*u, *v)).map(|(_, _, z)| z).collect()
}

pub fn compute_znear(ds: &MultiViewDataset) -> Result<ZNearTable, TrainError> {
    let mut entries = Vec::with_capacity(ds.views.len());
    for view in &ds.views {
        let mut z = visible_depths(&ds.sfm_points, &view.pose);
        if z.len() < MIN_VISIBLE_POINTS {
            return Err(TrainError::InsufficientPoints { view: view.id.clone(), found: z.len() });
        }
        z.sort_by(f64::total_cmp);
        entries.push((view.id.clone(), ZNEAR_SCALE * percentile_sorted(&z, ZNEAR_PERCENTILE)));
    }
    Ok(ZNearTable { entries })
}

/// `true` for splats in front of `z_near` whose mean projects inside the
/// image.
pub fn floater_mask(splats: &SplatCloud<f32>, cam: &CameraPose, z_near: f64) -> Vec<bool> {
    splats
        .positions
        .iter()
        .map(|p| match cam.project(p.map(f64::from)) {
            Some((u, v, z)) => z < z_near && cam.in_bounds(u, v),
            None => false,
        })
        .collect()
}

/// Removes floaters for one camera and returns how many were removed.
pub fn cull_floaters(scene: &mut SplatScene, cam: &CameraPose, z_near: f64) -> usize {
    let mask = floater_mask(&scene.splats, cam, z_near);
    let removed = mask.iter().filter(|m| **m).count();
    if removed > 0 {
        scene.splats.retain(|i| !mask[i]);
    }
    removed
}

/// Mean of the stored latents.
pub fn infer_latent(scene: &SplatScene) -> Result<Vec<f32>, TrainError> {
    if scene.latents.is_empty() {
        return Err(TrainError::NoLatents);
    }
    let n = scene.latents.len() as f64;
    let mut sum = vec![0.0f64; LATENT_DIM];
    for l in &scene.latents {
        for (s, v) in sum.iter_mut().zip(&l.a) {
            *s += *v as f64;
        }
    }
    Ok(sum.into_iter().map(|s| (s / n) as f32).collect())
}

/// Mean distance from each point to its `k` nearest neighbours, using a
/// uniform grid searched in growing shells.
pub fn mean_knn_distance(points: &[[f64; 3]], k: usize) -> Vec<f64> {
    let n = points.len();
    if n < 2 || k == 0 {
        return vec![0.0; n];
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max).max(1e-12);
    let cell = (extent / (n as f64).cbrt()).max(1e-12);
    let key = |p: &[f64; 3]| [0, 1, 2].map(|a| ((p[a] - lo[a]) / cell).floor() as i64);
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }
    let max_shell = (extent / cell).ceil() as i64 + 1;
    let k = k.min(n - 1);

    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let c = key(p);
            let mut best: Vec<f64> = Vec::with_capacity(k + 1);
            for r in 0..=max_shell {
                for dx in -r..=r {
                    for dy in -r..=r {
                        for dz in -r..=r {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                                continue;
                            }
                            let Some(bucket) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else { continue };
                            for &j in bucket {
                                if j == i {
                                    continue;
                                }
                                let q = &points[j];
                                let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
                                if best.len() < k || d < best[k - 1] {
                                    let at = best.partition_point(|b| *b <= d);
                                    best.insert(at, d);
                                    best.truncate(k);
                                }
                            }
                        }
                    }
                }
                // Anything in shell r+1 or beyond is at least r cells away.
                if best.len() == k && best[k - 1] <= r as f64 * cell {
                    break;
                }
            }
            best.iter().sum::<f64>() / best.len() as f64
        })
        .collect()
}

/// One splat per SfM point, isotropic with the mean 3-NN distance as scale.
pub fn init_scene(ds: &MultiLightDataset, cfg: &TrainConfig) -> Result<SplatScene, TrainError> {
    let points = &ds.base.sfm_points;
    if points.is_empty() {
        return Err(TrainError::NoPoints);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fallback = (ds.base.scene.radius * 0.01).max(1e-6);
    let dists = mean_knn_distance(points, 3);
    let logit = (INIT_OPACITY / (1.0 - INIT_OPACITY)).ln();
    let mut splats = SplatCloud::zeros(0);
    for (p, d) in points.iter().zip(&dists) {
        let s = if *d > 0.0 { *d } else { fallback };
        let feature: [f32; FEATURE_DIM] = std::array::from_fn(|_| rng.gen_range(-INIT_FEATURE_RANGE..=INIT_FEATURE_RANGE));
        splats.push(p.map(|v| v as f32), [1.0, 0.0, 0.0, 0.0], [s.ln() as f32; 3], logit, feature);
    }
    let mlp = AppearanceMlp::random(&mut rng);
    let latents = ds.base.views.iter().map(|v| AuxLatent { view_id: v.id.clone(), a: vec![0.0; LATENT_DIM] }).collect();
    let light_dirs_hash = sha256_hex(DirectionSet::from_directions(&ds.light_dirs_camera)?.to_json().as_bytes());
    let center = ds.base.scene.center;
    let metadata = SceneMetadata {
        radius: ds.base.scene.radius,
        config_hash: cfg.hash(),
        light_dirs_hash,
        light_dirs: ds.light_dirs_camera.iter().map(Direction::v).collect(),
        center,
        default_camera: ds.base.views.first().map(|v| (v.pose.position, center)),
    };
    Ok(SplatScene { splats, mlp, latents, background: cfg.background, metadata })
}

/// Total loss `(1-λ)·L1 + λ·(1-SSIM)/2` and its gradient with respect to
/// `pred`.
pub fn loss_and_adjoint(pred: &[f32], target: &[f32], width: usize, height: usize, dssim_weight: f64) -> (f64, Vec<f32>) {
    let n = pred.len() as f64;
    let w1 = 1.0 - dssim_weight;
    let mut l1 = 0.0;
    let mut adj: Vec<f64> = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = (*p - *t) as f64;
            l1 += d.abs();
            w1 * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 } / n
        })
        .collect();
    let mut loss = w1 * l1 / n;
    if dssim_weight > 0.0 {
        let (s, g) = ssim_rgb(pred, target, width, height, true).expect("image size checked before training");
        loss += dssim_weight * (1.0 - s) / 2.0;
        for (a, g) in adj.iter_mut().zip(g.expect("gradient requested")) {
            *a -= dssim_weight * g / 2.0;
        }
    }
    (loss, adj.into_iter().map(|v| v as f32).collect())
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }

    fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f32, t: u32) {
        let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            params[i] -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + ADAM_EPS);
        }
    }

    fn retain(&mut self, stride: usize, keep: &[bool]) {
        for buf in [&mut self.m, &mut self.v] {
            let mut out = Vec::with_capacity(buf.len());
            for (chunk, k) in buf.chunks_exact(stride).zip(keep) {
                if *k {
                    out.extend_from_slice(chunk);
                }
            }
            *buf = out;
        }
    }
}

/// Adam state for the whole scene. Splat moments are pruned together with
/// the splats they belong to.
struct Optimizer {
    positions: Moments,
    rotations: Moments,
    scales: Moments,
    opacities: Moments,
    features: Moments,
    mlp: Vec<Moments>,
    latents: Vec<Moments>,
    latent_steps: Vec<u32>,
    step: u32,
}

impl Optimizer {
    fn new(scene: &SplatScene) -> Self {
        let n = scene.splats.len();
        Self {
            positions: Moments::new(n * 3),
            rotations: Moments::new(n * 4),
            scales: Moments::new(n * 3),
            opacities: Moments::new(n),
            features: Moments::new(n * FEATURE_DIM),
            mlp: scene.mlp.param_slices().iter().map(|s| Moments::new(s.len())).collect(),
            latents: scene.latents.iter().map(|_| Moments::new(LATENT_DIM)).collect(),
            latent_steps: vec![0; scene.latents.len()],
            step: 0,
        }
    }

    fn retain(&mut self, keep: &[bool]) {
        self.positions.retain(3, keep);
        self.rotations.retain(4, keep);
        self.scales.retain(3, keep);
        self.opacities.retain(1, keep);
        self.features.retain(FEATURE_DIM, keep);
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub scene: SplatScene,
    /// Loss of every iteration, warmup first.
    pub losses: Vec<f64>,
    pub warmup_iters: usize,
    pub culled: usize,
}

/// Picks the (view, light) pair of each iteration. Warmup iterations use
/// the capture (`None` light); in the main stage every third iteration
/// draws from the overweighted views when there are any.
#[derive(Debug, Clone)]
pub struct Sampler {
    pub n_views: usize,
    pub n_lights: usize,
    pub warmup: usize,
    pub overweight: Vec<usize>,
}

impl Sampler {
    pub fn next(&self, iteration: usize, rng: &mut impl Rng) -> (usize, Option<usize>) {
        if iteration < self.warmup {
            return (rng.gen_range(0..self.n_views), None);
        }
        let i = iteration - self.warmup;
        let v = if !self.overweight.is_empty() && i % 3 == 2 {
            self.overweight[rng.gen_range(0..self.overweight.len())]
        } else {
            rng.gen_range(0..self.n_views)
        };
        (v, Some(rng.gen_range(0..self.n_lights)))
    }
}

/// Trains without checkpoints.
pub fn train(ds: &MultiLightDataset, cfg: &TrainConfig) -> Result<TrainResult, TrainError> {
    train_with_checkpoints(ds, cfg, None)
}

pub fn train_with_checkpoints(ds: &MultiLightDataset, cfg: &TrainConfig, checkpoint_dir: Option<&Path>) -> Result<TrainResult, TrainError> {
    cfg.validate()?;
    ds.validate()?;
    let first = &ds.base.views.first().ok_or_else(|| TrainError::Config("dataset has no views".into()))?.pose;
    if cfg.dssim_weight > 0.0 && (first.width() < SSIM_WINDOW || first.height() < SSIM_WINDOW) {
        return Err(TrainError::Config(format!("images must be at least {SSIM_WINDOW} px per side for D-SSIM")));
    }
    let overweight: Vec<usize> = cfg
        .overweight_view_ids
        .iter()
        .map(|id| ds.base.views.iter().position(|v| &v.id == id).ok_or_else(|| TrainError::Config(format!("unknown overweight view {id:?}"))))
        .collect::<Result<_, _>>()?;
    let znear = compute_znear(&ds.base)?;
    let (warmup, main) = cfg.scaled_iters();

    let mut scene = init_scene(ds, cfg)?;
    let mut opt = Optimizer::new(&scene);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut losses = Vec::with_capacity(warmup + main);
    let mut culled = 0;
    let sampler = Sampler { n_views: ds.base.views.len(), n_lights: ds.light_count(), warmup, overweight };

    for it in 0..warmup + main {
        let stage = if it < warmup { "warmup" } else { "main" };
        let (v, light) = sampler.next(it, &mut rng);
        let view = &ds.base.views[v];
        let cam = &view.pose;

        let mask = floater_mask(&scene.splats, cam, znear.entries[v].1);
        if mask.iter().any(|m| *m) {
            let keep: Vec<bool> = mask.iter().map(|m| !m).collect();
            culled += mask.len() - keep.iter().filter(|k| **k).count();
            scene.splats.retain(|i| keep[i]);
            opt.retain(&keep);
            if scene.splats.is_empty() {
                return Err(TrainError::Config("culling removed every splat".into()));
            }
        }

        let (target, light_enc) = match light {
            None => (&view.image, light_encoding::<f32>(None)?),
            Some(k) => (&ds.relit[v][k], light_encoding::<f32>(Some(&ds.light_dir_world(v, k)))?),
        };
        let mut loss = f64::NAN;
        let (_, grads) = render_field_backprop(scene.field(), cam, &light_enc, &scene.latents[v].a, |frame| {
            let (l, adj) = loss_and_adjoint(&frame.color, target.data(), cam.width(), cam.height(), cfg.dssim_weight);
            loss = l;
            adj
        });
        if !loss.is_finite() {
            return Err(TrainError::Diverged { stage, iteration: it });
        }
        losses.push(loss);

        opt.step += 1;
        let t = opt.step;
        let lr = &cfg.lr;
        let s = &mut scene.splats;
        let g = &grads.splats;
        opt.positions.step(s.positions.as_flattened_mut(), g.positions.as_flattened(), lr.positions * scene.metadata.radius as f32, t);
        opt.rotations.step(s.rotations.as_flattened_mut(), g.rotations.as_flattened(), lr.rotations, t);
        opt.scales.step(s.log_scales.as_flattened_mut(), g.log_scales.as_flattened(), lr.scales, t);
        opt.opacities.step(&mut s.logit_opacities, &g.logit_opacities, lr.opacities, t);
        opt.features.step(s.features.as_flattened_mut(), g.features.as_flattened(), lr.features, t);
        for ((p, g), m) in scene.mlp.param_slices_mut().into_iter().zip(grads.mlp.param_slices()).zip(&mut opt.mlp) {
            m.step(p, g, lr.mlp, t);
        }
        opt.latent_steps[v] += 1;
        opt.latents[v].step(&mut scene.latents[v].a, &grads.latent, lr.latents, opt.latent_steps[v]);

        if cfg.log_every > 0 && (it + 1) % cfg.log_every == 0 {
            let window = &losses[losses.len().saturating_sub(cfg.log_every)..];
            log::info!("{stage} iteration {}: mean loss {:.5}, {} splats", it + 1, window.iter().sum::<f64>() / window.len() as f64, scene.splats.len());
        }
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
                std::fs::create_dir_all(dir).map_err(|source| StoreError::Io { path: dir.display().to_string(), source })?;
                save_scene(&scene, &checkpoint_path(dir, it + 1))?;
            }
        }
    }

    for q in &mut scene.splats.rotations {
        let norm = q.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm > 0.0 {
            *q = q.map(|v| v / norm);
        }
    }
    scene.validate()?;
    Ok(TrainResult { scene, losses, warmup_iters: warmup, culled })
}

pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("ckpt_{iteration:06}.rlf"))
}
