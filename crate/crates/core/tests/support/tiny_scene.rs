//! Random tiny double-precision scenes and a finite-difference gradient check.
//!
//! Scenes are built so the forward model is smooth around them: footprints
//! cover the whole 8x8 image (no cull-box edges), opacities stay below the
//! alpha clip, depths are well separated, and hidden-layer biases keep every
//! ReLU away from its kink.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relight_core::camera::CameraPose;
use relight_core::dirmath::sh_basis;
use relight_core::splatfield::{render_field, render_field_with_grads, AppearanceMlp, FieldGrads, FieldRef, SplatCloud, ENC_DIM, FEATURE_DIM, LATENT_DIM};

pub const SIZE: usize = 8;

#[derive(Clone)]
pub struct TinyScene {
    pub splats: SplatCloud<f64>,
    pub mlp: AppearanceMlp<f64>,
    pub background: [f64; 3],
    pub cam: CameraPose,
    pub light: [f64; ENC_DIM],
    pub latent: Vec<f64>,
    pub adjoint: Vec<f64>,
}

fn unit(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            return v.map(|c| c / n);
        }
    }
}

pub fn tiny_scene(seed: u64) -> TinyScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eye = unit(&mut rng).map(|c| c * 4.0);
    let up = if eye[1].abs() > 3.8 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let cam = CameraPose::look_at(eye, [0.0; 3], up, 40.0, SIZE, SIZE).expect("valid camera");

    let n = rng.gen_range(1..=8);
    let mut splats = SplatCloud::zeros(0);
    for k in 0..n {
        let z = 3.4 + 0.15 * k as f64 + rng.gen_range(0.0..0.05);
        let p = cam.view_to_world([rng.gen_range(-0.1..0.1) * z, rng.gen_range(-0.1..0.1) * z, z]);
        let rotation = [rng.gen_range(0.3..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let log_scale = [0; 3].map(|_| rng.gen_range(0.9f64..1.5).ln());
        let feature = [0; FEATURE_DIM].map(|_| rng.gen_range(-1.0..1.0));
        splats.push(p, rotation, log_scale, rng.gen_range(-1.0..1.2), feature);
    }

    let mut mlp = AppearanceMlp::<f64>::zeros();
    for (li, layer) in mlp.layers.iter_mut().enumerate() {
        let std = if li < 2 { 0.01 } else { 0.5 };
        for w in &mut layer.weights {
            *w = rng.gen_range(-1.0..1.0) * std * 3f64.sqrt();
        }
        for b in &mut layer.bias {
            *b = if li == 2 {
                rng.gen_range(-0.5..0.5)
            } else if rng.gen_bool(0.5) {
                rng.gen_range(0.5..1.0)
            } else {
                -rng.gen_range(0.5..1.0)
            };
        }
    }

    let light = sh_basis(unit(&mut rng));
    let latent = (0..LATENT_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let adjoint = (0..SIZE * SIZE * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let background = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
    TinyScene { splats, mlp, background, cam, light, latent, adjoint }
}

impl TinyScene {
    pub fn field(&self) -> FieldRef<'_, f64> {
        FieldRef { splats: &self.splats, mlp: &self.mlp, background: self.background }
    }

    pub fn loss(&self) -> f64 {
        let frame = render_field(self.field(), &self.cam, &self.light, &self.latent);
        frame.color.iter().zip(&self.adjoint).map(|(c, g)| c * g).sum()
    }

    pub fn grads(&self) -> FieldGrads<f64> {
        render_field_with_grads(self.field(), &self.cam, &self.light, &self.latent, &self.adjoint).1
    }
}

#[derive(Debug, Clone, Copy)]
enum Param {
    Position(usize, usize),
    Rotation(usize, usize),
    LogScale(usize, usize),
    Opacity(usize),
    Feature(usize, usize),
    Latent(usize),
    Weight(usize, usize),
    Bias(usize, usize),
}

fn slot(s: &mut TinyScene, p: Param) -> &mut f64 {
    match p {
        Param::Position(i, k) => &mut s.splats.positions[i][k],
        Param::Rotation(i, k) => &mut s.splats.rotations[i][k],
        Param::LogScale(i, k) => &mut s.splats.log_scales[i][k],
        Param::Opacity(i) => &mut s.splats.logit_opacities[i],
        Param::Feature(i, k) => &mut s.splats.features[i][k],
        Param::Latent(k) => &mut s.latent[k],
        Param::Weight(l, k) => &mut s.mlp.layers[l].weights[k],
        Param::Bias(l, k) => &mut s.mlp.layers[l].bias[k],
    }
}

fn analytic(g: &FieldGrads<f64>, p: Param) -> f64 {
    match p {
        Param::Position(i, k) => g.splats.positions[i][k],
        Param::Rotation(i, k) => g.splats.rotations[i][k],
        Param::LogScale(i, k) => g.splats.log_scales[i][k],
        Param::Opacity(i) => g.splats.logit_opacities[i],
        Param::Feature(i, k) => g.splats.features[i][k],
        Param::Latent(k) => g.latent[k],
        Param::Weight(l, k) => g.mlp.layers[l].weights[k],
        Param::Bias(l, k) => g.mlp.layers[l].bias[k],
    }
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub failures: Vec<String>,
}

/// Compares every splat and latent gradient, every bias, and an evenly
/// spaced sample of MLP weights against central differences.
pub fn check_gradients(scene: &TinyScene, h: f64, rel: f64, abs: f64) -> GradReport {
    let grads = scene.grads();
    let mut params = Vec::new();
    for i in 0..scene.splats.len() {
        params.extend((0..3).map(|k| Param::Position(i, k)));
        params.extend((0..4).map(|k| Param::Rotation(i, k)));
        params.extend((0..3).map(|k| Param::LogScale(i, k)));
        params.push(Param::Opacity(i));
        params.extend((0..FEATURE_DIM).map(|k| Param::Feature(i, k)));
    }
    params.extend((0..LATENT_DIM).map(Param::Latent));
    for (l, layer) in scene.mlp.layers.iter().enumerate() {
        params.extend((0..layer.bias.len()).map(|k| Param::Bias(l, k)));
        let step = (layer.weights.len() / 150).max(1);
        params.extend((l..layer.weights.len()).step_by(step).map(|k| Param::Weight(l, k)));
    }

    let mut report = GradReport::default();
    for p in params {
        let mut plus = scene.clone();
        *slot(&mut plus, p) += h;
        let mut minus = scene.clone();
        *slot(&mut minus, p) -= h;
        let fd = (plus.loss() - minus.loss()) / (2.0 * h);
        let an = analytic(&grads, p);
        let tol = abs.max(rel * fd.abs().max(an.abs()));
        report.checked += 1;
        if (fd - an).abs() > tol {
            report.failures.push(format!("{p:?}: finite difference {fd:.9e}, analytic {an:.9e}"));
        }
    }
    report
}
