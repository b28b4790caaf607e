//! EWA projection, per-pixel front-to-back compositing and its reverse mode.
//!
//! Every splat whose 3σ footprint survives culling is projected once; pixels
//! then walk their depth-sorted contributor list. The backward pass replays
//! each pixel back-to-front, accumulating per-splat gradients of the 2D
//! conic, mean, opacity and color, which are then chained through the
//! projection and the appearance network.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::mlp::PER_SPLAT_INPUT;
use super::{FieldGrads, FieldRef, Real, SplatCloud, ENC_DIM, FEATURE_DIM, LATENT_DIM};
use crate::camera::CameraPose;
use crate::dirmath::{sh_basis, sh_basis_jacobian};

/// Splats closer than this view depth are not rendered.
pub const NEAR_DEPTH: f64 = 0.01;
/// Screen-space covariance floor, in pixels².
const COV_FLOOR: f64 = 0.3;
const MIN_RADIUS_PX: f64 = 0.25;
const ALPHA_MAX: f64 = 0.99;

/// Raw render buffers in the renderer's scalar type.
#[derive(Debug, Clone)]
pub struct Frame<T> {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub color: Vec<T>,
    pub transmittance: Vec<T>,
    pub weight_sum: Vec<T>,
    pub contributors: Vec<u32>,
}

struct Projected<T> {
    index: usize,
    depth: T,
    mean: Vector2<T>,
    /// Inverse of the regularized 2D covariance `[a, b, c]` for `[[a, b], [b, c]]`.
    conic: [T; 3],
    opacity: T,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    p_view: Vector3<T>,
    jac: Matrix2x3<T>,
    cov_view: Matrix3<T>,
}

struct CameraT<T> {
    view: Matrix3<T>,
    center: Vector3<T>,
    fx: T,
    fy: T,
    cx: T,
    cy: T,
    width: usize,
    height: usize,
}

impl<T: Real> CameraT<T> {
    fn new(cam: &CameraPose) -> Self {
        let k = &cam.intrinsics;
        Self {
            view: cam.view_matrix().map(T::lit),
            center: Vector3::from(cam.position).map(T::lit),
            fx: T::lit(k.fx),
            fy: T::lit(k.fy),
            cx: T::lit(k.cx),
            cy: T::lit(k.cy),
            width: k.width,
            height: k.height,
        }
    }
}

fn quat_normalized<T: Real>(q: &[T; 4]) -> ([T; 4], T) {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    (q.map(|c| c / n), n)
}

fn rotation_matrix<T: Real>(q: &[T; 4]) -> Matrix3<T> {
    let [w, x, y, z] = *q;
    let one = T::one();
    let two = T::lit(2.0);
    Matrix3::new(
        one - two * (y * y + z * z),
        two * (x * y - w * z),
        two * (x * z + w * y),
        two * (x * y + w * z),
        one - two * (x * x + z * z),
        two * (y * z - w * x),
        two * (x * z - w * y),
        two * (y * z + w * x),
        one - two * (x * x + y * y),
    )
}

/// Gradient with respect to the unit quaternion given the gradient of `R`.
fn rotation_grad_to_quat<T: Real>(q: &[T; 4], g: &Matrix3<T>) -> [T; 4] {
    let [w, x, y, z] = *q;
    let two = T::lit(2.0);
    let gw = g[(1, 0)] * z - g[(0, 1)] * z + g[(0, 2)] * y - g[(2, 0)] * y + g[(2, 1)] * x - g[(1, 2)] * x;
    let gx = g[(0, 1)] * y + g[(1, 0)] * y + g[(0, 2)] * z + g[(2, 0)] * z + g[(2, 1)] * w - g[(1, 2)] * w
        - two * x * (g[(1, 1)] + g[(2, 2)]);
    let gy = g[(0, 1)] * x + g[(1, 0)] * x + g[(0, 2)] * w - g[(2, 0)] * w + g[(1, 2)] * z + g[(2, 1)] * z
        - two * y * (g[(0, 0)] + g[(2, 2)]);
    let gz = g[(1, 0)] * w - g[(0, 1)] * w + g[(0, 2)] * x + g[(2, 0)] * x + g[(1, 2)] * y + g[(2, 1)] * y
        - two * z * (g[(0, 0)] + g[(1, 1)]);
    [gw, gx, gy, gz].map(|v| two * v)
}

fn world_covariance<T: Real>(splats: &SplatCloud<T>, i: usize) -> (Matrix3<T>, Matrix3<T>, [T; 3], [T; 4], T) {
    let (q, qn) = quat_normalized(&splats.rotations[i]);
    let r = rotation_matrix(&q);
    let s = splats.log_scales[i].map(|v| v.exp());
    let m = Matrix3::from_fn(|row, col| r[(row, col)] * s[col]);
    (m * m.transpose(), r, s, q, qn)
}

fn project<T: Real>(splats: &SplatCloud<T>, cam: &CameraT<T>, i: usize) -> Option<Projected<T>> {
    let p = Vector3::from(splats.positions[i]);
    let p_view = cam.view * (p - cam.center);
    let (x, y, z) = (p_view.x, p_view.y, p_view.z);
    if z <= T::lit(NEAR_DEPTH) {
        return None;
    }
    let (sigma, ..) = world_covariance(splats, i);
    let cov_view = cam.view * sigma * cam.view.transpose();
    let zi = T::one() / z;
    let jac = Matrix2x3::new(cam.fx * zi, T::zero(), -cam.fx * x * zi * zi, T::zero(), cam.fy * zi, -cam.fy * y * zi * zi);
    let cov2: Matrix2<T> = jac * cov_view * jac.transpose();
    let (a, b, c) = (cov2[(0, 0)], cov2[(0, 1)], cov2[(1, 1)]);
    let half = T::lit(0.5);
    let spread = ((a - c) * (a - c) * half * half + b * b).sqrt();
    let lambda_raw = (a + c) * half + spread;
    let three = T::lit(3.0);
    if !(three * lambda_raw.max(T::zero()).sqrt() >= T::lit(MIN_RADIUS_PX)) {
        return None;
    }
    let floor = T::lit(COV_FLOOR);
    let (a, c) = (a + floor, c + floor);
    let det = a * c - b * b;
    if !(det > T::zero()) {
        return None;
    }
    let radius = three * ((a + c) * half + spread).sqrt();
    let mean = Vector2::new(cam.fx * x * zi + cam.cx, cam.fy * y * zi + cam.cy);
    // Pixel centers sit at i + 0.5.
    let span = |m: T, n: usize| -> Option<(usize, usize)> {
        let lo = (m - radius - half).ceil().to_f64().max(0.0);
        let hi = ((m + radius - half).floor().to_f64() + 1.0).min(n as f64);
        (lo < hi).then_some((lo as usize, hi as usize))
    };
    let (x0, x1) = span(mean.x, cam.width)?;
    let (y0, y1) = span(mean.y, cam.height)?;
    Some(Projected {
        index: i,
        depth: z,
        mean,
        conic: [c / det, -b / det, a / det],
        opacity: splats.opacity(i),
        x0,
        x1,
        y0,
        y1,
        p_view,
        jac,
        cov_view,
    })
}

struct Prepared<T> {
    projected: Vec<Projected<T>>,
    /// Unit direction from the camera to each projected splat, and distance.
    view_dirs: Vec<(Vector3<T>, T)>,
    colors: Vec<[T; 3]>,
    batch: super::MlpBatch<T>,
    offsets: Vec<usize>,
    entries: Vec<u32>,
}

fn prepare<T: Real>(field: FieldRef<'_, T>, cam: &CameraT<T>, light: &[T; ENC_DIM], latent: &[T]) -> Prepared<T> {
    let splats = field.splats;
    let mut projected: Vec<Projected<T>> = (0..splats.len()).into_par_iter().filter_map(|i| project(splats, cam, i)).collect();
    projected.sort_by(|a, b| a.depth.to_f64().total_cmp(&b.depth.to_f64()).then(a.index.cmp(&b.index)));

    let view_dirs: Vec<(Vector3<T>, T)> = projected
        .iter()
        .map(|p| {
            let d = Vector3::from(splats.positions[p.index]) - cam.center;
            let n = d.norm();
            (d / n, n)
        })
        .collect();
    let mut inputs = Vec::with_capacity(projected.len() * PER_SPLAT_INPUT);
    for (p, (dir, _)) in projected.iter().zip(&view_dirs) {
        inputs.extend_from_slice(&splats.features[p.index]);
        inputs.extend_from_slice(&sh_basis([dir.x, dir.y, dir.z]));
    }
    let batch = field.mlp.forward_batch(light, latent, inputs);
    let colors = batch.rgb.clone();

    let npix = cam.width * cam.height;
    let mut counts = vec![0usize; npix + 1];
    for p in &projected {
        for y in p.y0..p.y1 {
            for x in p.x0..p.x1 {
                counts[y * cam.width + x + 1] += 1;
            }
        }
    }
    for k in 1..=npix {
        counts[k] += counts[k - 1];
    }
    let offsets = counts;
    let mut fill = offsets.clone();
    let mut entries = vec![0u32; offsets[npix]];
    for (g, p) in projected.iter().enumerate() {
        for y in p.y0..p.y1 {
            for x in p.x0..p.x1 {
                let pix = y * cam.width + x;
                entries[fill[pix]] = g as u32;
                fill[pix] += 1;
            }
        }
    }
    Prepared { projected, view_dirs, colors, batch, offsets, entries }
}

/// Gaussian falloff at a pixel center and the pre-clip alpha.
#[inline]
fn falloff<T: Real>(p: &Projected<T>, px: T, py: T) -> (T, T, T, T) {
    let dx = px - p.mean.x;
    let dy = py - p.mean.y;
    let [a, b, c] = p.conic;
    let power = -T::lit(0.5) * (a * dx * dx + c * dy * dy) - b * dx * dy;
    let g = power.exp();
    (g, p.opacity * g, dx, dy)
}

fn composite<T: Real>(prep: &Prepared<T>, width: usize, height: usize, background: [T; 3]) -> Frame<T> {
    let npix = width * height;
    let mut color = vec![T::zero(); npix * 3];
    let mut transmittance = vec![T::zero(); npix];
    let mut weight_sum = vec![T::zero(); npix];
    let mut contributors = vec![0u32; npix];
    let alpha_max = T::lit(ALPHA_MAX);
    color
        .par_chunks_mut(width * 3)
        .zip(transmittance.par_chunks_mut(width))
        .zip(weight_sum.par_chunks_mut(width))
        .zip(contributors.par_chunks_mut(width))
        .enumerate()
        .for_each(|(y, (((crow, trow), wrow), nrow))| {
            let py = T::lit(y as f64 + 0.5);
            for x in 0..width {
                let pix = y * width + x;
                let px = T::lit(x as f64 + 0.5);
                let list = &prep.entries[prep.offsets[pix]..prep.offsets[pix + 1]];
                let mut t = T::one();
                let mut acc = [T::zero(); 3];
                let mut wsum = T::zero();
                for &g in list {
                    let p = &prep.projected[g as usize];
                    let (_, raw, _, _) = falloff(p, px, py);
                    let alpha = raw.min(alpha_max);
                    let w = alpha * t;
                    let c = prep.colors[g as usize];
                    for k in 0..3 {
                        acc[k] += w * c[k];
                    }
                    wsum += w;
                    t *= T::one() - alpha;
                }
                for k in 0..3 {
                    crow[x * 3 + k] = acc[k] + t * background[k];
                }
                trow[x] = t;
                wrow[x] = wsum;
                nrow[x] = list.len() as u32;
            }
        });
    Frame { width, height, color, transmittance, weight_sum, contributors }
}

/// Forward render in any scalar precision.
pub fn render_field<T: Real>(field: FieldRef<'_, T>, cam: &CameraPose, light: &[T; ENC_DIM], latent: &[T]) -> Frame<T> {
    let camt = CameraT::new(cam);
    let prep = prepare(field, &camt, light, latent);
    composite(&prep, camt.width, camt.height, field.background)
}

#[derive(Clone, Copy, Default)]
struct ScreenGrad<T> {
    mean: [T; 2],
    conic: [T; 3],
    opacity: T,
    color: [T; 3],
}

/// Forward render followed by the gradient of `<adjoint, color>`.
pub fn render_field_with_grads<T: Real>(
    field: FieldRef<'_, T>,
    cam: &CameraPose,
    light: &[T; ENC_DIM],
    latent: &[T],
    adjoint: &[T],
) -> (Frame<T>, FieldGrads<T>) {
    render_field_backprop(field, cam, light, latent, |_| adjoint.to_vec())
}

/// Forward render, then backpropagation of the adjoint that `loss` derives
/// from the rendered frame. Saves a second forward pass when the adjoint
/// depends on the output.
pub fn render_field_backprop<T: Real>(
    field: FieldRef<'_, T>,
    cam: &CameraPose,
    light: &[T; ENC_DIM],
    latent: &[T],
    loss: impl FnOnce(&Frame<T>) -> Vec<T>,
) -> (Frame<T>, FieldGrads<T>) {
    let camt = CameraT::new(cam);
    let prep = prepare(field, &camt, light, latent);
    let frame = composite(&prep, camt.width, camt.height, field.background);
    let adjoint = loss(&frame);
    let adjoint = adjoint.as_slice();
    let width = camt.width;
    let alpha_max = T::lit(ALPHA_MAX);
    let half = T::lit(0.5);

    let mut screen = vec![ScreenGrad::<T>::default(); prep.projected.len()];
    for pix in 0..width * camt.height {
        let g_pix = [adjoint[pix * 3], adjoint[pix * 3 + 1], adjoint[pix * 3 + 2]];
        if g_pix.iter().all(|v| *v == T::zero()) {
            continue;
        }
        let px = T::lit((pix % width) as f64 + 0.5);
        let py = T::lit((pix / width) as f64 + 0.5);
        let list = &prep.entries[prep.offsets[pix]..prep.offsets[pix + 1]];
        let mut t = frame.transmittance[pix];
        // Adjoint-weighted color of everything behind the current splat.
        let mut behind = t * (g_pix[0] * field.background[0] + g_pix[1] * field.background[1] + g_pix[2] * field.background[2]);
        for &g in list.iter().rev() {
            let g = g as usize;
            let p = &prep.projected[g];
            let (gauss, raw, dx, dy) = falloff(p, px, py);
            let clipped = raw > alpha_max;
            let alpha = raw.min(alpha_max);
            let one_minus = T::one() - alpha;
            t /= one_minus;
            let w = alpha * t;
            let c = prep.colors[g];
            let gc = g_pix[0] * c[0] + g_pix[1] * c[1] + g_pix[2] * c[2];
            let d_alpha = t * gc - behind / one_minus;
            behind += w * gc;
            let sg = &mut screen[g];
            for k in 0..3 {
                sg.color[k] += w * g_pix[k];
            }
            if clipped {
                continue;
            }
            sg.opacity += d_alpha * gauss;
            let d_power = d_alpha * raw;
            let [a, b, cc] = p.conic;
            sg.conic[0] -= half * d_power * dx * dx;
            sg.conic[1] -= d_power * dx * dy;
            sg.conic[2] -= half * d_power * dy * dy;
            // delta = pixel - mean, so the mean gradient flips sign.
            sg.mean[0] += d_power * (a * dx + b * dy);
            sg.mean[1] += d_power * (b * dx + cc * dy);
        }
    }

    let d_rgb: Vec<[T; 3]> = screen.iter().map(|s| s.color).collect();
    let mut mlp_grads = super::AppearanceMlp::zeros();
    let mut d_latent = vec![T::zero(); LATENT_DIM];
    let d_inputs = field.mlp.backward_batch(&prep.batch, &d_rgb, light, latent, &mut mlp_grads, &mut d_latent);

    let per_splat: Vec<SplatGrad<T>> = (0..prep.projected.len())
        .into_par_iter()
        .map(|g| chain_splat(field.splats, &camt, &prep.projected[g], prep.view_dirs[g], &screen[g], &d_inputs[g * PER_SPLAT_INPUT..(g + 1) * PER_SPLAT_INPUT]))
        .collect();
    let mut splat_grads = SplatCloud::zeros(field.splats.len());
    for (p, sg) in prep.projected.iter().zip(per_splat) {
        let i = p.index;
        splat_grads.positions[i] = sg.position;
        splat_grads.rotations[i] = sg.rotation;
        splat_grads.log_scales[i] = sg.log_scale;
        splat_grads.logit_opacities[i] = sg.logit_opacity;
        splat_grads.features[i] = sg.feature;
    }
    (frame, FieldGrads { splats: splat_grads, mlp: mlp_grads, latent: d_latent })
}

struct SplatGrad<T> {
    position: [T; 3],
    rotation: [T; 4],
    log_scale: [T; 3],
    logit_opacity: T,
    feature: [T; FEATURE_DIM],
}

fn chain_splat<T: Real>(
    splats: &SplatCloud<T>,
    cam: &CameraT<T>,
    p: &Projected<T>,
    (dir, dist): (Vector3<T>, T),
    sg: &ScreenGrad<T>,
    d_input: &[T],
) -> SplatGrad<T> {
    let i = p.index;
    let two = T::lit(2.0);
    let opacity = p.opacity;
    let logit_opacity = sg.opacity * opacity * (T::one() - opacity);

    // Conic -> regularized 2D covariance: dC = -Q dQ Q.
    let [qa, qb, qc] = p.conic;
    let q = Matrix2::new(qa, qb, qb, qc);
    let g_q = Matrix2::new(sg.conic[0], sg.conic[1] / two, sg.conic[1] / two, sg.conic[2]);
    let g_cov2 = -(q * g_q * q);

    // 2D covariance -> view covariance and projection Jacobian.
    let g_cov_view = p.jac.transpose() * g_cov2 * p.jac;
    let g_jac: Matrix2x3<T> = g_cov2 * p.jac * p.cov_view * two;

    // View covariance -> world covariance -> M = R S.
    let g_sigma = cam.view.transpose() * g_cov_view * cam.view;
    let (_, r, s, q_unit, q_norm) = world_covariance(splats, i);
    let m = Matrix3::from_fn(|row, col| r[(row, col)] * s[col]);
    let g_m = g_sigma * m * two;
    let g_r = Matrix3::from_fn(|row, col| g_m[(row, col)] * s[col]);
    let log_scale = [0, 1, 2].map(|k| (0..3).fold(T::zero(), |acc, row| acc + g_m[(row, k)] * r[(row, k)]) * s[k]);
    let g_q_unit = rotation_grad_to_quat(&q_unit, &g_r);
    let radial = (0..4).fold(T::zero(), |acc, k| acc + g_q_unit[k] * q_unit[k]);
    let rotation = [0, 1, 2, 3].map(|k| (g_q_unit[k] - q_unit[k] * radial) / q_norm);

    // Mean and Jacobian depend on the view-space position.
    let (x, y, z) = (p.p_view.x, p.p_view.y, p.p_view.z);
    let zi = T::one() / z;
    let zi2 = zi * zi;
    let zi3 = zi2 * zi;
    let (fx, fy) = (cam.fx, cam.fy);
    let mut g_pv = Vector3::new(
        sg.mean[0] * fx * zi - g_jac[(0, 2)] * fx * zi2,
        sg.mean[1] * fy * zi - g_jac[(1, 2)] * fy * zi2,
        -sg.mean[0] * fx * x * zi2 - sg.mean[1] * fy * y * zi2,
    );
    g_pv.z += -g_jac[(0, 0)] * fx * zi2 + g_jac[(0, 2)] * two * fx * x * zi3 - g_jac[(1, 1)] * fy * zi2
        + g_jac[(1, 2)] * two * fy * y * zi3;
    let mut position = cam.view.transpose() * g_pv;

    // View direction encoding depends on position too.
    let g_enc = &d_input[FEATURE_DIM..];
    let jac_sh = sh_basis_jacobian([dir.x, dir.y, dir.z]);
    let mut g_dir = Vector3::zeros();
    for (k, row) in jac_sh.iter().enumerate() {
        for a in 0..3 {
            g_dir[a] += g_enc[k] * row[a];
        }
    }
    position += (g_dir - dir * dir.dot(&g_dir)) / dist;

    let mut feature = [T::zero(); FEATURE_DIM];
    feature.copy_from_slice(&d_input[..FEATURE_DIM]);
    SplatGrad { position: [position.x, position.y, position.z], rotation, log_scale, logit_opacity, feature }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quaternion_rotation_is_orthonormal() {
        let (q, _) = quat_normalized(&[0.3f64, -0.5, 0.7, 0.2]);
        let r = rotation_matrix(&q);
        assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quaternion_gradient_matches_finite_differences() {
        let q = [0.6f64, -0.2, 0.5, 0.3];
        let g = Matrix3::new(0.3, -1.0, 0.2, 0.7, 0.1, -0.4, 0.5, 0.9, -0.6);
        let f = |q: [f64; 4]| rotation_matrix(&q).component_mul(&g).sum();
        let an = rotation_grad_to_quat(&q, &g);
        for k in 0..4 {
            let (mut qp, mut qm) = (q, q);
            qp[k] += 1e-6;
            qm[k] -= 1e-6;
            let fd = (f(qp) - f(qm)) / 2e-6;
            assert!((fd - an[k]).abs() < 1e-8, "{k}: {fd} vs {}", an[k]);
        }
    }

    #[test]
    fn behind_camera_and_tiny_splats_are_culled() {
        let cam = CameraPose::look_at([0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 60.0, 16, 16).unwrap();
        let camt = CameraT::<f64>::new(&cam);
        let mut cloud = SplatCloud::zeros(0);
        cloud.push([0.0, 0.0, 4.0], [1.0, 0.0, 0.0, 0.0], [-2.0; 3], 0.0, [0.0; FEATURE_DIM]);
        cloud.push([0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [-12.0; 3], 0.0, [0.0; FEATURE_DIM]);
        cloud.push([0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [-2.0; 3], 0.0, [0.0; FEATURE_DIM]);
        assert!(project(&cloud, &camt, 0).is_none());
        assert!(project(&cloud, &camt, 1).is_none());
        let p = project(&cloud, &camt, 2).unwrap();
        assert!((p.mean.x - 8.0).abs() < 1e-12 && (p.mean.y - 8.0).abs() < 1e-12);
        assert!(p.x0 < 8 && p.x1 > 8);
    }
}
