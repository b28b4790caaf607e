//! The appearance network: three dense layers (two ReLU hidden layers of
//! width 128, sigmoid RGB output) over the concatenation
//! `[feature | view encoding | light encoding | latent]`.
//!
//! Light encoding and latent are shared by every splat of a render, so their
//! contribution to the first layer is folded into an effective bias once per
//! frame and their gradients are reduced through the summed first-layer delta.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::real::Real;
use super::{FieldError, ENC_DIM, FEATURE_DIM, LATENT_DIM};

pub const MLP_WIDTH: usize = 128;
pub const MLP_INPUT: usize = FEATURE_DIM + 2 * ENC_DIM + LATENT_DIM;
pub const MLP_OUTPUT: usize = 3;
/// Inputs that vary per splat: feature and view encoding.
pub const PER_SPLAT_INPUT: usize = FEATURE_DIM + ENC_DIM;
const LIGHT_OFFSET: usize = PER_SPLAT_INPUT;
const LATENT_OFFSET: usize = PER_SPLAT_INPUT + ENC_DIM;

/// Splats per gradient-reduction chunk. Fixed so the reduction order does not
/// depend on the thread count.
const GRAD_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![T::zero(); inputs * outputs], bias: vec![T::zero(); outputs] }
    }

    fn row(&self, j: usize) -> &[T] {
        &self.weights[j * self.inputs..(j + 1) * self.inputs]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceMlp<T> {
    pub layers: [Dense<T>; 3],
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let mut acc = [T::zero(); 8];
    let full = n / 8 * 8;
    for (ca, cb) in a[..full].chunks_exact(8).zip(b[..full].chunks_exact(8)) {
        for k in 0..8 {
            acc[k] += ca[k] * cb[k];
        }
    }
    let mut tail = T::zero();
    for k in full..n {
        tail += a[k] * b[k];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * *xi;
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Activations of a batch of splats, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpBatch<T> {
    pub n: usize,
    pub inputs: Vec<T>,
    pub h1: Vec<T>,
    pub h2: Vec<T>,
    pub rgb: Vec<[T; 3]>,
}

impl<T: Real> AppearanceMlp<T> {
    pub fn zeros() -> Self {
        Self { layers: [Dense::zeros(MLP_INPUT, MLP_WIDTH), Dense::zeros(MLP_WIDTH, MLP_WIDTH), Dense::zeros(MLP_WIDTH, MLP_OUTPUT)] }
    }

    /// He-normal hidden layers, small output layer, zero biases.
    pub fn random(rng: &mut impl Rng) -> Self {
        let mut mlp = Self::zeros();
        let scales = [(2.0 / MLP_INPUT as f64).sqrt(), (2.0 / MLP_WIDTH as f64).sqrt(), (1.0 / MLP_WIDTH as f64).sqrt()];
        for (layer, s) in mlp.layers.iter_mut().zip(scales) {
            let normal = Normal::new(0.0, s).expect("finite std");
            for w in &mut layer.weights {
                *w = T::lit(normal.sample(rng));
            }
        }
        mlp
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> AppearanceMlp<U> {
        let c = |d: &Dense<T>| Dense {
            inputs: d.inputs,
            outputs: d.outputs,
            weights: d.weights.iter().map(|v| U::lit(v.to_f64())).collect(),
            bias: d.bias.iter().map(|v| U::lit(v.to_f64())).collect(),
        };
        AppearanceMlp { layers: [c(&self.layers[0]), c(&self.layers[1]), c(&self.layers[2])] }
    }

    /// Every parameter as one mutable slice per weight/bias buffer.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.layers.iter_mut().flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()]).collect()
    }

    pub fn param_slices(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()]).collect()
    }

    pub fn add_assign(&mut self, other: &AppearanceMlp<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += *y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += *y);
        }
    }

    /// First-layer bias with the shared light and latent inputs folded in.
    pub fn shared_bias(&self, light: &[T; ENC_DIM], latent: &[T]) -> Vec<T> {
        let l1 = &self.layers[0];
        (0..MLP_WIDTH)
            .map(|j| {
                let row = l1.row(j);
                l1.bias[j] + dot(&row[LIGHT_OFFSET..LATENT_OFFSET], light) + dot(&row[LATENT_OFFSET..], latent)
            })
            .collect()
    }

    fn forward_one(&self, base1: &[T], x: &[T], h1: &mut [T], h2: &mut [T]) -> [T; 3] {
        let (l1, l2, l3) = (&self.layers[0], &self.layers[1], &self.layers[2]);
        for j in 0..MLP_WIDTH {
            let z = base1[j] + dot(&l1.row(j)[..PER_SPLAT_INPUT], x);
            h1[j] = z.max(T::zero());
        }
        for j in 0..MLP_WIDTH {
            let z = l2.bias[j] + dot(l2.row(j), h1);
            h2[j] = z.max(T::zero());
        }
        [0, 1, 2].map(|o| sigmoid(l3.bias[o] + dot(l3.row(o), h2)))
    }

    /// Evaluates the network for many splats sharing one light and latent.
    /// `inputs` holds `PER_SPLAT_INPUT` values per splat.
    pub fn forward_batch(&self, light: &[T; ENC_DIM], latent: &[T], inputs: Vec<T>) -> MlpBatch<T> {
        let n = inputs.len() / PER_SPLAT_INPUT;
        let base1 = self.shared_bias(light, latent);
        let mut h1 = vec![T::zero(); n * MLP_WIDTH];
        let mut h2 = vec![T::zero(); n * MLP_WIDTH];
        let mut rgb = vec![[T::zero(); 3]; n];
        h1.par_chunks_mut(MLP_WIDTH)
            .zip(h2.par_chunks_mut(MLP_WIDTH))
            .zip(rgb.par_iter_mut())
            .zip(inputs.par_chunks(PER_SPLAT_INPUT))
            .for_each(|(((a, b), out), x)| *out = self.forward_one(&base1, x, a, b));
        MlpBatch { n, inputs, h1, h2, rgb }
    }

    /// Backpropagates `d_rgb` (gradient w.r.t. the sigmoid outputs). Parameter
    /// gradients are added to `grads`, the latent gradient to `d_latent`, and
    /// the per-splat input gradients are returned.
    pub fn backward_batch(
        &self,
        batch: &MlpBatch<T>,
        d_rgb: &[[T; 3]],
        light: &[T; ENC_DIM],
        latent: &[T],
        grads: &mut AppearanceMlp<T>,
        d_latent: &mut [T],
    ) -> Vec<T> {
        let n = batch.n;
        let mut d_inputs = vec![T::zero(); n * PER_SPLAT_INPUT];
        let partials: Vec<(AppearanceMlp<T>, Vec<T>)> = d_inputs
            .par_chunks_mut(GRAD_CHUNK * PER_SPLAT_INPUT)
            .enumerate()
            .map(|(chunk, d_in)| {
                let start = chunk * GRAD_CHUNK;
                let end = (start + GRAD_CHUNK).min(n);
                self.backward_chunk(batch, d_rgb, start..end, d_in)
            })
            .collect();

        let mut delta1_sum = vec![T::zero(); MLP_WIDTH];
        for (partial, s1) in &partials {
            grads.add_assign(partial);
            delta1_sum.iter_mut().zip(s1).for_each(|(a, b)| *a += *b);
        }
        let l1 = &self.layers[0];
        let g1 = &mut grads.layers[0];
        for k in 0..MLP_WIDTH {
            let s = delta1_sum[k];
            let row = &mut g1.weights[k * MLP_INPUT..(k + 1) * MLP_INPUT];
            axpy(&mut row[LIGHT_OFFSET..LATENT_OFFSET], s, light);
            axpy(&mut row[LATENT_OFFSET..], s, latent);
            axpy(d_latent, s, &l1.row(k)[LATENT_OFFSET..]);
        }
        d_inputs
    }

    fn backward_chunk(&self, batch: &MlpBatch<T>, d_rgb: &[[T; 3]], range: std::ops::Range<usize>, d_in: &mut [T]) -> (AppearanceMlp<T>, Vec<T>) {
        let (l1, l2, l3) = (&self.layers[0], &self.layers[1], &self.layers[2]);
        let mut g = AppearanceMlp::zeros();
        let mut s1 = vec![T::zero(); MLP_WIDTH];
        let mut delta2 = vec![T::zero(); MLP_WIDTH];
        let mut delta1 = vec![T::zero(); MLP_WIDTH];
        for (local, i) in range.enumerate() {
            let h1 = &batch.h1[i * MLP_WIDTH..(i + 1) * MLP_WIDTH];
            let h2 = &batch.h2[i * MLP_WIDTH..(i + 1) * MLP_WIDTH];
            let x = &batch.inputs[i * PER_SPLAT_INPUT..(i + 1) * PER_SPLAT_INPUT];
            let rgb = batch.rgb[i];
            let delta3 = [0, 1, 2].map(|o| d_rgb[i][o] * rgb[o] * (T::one() - rgb[o]));
            if delta3.iter().all(|d| *d == T::zero()) {
                continue;
            }

            delta2.iter_mut().for_each(|d| *d = T::zero());
            for o in 0..MLP_OUTPUT {
                axpy(&mut delta2, delta3[o], l3.row(o));
                axpy(&mut g.layers[2].weights[o * MLP_WIDTH..(o + 1) * MLP_WIDTH], delta3[o], h2);
                g.layers[2].bias[o] += delta3[o];
            }
            for j in 0..MLP_WIDTH {
                if h2[j] <= T::zero() {
                    delta2[j] = T::zero();
                }
            }

            delta1.iter_mut().for_each(|d| *d = T::zero());
            for j in 0..MLP_WIDTH {
                let d = delta2[j];
                if d == T::zero() {
                    continue;
                }
                axpy(&mut delta1, d, l2.row(j));
                axpy(&mut g.layers[1].weights[j * MLP_WIDTH..(j + 1) * MLP_WIDTH], d, h1);
                g.layers[1].bias[j] += d;
            }
            for k in 0..MLP_WIDTH {
                if h1[k] <= T::zero() {
                    delta1[k] = T::zero();
                }
            }

            let d_x = &mut d_in[local * PER_SPLAT_INPUT..(local + 1) * PER_SPLAT_INPUT];
            for k in 0..MLP_WIDTH {
                let d = delta1[k];
                if d == T::zero() {
                    continue;
                }
                axpy(d_x, d, &l1.row(k)[..PER_SPLAT_INPUT]);
                axpy(&mut g.layers[0].weights[k * MLP_INPUT..k * MLP_INPUT + PER_SPLAT_INPUT], d, x);
                g.layers[0].bias[k] += d;
                s1[k] += d;
            }
        }
        (g, s1)
    }
}

/// Single-splat evaluation with full-width inputs.
pub fn mlp_forward<T: Real>(mlp: &AppearanceMlp<T>, feature: &[T], view_enc: &[T], light_enc: &[T], latent: &[T]) -> Result<[T; 3], FieldError> {
    let check = |name: &'static str, got: usize, expected: usize| {
        if got == expected {
            Ok(())
        } else {
            Err(FieldError::Dimension { name, expected, got })
        }
    };
    check("feature", feature.len(), FEATURE_DIM)?;
    check("view_enc", view_enc.len(), ENC_DIM)?;
    check("light_enc", light_enc.len(), ENC_DIM)?;
    check("latent", latent.len(), LATENT_DIM)?;
    let light: [T; ENC_DIM] = light_enc.try_into().expect("checked length");
    let x: Vec<T> = feature.iter().chain(view_enc).copied().collect();
    let base1 = mlp.shared_bias(&light, latent);
    let mut h1 = vec![T::zero(); MLP_WIDTH];
    let mut h2 = vec![T::zero(); MLP_WIDTH];
    Ok(mlp.forward_one(&base1, &x, &mut h1, &mut h2))
}
