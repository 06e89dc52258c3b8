//! Small feed-forward networks with exact reverse-mode gradients.
//!
//! Hidden layers use `tanh`, the output layer is linear. Gradients are
//! hand-derived (the networks are two or three layers at most), which keeps
//! them bit-deterministic and trivially checkable against finite differences.
//!
//! Optimizers: plain SGD with global-norm gradient clipping is the default
//! end-to-end; adaptive-moment stepping ([`Adam`]) is available behind a
//! config flag for the continuous-control learner.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Parameters of a feed-forward network: one weight matrix (`in × out`) and
/// one bias vector per layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpParams {
    /// Per-layer weight matrices, `weights[i]` has shape `sizes[i] × sizes[i+1]`.
    pub weights: Vec<Array2<f64>>,
    /// Per-layer bias vectors.
    pub biases: Vec<Array1<f64>>,
}

/// Per-layer parameter gradients, same shapes as [`MlpParams`].
#[derive(Clone, Debug)]
pub struct Grads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Forward-pass activations, kept for the backward pass.
/// `layers[0]` is the input batch; `layers[i+1]` the output of layer `i`
/// (post-`tanh` for hidden layers, raw for the final linear layer).
pub struct Cache {
    layers: Vec<Array2<f64>>,
}

impl MlpParams {
    /// Initializes weights `N(0, (scale/√fan_in)²)` per layer and zero biases.
    /// `out_scale` additionally multiplies the final layer's scale; a small
    /// value (e.g. 0.01) starts the network near zero output, which keeps
    /// early greedy action selection unbiased by initialization noise.
    pub fn init<R: Rng>(rng: &mut R, sizes: &[usize], scale: f64, out_scale: f64) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let last = sizes.len() - 2;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let s = scale * if i == last { out_scale } else { 1.0 } / (fan_in as f64).sqrt();
            let fill: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| s * rng.sample::<f64, _>(StandardNormal))
                .collect();
            weights.push(Array2::from_shape_vec((fan_in, fan_out), fill).unwrap());
            biases.push(Array1::zeros(fan_out));
        }
        MlpParams { weights, biases }
    }

    /// Number of layers.
    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    /// Input dimension.
    pub fn input_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    /// Output dimension.
    pub fn output_dim(&self) -> usize {
        self.weights[self.depth() - 1].ncols()
    }

    /// Forward pass on a batch (`batch × input_dim`), returning outputs and
    /// the activation cache for [`MlpParams::backward`].
    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Cache) {
        let mut layers = vec![x.clone()];
        let mut h = x.clone();
        let depth = self.depth();
        for i in 0..depth {
            let mut z = h.dot(&self.weights[i]) + &self.biases[i];
            if i + 1 < depth {
                z.mapv_inplace(f64::tanh);
            }
            layers.push(z.clone());
            h = z;
        }
        (h, Cache { layers })
    }

    /// Forward pass on a single input vector.
    pub fn forward_one(&self, x: &Array1<f64>) -> Array1<f64> {
        let batch = x.view().insert_axis(Axis(0)).to_owned();
        let (out, _) = self.forward(&batch);
        out.index_axis(Axis(0), 0).to_owned()
    }

    /// Reverse-mode gradients of `⟨outputs, cotangent⟩` summed over the
    /// batch, given the forward cache and the per-row output cotangents.
    pub fn backward(&self, cache: &Cache, output_cotangent: &Array2<f64>) -> Grads {
        self.backward_io(cache, output_cotangent).0
    }

    /// Like [`MlpParams::backward`], additionally returning the gradient
    /// w.r.t. the input batch (needed to differentiate a critic through its
    /// action inputs).
    pub fn backward_io(
        &self,
        cache: &Cache,
        output_cotangent: &Array2<f64>,
    ) -> (Grads, Array2<f64>) {
        let depth = self.depth();
        let mut gw = vec![Array2::zeros((0, 0)); depth];
        let mut gb = vec![Array1::zeros(0); depth];
        let mut g = output_cotangent.clone();
        for i in (0..depth).rev() {
            if i + 1 < depth {
                // Propagating through tanh: d tanh(z) = 1 − tanh(z)².
                let h_out = &cache.layers[i + 1];
                g = &g * &h_out.mapv(|v| 1.0 - v * v);
            }
            gw[i] = cache.layers[i].t().dot(&g);
            gb[i] = g.sum_axis(Axis(0));
            g = g.dot(&self.weights[i].t());
        }
        (
            Grads {
                weights: gw,
                biases: gb,
            },
            g,
        )
    }

    /// True iff every parameter is finite.
    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Forward pass plus exact gradients of `⟨output, cotangent⟩` for a single
/// input vector.
pub fn mlp_eval_grad(
    params: &MlpParams,
    input: &Array1<f64>,
    output_cotangent: &Array1<f64>,
) -> Result<(Array1<f64>, Grads)> {
    if input.len() != params.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "input dim {} != network input dim {}",
            input.len(),
            params.input_dim()
        )));
    }
    if output_cotangent.len() != params.output_dim() {
        return Err(Error::InvalidArgument(format!(
            "cotangent dim {} != network output dim {}",
            output_cotangent.len(),
            params.output_dim()
        )));
    }
    let x = input.view().insert_axis(Axis(0)).to_owned();
    let (out, cache) = params.forward(&x);
    let cot = output_cotangent.view().insert_axis(Axis(0)).to_owned();
    let grads = params.backward(&cache, &cot);
    Ok((out.index_axis(Axis(0), 0).to_owned(), grads))
}

/// Global gradient norm across all parameter blocks.
pub fn grad_norm(grads: &Grads) -> f64 {
    let sw: f64 = grads
        .weights
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let sb: f64 = grads
        .biases
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum();
    (sw + sb).sqrt()
}

/// One SGD step with global-norm clipping: if the gradient norm exceeds
/// `clip`, the whole gradient is rescaled to norm `clip` before stepping.
pub fn sgd_step(params: &mut MlpParams, grads: &Grads, lr: f64, clip: f64) {
    let gn = grad_norm(grads);
    let scale = lr * if gn > clip { clip / gn } else { 1.0 };
    for (w, g) in params.weights.iter_mut().zip(&grads.weights) {
        w.scaled_add(-scale, g);
    }
    for (b, g) in params.biases.iter_mut().zip(&grads.biases) {
        b.scaled_add(-scale, g);
    }
}

/// Soft target-network update: `target ← (1−τ)·target + τ·online`.
pub fn soft_update(target: &mut MlpParams, online: &MlpParams, tau: f64) {
    for (t, o) in target.weights.iter_mut().zip(&online.weights) {
        t.zip_mut_with(o, |tv, ov| *tv = (1.0 - tau) * *tv + tau * ov);
    }
    for (t, o) in target.biases.iter_mut().zip(&online.biases) {
        t.zip_mut_with(o, |tv, ov| *tv = (1.0 - tau) * *tv + tau * ov);
    }
}

/// Adaptive-moment optimizer (optional alternative to [`sgd_step`]).
///
/// Standard first/second-moment estimation with bias correction; gradients
/// are globally norm-clipped before the moment updates, matching the SGD
/// path's clipping semantics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    lr: f64,
    clip: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_w: Vec<Array2<f64>>,
    v_b: Vec<Array1<f64>>,
}

impl Adam {
    /// Creates moment buffers shaped like `params`.
    pub fn new(params: &MlpParams, lr: f64, clip: f64) -> Self {
        Adam {
            lr,
            clip,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m_w: params.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            m_b: params.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
            v_w: params.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            v_b: params.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    /// One optimizer step.
    pub fn step(&mut self, params: &mut MlpParams, grads: &Grads) {
        let gn = grad_norm(grads);
        let gscale = if gn > self.clip { self.clip / gn } else { 1.0 };
        self.t += 1;
        let b1c = 1.0 - self.beta1.powi(self.t as i32);
        let b2c = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for i in 0..params.weights.len() {
            azip_step(
                params.weights[i].iter_mut(),
                grads.weights[i].iter(),
                self.m_w[i].iter_mut(),
                self.v_w[i].iter_mut(),
                gscale,
                b1,
                b2,
                b1c,
                b2c,
                eps,
                lr,
            );
            azip_step(
                params.biases[i].iter_mut(),
                grads.biases[i].iter(),
                self.m_b[i].iter_mut(),
                self.v_b[i].iter_mut(),
                gscale,
                b1,
                b2,
                b1c,
                b2c,
                eps,
                lr,
            );
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn azip_step<'a>(
    params: impl Iterator<Item = &'a mut f64>,
    grads: impl Iterator<Item = &'a f64>,
    m: impl Iterator<Item = &'a mut f64>,
    v: impl Iterator<Item = &'a mut f64>,
    gscale: f64,
    b1: f64,
    b2: f64,
    b1c: f64,
    b2c: f64,
    eps: f64,
    lr: f64,
) {
    for (((p, g), m), v) in params.zip(grads).zip(m).zip(v) {
        let g = g * gscale;
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= lr * (*m / b1c) / ((*v / b2c).sqrt() + eps);
    }
}
