//! 784-20-10 perceptron with ReLU hidden units and softmax output, trained by
//! cross-entropy; SGD and Adam consume the server's gradient estimate.
//!
//! Parameters live in one flat vector in a fixed order: hidden weights
//! (row-major, `i * 20 + j` connects input `i` to unit `j`), hidden biases,
//! output weights (`j * 10 + c`), output biases.

use ndarray::{ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, IMAGE_PIXELS, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::rng;

pub const HIDDEN: usize = 20;
pub const W1_LEN: usize = IMAGE_PIXELS * HIDDEN;
pub const B1_OFFSET: usize = W1_LEN;
pub const W2_OFFSET: usize = B1_OFFSET + HIDDEN;
pub const B2_OFFSET: usize = W2_OFFSET + HIDDEN * NUM_CLASSES;
pub const PARAM_COUNT: usize = B2_OFFSET + NUM_CLASSES;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    params: Vec<f64>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn glorot(seed: u64) -> Self {
        let mut r = rng::stream(seed, "model-init", &[]);
        let mut params = vec![0.0; PARAM_COUNT];
        let l1 = (6.0 / (IMAGE_PIXELS + HIDDEN) as f64).sqrt();
        let l2 = (6.0 / (HIDDEN + NUM_CLASSES) as f64).sqrt();
        for w in &mut params[..W1_LEN] {
            *w = r.random_range(-l1..l1);
        }
        for w in &mut params[W2_OFFSET..B2_OFFSET] {
            *w = r.random_range(-l2..l2);
        }
        Mlp { params }
    }

    pub fn zeros() -> Self {
        Mlp {
            params: vec![0.0; PARAM_COUNT],
        }
    }

    pub fn from_params(params: Vec<f64>) -> Result<Self> {
        if params.len() != PARAM_COUNT {
            return Err(Error::dim("model parameters", PARAM_COUNT, params.len()));
        }
        Ok(Mlp { params })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    fn hidden(&self, x: &[f64], h: &mut [f64; HIDDEN]) {
        h.copy_from_slice(&self.params[B1_OFFSET..W2_OFFSET]);
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                let row = &self.params[i * HIDDEN..(i + 1) * HIDDEN];
                for (hj, w) in h.iter_mut().zip(row) {
                    *hj += xi * w;
                }
            }
        }
        h.iter_mut().for_each(|v| *v = v.max(0.0));
    }

    fn output(&self, h: &[f64; HIDDEN]) -> [f64; NUM_CLASSES] {
        let mut z = [0.0; NUM_CLASSES];
        z.copy_from_slice(&self.params[B2_OFFSET..]);
        for (j, &hj) in h.iter().enumerate() {
            let row = &self.params[W2_OFFSET + j * NUM_CLASSES..W2_OFFSET + (j + 1) * NUM_CLASSES];
            for (zc, w) in z.iter_mut().zip(row) {
                *zc += hj * w;
            }
        }
        z
    }

    pub fn logits(&self, x: &[f64]) -> [f64; NUM_CLASSES] {
        let mut h = [0.0; HIDDEN];
        self.hidden(x, &mut h);
        self.output(&h)
    }

    pub fn probabilities(&self, x: &[f64]) -> [f64; NUM_CLASSES] {
        softmax(&self.logits(x))
    }
}

pub fn softmax(z: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let peak = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = z.map(|v| (v - peak).exp());
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    p
}

/// Mean cross-entropy over `indices` and its gradient.
pub fn forward_backward(model: &Mlp, data: &Dataset, indices: &[usize]) -> Result<(f64, Vec<f64>)> {
    if indices.is_empty() {
        return Err(Error::InvalidInput("empty mini-batch".into()));
    }
    let mut grad = vec![0.0; PARAM_COUNT];
    let mut loss = 0.0;
    let scale = 1.0 / indices.len() as f64;
    let mut h = [0.0; HIDDEN];
    for &i in indices {
        let x = data.image(i);
        let y = data.labels[i] as usize;
        model.hidden(x, &mut h);
        let z = model.output(&h);
        let p = softmax(&z);
        loss -= p[y].max(f64::MIN_POSITIVE).ln() * scale;
        let mut dz = p;
        dz[y] -= 1.0;
        dz.iter_mut().for_each(|v| *v *= scale);
        let mut dh = [0.0; HIDDEN];
        for j in 0..HIDDEN {
            let row = W2_OFFSET + j * NUM_CLASSES;
            for c in 0..NUM_CLASSES {
                grad[row + c] += h[j] * dz[c];
                dh[j] += model.params[row + c] * dz[c];
            }
            if h[j] <= 0.0 {
                dh[j] = 0.0;
            }
        }
        for c in 0..NUM_CLASSES {
            grad[B2_OFFSET + c] += dz[c];
        }
        for j in 0..HIDDEN {
            grad[B1_OFFSET + j] += dh[j];
        }
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                for j in 0..HIDDEN {
                    grad[i * HIDDEN + j] += xi * dh[j];
                }
            }
        }
    }
    Ok((loss, grad))
}

fn logits_matrix(model: &Mlp, data: &Dataset) -> ndarray::Array2<f64> {
    let w1 = ArrayView2::from_shape((IMAGE_PIXELS, HIDDEN), &model.params[..W1_LEN]).expect("layout");
    let w2 = ArrayView2::from_shape((HIDDEN, NUM_CLASSES), &model.params[W2_OFFSET..B2_OFFSET]).expect("layout");
    let b1 = ndarray::ArrayView1::from(&model.params[B1_OFFSET..W2_OFFSET]);
    let b2 = ndarray::ArrayView1::from(&model.params[B2_OFFSET..]);
    let mut h = data.images.dot(&w1);
    h += &b1;
    h.mapv_inplace(|v| v.max(0.0));
    let mut z = h.dot(&w2);
    z += &b2;
    z
}

/// Classification accuracy of the softmax argmax.
pub fn evaluate(model: &Mlp, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    let z = logits_matrix(model, data);
    let correct = z
        .axis_iter(Axis(0))
        .zip(&data.labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (c, &v)| if v > acc.1 { (c, v) } else { acc });
            best.0 == y as usize
        })
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Mean cross-entropy over the whole set.
pub fn mean_loss(model: &Mlp, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    let z = logits_matrix(model, data);
    let total: f64 = z
        .axis_iter(Axis(0))
        .zip(&data.labels)
        .map(|(row, &y)| {
            let peak = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = peak + row.iter().map(|v| (v - peak).exp()).sum::<f64>().ln();
            lse - row[y as usize]
        })
        .sum();
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam {
        #[serde(default = "default_lr")]
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Sgd {
        eta: f64,
    },
}

fn default_lr() -> f64 {
    0.003
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                if !(lr > 0.0) {
                    return Err(Error::config("optimizer.lr", "must be positive"));
                }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err(Error::config("optimizer.beta", "must lie in [0, 1)"));
                }
                if !(eps > 0.0) {
                    return Err(Error::config("optimizer.eps", "must be positive"));
                }
            }
            OptimizerConfig::Sgd { eta } => {
                if !(eta > 0.0) {
                    return Err(Error::config("optimizer.eta", "must be positive"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd {
        eta: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        m: Vec<f64>,
        v: Vec<f64>,
        step: u64,
    },
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig, dim: usize) -> Self {
        match *cfg {
            OptimizerConfig::Sgd { eta } => Optimizer::Sgd { eta },
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                m: vec![0.0; dim],
                v: vec![0.0; dim],
                step: 0,
            },
        }
    }

    /// Applies one step with `ghat` as the gradient. A non-finite `ghat` is
    /// refused: nothing changes and `false` is returned.
    pub fn apply(&mut self, params: &mut [f64], ghat: &[f64]) -> Result<bool> {
        if params.len() != ghat.len() {
            return Err(Error::dim("gradient estimate", params.len(), ghat.len()));
        }
        if ghat.iter().any(|g| !g.is_finite()) {
            log::warn!("non-finite gradient estimate; update refused");
            return Ok(false);
        }
        match self {
            Optimizer::Sgd { eta } => {
                for (w, g) in params.iter_mut().zip(ghat) {
                    *w -= *eta * g;
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps, m, v, step } => {
                if m.len() != params.len() {
                    return Err(Error::dim("optimizer state", params.len(), m.len()));
                }
                *step += 1;
                let c1 = 1.0 - beta1.powi(*step as i32);
                let c2 = 1.0 - beta2.powi(*step as i32);
                for i in 0..params.len() {
                    let g = ghat[i];
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * g;
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * g * g;
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    params[i] -= *lr * mh / (vh.sqrt() + *eps);
                }
            }
        }
        Ok(true)
    }
}
