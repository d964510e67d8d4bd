//! Point-wise MLPs with hand-written reverse-mode gradients, and the
//! softmax cross-entropy segmentation loss.

mod model;

pub use model::{carry_over_pairs, Model, ModelConfig, ModelGrads, ModelTape, ParamEntry, ParamIndex, Stage};

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{axpy, dot_unchecked, Mat};

/// Label value for points that contribute no supervision.
pub const IGNORE: usize = usize::MAX;

static PARAM_VERSION: AtomicU64 = AtomicU64::new(1);

fn next_version() -> u64 {
    PARAM_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out × in`
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    fn forward(&self, x: &Mat) -> Mat {
        let mut y = Mat::zeros(x.rows(), self.out_dim());
        for i in 0..x.rows() {
            let xi = x.row(i);
            let yi = y.row_mut(i);
            for (o, out) in yi.iter_mut().enumerate() {
                *out = dot_unchecked(self.weight.row(o), xi) + self.bias[o];
            }
        }
        y
    }
}

/// Multi-layer perceptron: tanh on hidden layers, identity on the output.
///
/// Every mutable access bumps an internal version so that a [`MlpTape`]
/// recorded against older parameters is rejected by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    version: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. `dims = [in, hidden.., out]`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                Linear {
                    weight: Mat::from_vec(fan_out, fan_in, data).expect("sized above"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Self {
            layers,
            version: next_version(),
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let layers = dims
            .windows(2)
            .map(|w| Linear {
                weight: Mat::zeros(w[1], w[0]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Self {
            layers,
            version: next_version(),
        }
    }

    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("Mlp::from_layers"));
        }
        for pair in layers.windows(2) {
            check_dim("Mlp layer chain", pair[0].out_dim(), pair[1].in_dim())?;
        }
        for l in &layers {
            check_dim("Mlp bias length", l.out_dim(), l.bias.len())?;
        }
        Ok(Self {
            layers,
            version: next_version(),
        })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        self.version = next_version();
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.in_dim()];
        d.extend(self.layers.iter().map(Linear::out_dim));
        d
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    pub fn forward(&self, x: &Mat) -> Result<(Mat, MlpTape)> {
        check_dim("Mlp::forward input", self.in_dim(), x.cols())?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(&h);
            if l < last {
                y.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(h);
            h = y;
        }
        Ok((
            h,
            MlpTape {
                inputs,
                version: self.version,
            },
        ))
    }

    /// Reverse pass for `upstream = ∂L/∂output`.
    pub fn backward(&self, tape: &MlpTape, upstream: &Mat) -> Result<MlpGrads> {
        if tape.version != self.version {
            return Err(Error::StaleTape);
        }
        let n = tape.inputs[0].rows();
        check_dim("Mlp::backward rows", n, upstream.rows())?;
        check_dim("Mlp::backward cols", self.out_dim(), upstream.cols())?;

        let mut layer_grads: Vec<Linear> = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &tape.inputs[l];
            let mut gw = Mat::zeros(layer.out_dim(), layer.in_dim());
            let mut gb = vec![0.0; layer.out_dim()];
            let mut gx = Mat::zeros(n, layer.in_dim());
            for i in 0..n {
                let di = delta.row(i);
                let xi = input.row(i);
                let gxi = gx.row_mut(i);
                for (o, &d) in di.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    axpy(d, xi, gw.row_mut(o));
                    axpy(d, layer.weight.row(o), gxi);
                }
            }
            if l > 0 {
                // input to layer l is tanh output of layer l-1
                for (g, a) in gx.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    *g *= 1.0 - a * a;
                }
            }
            layer_grads.push(Linear {
                weight: gw,
                bias: gb,
            });
            delta = gx;
        }
        layer_grads.reverse();
        Ok(MlpGrads {
            layers: layer_grads,
            input: delta,
        })
    }

    /// Appends all parameters (per layer: weight row-major, then bias).
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
    }

    /// Reads parameters back in [`Mlp::flatten_into`] order, returning the
    /// number of values consumed.
    pub fn scatter_from(&mut self, flat: &[f64]) -> Result<usize> {
        let need = self.param_count();
        if flat.len() < need {
            return Err(Error::DimensionMismatch {
                context: "Mlp::scatter_from",
                expected: need,
                actual: flat.len(),
            });
        }
        let mut at = 0;
        for l in self.layers_mut() {
            let w = l.weight.as_mut_slice();
            w.copy_from_slice(&flat[at..at + w.len()]);
            at += w.len();
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(at)
    }
}

/// Inputs to every layer, recorded by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct MlpTape {
    inputs: Vec<Mat>,
    version: u64,
}

#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<Linear>,
    pub input: Mat,
}

impl MlpGrads {
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Mat) -> Mat {
    let mut p = logits.clone();
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    p
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Mean negative log-softmax over points whose label is not [`IGNORE`].
///
/// Returns the loss and `∂loss/∂logits`. With every label ignored the loss
/// is 0 and the gradient is zero.
pub fn softmax_cross_entropy(logits: &Mat, labels: &[usize]) -> Result<(f64, Mat)> {
    check_dim("softmax_cross_entropy labels", logits.rows(), labels.len())?;
    let k = logits.cols();
    let count = labels.iter().filter(|&&l| l != IGNORE).count();
    let mut grad = Mat::zeros(logits.rows(), k);
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        if label >= k {
            return Err(Error::DimensionMismatch {
                context: "softmax_cross_entropy label range",
                expected: k,
                actual: label,
            });
        }
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        loss += lse - row[label];
        let g = grad.row_mut(i);
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = (row[j] - lse).exp() * inv;
        }
        g[label] -= inv;
    }
    Ok((loss * inv, grad))
}
