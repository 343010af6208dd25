use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{FeatureMatrix, RngState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Layer {
    /// `y = W x + b` with `W` stored `out_dim x in_dim`, row-major.
    Affine {
        in_dim: usize,
        out_dim: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    },
    Relu,
}

impl Layer {
    pub fn affine(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidInput("affine layer dimensions must be positive".into()));
        }
        if weight.len() != in_dim * out_dim {
            return Err(Error::DimensionMismatch {
                expected: in_dim * out_dim,
                found: weight.len(),
            });
        }
        if bias.len() != out_dim {
            return Err(Error::DimensionMismatch {
                expected: out_dim,
                found: bias.len(),
            });
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite layer parameter".into()));
        }
        Ok(Self::Affine {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    fn num_params(&self) -> usize {
        match self {
            Self::Affine { in_dim, out_dim, .. } => out_dim * (in_dim + 1),
            Self::Relu => 0,
        }
    }
}

/// Feedforward network of affine and ReLU layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    pub layers: Vec<Layer>,
}

impl NetSpec {
    pub fn new(input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        let net = Self { input_dim, layers };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidInput("network input dimension must be positive".into()));
        }
        let mut dim = self.input_dim;
        for layer in &self.layers {
            if let Layer::Affine {
                in_dim,
                out_dim,
                weight,
                bias,
            } = layer
            {
                if *in_dim != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        found: *in_dim,
                    });
                }
                Layer::affine(*in_dim, *out_dim, weight.clone(), bias.clone())?;
                dim = *out_dim;
            }
        }
        Ok(())
    }

    /// Affine layers of the given widths with a ReLU between consecutive
    /// ones: `widths = [8, 16, 4]` gives `8 -> 16 -> relu -> 4`. Weights are
    /// `N(0, 1/in_dim)`, biases `N(0, 0.1^2)`.
    pub fn mlp(widths: &[usize], rng: &mut RngState) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidInput("an MLP needs at least input and output widths".into()));
        }
        let mut layers = Vec::new();
        for (k, w) in widths.windows(2).enumerate() {
            if k > 0 {
                layers.push(Layer::Relu);
            }
            let scale = 1.0 / (w[0] as f64).sqrt();
            let weight = rng.gaussians(w[0] * w[1]).into_iter().map(|v| v * scale).collect();
            let bias = rng.gaussians(w[1]).into_iter().map(|v| 0.1 * v).collect();
            layers.push(Layer::affine(w[0], w[1], weight, bias)?);
        }
        Self::new(widths[0], layers)
    }

    pub fn output_dim(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Affine { out_dim, .. } => Some(*out_dim),
                Layer::Relu => None,
            })
            .unwrap_or(self.input_dim)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    /// Flattened parameters: layer by layer, weights then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            if let Layer::Affine { weight, bias, .. } = layer {
                out.extend_from_slice(weight);
                out.extend_from_slice(bias);
            }
        }
        out
    }

    /// Copy of the network with parameters taken from `flat`, in the
    /// order of [`NetSpec::params`].
    pub fn with_params(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                found: flat.len(),
            });
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite parameter".into()));
        }
        let mut net = self.clone();
        let mut pos = 0;
        for layer in &mut net.layers {
            if let Layer::Affine { weight, bias, .. } = layer {
                let (w, b) = (weight.len(), bias.len());
                weight.copy_from_slice(&flat[pos..pos + w]);
                bias.copy_from_slice(&flat[pos + w..pos + w + b]);
                pos += w + b;
            }
        }
        Ok(net)
    }
}

/// Activations entering each layer plus the final output, all row-major
/// with `rows` rows.
pub(crate) struct Trace {
    pub rows: usize,
    pub acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace holds the input")
    }
}

pub(crate) fn forward_trace(net: &NetSpec, input: &[f64], rows: usize) -> Trace {
    let mut acts = Vec::with_capacity(net.layers.len() + 1);
    acts.push(input.to_vec());
    for layer in &net.layers {
        let x = acts.last().expect("non-empty");
        let next = match layer {
            Layer::Affine {
                in_dim,
                out_dim,
                weight,
                bias,
            } => {
                let mut y = Vec::with_capacity(rows * out_dim);
                for r in 0..rows {
                    let xr = &x[r * in_dim..(r + 1) * in_dim];
                    for o in 0..*out_dim {
                        let w = &weight[o * in_dim..(o + 1) * in_dim];
                        y.push(bias[o] + w.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>());
                    }
                }
                y
            }
            Layer::Relu => x.iter().map(|v| v.max(0.0)).collect(),
        };
        acts.push(next);
    }
    Trace { rows, acts }
}

/// Reverse pass: given the adjoint of the output, adds parameter gradients
/// into `param_grad` and returns the adjoint of the input. The ReLU
/// derivative at exactly zero is taken as zero.
pub(crate) fn backward(net: &NetSpec, trace: &Trace, out_grad: Vec<f64>, param_grad: &mut [f64]) -> Vec<f64> {
    let rows = trace.rows;
    let mut offsets = Vec::with_capacity(net.layers.len());
    let mut pos = 0;
    for layer in &net.layers {
        offsets.push(pos);
        pos += layer.num_params();
    }
    let mut g = out_grad;
    for (k, layer) in net.layers.iter().enumerate().rev() {
        let x = &trace.acts[k];
        g = match layer {
            Layer::Relu => g.iter().zip(x).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect(),
            Layer::Affine {
                in_dim,
                out_dim,
                weight,
                ..
            } => {
                let (din, dout) = (*in_dim, *out_dim);
                let (wg, bg) = param_grad[offsets[k]..offsets[k] + dout * (din + 1)].split_at_mut(dout * din);
                let mut gin = vec![0.0; rows * din];
                for r in 0..rows {
                    let xr = &x[r * din..(r + 1) * din];
                    let gr = &g[r * dout..(r + 1) * dout];
                    let gi = &mut gin[r * din..(r + 1) * din];
                    for o in 0..dout {
                        let go = gr[o];
                        if go == 0.0 {
                            continue;
                        }
                        bg[o] += go;
                        let w = &weight[o * din..(o + 1) * din];
                        let wgo = &mut wg[o * din..(o + 1) * din];
                        for c in 0..din {
                            wgo[c] += go * xr[c];
                            gi[c] += go * w[c];
                        }
                    }
                }
                gin
            }
        };
    }
    g
}

/// Smallest `|pre-activation|` over every ReLU unit and row.
pub(crate) fn min_relu_margin(net: &NetSpec, trace: &Trace) -> f64 {
    net.layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::Relu))
        .flat_map(|(k, _)| trace.acts[k].iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min)
}

/// Row-wise application of the network.
pub fn net_forward(net: &NetSpec, x: &FeatureMatrix) -> Result<FeatureMatrix> {
    net.validate()?;
    if x.cols() != net.input_dim {
        return Err(Error::DimensionMismatch {
            expected: net.input_dim,
            found: x.cols(),
        });
    }
    let trace = forward_trace(net, x.as_slice(), x.rows());
    FeatureMatrix::new(x.rows(), net.output_dim(), trace.acts.last().cloned().unwrap_or_default())
}
