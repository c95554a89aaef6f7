//! Small fully connected networks with hand-written reverse-mode gradients
//! and an AdamW optimiser.
//!
//! Batches are matrices with one sample per column. Every parameter
//! mutation bumps a global version counter, so a tape recorded before an
//! update (or on a different network) is rejected by [`Mlp::backward`].

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{matrix_to_rows, rows_to_matrix};

pub const LEAKY_SLOPE: f64 = 0.01;

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer {
            weight: DMatrix::zeros(outputs, inputs),
            bias: DVector::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Leaky-ReLU hidden layers, identity output layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(into = "MlpRepr", try_from = "MlpRepr")]
pub struct Mlp {
    layers: Vec<Layer>,
    slope: f64,
    version: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.slope == other.slope
    }
}

#[derive(Serialize, Deserialize)]
struct LayerRepr {
    inputs: usize,
    outputs: usize,
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MlpRepr {
    slope: f64,
    layers: Vec<LayerRepr>,
}

impl From<Mlp> for MlpRepr {
    fn from(m: Mlp) -> Self {
        MlpRepr {
            slope: m.slope,
            layers: m
                .layers
                .iter()
                .map(|l| LayerRepr {
                    inputs: l.inputs(),
                    outputs: l.outputs(),
                    weight: matrix_to_rows(&l.weight),
                    bias: l.bias.iter().copied().collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<MlpRepr> for Mlp {
    type Error = Error;

    fn try_from(r: MlpRepr) -> Result<Self> {
        let layers = r
            .layers
            .into_iter()
            .map(|l| {
                let weight = if l.weight.is_empty() {
                    DMatrix::zeros(l.outputs, l.inputs)
                } else {
                    rows_to_matrix(&l.weight)?
                };
                if weight.shape() != (l.outputs, l.inputs) || l.bias.len() != l.outputs {
                    return Err(Error::Data("layer shape metadata disagrees with parameters".into()));
                }
                Ok(Layer {
                    weight,
                    bias: DVector::from_vec(l.bias),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Mlp::from_layers(layers, r.slope)
    }
}

/// Activations recorded by a forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    version: u64,
}

impl Tape {
    /// Smallest |pre-activation| over all hidden units; finite-difference
    /// checks need this comfortably above the step size.
    pub fn kink_margin(&self) -> f64 {
        let hidden = self.pre.len().saturating_sub(1);
        self.pre[..hidden]
            .iter()
            .flat_map(|m| m.iter())
            .fold(f64::INFINITY, |acc, v| acc.min(v.abs()))
    }
}

/// Parameter gradients, one entry per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Layer>,
}

impl MlpGrads {
    pub fn zeros_like(m: &Mlp) -> Self {
        MlpGrads {
            layers: m.layers.iter().map(|l| Layer::zeros(l.inputs(), l.outputs())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight *= s;
            l.bias *= s;
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }
}

fn flatten(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layers.iter().map(Layer::param_count).sum());
    for l in layers {
        out.extend_from_slice(l.weight.as_slice());
        out.extend_from_slice(l.bias.as_slice());
    }
    out
}

fn leaky(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        slope * v
    }
}

impl Mlp {
    pub fn from_layers(layers: Vec<Layer>, slope: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("an mlp needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].outputs() != w[1].inputs() {
                return Err(Error::DimensionMismatch {
                    what: "consecutive layers",
                    expected: w[0].outputs(),
                    got: w[1].inputs(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.outputs() {
                return Err(Error::DimensionMismatch {
                    what: "layer bias",
                    expected: l.outputs(),
                    got: l.bias.len(),
                });
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("non-finite network parameter".into()));
            }
        }
        Ok(Mlp {
            layers,
            slope,
            version: fresh_version(),
        })
    }

    /// All-zero network with the given layer widths (`[in, h1, .., out]`).
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer widths {widths:?}")));
        }
        Mlp::from_layers(widths.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(), LEAKY_SLOPE)
    }

    /// Xavier-uniform weights, zero biases.
    pub fn xavier<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut m = Mlp::zeros(widths)?;
        for l in &mut m.layers {
            l.weight = xavier_init(l.outputs(), l.inputs(), rng);
        }
        Ok(m)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::outputs)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Mutable access to one layer; invalidates outstanding tapes.
    pub fn layer_mut(&mut self, i: usize) -> &mut Layer {
        self.version = fresh_version();
        &mut self.layers[i]
    }

    pub fn params_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_params_flat(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                what: "flat parameter vector",
                expected: self.param_count(),
                got: p.len(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weight.len();
            l.weight.as_mut_slice().copy_from_slice(&p[off..off + n]);
            off += n;
            let n = l.bias.len();
            l.bias.as_mut_slice().copy_from_slice(&p[off..off + n]);
            off += n;
        }
        self.version = fresh_version();
        Ok(())
    }

    /// Batched forward pass (one sample per column).
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Tape)> {
        if x.nrows() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "mlp input",
                expected: self.input_dim(),
                got: x.nrows(),
            });
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.weight * &a;
            for mut col in z.column_iter_mut() {
                col += &l.bias;
            }
            let next = if i == last { z.clone() } else { z.map(|v| leaky(v, self.slope)) };
            inputs.push(a);
            pre.push(z);
            a = next;
        }
        Ok((
            a,
            Tape {
                inputs,
                pre,
                version: self.version,
            },
        ))
    }

    /// Forward pass without recording a tape.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "mlp input",
                expected: self.input_dim(),
                got: x.nrows(),
            });
        }
        let last = self.layers.len() - 1;
        let mut a = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.weight * &a;
            for mut col in z.column_iter_mut() {
                col += &l.bias;
            }
            if i != last {
                z.apply(|v| *v = leaky(*v, self.slope));
            }
            a = z;
        }
        Ok(a)
    }

    pub fn apply_vec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let out = self.apply(&DMatrix::from_column_slice(x.len(), 1, x.as_slice()))?;
        Ok(out.column(0).into_owned())
    }

    /// Reverse pass for the scalar loss whose gradient w.r.t. the output
    /// batch is `out_grad`. Returns parameter and input gradients.
    pub fn backward(&self, tape: &Tape, out_grad: &DMatrix<f64>) -> Result<(MlpGrads, DMatrix<f64>)> {
        if tape.version != self.version {
            return Err(Error::StaleTape {
                tape: tape.version,
                current: self.version,
            });
        }
        let batch = tape.inputs[0].ncols();
        if out_grad.shape() != (self.output_dim(), batch) {
            return Err(Error::DimensionMismatch {
                what: "output gradient",
                expected: self.output_dim(),
                got: out_grad.nrows(),
            });
        }
        let last = self.layers.len() - 1;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = out_grad.clone();
        for i in (0..self.layers.len()).rev() {
            if i != last {
                let slope = self.slope;
                delta.zip_apply(&tape.pre[i], |d, z| {
                    if z <= 0.0 {
                        *d *= slope;
                    }
                });
            }
            let gw = &delta * tape.inputs[i].transpose();
            let gb = delta.column_sum();
            grads.push(Layer { weight: gw, bias: gb });
            delta = self.layers[i].weight.tr_mul(&delta);
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, delta))
    }
}

/// Uniform entries in ±sqrt(6 / (rows + cols)).
pub fn xavier_init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Adam moments over a list of named parameter blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, block_sizes: &[usize]) -> Self {
        AdamState {
            config,
            step: 0,
            m: block_sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: block_sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    pub fn for_mlp(config: AdamConfig, mlp: &Mlp) -> Self {
        let sizes: Vec<usize> = mlp.layers.iter().flat_map(|l| [l.weight.len(), l.bias.len()]).collect();
        AdamState::new(config, &sizes)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One AdamW update: decoupled decay `p -= lr·wd·p`, then the
    /// bias-corrected adaptive step. Nothing is modified if any gradient
    /// is non-finite.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], names: &[String]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                what: "optimizer parameter blocks",
                expected: self.m.len(),
                got: params.len(),
            });
        }
        for (b, g) in grads.iter().enumerate() {
            if g.len() != self.m[b].len() || params[b].len() != self.m[b].len() {
                return Err(Error::DimensionMismatch {
                    what: "optimizer block",
                    expected: self.m[b].len(),
                    got: g.len(),
                });
            }
            if let Some(k) = g.iter().position(|v| !v.is_finite()) {
                let name = names.get(b).cloned().unwrap_or_else(|| format!("block {b}"));
                return Err(Error::Numerical(format!("non-finite gradient in {name} at index {k}")));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for b in 0..grads.len() {
            let (m, v) = (&mut self.m[b], &mut self.v[b]);
            for k in 0..grads[b].len() {
                let g = grads[b][k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let p = &mut params[b][k];
                *p -= c.lr * c.weight_decay * *p;
                *p -= c.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Apply one optimiser step to a network.
pub fn adam_step(mlp: &mut Mlp, grads: &MlpGrads, state: &mut AdamState) -> Result<()> {
    let names: Vec<String> = (0..mlp.layers.len())
        .flat_map(|i| [format!("layer {i} weight"), format!("layer {i} bias")])
        .collect();
    let grad_blocks: Vec<&[f64]> = grads
        .layers
        .iter()
        .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
        .collect();
    let mut param_blocks: Vec<&mut [f64]> = mlp
        .layers
        .iter_mut()
        .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
        .collect();
    state.update(&mut param_blocks, &grad_blocks, &names)?;
    mlp.version = fresh_version();
    Ok(())
}

/// Worst relative error between analytic and central-difference gradients.
///
/// `f` returns the loss and its analytic gradient at the given parameters.
/// The denominator is floored at `1e-6` so that entries which are zero in
/// both do not dominate.
pub fn grad_check<F>(mut f: F, params: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    grad_check_indices(&mut f, params, h, 0..params.len())
}

/// [`grad_check`] restricted to a subset of coordinates.
pub fn grad_check_indices<F, I>(mut f: F, params: &[f64], h: f64, indices: I) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
    I: IntoIterator<Item = usize>,
{
    let (_, analytic) = f(params);
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in indices {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p).0;
        p[i] = orig - h;
        let down = f(&p).0;
        p[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}
