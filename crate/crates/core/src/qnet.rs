//! Fully-connected ReLU Q-network with hand-written reverse mode, SGD and
//! Adam updates, and a text checkpoint format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Hidden widths of the Q-network used throughout: two layers of 256.
pub const DEFAULT_HIDDEN: [usize; 2] = [256, 256];

const CHECKPOINT_MAGIC: &str = "aoi-marl-qnet";
const CHECKPOINT_VERSION: &str = "v1";

/// Affine layer. `weights` is `inputs x outputs`, row-major, so row `i`
/// holds the fan-out of input `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<S> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> Layer<S> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer {
            inputs,
            outputs,
            weights: vec![S::zero(); inputs * outputs],
            bias: vec![S::zero(); outputs],
        }
    }

    fn row(&self, i: usize) -> &[S] {
        &self.weights[i * self.outputs..(i + 1) * self.outputs]
    }
}

/// Weights of a multilayer perceptron; ReLU on every hidden layer, linear
/// output. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<S> {
    layers: Vec<Layer<S>>,
}

/// Activations kept by [`NetParams::forward_train`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape<S> {
    batch: usize,
    /// `acts[0]` is the input, `acts[k]` the output of layer `k - 1`.
    acts: Vec<Vec<S>>,
}

impl<S: Scalar> Tape<S> {
    /// Network outputs, `batch x out_dim` row-major.
    pub fn output(&self) -> &[S] {
        self.acts.last().expect("tape holds the input")
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

#[inline]
fn axpy<S: Scalar>(out: &mut [S], a: S, x: &[S]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: S = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let head = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    head + tail
}

impl<S: Scalar> NetParams<S> {
    /// He-uniform weights, zero biases. `hidden` may be empty for a single
    /// affine map.
    pub fn init(in_dim: usize, hidden: &[usize], out_dim: usize, seed: u64) -> Self {
        let sizes = layer_sizes(in_dim, hidden, out_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut layer = Layer::zeros(fan_in, fan_out);
                for v in &mut layer.weights {
                    *v = S::of(rng.gen_range(-bound..bound));
                }
                layer
            })
            .collect();
        NetParams { layers }
    }

    /// All-zero parameters with the given layer sizes `[in, h1, ..., out]`.
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        assert!(sizes.iter().all(|&s| s >= 1), "layer sizes must be positive");
        NetParams {
            layers: sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn from_layers(layers: Vec<Layer<S>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for l in &layers {
            if l.weights.len() != l.inputs * l.outputs {
                return Err(Error::dim("layer weights", l.inputs * l.outputs, l.weights.len()));
            }
            if l.bias.len() != l.outputs {
                return Err(Error::dim("layer bias", l.outputs, l.bias.len()));
            }
        }
        for w in layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(Error::dim("layer chaining", w[0].outputs, w[1].inputs));
            }
        }
        Ok(NetParams { layers })
    }

    pub fn zeros_like(&self) -> Self {
        NetParams::zeros(&self.sizes())
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<S>] {
        &mut self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].inputs];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Every parameter, layer by layer, weights before bias.
    pub fn values(&self) -> impl Iterator<Item = &S> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut S> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.inputs == b.inputs && a.outputs == b.outputs)
    }

    fn check_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::dim(context, self.n_params(), other.n_params()))
        }
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: S, other: &Self) -> Result<()> {
        self.check_shape(other, "axpy")?;
        for (x, &y) in self.values_mut().zip(other.values()) {
            *x += a * y;
        }
        Ok(())
    }

    pub fn scale(&mut self, a: S) {
        for x in self.values_mut() {
            *x *= a;
        }
    }

    pub fn dot(&self, other: &Self) -> S {
        self.values().zip(other.values()).map(|(&a, &b)| a * b).sum()
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<T: Scalar>(&self) -> NetParams<T> {
        NetParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    inputs: l.inputs,
                    outputs: l.outputs,
                    weights: l.weights.iter().map(|v| T::of(v.as_f64())).collect(),
                    bias: l.bias.iter().map(|v| T::of(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn forward(&self, obs: &[S]) -> Result<Vec<S>> {
        self.forward_batch(obs, 1)
    }

    /// Outputs for `batch` inputs stored row-major in `xs`.
    pub fn forward_batch(&self, xs: &[S], batch: usize) -> Result<Vec<S>> {
        Ok(self.forward_train(xs, batch)?.acts.pop().expect("output"))
    }

    /// Forward pass that records activations for [`NetParams::backward`].
    pub fn forward_train(&self, xs: &[S], batch: usize) -> Result<Tape<S>> {
        let in_dim = self.in_dim();
        if xs.len() != in_dim * batch {
            return Err(Error::dim("network input", in_dim * batch, xs.len()));
        }
        let mut acts: Vec<Vec<S>> = Vec::with_capacity(self.layers.len() + 1);
        acts.push(xs.to_vec());
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let x = &acts[k];
            let mut y = Vec::with_capacity(batch * layer.outputs);
            for s in 0..batch {
                y.extend_from_slice(&layer.bias);
                let row = &mut y[s * layer.outputs..];
                let xin = &x[s * layer.inputs..(s + 1) * layer.inputs];
                for (i, &xi) in xin.iter().enumerate() {
                    if xi != S::zero() {
                        axpy(row, xi, layer.row(i));
                    }
                }
            }
            if k != last {
                for v in &mut y {
                    if *v < S::zero() {
                        *v = S::zero();
                    }
                }
            }
            acts.push(y);
        }
        Ok(Tape { batch, acts })
    }

    /// Gradient of `sum_s <d_out[s], output[s]>` with respect to the
    /// parameters, i.e. the pullback of `d_out` through the recorded pass.
    pub fn backward(&self, tape: &Tape<S>, d_out: &[S]) -> Result<NetParams<S>> {
        let batch = tape.batch;
        if d_out.len() != batch * self.out_dim() {
            return Err(Error::dim("output gradient", batch * self.out_dim(), d_out.len()));
        }
        let mut grads = self.zeros_like();
        let mut delta = d_out.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let g = &mut grads.layers[k];
            let x = &tape.acts[k];
            let (n_in, n_out) = (layer.inputs, layer.outputs);
            for s in 0..batch {
                let ds = &delta[s * n_out..(s + 1) * n_out];
                for (gb, &d) in g.bias.iter_mut().zip(ds) {
                    *gb += d;
                }
                let xs = &x[s * n_in..(s + 1) * n_in];
                for (i, &xi) in xs.iter().enumerate() {
                    if xi != S::zero() {
                        axpy(&mut g.weights[i * n_out..(i + 1) * n_out], xi, ds);
                    }
                }
            }
            if k == 0 {
                break;
            }
            let mut prev = vec![S::zero(); batch * n_in];
            for s in 0..batch {
                let ds = &delta[s * n_out..(s + 1) * n_out];
                let xs = &x[s * n_in..(s + 1) * n_in];
                for i in 0..n_in {
                    // ReLU gate: zero activations pass no gradient.
                    if xs[i] > S::zero() {
                        prev[s * n_in + i] = dot(layer.row(i), ds);
                    }
                }
            }
            delta = prev;
        }
        Ok(grads)
    }

    /// Runs a forward pass over `batch` inputs, hands the outputs to
    /// `loss_fn` (which returns the scalar loss and its gradient with
    /// respect to the outputs) and pulls that gradient back.
    pub fn grad<F>(&self, xs: &[S], batch: usize, loss_fn: F) -> Result<(S, NetParams<S>)>
    where
        F: FnOnce(&[S]) -> (S, Vec<S>),
    {
        let tape = self.forward_train(xs, batch)?;
        let (loss, d_out) = loss_fn(tape.output());
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let g = self.backward(&tape, &d_out)?;
        Ok((loss, g))
    }

    /// `self - lr * grads`.
    pub fn sgd_step(&self, grads: &Self, lr: S) -> Result<Self> {
        let mut next = self.clone();
        next.axpy(-lr, grads)?;
        Ok(next)
    }

    /// Writes the checkpoint text format.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} {}", S::NAME)?;
        writeln!(w, "layers {}", self.layers.len())?;
        for l in &self.layers {
            writeln!(w, "layer {} {}", l.inputs, l.outputs)?;
            write_values(&mut w, "w", &l.weights)?;
            write_values(&mut w, "b", &l.bias)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f), path)
    }

    /// Parses the checkpoint text format; `path` only labels errors.
    pub fn read_from<R: BufRead>(r: R, path: &Path) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, Ok(l))) => Ok((i + 1, l)),
                Some((i, Err(e))) => Err(Error::Parse {
                    path: path.into(),
                    line: i + 1,
                    msg: e.to_string(),
                }),
                None => Err(Error::Parse {
                    path: path.into(),
                    line: 0,
                    msg: format!("unexpected end of file, expected {what}"),
                }),
            }
        };
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.into(),
            line,
            msg,
        };

        let (ln, header) = next("header")?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != CHECKPOINT_MAGIC {
            return Err(perr(ln, format!("not a checkpoint header: `{header}`")));
        }
        if parts[1] != CHECKPOINT_VERSION || parts[2] != S::NAME {
            return Err(Error::Version {
                path: path.into(),
                found: format!("{} {}", parts[1], parts[2]),
                expected: format!("{CHECKPOINT_VERSION} {}", S::NAME),
            });
        }
        let (ln, l) = next("layer count")?;
        let n_layers: usize = l
            .strip_prefix("layers ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| perr(ln, format!("expected `layers <n>`, got `{l}`")))?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let (ln, l) = next("layer shape")?;
            let dims: Vec<usize> = l
                .strip_prefix("layer ")
                .map(|v| v.split_whitespace().filter_map(|t| t.parse().ok()).collect())
                .unwrap_or_default();
            if dims.len() != 2 {
                return Err(perr(ln, format!("expected `layer <in> <out>`, got `{l}`")));
            }
            let (ln, wl) = next("weights")?;
            let weights = parse_values::<S>(&wl, "w", dims[0] * dims[1]).map_err(|m| perr(ln, m))?;
            let (ln, bl) = next("bias")?;
            let bias = parse_values::<S>(&bl, "b", dims[1]).map_err(|m| perr(ln, m))?;
            layers.push(Layer {
                inputs: dims[0],
                outputs: dims[1],
                weights,
                bias,
            });
        }
        NetParams::from_layers(layers)
    }
}

fn write_values<W: Write, S: Scalar>(w: &mut W, tag: &str, vals: &[S]) -> std::io::Result<()> {
    write!(w, "{tag}")?;
    for v in vals {
        write!(w, " {v}")?;
    }
    writeln!(w)
}

fn parse_values<S: Scalar>(line: &str, tag: &str, n: usize) -> std::result::Result<Vec<S>, String> {
    let mut toks = line.split_whitespace();
    if toks.next() != Some(tag) {
        return Err(format!("expected `{tag}` row"));
    }
    let vals: Vec<S> = toks
        .map(|t| t.parse::<S>().map_err(|_| format!("bad number `{t}`")))
        .collect::<std::result::Result<_, _>>()?;
    if vals.len() != n {
        return Err(format!("expected {n} values, found {}", vals.len()));
    }
    Ok(vals)
}

/// `[in, hidden..., out]`.
pub fn layer_sizes(in_dim: usize, hidden: &[usize], out_dim: usize) -> Vec<usize> {
    assert!(in_dim >= 1 && out_dim >= 1, "network dims must be positive");
    let mut s = vec![in_dim];
    s.extend_from_slice(hidden);
    s.push(out_dim);
    s
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment estimates for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub m: NetParams<S>,
    pub v: NetParams<S>,
    pub step: u64,
    pub config: AdamConfig,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &NetParams<S>) -> Self {
        Self::with_config(params, AdamConfig::default())
    }

    pub fn with_config(params: &NetParams<S>, config: AdamConfig) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            config,
        }
    }

    /// Bias-corrected Adam update of `params` in place.
    pub fn update(&mut self, params: &mut NetParams<S>, grads: &NetParams<S>, lr: S) -> Result<()> {
        params.check_shape(grads, "adam grads")?;
        params.check_shape(&self.m, "adam state")?;
        self.step += 1;
        let b1 = S::of(self.config.beta1);
        let b2 = S::of(self.config.beta2);
        let eps = S::of(self.config.eps);
        let one = S::one();
        let c1 = one - b1.powi(self.step as i32);
        let c2 = one - b2.powi(self.step as i32);
        let it = params
            .values_mut()
            .zip(grads.values())
            .zip(self.m.values_mut().zip(self.v.values_mut()));
        for ((p, &g), (m, v)) in it {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
        Ok(())
    }
}

/// Functional Adam step: returns the updated parameters and state.
pub fn adam_step<S: Scalar>(
    params: &NetParams<S>,
    grads: &NetParams<S>,
    state: &AdamState<S>,
    lr: S,
) -> Result<(NetParams<S>, AdamState<S>)> {
    let mut p = params.clone();
    let mut st = state.clone();
    st.update(&mut p, grads, lr)?;
    Ok((p, st))
}

/// Functional SGD step.
pub fn sgd_step<S: Scalar>(params: &NetParams<S>, grads: &NetParams<S>, lr: S) -> Result<NetParams<S>> {
    params.sgd_step(grads, lr)
}

/// Optimizer used for a parameter update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Either optimizer with its state.
#[derive(Debug, Clone)]
pub enum Optimizer<S> {
    Adam(AdamState<S>),
    Sgd,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(kind: OptimizerKind, params: &NetParams<S>) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(params)),
            OptimizerKind::Sgd => Optimizer::Sgd,
        }
    }

    pub fn apply(&mut self, params: &mut NetParams<S>, grads: &NetParams<S>, lr: S) -> Result<()> {
        match self {
            Optimizer::Adam(st) => st.update(params, grads, lr),
            Optimizer::Sgd => params.axpy(-lr, grads),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> NetParams<f64> {
        NetParams::init(3, &[4, 4], 2, seed)
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(tiny(0), tiny(0));
        assert_ne!(tiny(0), tiny(1));
        assert!(tiny(5).layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        let sizes = NetParams::<f32>::init(12, &DEFAULT_HIDDEN, 50, 0).sizes();
        assert_eq!(sizes, vec![12, 256, 256, 50]);
    }

    #[test]
    fn zero_params_give_zero_output() {
        let p = NetParams::<f64>::zeros(&[3, 4, 2]);
        assert_eq!(p.forward(&[0.3, 0.2, 0.9]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_layer_is_affine() {
        let layer = Layer {
            inputs: 2,
            outputs: 2,
            // rows are inputs: W^T = [[1, 2], [3, 4]] so W = [[1, 3], [2, 4]]
            weights: vec![1.0, 2.0, 3.0, 4.0],
            bias: vec![0.5, -0.5],
        };
        let p = NetParams::from_layers(vec![layer]).unwrap();
        let y = p.forward(&[1.0, -1.0]).unwrap();
        assert_eq!(y, vec![1.0 - 3.0 + 0.5, 2.0 - 4.0 - 0.5]);
    }

    #[test]
    fn relu_blocks_negative_preactivation() {
        let l1 = Layer {
            inputs: 1,
            outputs: 1,
            weights: vec![-1.0],
            bias: vec![0.0],
        };
        let l2 = Layer {
            inputs: 1,
            outputs: 1,
            weights: vec![5.0],
            bias: vec![1.0],
        };
        let p = NetParams::from_layers(vec![l1, l2]).unwrap();
        assert_eq!(p.forward(&[2.0]).unwrap(), vec![1.0]);
        assert_eq!(p.forward(&[-2.0]).unwrap(), vec![11.0]);
    }

    #[test]
    fn forward_rejects_bad_dims() {
        assert!(matches!(tiny(0).forward(&[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = tiny(2);
        let (l, g) = p.grad(&[0.1, 0.2, 0.3], 1, |out| (3.0, vec![0.0; out.len()])).unwrap();
        assert_eq!(l, 3.0);
        assert!(g.values().all(|&v| v == 0.0));
    }

    #[test]
    fn half_square_norm_at_zero_params() {
        let p = NetParams::<f64>::zeros(&[3, 4, 2]);
        let (_, g) = p
            .grad(&[0.1, 0.2, 0.3], 1, |out| {
                (0.5 * out.iter().map(|v| v * v).sum::<f64>(), out.to_vec())
            })
            .unwrap();
        assert!(g.values().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let r = tiny(0).grad(&[0.0; 3], 1, |o| (f64::NAN, vec![0.0; o.len()]));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = NetParams::<f64>::init(3, &[4, 4], 2, 9);
        let xs = [0.2, 0.7, 0.1, 0.9, 0.4, 0.5];
        let target = [0.3, -0.2, 1.0, 0.5];
        let loss = |q: &NetParams<f64>| -> f64 {
            let out = q.forward_batch(&xs, 2).unwrap();
            out.iter().zip(&target).map(|(o, t)| (o - t).powi(2)).sum::<f64>() / 2.0
        };
        let (_, g) = p
            .grad(&xs, 2, |out| {
                let d: Vec<f64> = out.iter().zip(&target).map(|(o, t)| o - t).collect();
                (out.iter().zip(&target).map(|(o, t)| (o - t).powi(2)).sum::<f64>() / 2.0, d)
            })
            .unwrap();
        let h = 1e-5;
        let grads: Vec<f64> = g.values().copied().collect();
        for k in 0..p.n_params() {
            let mut plus = p.clone();
            let mut minus = p.clone();
            *plus.values_mut().nth(k).unwrap() += h;
            *minus.values_mut().nth(k).unwrap() -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let err = (fd - grads[k]).abs() / fd.abs().max(grads[k].abs()).max(1e-6);
            assert!(err < 1e-4, "param {k}: fd {fd} vs {}", grads[k]);
        }
    }

    #[test]
    fn sgd_definition() {
        let p = tiny(1);
        let g = tiny(2);
        assert_eq!(p.sgd_step(&g, 0.0).unwrap(), p);
        let q = p.sgd_step(&g, 0.1).unwrap();
        for ((a, b), c) in q.values().zip(p.values()).zip(g.values()) {
            assert_eq!(*a, b - 0.1 * c);
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let p = tiny(1);
        let mut g = tiny(2);
        // keep every gradient away from zero so eps is negligible
        for v in g.values_mut() {
            *v = if *v >= 0.0 { *v + 0.1 } else { *v - 0.1 };
        }
        let st = AdamState::new(&p);
        let (q, st) = adam_step(&p, &g, &st, 1e-3).unwrap();
        assert_eq!(st.step, 1);
        for ((a, b), c) in q.values().zip(p.values()).zip(g.values()) {
            let expected = -1e-3 * c.signum();
            assert!(((a - b) - expected).abs() < 1e-9, "{} vs {expected}", a - b);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = tiny(1);
        let other = NetParams::<f64>::init(3, &[5], 2, 0);
        assert!(p.sgd_step(&other, 0.1).is_err());
        let st = AdamState::new(&p);
        assert!(adam_step(&p, &other, &st, 0.1).is_err());
    }

    #[test]
    fn clone_is_independent() {
        let mut online = tiny(3);
        let target = online.clone();
        let g = tiny(4);
        online.axpy(-0.5, &g).unwrap();
        assert_eq!(target, tiny(3));
        assert_ne!(online, target);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.ckpt");
        let p = NetParams::<f64>::init(6, &[16, 8], 20, 11);
        p.save(&path).unwrap();
        assert_eq!(NetParams::<f64>::load(&path).unwrap(), p);
        let p32: NetParams<f32> = p.cast();
        p32.save(&path).unwrap();
        assert_eq!(NetParams::<f32>::load(&path).unwrap(), p32);
        assert!(matches!(NetParams::<f64>::load(&path), Err(Error::Version { .. })));
    }

    #[test]
    fn truncated_checkpoint_reports_line() {
        let p = NetParams::<f64>::init(2, &[3], 2, 0);
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut: String = text.lines().take(4).collect::<Vec<_>>().join("\n");
        let err = NetParams::<f64>::read_from(cut.as_bytes(), Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }
}
