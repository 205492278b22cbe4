//! Dense feed-forward networks with hand-written backpropagation.
//!
//! All parameters of a [`DenseNet`] live in one flat buffer. Layer `l`
//! occupies `out * in` weights (row-major, one row per output unit) followed
//! by `out` biases, and layers are stored in order. Gradients and optimizer
//! moments use the same layout, so global-norm clipping and finite
//! differences work on plain slices.
//!
//! # Checkpoint format
//!
//! Plain UTF-8 text, one item per line:
//!
//! ```text
//! dense-net 1
//! layers 4 8 2
//! activation tanh
//! <param 0>
//! <param 1>
//! ...
//! ```
//!
//! Parameters follow the flat layout above and are written with Rust's
//! shortest round-trip float formatting, so a write/read cycle is bit-exact.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid layer sizes {0:?}: need at least two positive widths")]
    InvalidSizes(Vec<usize>),
    #[error("{what}: expected width {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite gradient in layer {layer} {block}")]
    NonFiniteGradient { layer: usize, block: &'static str },
    #[error("checkpoint line {line}: {reason}")]
    Checkpoint { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(format!("unknown activation {other:?}")),
        }
    }
}

/// Feed-forward network; hidden layers use `activation`, the output layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
    offsets: Vec<usize>,
}

/// Layer outputs recorded by [`DenseNet::forward`]; `acts[0]` is the input.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("cache always holds the input")
    }
}

/// Gradients of a scalar loss with respect to every parameter (flat layout)
/// and the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

fn layer_offsets(sizes: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(sizes.len());
    let mut acc = 0;
    for w in sizes.windows(2) {
        offsets.push(acc);
        acc += w[0] * w[1] + w[1];
    }
    offsets.push(acc);
    offsets
}

fn check_sizes(sizes: &[usize]) -> Result<(), NetError> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(NetError::InvalidSizes(sizes.to_vec()));
    }
    Ok(())
}

impl DenseNet {
    /// Weights ~ N(0, 1) / sqrt(fan_in), zero biases. Deterministic in `seed`.
    pub fn init(sizes: &[usize], activation: Activation, seed: u64) -> Result<Self, NetError> {
        let mut net = Self::zeros(sizes, activation)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..net.layer_count() {
            let scale = 1.0 / (sizes[l] as f64).sqrt();
            for w in net.weights_mut(l) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w = z * scale;
            }
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self, NetError> {
        check_sizes(sizes)?;
        let offsets = layer_offsets(sizes);
        Ok(Self {
            sizes: sizes.to_vec(),
            activation,
            params: vec![0.0; *offsets.last().unwrap()],
            offsets,
        })
    }

    pub fn from_params(
        sizes: &[usize],
        activation: Activation,
        params: Vec<f64>,
    ) -> Result<Self, NetError> {
        let mut net = Self::zeros(sizes, activation)?;
        if params.len() != net.params.len() {
            return Err(NetError::Shape {
                what: "parameter vector",
                expected: net.params.len(),
                got: params.len(),
            });
        }
        net.params = params;
        Ok(net)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn weight_range(&self, l: usize) -> std::ops::Range<usize> {
        let start = self.offsets[l];
        start..start + self.sizes[l] * self.sizes[l + 1]
    }

    fn bias_range(&self, l: usize) -> std::ops::Range<usize> {
        let end = self.offsets[l + 1];
        end - self.sizes[l + 1]..end
    }

    /// Weights of layer `l`, `out x in` row-major.
    pub fn weights(&self, l: usize) -> &[f64] {
        &self.params[self.weight_range(l)]
    }

    pub fn weights_mut(&mut self, l: usize) -> &mut [f64] {
        let r = self.weight_range(l);
        &mut self.params[r]
    }

    pub fn biases(&self, l: usize) -> &[f64] {
        &self.params[self.bias_range(l)]
    }

    pub fn biases_mut(&mut self, l: usize) -> &mut [f64] {
        let r = self.bias_range(l);
        &mut self.params[r]
    }

    fn check_input(&self, input: &[f64]) -> Result<(), NetError> {
        if input.len() != self.input_width() {
            return Err(NetError::Shape {
                what: "network input",
                expected: self.input_width(),
                got: input.len(),
            });
        }
        Ok(())
    }

    fn layer_forward(&self, l: usize, x: &[f64]) -> Vec<f64> {
        let n_in = self.sizes[l];
        let w = self.weights(l);
        let b = self.biases(l);
        let hidden = l + 1 < self.layer_count();
        b.iter()
            .enumerate()
            .map(|(o, &bias)| {
                let row = &w[o * n_in..(o + 1) * n_in];
                let z = bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                if hidden {
                    self.activation.apply(z)
                } else {
                    z
                }
            })
            .collect()
    }

    /// Output only; bit-identical to the output of [`DenseNet::forward`].
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>, NetError> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        for l in 0..self.layer_count() {
            x = self.layer_forward(l, &x);
        }
        Ok(x)
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache), NetError> {
        self.check_input(input)?;
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(input.to_vec());
        for l in 0..self.layer_count() {
            let next = self.layer_forward(l, &acts[l]);
            acts.push(next);
        }
        Ok((acts.last().unwrap().clone(), ForwardCache { acts }))
    }

    /// Gradients of `L = <output_grad, output>` for the forward pass in `cache`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: &[f64],
    ) -> Result<GradientBundle, NetError> {
        let mut params = vec![0.0; self.params.len()];
        let input = self.backward_accumulate(cache, output_grad, &mut params)?;
        Ok(GradientBundle { params, input })
    }

    /// Adds parameter gradients into `param_grads` and returns the input gradient.
    pub fn backward_accumulate(
        &self,
        cache: &ForwardCache,
        output_grad: &[f64],
        param_grads: &mut [f64],
    ) -> Result<Vec<f64>, NetError> {
        if cache.acts.len() != self.sizes.len()
            || cache.acts.iter().zip(&self.sizes).any(|(a, &s)| a.len() != s)
        {
            return Err(NetError::Shape {
                what: "forward cache",
                expected: self.sizes.len(),
                got: cache.acts.len(),
            });
        }
        if output_grad.len() != self.output_width() {
            return Err(NetError::Shape {
                what: "output gradient",
                expected: self.output_width(),
                got: output_grad.len(),
            });
        }
        if param_grads.len() != self.params.len() {
            return Err(NetError::Shape {
                what: "gradient buffer",
                expected: self.params.len(),
                got: param_grads.len(),
            });
        }
        let mut delta = output_grad.to_vec();
        for l in (0..self.layer_count()).rev() {
            if l + 1 < self.layer_count() {
                for (d, &y) in delta.iter_mut().zip(&cache.acts[l + 1]) {
                    *d *= self.activation.derivative_from_output(y);
                }
            }
            let x = &cache.acts[l];
            let n_in = self.sizes[l];
            let w = self.weights(l);
            let wr = self.weight_range(l);
            let br = self.bias_range(l);
            let mut prev = vec![0.0; n_in];
            {
                let (gw, gb) = param_grads.split_at_mut(br.start);
                let gw = &mut gw[wr];
                let gb = &mut gb[..br.len()];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    let row = &w[o * n_in..(o + 1) * n_in];
                    let grow = &mut gw[o * n_in..(o + 1) * n_in];
                    for i in 0..n_in {
                        grow[i] += d * x[i];
                        prev[i] += d * row[i];
                    }
                }
            }
            delta = prev;
        }
        Ok(delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(param_count: usize) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        }
    }

    pub fn for_net(net: &DenseNet) -> Self {
        Self::new(net.param_count())
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One descent step `p <- p - lr * direction(g)`.
pub fn apply_update(
    net: &mut DenseNet,
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    mode: UpdateMode,
) -> Result<(), NetError> {
    if grads.len() != net.param_count() || state.m.len() != net.param_count() {
        return Err(NetError::Shape {
            what: "gradient",
            expected: net.param_count(),
            got: grads.len(),
        });
    }
    for l in 0..net.layer_count() {
        for (block, range) in [("weights", net.weight_range(l)), ("biases", net.bias_range(l))] {
            if grads[range].iter().any(|g| !g.is_finite()) {
                return Err(NetError::NonFiniteGradient { layer: l, block });
            }
        }
    }
    match mode {
        UpdateMode::Sgd => {
            for (p, g) in net.params.iter_mut().zip(grads) {
                *p -= lr * g;
            }
        }
        UpdateMode::Adam => {
            state.step += 1;
            let t = state.step as i32;
            let c1 = 1.0 - ADAM_BETA1.powi(t);
            let c2 = 1.0 - ADAM_BETA2.powi(t);
            for (((p, &g), m), v) in net
                .params
                .iter_mut()
                .zip(grads)
                .zip(state.m.iter_mut())
                .zip(state.v.iter_mut())
            {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
    Ok(())
}

/// Comparison of analytic gradients against central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the entry with the largest relative error.
    pub worst_index: usize,
    pub checked: usize,
    pub passed: bool,
}

/// Step used by the finite-difference checks.
pub const FD_STEP: f64 = 1e-5;
/// Relative errors are measured against `max(|analytic|, |numeric|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-5;

/// Relative error with a floor on the denominator so that vanishing
/// gradients are judged by absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Builds a report from paired analytic/numeric gradient vectors.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], tolerance: f64) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        checked: analytic.len(),
        passed: true,
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let rel = relative_error(a, n);
        report.max_abs_error = report.max_abs_error.max((a - n).abs());
        if rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    report.passed = report.max_rel_error < tolerance;
    report
}

/// Projection vector used as `dL/d output` by the gradient checks.
pub fn probe_vector(width: usize) -> Vec<f64> {
    (0..width).map(|k| 1.0 / (k as f64 + 1.0)).collect()
}

/// Central differences of `loss` over every entry of `params`.
pub fn numeric_gradient(params: &mut [f64], mut loss: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + FD_STEP;
        let plus = loss(params);
        params[i] = orig - FD_STEP;
        let minus = loss(params);
        params[i] = orig;
        out.push((plus - minus) / (2.0 * FD_STEP));
    }
    out
}

/// Checks `backward` for `L = <probe, forward(input)>` over all parameters and the input.
pub fn check_gradients(net: &DenseNet, input: &[f64], tolerance: f64) -> Result<GradCheckReport, NetError> {
    let probe = probe_vector(net.output_width());
    let (_, cache) = net.forward(input)?;
    let grads = net.backward(&cache, &probe)?;
    let dot = |out: Vec<f64>| out.iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>();

    let mut work = net.clone();
    let mut params = net.params.clone();
    let numeric_params = numeric_gradient(&mut params, |p| {
        work.params.copy_from_slice(p);
        dot(work.predict(input).unwrap())
    });
    let mut x = input.to_vec();
    let numeric_input = numeric_gradient(&mut x, |x| dot(net.predict(x).unwrap()));

    let analytic: Vec<f64> = grads.params.iter().chain(&grads.input).copied().collect();
    let numeric: Vec<f64> = numeric_params.into_iter().chain(numeric_input).collect();
    Ok(compare_gradients(&analytic, &numeric, tolerance))
}

pub fn write_checkpoint(net: &DenseNet, mut w: impl Write) -> Result<(), NetError> {
    writeln!(w, "dense-net 1")?;
    let sizes: Vec<String> = net.sizes.iter().map(ToString::to_string).collect();
    writeln!(w, "layers {}", sizes.join(" "))?;
    writeln!(w, "activation {}", net.activation)?;
    for p in &net.params {
        writeln!(w, "{p:?}")?;
    }
    Ok(())
}

pub fn read_checkpoint(r: impl BufRead) -> Result<DenseNet, NetError> {
    let bad = |line: usize, reason: &str| NetError::Checkpoint {
        line,
        reason: reason.to_string(),
    };
    let mut lines = r.lines();
    let mut next = |n: usize| -> Result<String, NetError> {
        lines.next().ok_or_else(|| bad(n, "unexpected end of file"))?.map_err(NetError::from)
    };
    if next(1)?.trim() != "dense-net 1" {
        return Err(bad(1, "missing `dense-net 1` header"));
    }
    let layers = next(2)?;
    let sizes = layers
        .strip_prefix("layers ")
        .ok_or_else(|| bad(2, "expected `layers ...`"))?
        .split_whitespace()
        .map(|s| s.parse::<usize>().map_err(|_| bad(2, "bad layer width")))
        .collect::<Result<Vec<_>, _>>()?;
    let act = next(3)?;
    let activation = act
        .strip_prefix("activation ")
        .ok_or_else(|| bad(3, "expected `activation ...`"))?
        .trim()
        .parse::<Activation>()
        .map_err(|e| bad(3, &e))?;
    let mut net = DenseNet::zeros(&sizes, activation).map_err(|e| bad(2, &e.to_string()))?;
    for i in 0..net.param_count() {
        let line = next(4 + i)?;
        net.params[i] = line
            .trim()
            .parse::<f64>()
            .map_err(|_| bad(4 + i, "bad parameter value"))?;
    }
    Ok(net)
}

pub fn save_checkpoint(net: &DenseNet, path: &Path) -> Result<(), NetError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(net, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<DenseNet, NetError> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Straight matrix-chain evaluation kept separate from `layer_forward`.
    fn reference_forward(net: &DenseNet, input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        let layers = net.layer_count();
        for l in 0..layers {
            let (n_in, n_out) = (net.layer_sizes()[l], net.layer_sizes()[l + 1]);
            let mut y = net.biases(l).to_vec();
            for o in 0..n_out {
                for i in 0..n_in {
                    y[o] += net.weights(l)[o * n_in + i] * x[i];
                }
            }
            if l + 1 < layers {
                for v in &mut y {
                    *v = match net.activation() {
                        Activation::Tanh => v.tanh(),
                        Activation::Relu => v.max(0.0),
                        Activation::Identity => *v,
                    };
                }
            }
            x = y;
        }
        x
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = DenseNet::init(&[4, 8, 2], Activation::Tanh, 7).unwrap();
        let b = DenseNet::init(&[4, 8, 2], Activation::Tanh, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.to_bits() == y.to_bits()));
        for l in 0..a.layer_count() {
            assert!(a.biases(l).iter().all(|&b| b == 0.0));
        }
        assert_ne!(a, DenseNet::init(&[4, 8, 2], Activation::Tanh, 8).unwrap());
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(DenseNet::init(&[4], Activation::Tanh, 0).is_err());
        assert!(DenseNet::init(&[], Activation::Tanh, 0).is_err());
        assert!(DenseNet::init(&[4, 0, 2], Activation::Tanh, 0).is_err());
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut net = DenseNet::zeros(&[3, 3], Activation::Identity).unwrap();
        for i in 0..3 {
            net.weights_mut(0)[i * 3 + i] = 1.0;
        }
        assert_eq!(net.predict(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = DenseNet::zeros(&[3, 5, 2], Activation::Tanh).unwrap();
        assert_eq!(net.predict(&[4.0, -1.0, 9.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = DenseNet::zeros(&[3, 2], Activation::Tanh).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(NetError::Shape { .. })));
    }

    #[test]
    fn forward_matches_reference_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (seed, act) in [(1, Activation::Tanh), (2, Activation::Relu), (3, Activation::Identity)] {
            let net = DenseNet::init(&[5, 7, 6, 3], act, seed).unwrap();
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (out, cache) = net.forward(&x).unwrap();
            let reference = reference_forward(&net, &x);
            for (a, b) in out.iter().zip(&reference) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(out, cache.output());
            assert_eq!(out, net.predict(&x).unwrap());
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let net = DenseNet::init(&[3, 4, 2], Activation::Tanh, 5).unwrap();
        let (_, cache) = net.forward(&[0.3, -0.2, 0.9]).unwrap();
        let g = net.backward(&cache, &[0.0, 0.0]).unwrap();
        assert!(g.params.iter().chain(&g.input).all(|&x| x == 0.0));
    }

    #[test]
    fn linear_layer_weight_gradient_is_input() {
        let net = DenseNet::init(&[3, 1], Activation::Identity, 9).unwrap();
        let x = [0.5, -1.5, 2.0];
        let (_, cache) = net.forward(&x).unwrap();
        let g = net.backward(&cache, &[1.0]).unwrap();
        assert_eq!(&g.params[..3], &x);
        assert_eq!(g.params[3], 1.0);
        assert_eq!(g.input, net.weights(0));
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let a = DenseNet::init(&[3, 4, 2], Activation::Tanh, 1).unwrap();
        let b = DenseNet::init(&[2, 4, 2], Activation::Tanh, 1).unwrap();
        let (_, cache) = b.forward(&[0.1, 0.2]).unwrap();
        assert!(a.backward(&cache, &[1.0, 1.0]).is_err());
        let (_, cache) = a.forward(&[0.1, 0.2, 0.3]).unwrap();
        assert!(a.backward(&cache, &[1.0]).is_err());
    }

    #[test]
    fn sgd_arithmetic() {
        let mut net = DenseNet::from_params(&[1, 1], Activation::Identity, vec![1.0, 0.0]).unwrap();
        let mut st = OptimizerState::for_net(&net);
        apply_update(&mut net, &[2.0, 0.0], &mut st, 0.1, UpdateMode::Sgd).unwrap();
        assert!((net.params()[0] - 0.8).abs() < 1e-15);
        let before = net.clone();
        apply_update(&mut net, &[0.0, 0.0], &mut st, 0.1, UpdateMode::Sgd).unwrap();
        assert_eq!(before, net);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        // t = 1: m_hat = g, v_hat = g^2, step = lr * g / (|g| + eps).
        for g in [1e-3, 0.5, 40.0] {
            let mut net = DenseNet::from_params(&[1, 1], Activation::Identity, vec![0.0, 0.0]).unwrap();
            let mut st = OptimizerState::for_net(&net);
            apply_update(&mut net, &[g, -g], &mut st, 0.01, UpdateMode::Adam).unwrap();
            let expected = 0.01 * g / (g + ADAM_EPS);
            assert!((net.params()[0] + expected).abs() < 1e-15);
            assert!((net.params()[1] - expected).abs() < 1e-15);
            assert!((expected - 0.01).abs() < 1e-7);
        }
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut net = DenseNet::zeros(&[2, 2, 1], Activation::Tanh).unwrap();
        let mut st = OptimizerState::for_net(&net);
        let mut g = vec![0.0; net.param_count()];
        let last = g.len() - 1;
        g[last] = f64::NAN;
        let err = apply_update(&mut net, &g, &mut st, 0.1, UpdateMode::Adam).unwrap_err();
        assert!(matches!(err, NetError::NonFiniteGradient { layer: 1, block: "biases" }));
    }

    #[test]
    fn gradient_check_linear_is_exact() {
        let net = DenseNet::init(&[4, 3], Activation::Identity, 3).unwrap();
        let r = check_gradients(&net, &[0.1, 0.2, -0.3, 0.4], 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, net.param_count() + 4);
    }

    #[test]
    fn gradient_check_tanh() {
        let net = DenseNet::init(&[4, 8, 2], Activation::Tanh, 21).unwrap();
        let r = check_gradients(&net, &[0.5, -0.1, 0.8, -1.2], 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn gradient_check_relu_away_from_kinks() {
        let net = DenseNet::init(&[4, 8, 8, 2], Activation::Relu, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut checked = 0;
        while checked < 10 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let near_kink = pre_activations(&net, &x).iter().any(|z| z.abs() < 1e-3);
            if near_kink {
                continue;
            }
            let r = check_gradients(&net, &x, 1e-4).unwrap();
            assert!(r.passed, "{r:?}");
            checked += 1;
        }
    }

    fn pre_activations(net: &DenseNet, input: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        let mut x = input.to_vec();
        for l in 0..net.layer_count() - 1 {
            let n_in = net.layer_sizes()[l];
            let z: Vec<f64> = net
                .biases(l)
                .iter()
                .enumerate()
                .map(|(o, b)| b + (0..n_in).map(|i| net.weights(l)[o * n_in + i] * x[i]).sum::<f64>())
                .collect();
            out.extend(&z);
            x = z.iter().map(|v| v.max(0.0)).collect();
        }
        out
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = DenseNet::init(&[3, 5, 2], Activation::Relu, 77).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("dense-net 1\nlayers 3 5 2\nactivation relu\n"));
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn checkpoint_errors_carry_line() {
        let err = read_checkpoint("dense-net 1\nlayers 2 1\nactivation tanh\n0.5\nx\n".as_bytes())
            .unwrap_err();
        assert!(matches!(err, NetError::Checkpoint { line: 5, .. }));
        let err = read_checkpoint("dense-net 1\nlayers 2 1\nactivation swish\n".as_bytes()).unwrap_err();
        assert!(matches!(err, NetError::Checkpoint { line: 3, .. }));
    }
}
