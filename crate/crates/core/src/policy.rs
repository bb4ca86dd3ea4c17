//! Small multilayer perceptrons over one-hot state encodings: a softmax policy
//! head, a scalar value head, hand-written backpropagation and Adam.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::mdp::TabularPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
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
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Relu),
            other => Err(Error::Checkpoint(format!("unknown activation tag {other}"))),
        }
    }
}

/// Layer sizes of a fully connected network with one-hot state input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub n_inputs: usize,
    pub hidden: Vec<usize>,
    pub n_outputs: usize,
    pub activation: Activation,
}

impl Architecture {
    pub fn new(n_inputs: usize, hidden: Vec<usize>, n_outputs: usize) -> Self {
        Self {
            n_inputs,
            hidden,
            n_outputs,
            activation: Activation::Tanh,
        }
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.n_inputs;
        for &h in &self.hidden {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.n_outputs));
        dims
    }

    /// `Σ_layers (fan_in · fan_out + fan_out)`.
    pub fn parameter_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
struct ForwardCache {
    state: usize,
    /// Post-activation outputs of each hidden layer.
    hidden: Vec<Vec<f64>>,
    output: Vec<f64>,
}

/// Dense network: weights stored per layer as `[fan_out][fan_in]` followed by
/// the `fan_out` biases, all layers concatenated into one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    arch: Architecture,
    params: Vec<f64>,
}

impl Mlp {
    /// Scaled-normal initialization; the output layer is multiplied by `output_scale`.
    pub fn init(arch: Architecture, seed: u64, output_scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = arch.layer_dims();
        let last = dims.len() - 1;
        let mut params = Vec::with_capacity(arch.parameter_count());
        for (layer, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let scale = if layer == last { output_scale } else { 1.0 } / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                let z: f64 = StandardNormal.sample(&mut rng);
                params.push(z * scale);
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self { arch, params }
    }

    pub fn from_parts(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.parameter_count() {
            return Err(Error::Dimension {
                axis: "parameters",
                expected: arch.parameter_count(),
                got: params.len(),
            });
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_state(&self, state: usize) -> Result<()> {
        if state >= self.arch.n_inputs {
            return Err(Error::InvalidParameter {
                name: "state",
                detail: format!("{state} outside one-hot range {}", self.arch.n_inputs),
            });
        }
        Ok(())
    }

    fn forward_cached(&self, state: usize) -> Result<ForwardCache> {
        self.check_state(state)?;
        let dims = self.arch.layer_dims();
        let last = dims.len() - 1;
        let mut offset = 0;
        let mut hidden = Vec::with_capacity(last);
        let mut prev: Option<Vec<f64>> = None;
        let mut output = Vec::new();
        for (layer, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let z: Vec<f64> = (0..fan_out)
                .map(|j| {
                    let row = &w[j * fan_in..(j + 1) * fan_in];
                    b[j] + match &prev {
                        // one-hot input selects a single column
                        None => row[state],
                        Some(x) => row.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>(),
                    }
                })
                .collect();
            if layer == last {
                output = z;
            } else {
                let act: Vec<f64> = z.into_iter().map(|v| self.arch.activation.apply(v)).collect();
                hidden.push(act.clone());
                prev = Some(act);
            }
        }
        if output.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("network output at state {state}"),
            });
        }
        Ok(ForwardCache { state, hidden, output })
    }

    pub fn output(&self, state: usize) -> Result<Vec<f64>> {
        Ok(self.forward_cached(state)?.output)
    }

    /// Accumulates `Σ_j d_output[j] · ∂output_j/∂θ` into `grad`.
    fn backward(&self, cache: &ForwardCache, d_output: &[f64], grad: &mut [f64]) {
        let dims = self.arch.layer_dims();
        let mut offsets = Vec::with_capacity(dims.len());
        let mut offset = 0;
        for &(fan_in, fan_out) in &dims {
            offsets.push(offset);
            offset += fan_in * fan_out + fan_out;
        }
        let mut delta = d_output.to_vec();
        for layer in (0..dims.len()).rev() {
            let (fan_in, fan_out) = dims[layer];
            let w_off = offsets[layer];
            let b_off = w_off + fan_in * fan_out;
            for j in 0..fan_out {
                grad[b_off + j] += delta[j];
            }
            if layer == 0 {
                for (j, d) in delta.iter().enumerate() {
                    grad[w_off + j * fan_in + cache.state] += d;
                }
                break;
            }
            let input = &cache.hidden[layer - 1];
            let w = &self.params[w_off..b_off];
            let mut prev_delta = vec![0.0; fan_in];
            for j in 0..fan_out {
                let d = delta[j];
                if d == 0.0 {
                    continue;
                }
                let row = &w[j * fan_in..(j + 1) * fan_in];
                let grow = &mut grad[w_off + j * fan_in..w_off + (j + 1) * fan_in];
                for i in 0..fan_in {
                    grow[i] += d * input[i];
                    prev_delta[i] += d * row[i];
                }
            }
            for (pd, y) in prev_delta.iter_mut().zip(input) {
                *pd *= self.arch.activation.derivative_from_output(*y);
            }
            delta = prev_delta;
        }
    }

    /// Accumulates the gradient of `Σ_j d_output[j] · output_j(state)` into `grad`.
    pub fn accumulate_output_grad(&self, state: usize, d_output: &[f64], grad: &mut [f64]) -> Result<()> {
        let cache = self.forward_cached(state)?;
        self.backward(&cache, d_output, grad);
        Ok(())
    }

    fn check_params(&self) -> Result<()> {
        if let Some(i) = self.params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("parameter {i}"),
            });
        }
        Ok(())
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Gradient vector aligned with a network's flat parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    pub grad: Vec<f64>,
}

impl GradientBuffer {
    pub fn zeros(len: usize) -> Self {
        Self { grad: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.grad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grad.is_empty()
    }

    pub fn scale(&mut self, factor: f64) {
        self.grad.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn add_scaled(&mut self, other: &GradientBuffer, factor: f64) {
        for (g, o) in self.grad.iter_mut().zip(&other.grad) {
            *g += factor * o;
        }
    }
}

/// Anything that maps a state to an action distribution.
pub trait StochasticPolicy {
    fn action_probs(&self, state: usize) -> Result<Vec<f64>>;
}

impl StochasticPolicy for TabularPolicy {
    fn action_probs(&self, state: usize) -> Result<Vec<f64>> {
        if state >= self.n_states() {
            return Err(Error::InvalidParameter {
                name: "state",
                detail: format!("{state} outside {} states", self.n_states()),
            });
        }
        Ok(self.row(state).to_vec())
    }
}

/// Softmax policy `π_θ(a|s)` over an MLP's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNetwork {
    net: Mlp,
    seed: u64,
}

impl PolicyNetwork {
    /// Output layer is initialized at 1% scale so the initial policy is close to uniform.
    pub fn new(n_states: usize, hidden: Vec<usize>, n_actions: usize, seed: u64) -> Self {
        Self::with_architecture(Architecture::new(n_states, hidden, n_actions), seed)
    }

    pub fn with_architecture(arch: Architecture, seed: u64) -> Self {
        Self {
            net: Mlp::init(arch, seed, 0.01),
            seed,
        }
    }

    pub fn from_mlp(net: Mlp, seed: u64) -> Self {
        Self { net, seed }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.net
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn architecture(&self) -> &Architecture {
        self.net.architecture()
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }

    pub fn n_actions(&self) -> usize {
        self.net.arch.n_outputs
    }

    pub fn logits(&self, state: usize) -> Result<Vec<f64>> {
        self.net.check_params()?;
        self.net.output(state)
    }

    pub fn forward(&self, state: usize) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(state)?))
    }

    pub fn log_prob(&self, state: usize, action: usize) -> Result<f64> {
        let probs = self.forward(state)?;
        self.check_action(action)?;
        Ok(probs[action].ln())
    }

    fn check_action(&self, action: usize) -> Result<()> {
        if action >= self.n_actions() {
            return Err(Error::InvalidAction {
                action,
                n_actions: self.n_actions(),
            });
        }
        Ok(())
    }

    /// `log π_θ(a|s)` and its gradient with respect to θ.
    pub fn log_prob_and_grad(&self, state: usize, action: usize) -> Result<(f64, GradientBuffer)> {
        self.net.check_params()?;
        self.check_action(action)?;
        let cache = self.net.forward_cached(state)?;
        let probs = softmax(&cache.output);
        let d_logits: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(j, p)| if j == action { 1.0 - p } else { -p })
            .collect();
        let mut grad = GradientBuffer::zeros(self.net.params.len());
        self.net.backward(&cache, &d_logits, &mut grad.grad);
        Ok((probs[action].ln(), grad))
    }

    /// Accumulates `Σ_a coeff[a] · ∇_θ log π_θ(a|s)` into `grad`; returns the
    /// action probabilities at `state`.
    pub fn accumulate_log_prob_grads(
        &self,
        state: usize,
        coeff: &[f64],
        grad: &mut GradientBuffer,
    ) -> Result<Vec<f64>> {
        let cache = self.net.forward_cached(state)?;
        let probs = softmax(&cache.output);
        let total: f64 = coeff.iter().sum();
        // ∂/∂z_j Σ_a c_a log p_a = c_j - p_j Σ_a c_a
        let d_logits: Vec<f64> = coeff.iter().zip(&probs).map(|(c, p)| c - p * total).collect();
        self.net.backward(&cache, &d_logits, &mut grad.grad);
        Ok(probs)
    }

    /// Tabular snapshot of the policy over every state.
    pub fn to_tabular(&self) -> Result<TabularPolicy> {
        let n = self.net.arch.n_inputs;
        let mut probs = Vec::with_capacity(n * self.n_actions());
        for s in 0..n {
            probs.extend(self.forward(s)?);
        }
        TabularPolicy::new(n, self.n_actions(), probs)
    }

    pub fn write_checkpoint<W: Write>(&self, out: W) -> Result<()> {
        write_checkpoint(&self.net, out)
    }

    pub fn read_checkpoint<R: Read>(input: R) -> Result<Self> {
        Ok(Self {
            net: read_checkpoint(input)?,
            seed: 0,
        })
    }
}

impl StochasticPolicy for PolicyNetwork {
    fn action_probs(&self, state: usize) -> Result<Vec<f64>> {
        self.forward(state)
    }
}

/// Scalar state-value network.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNetwork {
    net: Mlp,
}

impl ValueNetwork {
    pub fn new(n_states: usize, hidden: Vec<usize>, seed: u64) -> Self {
        Self {
            net: Mlp::init(Architecture::new(n_states, hidden, 1), seed, 1.0),
        }
    }

    pub fn value(&self, state: usize) -> Result<f64> {
        Ok(self.net.output(state)?[0])
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }

    pub fn accumulate_value_grad(&self, state: usize, coeff: f64, grad: &mut GradientBuffer) -> Result<f64> {
        let cache = self.net.forward_cached(state)?;
        let v = cache.output[0];
        self.net.backward(&cache, &[coeff], &mut grad.grad);
        Ok(v)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"RPOLABNN";
const CHECKPOINT_VERSION: u32 = 1;

/// Layout: magic, version (u32), n_inputs (u32), hidden layer count (u32),
/// hidden sizes (u32 each), n_outputs (u32), activation tag (u8), parameter
/// count (u64), parameters (f64). All integers and floats little-endian.
pub fn write_checkpoint<W: Write>(net: &Mlp, mut out: W) -> Result<()> {
    let arch = &net.arch;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(arch.n_inputs as u32).to_le_bytes())?;
    out.write_all(&(arch.hidden.len() as u32).to_le_bytes())?;
    for h in &arch.hidden {
        out.write_all(&(*h as u32).to_le_bytes())?;
    }
    out.write_all(&(arch.n_outputs as u32).to_le_bytes())?;
    out.write_all(&[arch.activation.tag()])?;
    out.write_all(&(net.params.len() as u64).to_le_bytes())?;
    for p in &net.params {
        out.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Mlp> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n_inputs = read_u32(&mut input)? as usize;
    let n_hidden = read_u32(&mut input)? as usize;
    let hidden = (0..n_hidden)
        .map(|_| read_u32(&mut input).map(|h| h as usize))
        .collect::<Result<Vec<_>>>()?;
    let n_outputs = read_u32(&mut input)? as usize;
    let mut tag = [0u8; 1];
    input.read_exact(&mut tag)?;
    let activation = Activation::from_tag(tag[0])?;
    let mut count = [0u8; 8];
    input.read_exact(&mut count)?;
    let count = u64::from_le_bytes(count) as usize;
    let arch = Architecture {
        n_inputs,
        hidden,
        n_outputs,
        activation,
    };
    if count != arch.parameter_count() {
        return Err(Error::Checkpoint(format!(
            "header declares {count} parameters, architecture needs {}",
            arch.parameter_count()
        )));
    }
    let mut params = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        input.read_exact(&mut buf)?;
        params.push(f64::from_le_bytes(buf));
    }
    Mlp::from_parts(arch, params)
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One Adam step in the ascent direction: `θ ← θ + lr · m̂ / (√v̂ + eps)`.
pub fn adam_step(params: &mut [f64], grad: &GradientBuffer, lr: f64, state: &mut AdamState) -> Result<()> {
    if grad.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Dimension {
            axis: "gradient",
            expected: params.len(),
            got: grad.len(),
        });
    }
    if let Some(i) = grad.grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("gradient entry {i}"),
        });
    }
    ensure_finite(lr, || "learning rate".into())?;
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(&grad.grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p += lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}
