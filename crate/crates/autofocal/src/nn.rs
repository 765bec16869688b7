//! Minimal differentiable model stack: fully connected networks with named
//! output heads, reverse-mode gradients, Adam and exponential learning-rate
//! decay. Everything is `f64`; correctness outranks speed at this scale.
//!
//! Parameters flatten to one vector in a fixed order (hidden layers first,
//! then heads; weights row-major before biases), which is also the
//! checkpoint layout and the order the optimizer sees.

use std::io::{BufRead, Write};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::mat::Matrix;

/// Hidden-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

/// Output-head activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadActivation {
    Softmax,
    Sigmoid,
    Identity,
    Tanh,
}

impl HeadActivation {
    pub fn name(self) -> &'static str {
        match self {
            HeadActivation::Softmax => "softmax",
            HeadActivation::Sigmoid => "sigmoid",
            HeadActivation::Identity => "identity",
            HeadActivation::Tanh => "tanh",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "softmax" => Ok(HeadActivation::Softmax),
            "sigmoid" => Ok(HeadActivation::Sigmoid),
            "identity" => Ok(HeadActivation::Identity),
            "tanh" => Ok(HeadActivation::Tanh),
            other => Err(Error::Config(format!("unknown head activation '{other}'"))),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A named output group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadSpec {
    pub name: String,
    pub size: usize,
    pub activation: HeadActivation,
}

impl HeadSpec {
    pub fn new(name: &str, size: usize, activation: HeadActivation) -> Self {
        Self {
            name: name.to_string(),
            size,
            activation,
        }
    }
}

/// Fully connected network: shared hidden trunk, one linear layer plus
/// activation per head.
#[derive(Debug, Clone)]
pub struct Mlp {
    input_dim: usize,
    hidden: Vec<(usize, Activation)>,
    heads: Vec<HeadSpec>,
    /// Hidden weights then head weights, each `[fan_in x fan_out]`.
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    /// Bumped on every parameter mutation; forward passes remember the
    /// version they were computed against.
    version: u64,
}

/// Cached activations of one forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    version: u64,
    input: Matrix,
    hidden_outputs: Vec<Matrix>,
    head_outputs: Vec<Matrix>,
}

impl ForwardPass {
    pub fn head<'a>(&'a self, model: &Mlp, name: &str) -> Option<&'a Matrix> {
        let idx = model.heads.iter().position(|h| h.name == name)?;
        Some(&self.head_outputs[idx])
    }

    pub fn head_outputs(&self) -> &[Matrix] {
        &self.head_outputs
    }
}

impl Mlp {
    fn layer_dims(
        input_dim: usize,
        hidden: &[(usize, Activation)],
        heads: &[HeadSpec],
    ) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = input_dim;
        for &(size, _) in hidden {
            dims.push((prev, size));
            prev = size;
        }
        for head in heads {
            dims.push((prev, head.size));
        }
        dims
    }

    fn validate_spec(
        input_dim: usize,
        hidden: &[(usize, Activation)],
        heads: &[HeadSpec],
    ) -> Result<()> {
        if input_dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        if hidden.iter().any(|&(s, _)| s == 0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        if heads.is_empty() {
            return Err(Error::Config("a model needs at least one head".into()));
        }
        if heads.iter().any(|h| h.size == 0) {
            return Err(Error::Config("head sizes must be positive".into()));
        }
        let mut names: Vec<&str> = heads.iter().map(|h| h.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != heads.len() {
            return Err(Error::Config("head names must be unique".into()));
        }
        Ok(())
    }

    /// All parameters zero.
    pub fn zeroed(
        input_dim: usize,
        hidden: Vec<(usize, Activation)>,
        heads: Vec<HeadSpec>,
    ) -> Result<Self> {
        Self::validate_spec(input_dim, &hidden, &heads)?;
        let dims = Self::layer_dims(input_dim, &hidden, &heads);
        Ok(Self {
            weights: dims.iter().map(|&(i, o)| Matrix::zeros(i, o)).collect(),
            biases: dims.iter().map(|&(_, o)| vec![0.0; o]).collect(),
            input_dim,
            hidden,
            heads,
            version: 0,
        })
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero, deterministic
    /// under the seed.
    pub fn seeded(
        input_dim: usize,
        hidden: Vec<(usize, Activation)>,
        heads: Vec<HeadSpec>,
        seed: u64,
    ) -> Result<Self> {
        let mut model = Self::zeroed(input_dim, hidden, heads)?;
        let mut rng = StdRng::seed_from_u64(seed);
        for w in &mut model.weights {
            let bound = 1.0 / (w.rows() as f64).sqrt();
            for v in w.as_mut_slice() {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Ok(model)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> &[(usize, Activation)] {
        &self.hidden
    }

    pub fn heads(&self) -> &[HeadSpec] {
        &self.heads
    }

    pub fn head_index(&self, name: &str) -> Option<usize> {
        self.heads.iter().position(|h| h.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.weights
            .iter()
            .map(|w| w.rows() * w.cols())
            .sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Copies all parameters into one flat vector, layer by layer, weights
    /// before biases.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    /// Overwrites all parameters from a flat vector in [`Self::flatten_params`]
    /// order.
    pub fn assign_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} parameters for a model with {}",
                params.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let len = w.rows() * w.cols();
            w.as_mut_slice()
                .copy_from_slice(&params[offset..offset + len]);
            offset += len;
            let blen = b.len();
            b.copy_from_slice(&params[offset..offset + blen]);
            offset += blen;
        }
        self.version += 1;
        Ok(())
    }

    fn trunk_output<'a>(&self, pass: &'a ForwardPass) -> &'a Matrix {
        pass.hidden_outputs.last().unwrap_or(&pass.input)
    }

    /// Forward pass over a batch, caching every activation for `backward`.
    pub fn forward(&self, inputs: &Matrix) -> Result<ForwardPass> {
        if inputs.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "input width {} does not match model input dimension {}",
                inputs.cols(),
                self.input_dim
            )));
        }
        let mut hidden_outputs = Vec::with_capacity(self.hidden.len());
        let mut current = inputs.clone();
        for (layer, &(_, activation)) in self.hidden.iter().enumerate() {
            let mut z = current.matmul(&self.weights[layer]);
            add_bias(&mut z, &self.biases[layer]);
            let out = z.map(|x| activation.apply(x));
            hidden_outputs.push(out.clone());
            current = out;
        }
        let mut head_outputs = Vec::with_capacity(self.heads.len());
        for (k, head) in self.heads.iter().enumerate() {
            let layer = self.hidden.len() + k;
            let mut z = current.matmul(&self.weights[layer]);
            add_bias(&mut z, &self.biases[layer]);
            head_outputs.push(apply_head(&z, head.activation));
        }
        Ok(ForwardPass {
            version: self.version,
            input: inputs.clone(),
            hidden_outputs,
            head_outputs,
        })
    }

    /// Backpropagates per-head output gradients to a flat parameter
    /// gradient. Heads without an entry receive a zero upstream gradient.
    /// The pass must come from the current parameter version.
    pub fn backward(&self, pass: &ForwardPass, head_grads: &[(&str, &Matrix)]) -> Result<Vec<f64>> {
        if pass.version != self.version {
            return Err(Error::StaleForwardPass);
        }
        for (name, grad) in head_grads {
            let idx = self
                .head_index(name)
                .ok_or_else(|| Error::Shape(format!("unknown head '{name}'")))?;
            let out = &pass.head_outputs[idx];
            if grad.rows() != out.rows() || grad.cols() != out.cols() {
                return Err(Error::Shape(format!(
                    "gradient for head '{name}' is {}x{}, expected {}x{}",
                    grad.rows(),
                    grad.cols(),
                    out.rows(),
                    out.cols()
                )));
            }
        }

        let n = pass.input.rows();
        let trunk = self.trunk_output(pass);
        let mut weight_grads: Vec<Matrix> = self
            .weights
            .iter()
            .map(|w| Matrix::zeros(w.rows(), w.cols()))
            .collect();
        let mut bias_grads: Vec<Vec<f64>> =
            self.biases.iter().map(|b| vec![0.0; b.len()]).collect();
        let mut trunk_grad = Matrix::zeros(n, trunk.cols());

        for (k, head) in self.heads.iter().enumerate() {
            let Some((_, upstream)) = head_grads.iter().find(|(name, _)| *name == head.name) else {
                continue;
            };
            let layer = self.hidden.len() + k;
            let out = &pass.head_outputs[k];
            let g_z = head_preactivation_grad(out, upstream, head.activation);
            weight_grads[layer] = trunk.transpose_matmul(&g_z);
            for row in 0..n {
                for (bg, &g) in bias_grads[layer].iter_mut().zip(g_z.row(row)) {
                    *bg += g;
                }
            }
            let back = g_z.matmul_transpose(&self.weights[layer]);
            for (t, b) in trunk_grad.as_mut_slice().iter_mut().zip(back.iter()) {
                *t += b;
            }
        }

        // Hidden layers in reverse.
        let mut g_post = trunk_grad;
        for layer in (0..self.hidden.len()).rev() {
            let (_, activation) = self.hidden[layer];
            let out = &pass.hidden_outputs[layer];
            let mut g_pre = Matrix::zeros(out.rows(), out.cols());
            for (g, (&o, &gp)) in g_pre
                .as_mut_slice()
                .iter_mut()
                .zip(out.iter().zip(g_post.iter()))
            {
                *g = gp * activation.derivative_from_output(o);
            }
            let prev = if layer == 0 {
                &pass.input
            } else {
                &pass.hidden_outputs[layer - 1]
            };
            weight_grads[layer] = prev.transpose_matmul(&g_pre);
            for row in 0..n {
                for (bg, &g) in bias_grads[layer].iter_mut().zip(g_pre.row(row)) {
                    *bg += g;
                }
            }
            g_post = g_pre.matmul_transpose(&self.weights[layer]);
        }

        let mut flat = Vec::with_capacity(self.num_params());
        for (w, b) in weight_grads.iter().zip(&bias_grads) {
            flat.extend_from_slice(w.as_slice());
            flat.extend_from_slice(b);
        }
        Ok(flat)
    }

    /// Writes the model as a versioned text checkpoint. Floats are stored
    /// as raw bit patterns, so the round trip is lossless.
    pub fn save(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "afnet 1")?;
        writeln!(w, "input {}", self.input_dim)?;
        for &(size, activation) in &self.hidden {
            writeln!(w, "hidden {} {}", size, activation.name())?;
        }
        for head in &self.heads {
            writeln!(
                w,
                "head {} {} {}",
                head.name,
                head.size,
                head.activation.name()
            )?;
        }
        let params = self.flatten_params();
        writeln!(w, "params {}", params.len())?;
        for p in params {
            writeln!(w, "{:016x}", p.to_bits())?;
        }
        Ok(())
    }

    pub fn load(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Checkpoint("unexpected end of checkpoint".into()))?
                .map_err(Error::from)
        };
        let header = next()?;
        if header.trim() != "afnet 1" {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint header '{header}'"
            )));
        }
        let input_line = next()?;
        let input_dim = parse_tagged(&input_line, "input")?
            .parse::<usize>()
            .map_err(|e| Error::Checkpoint(format!("bad input dimension: {e}")))?;

        let mut hidden = Vec::new();
        let mut heads = Vec::new();
        let param_count: usize;
        loop {
            let line = next()?;
            let mut fields = line.split_whitespace();
            match fields.next() {
                Some("hidden") => {
                    let size = fields
                        .next()
                        .ok_or_else(|| Error::Checkpoint("hidden line missing size".into()))?
                        .parse::<usize>()
                        .map_err(|e| Error::Checkpoint(format!("bad hidden size: {e}")))?;
                    let activation = Activation::from_name(fields.next().ok_or_else(|| {
                        Error::Checkpoint("hidden line missing activation".into())
                    })?)?;
                    hidden.push((size, activation));
                }
                Some("head") => {
                    let name = fields
                        .next()
                        .ok_or_else(|| Error::Checkpoint("head line missing name".into()))?;
                    let size = fields
                        .next()
                        .ok_or_else(|| Error::Checkpoint("head line missing size".into()))?
                        .parse::<usize>()
                        .map_err(|e| Error::Checkpoint(format!("bad head size: {e}")))?;
                    let activation =
                        HeadActivation::from_name(fields.next().ok_or_else(|| {
                            Error::Checkpoint("head line missing activation".into())
                        })?)?;
                    heads.push(HeadSpec::new(name, size, activation));
                }
                Some("params") => {
                    param_count = fields
                        .next()
                        .ok_or_else(|| Error::Checkpoint("params line missing count".into()))?
                        .parse::<usize>()
                        .map_err(|e| Error::Checkpoint(format!("bad param count: {e}")))?;
                    break;
                }
                other => {
                    return Err(Error::Checkpoint(format!(
                        "unexpected checkpoint line '{}'",
                        other.unwrap_or("")
                    )))
                }
            }
        }

        let count = param_count;
        let mut model = Mlp::zeroed(input_dim, hidden, heads)
            .map_err(|e| Error::Checkpoint(format!("invalid checkpoint architecture: {e}")))?;
        if count != model.num_params() {
            return Err(Error::Checkpoint(format!(
                "checkpoint lists {count} parameters, architecture needs {}",
                model.num_params()
            )));
        }
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next()?;
            let bits = u64::from_str_radix(line.trim(), 16)
                .map_err(|e| Error::Checkpoint(format!("bad parameter value '{line}': {e}")))?;
            params.push(f64::from_bits(bits));
        }
        model.assign_params(&params)?;
        Ok(model)
    }
}

fn parse_tagged<'a>(line: &'a str, tag: &str) -> Result<&'a str> {
    line.strip_prefix(tag)
        .map(str::trim)
        .ok_or_else(|| Error::Checkpoint(format!("expected '{tag} ...', got '{line}'")))
}

fn add_bias(z: &mut Matrix, bias: &[f64]) {
    for row in 0..z.rows() {
        for (v, &b) in z.row_mut(row).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn apply_head(z: &Matrix, activation: HeadActivation) -> Matrix {
    match activation {
        HeadActivation::Identity => z.clone(),
        HeadActivation::Sigmoid => z.map(sigmoid),
        HeadActivation::Tanh => z.map(f64::tanh),
        HeadActivation::Softmax => {
            let mut out = Matrix::zeros(z.rows(), z.cols());
            for row in 0..z.rows() {
                let input = z.row(row);
                let max = input.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                let out_row = out.row_mut(row);
                for (o, &x) in out_row.iter_mut().zip(input) {
                    *o = (x - max).exp();
                    sum += *o;
                }
                for o in out_row {
                    *o /= sum;
                }
            }
            out
        }
    }
}

/// Gradient with respect to the head pre-activation given the gradient with
/// respect to the head output.
fn head_preactivation_grad(out: &Matrix, upstream: &Matrix, activation: HeadActivation) -> Matrix {
    match activation {
        HeadActivation::Identity => upstream.clone(),
        HeadActivation::Sigmoid => {
            let mut g = Matrix::zeros(out.rows(), out.cols());
            for (gz, (&p, &gp)) in g
                .as_mut_slice()
                .iter_mut()
                .zip(out.iter().zip(upstream.iter()))
            {
                *gz = gp * p * (1.0 - p);
            }
            g
        }
        HeadActivation::Tanh => {
            let mut g = Matrix::zeros(out.rows(), out.cols());
            for (gz, (&p, &gp)) in g
                .as_mut_slice()
                .iter_mut()
                .zip(out.iter().zip(upstream.iter()))
            {
                *gz = gp * (1.0 - p * p);
            }
            g
        }
        HeadActivation::Softmax => {
            let mut g = Matrix::zeros(out.rows(), out.cols());
            for row in 0..out.rows() {
                let p = out.row(row);
                let gp = upstream.row(row);
                let dot: f64 = p.iter().zip(gp).map(|(&pi, &gi)| pi * gi).sum();
                for (j, gz) in g.row_mut(row).iter_mut().enumerate() {
                    *gz = p[j] * (gp[j] - dot);
                }
            }
            g
        }
    }
}

/// Adam hyperparameters; the defaults are the standard ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    params: AdamParams,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self::with_params(len, AdamParams::default())
    }

    pub fn with_params(len: usize, params: AdamParams) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            params,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update in place. Rejects non-finite
    /// gradients so a diverged loss aborts training instead of poisoning
    /// the moments.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient count changed");
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        self.step += 1;
        let AdamParams {
            beta1,
            beta2,
            epsilon,
        } = self.params;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

/// Exponential (geometric) learning-rate decay from `start` to `end` over
/// `total_steps`; constant at `end` afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    start: f64,
    end: f64,
    total_steps: u64,
}

impl LrSchedule {
    pub fn new(start: f64, end: f64, total_steps: u64) -> Result<Self> {
        if !(start.is_finite() && start > 0.0 && end.is_finite() && end > 0.0) {
            return Err(Error::Config(format!(
                "learning rates must be positive, got start={start}, end={end}"
            )));
        }
        if total_steps == 0 {
            return Err(Error::Config("decay needs at least one step".into()));
        }
        Ok(Self {
            start,
            end,
            total_steps,
        })
    }

    pub fn rate(&self, step: u64) -> f64 {
        if step == 0 {
            return self.start;
        }
        if step >= self.total_steps {
            return self.end;
        }
        let t = step as f64 / self.total_steps as f64;
        self.start * (self.end / self.start).powf(t)
    }
}
