//! Small fully connected classifier with exact gradients with respect to
//! parameters and inputs.
//!
//! Parameters live in one flat vector. Layer `l` occupies a contiguous slot:
//! its `fan_out x fan_in` weight matrix (row-major) followed by its `fan_out`
//! biases. Hidden layers apply the configured activation; the output layer is
//! linear and feeds a softmax.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Subset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply<F: Scalar>(self, z: F) -> F {
        match self {
            Activation::Relu => z.max(F::zero()),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative<F: Scalar>(self, z: F, a: F) -> F {
        match self {
            Activation::Relu => {
                if z > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::Tanh => F::one() - a * a,
        }
    }
}

/// Layer widths from input dimension to class count.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl NetworkSpec {
    pub fn new(layer_sizes: impl Into<Vec<usize>>, activation: Activation) -> Result<Self> {
        let spec = Self {
            layer_sizes: layer_sizes.into(),
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "network needs at least 2 layer sizes, got {}",
                self.layer_sizes.len()
            )));
        }
        if let Some(pos) = self.layer_sizes.iter().position(|&s| s == 0) {
            return Err(Error::Config(format!("layer size at position {pos} is zero")));
        }
        if self.num_classes() < 2 {
            return Err(Error::Config("output layer must have at least 2 classes".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Number of weight layers.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn layout(&self) -> Vec<LayerSlot> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let slot = LayerSlot {
                    fan_in: w[0],
                    fan_out: w[1],
                    weights: offset,
                    bias: offset + w[0] * w[1],
                    end: offset + w[0] * w[1] + w[1],
                };
                offset = slot.end;
                slot
            })
            .collect()
    }
}

/// Offsets of one layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: usize,
    pub bias: usize,
    pub end: usize,
}

impl LayerSlot {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.weights..self.end
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<F> {
    /// `z_l = W_l a_{l-1} + b_l` for every weight layer; the last one is the logits.
    pub pre_activations: Vec<Vec<F>>,
    /// Outputs of the hidden layers only.
    pub activations: Vec<Vec<F>>,
    pub probs: Vec<F>,
}

impl<F: Scalar> ForwardTrace<F> {
    pub fn logits(&self) -> &[F] {
        self.pre_activations.last().unwrap()
    }

    /// Argmax of the probabilities, lowest class index on ties.
    pub fn predicted(&self) -> usize {
        argmax(&self.probs)
    }
}

pub(crate) fn argmax<F: Scalar>(v: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp<F: Scalar>(logits: &[F]) -> F {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<F>().ln()
}

/// Softmax with the max logit subtracted first.
pub fn softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy `-log p_y`, evaluated as `logsumexp(logits) - logits[y]`.
pub fn nll_loss<F: Scalar>(trace: &ForwardTrace<F>, y: usize) -> Result<F> {
    let logits = trace.logits();
    if y >= logits.len() {
        return Err(Error::Label {
            label: y,
            classes: logits.len(),
        });
    }
    let loss = log_sum_exp(logits) - logits[y];
    // Rounding can leave a tiny negative value; NaN passes through.
    Ok(if loss < F::zero() { F::zero() } else { loss })
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "F: Scalar", deny_unknown_fields)]
struct ModelRepr<F> {
    spec: NetworkSpec,
    params: Vec<F>,
}

/// Network architecture plus its flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar", try_from = "ModelRepr<F>", into = "ModelRepr<F>")]
pub struct MlpModel<F> {
    spec: NetworkSpec,
    params: Vec<F>,
    layout: Vec<LayerSlot>,
}

impl<F: Scalar> TryFrom<ModelRepr<F>> for MlpModel<F> {
    type Error = Error;

    fn try_from(repr: ModelRepr<F>) -> Result<Self> {
        MlpModel::from_params(repr.spec, repr.params)
    }
}

impl<F: Scalar> From<MlpModel<F>> for ModelRepr<F> {
    fn from(m: MlpModel<F>) -> Self {
        ModelRepr {
            spec: m.spec,
            params: m.params,
        }
    }
}

/// Plain mini-batch SGD settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Loss and accuracy over the training split after an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
}

impl<F: Scalar> MlpModel<F> {
    /// Xavier-uniform weights, zero biases.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        let mut params = vec![F::zero(); spec.param_count()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for slot in &layout {
            let bound = (6.0 / (slot.fan_in + slot.fan_out) as f64).sqrt();
            for w in &mut params[slot.weights..slot.bias] {
                *w = F::lit(rng.random_range(-bound..bound));
            }
        }
        Ok(Self { spec, params, layout })
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<F>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::Shape {
                what: "parameter vector",
                expected: spec.param_count(),
                got: params.len(),
            });
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {i}")));
        }
        let layout = spec.layout();
        Ok(Self { spec, params, layout })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn layout(&self) -> &[LayerSlot] {
        &self.layout
    }

    /// Replaces the parameters, keeping the architecture.
    pub fn with_params(&self, params: Vec<F>) -> Result<Self> {
        Self::from_params(self.spec.clone(), params)
    }

    fn check_input(&self, x: &[F]) -> Result<()> {
        if x.len() != self.spec.input_dim() {
            return Err(Error::Shape {
                what: "input vector",
                expected: self.spec.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn check_label(&self, y: usize) -> Result<()> {
        if y >= self.spec.num_classes() {
            return Err(Error::Label {
                label: y,
                classes: self.spec.num_classes(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[F]) -> Result<ForwardTrace<F>> {
        self.check_input(x)?;
        Ok(self.forward_unchecked(x))
    }

    fn forward_unchecked(&self, x: &[F]) -> ForwardTrace<F> {
        let depth = self.layout.len();
        let mut pre_activations = Vec::with_capacity(depth);
        let mut activations: Vec<Vec<F>> = Vec::with_capacity(depth - 1);
        for (l, slot) in self.layout.iter().enumerate() {
            let input = if l == 0 { x } else { &activations[l - 1] };
            let w = &self.params[slot.weights..slot.bias];
            let b = &self.params[slot.bias..slot.end];
            let z: Vec<F> = (0..slot.fan_out)
                .map(|o| {
                    let row = &w[o * slot.fan_in..(o + 1) * slot.fan_in];
                    row.iter().zip(input).fold(b[o], |acc, (&wi, &xi)| acc + wi * xi)
                })
                .collect();
            if l + 1 < depth {
                activations.push(z.iter().map(|&v| self.spec.activation.apply(v)).collect());
            }
            pre_activations.push(z);
        }
        let probs = softmax(pre_activations.last().unwrap());
        ForwardTrace {
            pre_activations,
            activations,
            probs,
        }
    }

    pub fn predict(&self, x: &[F]) -> Result<usize> {
        Ok(self.forward(x)?.predicted())
    }

    /// Backpropagates `dlogits` (gradient of some scalar w.r.t. the logits).
    /// Parameter gradients are added into `grad` scaled by `scale`; returns the
    /// gradient with respect to the input when `want_input` is set.
    fn backward(
        &self,
        x: &[F],
        trace: &ForwardTrace<F>,
        dlogits: Vec<F>,
        scale: F,
        mut grad: Option<&mut [F]>,
        want_input: bool,
    ) -> Option<Vec<F>> {
        let mut delta = dlogits;
        for l in (0..self.layout.len()).rev() {
            let slot = self.layout[l];
            let input = if l == 0 { x } else { &trace.activations[l - 1] };
            if let Some(g) = grad.as_deref_mut() {
                for o in 0..slot.fan_out {
                    let d = delta[o] * scale;
                    let row = &mut g[slot.weights + o * slot.fan_in..slot.weights + (o + 1) * slot.fan_in];
                    for (gw, &xi) in row.iter_mut().zip(input) {
                        *gw = *gw + d * xi;
                    }
                    g[slot.bias + o] = g[slot.bias + o] + d;
                }
            }
            if l == 0 && !want_input {
                return None;
            }
            let w = &self.params[slot.weights..slot.bias];
            let mut upstream = vec![F::zero(); slot.fan_in];
            for (o, &d) in delta.iter().enumerate() {
                let row = &w[o * slot.fan_in..(o + 1) * slot.fan_in];
                for (u, &wi) in upstream.iter_mut().zip(row) {
                    *u = *u + wi * d;
                }
            }
            if l == 0 {
                return Some(upstream);
            }
            let z = &trace.pre_activations[l - 1];
            let a = &trace.activations[l - 1];
            delta = upstream
                .iter()
                .zip(z.iter().zip(a))
                .map(|(&u, (&zi, &ai))| u * self.spec.activation.derivative(zi, ai))
                .collect();
        }
        None
    }

    fn nll_dlogits(trace: &ForwardTrace<F>, y: usize) -> Vec<F> {
        let mut d = trace.probs.clone();
        d[y] = d[y] - F::one();
        d
    }

    /// Mean NLL over `batch` and its exact gradient with respect to the parameters.
    pub fn loss_and_grad<'a, I>(&self, batch: I) -> Result<(F, Vec<F>)>
    where
        I: IntoIterator<Item = (&'a [F], usize)>,
    {
        let mut grad = vec![F::zero(); self.params.len()];
        let mut loss = F::zero();
        let mut count = 0usize;
        for (x, y) in batch {
            self.check_input(x)?;
            self.check_label(y)?;
            let trace = self.forward_unchecked(x);
            loss = loss + nll_loss(&trace, y)?;
            self.backward(x, &trace, Self::nll_dlogits(&trace, y), F::one(), Some(&mut grad), false);
            count += 1;
        }
        if count == 0 {
            return Err(Error::Argument("gradient requested for an empty batch".into()));
        }
        let n = F::from_usize_lossy(count);
        grad.iter_mut().for_each(|g| *g = *g / n);
        Ok((loss / n, grad))
    }

    /// Exact gradient of the mean NLL over `batch` with respect to the parameters.
    pub fn grad_params<'a, I>(&self, batch: I) -> Result<Vec<F>>
    where
        I: IntoIterator<Item = (&'a [F], usize)>,
    {
        self.loss_and_grad(batch).map(|(_, g)| g)
    }

    /// Gradient of `log p(y | x)` with respect to the input features.
    pub fn grad_input(&self, x: &[F], y: usize) -> Result<Vec<F>> {
        self.check_input(x)?;
        self.check_label(y)?;
        let trace = self.forward_unchecked(x);
        Ok(self.grad_input_with_trace(x, y, &trace))
    }

    pub(crate) fn grad_input_with_trace(&self, x: &[F], y: usize, trace: &ForwardTrace<F>) -> Vec<F> {
        let dnll_dx = self
            .backward(x, trace, Self::nll_dlogits(trace, y), F::one(), None, true)
            .expect("input gradient requested");
        dnll_dx.into_iter().map(|v| -v).collect()
    }

    /// Mean NLL and accuracy over a split.
    pub fn evaluate(&self, data: &Subset<'_, F>) -> Result<(F, F)> {
        if data.is_empty() {
            return Err(Error::Argument("evaluation split is empty".into()));
        }
        let mut loss = F::zero();
        let mut correct = 0usize;
        for (x, y) in data.iter() {
            let trace = self.forward(x)?;
            loss = loss + nll_loss(&trace, y)?;
            if trace.predicted() == y {
                correct += 1;
            }
        }
        let n = F::from_usize_lossy(data.len());
        Ok((loss / n, F::from_usize_lossy(correct) / n))
    }

    /// In-place SGD step `theta -= lr * grad`; fails on non-finite results.
    pub(crate) fn descend(&mut self, grad: &[F], lr: F) -> Result<()> {
        for (p, &g) in self.params.iter_mut().zip(grad) {
            *p = *p - lr * g;
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("parameters diverged".into()));
        }
        Ok(())
    }

    /// Mini-batch SGD on `data`, reshuffled each epoch from a seeded generator.
    pub fn train(&self, data: &Subset<'_, F>, cfg: &SgdConfig) -> Result<Self> {
        self.train_inner(data, cfg, false).map(|(m, _)| m)
    }

    /// Same as [`MlpModel::train`], also reporting loss and accuracy after each epoch.
    pub fn train_logged(&self, data: &Subset<'_, F>, cfg: &SgdConfig) -> Result<(Self, Vec<EpochLog>)> {
        self.train_inner(data, cfg, true)
    }

    fn train_inner(&self, data: &Subset<'_, F>, cfg: &SgdConfig, log: bool) -> Result<(Self, Vec<EpochLog>)> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Argument("training split is empty".into()));
        }
        let mut model = self.clone();
        let mut logs = Vec::new();
        let lr = F::lit(cfg.lr);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut steps = 0usize;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let grad = model.grad_params(chunk.iter().map(|&k| data.get(k)))?;
                model.descend(&grad, lr).map_err(|_| Error::Numerical {
                    last_finite_step: steps,
                    message: format!("training diverged in epoch {epoch}"),
                })?;
                steps += 1;
            }
            if log {
                let (loss, acc) = model.evaluate(data)?;
                logs.push(EpochLog {
                    epoch: epoch + 1,
                    train_loss: loss.as_f64(),
                    train_acc: acc.as_f64(),
                });
            }
        }
        Ok((model, logs))
    }
}
