//! Feed-forward regressor with inverted dropout.
//!
//! The model is a stack of dense layers. Hidden layers apply the configured
//! activation followed by dropout (only when running stochastically); the
//! output layer is linear. Weights are stored `(out_dim, in_dim)`.
//!
//! Training never mutates the receiver: [`Regressor::train`] clones the
//! parameters and returns the updated model alongside its loss history.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

pub const MODEL_MAGIC: &[u8; 12] = b"TASFAR-MODEL";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Default number of stochastic passes for MC-dropout.
pub const DEFAULT_SAMPLINGS: usize = 20;
pub const DEFAULT_DROPOUT: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }

    fn apply<F: Scalar>(self, z: F) -> F {
        match self {
            Activation::Relu => z.max(F::zero()),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative<F: Scalar>(self, z: F) -> F {
        match self {
            Activation::Relu => {
                if z > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                F::one() - t * t
            }
            Activation::Identity => F::one(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regressor<F: Scalar> {
    layer_sizes: Vec<usize>,
    weights: Vec<Array2<F>>,
    biases: Vec<Array1<F>>,
    activation: Activation,
    dropout_rate: F,
}

/// MC-dropout output for one input row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct UncertainPrediction<F: Scalar> {
    pub prediction: Vec<F>,
    pub uncertainty: Vec<F>,
    pub input_index: usize,
}

impl<F: Scalar> UncertainPrediction<F> {
    pub fn dims(&self) -> usize {
        self.prediction.len()
    }

    /// Restrict to a single label dimension.
    pub fn dimension(&self, d: usize) -> UncertainPrediction<F> {
        UncertainPrediction {
            prediction: vec![self.prediction[d]],
            uncertainty: vec![self.uncertainty[d]],
            input_index: self.input_index,
        }
    }
}

/// Rows of inputs with their (pseudo-)targets and per-example loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch<F: Scalar> {
    inputs: Array2<F>,
    targets: Array2<F>,
    weights: Array1<F>,
}

impl<F: Scalar> TrainingBatch<F> {
    pub fn new(inputs: Array2<F>, targets: Array2<F>, weights: Array1<F>) -> Result<Self> {
        let n = inputs.nrows();
        if targets.nrows() != n || weights.len() != n {
            return Err(Error::Shape(format!(
                "batch rows disagree: inputs {n}, targets {}, weights {}",
                targets.nrows(),
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= F::zero())) {
            return Err(Error::Data(format!("loss weights must be non-negative, got {w}")));
        }
        Ok(Self {
            inputs,
            targets,
            weights,
        })
    }

    /// Unit weights, as used for supervised source training.
    pub fn unweighted(inputs: Array2<F>, targets: Array2<F>) -> Result<Self> {
        let n = inputs.nrows();
        Self::new(inputs, targets, Array1::from_elem(n, F::one()))
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn inputs(&self) -> &Array2<F> {
        &self.inputs
    }

    pub fn targets(&self) -> &Array2<F> {
        &self.targets
    }

    pub fn weights(&self) -> &Array1<F> {
        &self.weights
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean over output dimensions of the squared residual.
    #[default]
    SquaredError,
}

impl LossKind {
    fn value<F: Scalar>(self, output: &Array1<F>, target: ArrayView1<F>) -> F {
        match self {
            LossKind::SquaredError => {
                let m = F::from_usize_lossy(output.len());
                output
                    .iter()
                    .zip(target.iter())
                    .map(|(&y, &t)| (y - t) * (y - t))
                    .sum::<F>()
                    / m
            }
        }
    }

    fn output_grad<F: Scalar>(self, output: &Array1<F>, target: ArrayView1<F>) -> Array1<F> {
        match self {
            LossKind::SquaredError => {
                let scale = F::lit(2.0) / F::from_usize_lossy(output.len());
                Array1::from_iter(
                    output
                        .iter()
                        .zip(target.iter())
                        .map(|(&y, &t)| scale * (y - t)),
                )
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig<F: Scalar> {
    pub learning_rate: F,
    pub epochs: usize,
    pub loss: LossKind,
    /// Seed for the dropout masks drawn during training.
    pub seed: u64,
}

impl<F: Scalar> TrainConfig<F> {
    pub fn new(learning_rate: F, epochs: usize, seed: u64) -> Self {
        Self {
            learning_rate,
            epochs,
            loss: LossKind::SquaredError,
            seed,
        }
    }
}

/// Result of a training run that may stop before `epochs`.
#[derive(Debug, Clone)]
pub struct TrainOutcome<F: Scalar> {
    pub model: Regressor<F>,
    pub loss_history: Vec<F>,
    /// Number of epochs run when the stop callback fired.
    pub stopped_at: Option<usize>,
}

/// Parameter-shaped gradient buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F: Scalar> {
    pub weights: Vec<Array2<F>>,
    pub biases: Vec<Array1<F>>,
}

impl<F: Scalar> Gradients<F> {
    fn zeros_like(model: &Regressor<F>) -> Self {
        Self {
            weights: model.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: model.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    /// Flatten in the same order as [`Regressor::parameters`].
    pub fn flatten(&self) -> Vec<F> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Batched forward record: row `i` of every matrix belongs to input row `i`.
struct Trace<F: Scalar> {
    /// Layer inputs: `inputs[0]` is the network input, `inputs[l]` the
    /// (dropped-out) activation feeding layer `l`.
    inputs: Vec<Array2<F>>,
    pre_activations: Vec<Array2<F>>,
    masks: Option<Vec<Array2<F>>>,
    output: Array2<F>,
}

impl<F: Scalar> Regressor<F> {
    /// Glorot-uniform weights, zero biases. Identical `(layer_sizes, seed)`
    /// always yield identical parameters.
    pub fn init(layer_sizes: &[usize], dropout_rate: F, seed: u64) -> Result<Self> {
        Self::init_with(layer_sizes, dropout_rate, Activation::Relu, seed)
    }

    pub fn init_with(
        layer_sizes: &[usize],
        dropout_rate: F,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        validate_architecture(layer_sizes, dropout_rate)?;
        let mut rng = rng::seeded(seed);
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Array2::from_shape_simple_fn((fan_out, fan_in), || {
                F::lit(limit * (2.0 * rng.random::<f64>() - 1.0))
            });
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            activation,
            dropout_rate,
        })
    }

    /// Build from explicit parameters; shapes must chain with `layer_sizes`.
    pub fn from_parameters(
        layer_sizes: &[usize],
        weights: Vec<Array2<F>>,
        biases: Vec<Array1<F>>,
        activation: Activation,
        dropout_rate: F,
    ) -> Result<Self> {
        validate_architecture(layer_sizes, dropout_rate)?;
        if weights.len() != layer_sizes.len() - 1 || biases.len() != weights.len() {
            return Err(Error::Shape("parameter count does not match layer sizes".into()));
        }
        for (l, pair) in layer_sizes.windows(2).enumerate() {
            if weights[l].dim() != (pair[1], pair[0]) || biases[l].len() != pair[1] {
                return Err(Error::Shape(format!(
                    "layer {l}: expected weights {}x{} and bias {}, got {:?} and {}",
                    pair[1],
                    pair[0],
                    pair[1],
                    weights[l].dim(),
                    biases[l].len()
                )));
            }
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            activation,
            dropout_rate,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    pub fn weights(&self) -> &[Array2<F>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<F>] {
        &self.biases
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn dropout_rate(&self) -> F {
        self.dropout_rate
    }

    pub fn with_dropout_rate(mut self, rate: F) -> Result<Self> {
        validate_architecture(&self.layer_sizes, rate)?;
        self.dropout_rate = rate;
        Ok(self)
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// All parameters flattened layer by layer (weights row-major, then bias).
    pub fn parameters(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    pub fn with_parameters(&self, flat: &[F]) -> Result<Self> {
        if flat.len() != self.num_parameters() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_parameters(),
                flat.len()
            )));
        }
        let mut model = self.clone();
        let mut offset = 0;
        for (w, b) in model.weights.iter_mut().zip(model.biases.iter_mut()) {
            for v in w.iter_mut() {
                *v = flat[offset];
                offset += 1;
            }
            for v in b.iter_mut() {
                *v = flat[offset];
                offset += 1;
            }
        }
        Ok(model)
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {len} features, model expects {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// One mask matrix per hidden layer for `rows` rows. Draws run row by
    /// row, and within a row layer by layer, so a row's masks do not depend
    /// on how rows are grouped.
    fn draw_masks<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Option<Vec<Array2<F>>> {
        if self.dropout_rate <= F::zero() {
            return None;
        }
        let p = self.dropout_rate.as_f64();
        let keep_scale = F::one() / (F::one() - self.dropout_rate);
        let widths = &self.layer_sizes[1..self.layer_sizes.len() - 1];
        let mut masks: Vec<Array2<F>> = widths.iter().map(|&w| Array2::zeros((rows, w))).collect();
        for i in 0..rows {
            for m in masks.iter_mut() {
                for v in m.row_mut(i).iter_mut() {
                    *v = if rng.random::<f64>() < p { F::zero() } else { keep_scale };
                }
            }
        }
        Some(masks)
    }

    fn trace(&self, inputs: ArrayView2<F>, masks: Option<Vec<Array2<F>>>) -> Trace<F> {
        let n_layers = self.weights.len();
        let mut layer_inputs = Vec::with_capacity(n_layers);
        let mut pre_activations = Vec::with_capacity(n_layers);
        let mut a = inputs.to_owned();
        for l in 0..n_layers {
            let mut z = a.dot(&self.weights[l].t());
            z += &self.biases[l];
            layer_inputs.push(a);
            if l + 1 == n_layers {
                return Trace {
                    inputs: layer_inputs,
                    pre_activations,
                    masks,
                    output: z,
                };
            }
            let mut h = z.mapv(|v| self.activation.apply(v));
            if let Some(m) = &masks {
                h *= &m[l];
            }
            pre_activations.push(z);
            a = h;
        }
        unreachable!("validated models have at least one layer")
    }

    fn trace_rows<R: Rng + ?Sized>(&self, inputs: ArrayView2<F>, stochastic: bool, rng: &mut R) -> Trace<F> {
        let masks = if stochastic {
            self.draw_masks(inputs.nrows(), rng)
        } else {
            None
        };
        self.trace(inputs, masks)
    }

    /// Apply the network. With `stochastic` off the result depends only on the
    /// parameters and the input; `rng` is not touched.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        input: ArrayView1<F>,
        stochastic: bool,
        rng: &mut R,
    ) -> Result<Array1<F>> {
        self.check_input(input.len())?;
        let out = self.trace_rows(input.insert_axis(Axis(0)), stochastic, rng).output;
        Ok(out.row(0).to_owned())
    }

    /// Deterministic forward pass.
    pub fn predict(&self, input: ArrayView1<F>) -> Result<Array1<F>> {
        self.check_input(input.len())?;
        Ok(self.trace(input.insert_axis(Axis(0)), None).output.row(0).to_owned())
    }

    /// Deterministic predictions for every row.
    pub fn predict_rows(&self, inputs: ArrayView2<F>) -> Result<Array2<F>> {
        self.check_input(inputs.ncols())?;
        Ok(self.trace(inputs, None).output)
    }

    /// Post-dropout hidden activations of every hidden layer.
    pub fn hidden_activations<R: Rng + ?Sized>(
        &self,
        input: ArrayView1<F>,
        stochastic: bool,
        rng: &mut R,
    ) -> Result<Vec<Array1<F>>> {
        self.check_input(input.len())?;
        let trace = self.trace_rows(input.insert_axis(Axis(0)), stochastic, rng);
        Ok(trace.inputs.into_iter().skip(1).map(|a| a.row(0).to_owned()).collect())
    }

    /// Mean and sample standard deviation over `samplings` stochastic passes.
    pub fn mc_predict<R: Rng + ?Sized>(
        &self,
        input: ArrayView1<F>,
        samplings: usize,
        input_index: usize,
        rng: &mut R,
    ) -> Result<UncertainPrediction<F>> {
        if samplings < 2 {
            return Err(Error::Config(format!(
                "MC-dropout needs at least 2 samplings, got {samplings}"
            )));
        }
        self.check_input(input.len())?;
        let m = self.output_dim();
        let passes = input.insert_axis(Axis(0));
        let passes = passes.broadcast((samplings, input.len())).expect("row broadcast");
        let outputs = self.trace_rows(passes, true, rng).output;
        // Welford accumulation
        let mut mean = vec![0.0_f64; m];
        let mut m2 = vec![0.0_f64; m];
        for (s, y) in outputs.rows().into_iter().enumerate() {
            let k = (s + 1) as f64;
            for d in 0..m {
                let v = y[d].as_f64();
                let delta = v - mean[d];
                mean[d] += delta / k;
                m2[d] += delta * (v - mean[d]);
            }
        }
        let denom = (samplings - 1) as f64;
        Ok(UncertainPrediction {
            prediction: mean.iter().map(|&v| F::lit(v)).collect(),
            uncertainty: m2.iter().map(|&v| F::lit((v / denom).max(0.0).sqrt())).collect(),
            input_index,
        })
    }

    /// MC-dropout over every row. Row `i` draws from its own stream derived
    /// from `(seed, i)`, so results do not depend on scheduling.
    pub fn mc_predict_rows(
        &self,
        inputs: ArrayView2<F>,
        samplings: usize,
        seed: u64,
    ) -> Result<Vec<UncertainPrediction<F>>> {
        self.check_input(inputs.ncols())?;
        let rows: Vec<_> = inputs.axis_iter(Axis(0)).collect();
        rows.par_iter()
            .enumerate()
            .map(|(i, row)| {
                let mut r = rng::stream(seed, i as u64);
                self.mc_predict(*row, samplings, i, &mut r)
            })
            .collect()
    }

    fn accumulate_gradient(&self, trace: &Trace<F>, output_delta: Array2<F>, grads: &mut Gradients<F>) {
        let n_layers = self.weights.len();
        let mut delta = output_delta;
        for l in (0..n_layers).rev() {
            grads.weights[l] += &delta.t().dot(&trace.inputs[l]);
            grads.biases[l] += &delta.sum_axis(Axis(0));
            if l == 0 {
                break;
            }
            let mut upstream = delta.dot(&self.weights[l]);
            let hidden = l - 1;
            if let Some(masks) = &trace.masks {
                upstream *= &masks[hidden];
            }
            let act = self.activation;
            upstream.zip_mut_with(&trace.pre_activations[hidden], |u, &z| *u = *u * act.derivative(z));
            delta = upstream;
        }
    }

    /// Batch objective and its gradient with respect to every parameter, with
    /// dropout disabled. Rows with zero weight are skipped entirely.
    pub fn loss_gradient(&self, batch: &TrainingBatch<F>, loss: LossKind) -> Result<(F, Gradients<F>)> {
        let mut unused = rng::seeded(0);
        self.batch_gradient(batch, loss, false, &mut unused)
            .map(|(l, g, _)| (l, g))
    }

    /// As [`Regressor::loss_gradient`] with dropout active. Masks come from
    /// `seed` alone, so repeated calls at different parameters see the same
    /// masks and the objective is a smooth function of the parameters.
    pub fn dropout_loss_gradient(
        &self,
        batch: &TrainingBatch<F>,
        loss: LossKind,
        seed: u64,
    ) -> Result<(F, Gradients<F>)> {
        let mut r = rng::seeded(seed);
        self.batch_gradient(batch, loss, true, &mut r)
            .map(|(l, g, _)| (l, g))
    }

    /// Batch objective with dropout disabled.
    pub fn weighted_loss(&self, batch: &TrainingBatch<F>, loss: LossKind) -> Result<F> {
        self.check_batch(batch)?;
        let b = F::from_usize_lossy(batch.len().max(1));
        let outputs = self.trace(batch.inputs.view(), None).output;
        let mut total = F::zero();
        for i in 0..batch.len() {
            let w = batch.weights[i];
            if w == F::zero() {
                continue;
            }
            total = total + w * loss.value(&outputs.row(i).to_owned(), batch.targets.row(i));
        }
        Ok(total / b)
    }

    fn check_batch(&self, batch: &TrainingBatch<F>) -> Result<()> {
        self.check_input(batch.inputs.ncols())?;
        if batch.targets.ncols() != self.output_dim() {
            return Err(Error::Shape(format!(
                "targets have {} columns, model outputs {}",
                batch.targets.ncols(),
                self.output_dim()
            )));
        }
        Ok(())
    }

    /// Returns (batch objective, gradient, summed weighted loss).
    fn batch_gradient<R: Rng + ?Sized>(
        &self,
        batch: &TrainingBatch<F>,
        loss: LossKind,
        stochastic: bool,
        rng: &mut R,
    ) -> Result<(F, Gradients<F>, F)> {
        self.check_batch(batch)?;
        let b = F::from_usize_lossy(batch.len().max(1));
        let mut grads = Gradients::zeros_like(self);
        let active: Vec<usize> = (0..batch.len()).filter(|&i| batch.weights[i] != F::zero()).collect();
        if active.is_empty() {
            return Ok((F::zero(), grads, F::zero()));
        }
        let inputs = batch.inputs.select(Axis(0), &active);
        let trace = self.trace_rows(inputs.view(), stochastic, rng);
        let mut weighted_sum = F::zero();
        let mut delta = Array2::zeros(trace.output.raw_dim());
        for (k, &i) in active.iter().enumerate() {
            let w = batch.weights[i];
            let out = trace.output.row(k).to_owned();
            let target = batch.targets.row(i);
            weighted_sum = weighted_sum + w * loss.value(&out, target);
            delta.row_mut(k).assign(&loss.output_grad(&out, target).mapv(|g| g * w / b));
        }
        self.accumulate_gradient(&trace, delta, &mut grads);
        Ok((weighted_sum / b, grads, weighted_sum))
    }

    fn apply_step(&mut self, grads: &Gradients<F>, lr: F) {
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            w.scaled_add(-lr, g);
        }
        for (b, g) in self.biases.iter_mut().zip(&grads.biases) {
            b.scaled_add(-lr, g);
        }
    }

    /// Mini-batch gradient descent over `batches` for `config.epochs` epochs
    /// with dropout active. Returns the new model and the mean weighted loss
    /// of each epoch.
    pub fn train(
        &self,
        batches: &[TrainingBatch<F>],
        config: &TrainConfig<F>,
    ) -> Result<(Regressor<F>, Vec<F>)> {
        let outcome = self.train_until(batches, config, |_| false)?;
        Ok((outcome.model, outcome.loss_history))
    }

    /// As [`Regressor::train`], consulting `should_stop` with the loss history
    /// after every epoch.
    pub fn train_until(
        &self,
        batches: &[TrainingBatch<F>],
        config: &TrainConfig<F>,
        mut should_stop: impl FnMut(&[F]) -> bool,
    ) -> Result<TrainOutcome<F>> {
        if !(config.learning_rate > F::zero()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                config.learning_rate
            )));
        }
        if config.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        for b in batches {
            self.check_batch(b)?;
        }
        let total_rows: usize = batches.iter().map(TrainingBatch::len).sum();
        let n = F::from_usize_lossy(total_rows.max(1));
        let mut model = self.clone();
        let mut history = Vec::with_capacity(config.epochs);
        let mut rng = rng::seeded(config.seed);
        for epoch in 1..=config.epochs {
            let mut epoch_sum = F::zero();
            for batch in batches {
                let (objective, grads, weighted_sum) =
                    model.batch_gradient(batch, config.loss, true, &mut rng)?;
                if !objective.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        detail: format!("non-finite loss {objective}"),
                    });
                }
                if !grads.all_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        detail: "non-finite gradient".into(),
                    });
                }
                model.apply_step(&grads, config.learning_rate);
                epoch_sum = epoch_sum + weighted_sum;
            }
            let mean = epoch_sum / n;
            if !mean.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("non-finite epoch loss {mean}"),
                });
            }
            history.push(mean);
            if should_stop(&history) {
                return Ok(TrainOutcome {
                    model,
                    loss_history: history,
                    stopped_at: Some(epoch),
                });
            }
        }
        Ok(TrainOutcome {
            model,
            loss_history: history,
            stopped_at: None,
        })
    }

    /// Serialize to the versioned flat model format.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<model stream>", e);
        w.write_all(MODEL_MAGIC).map_err(io)?;
        w.write_all(&MODEL_FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.layer_sizes.len() as u32).to_le_bytes()).map_err(io)?;
        for &s in &self.layer_sizes {
            w.write_all(&(s as u32).to_le_bytes()).map_err(io)?;
        }
        w.write_all(&self.dropout_rate.as_f64().to_le_bytes()).map_err(io)?;
        w.write_all(&[self.activation.tag()]).map_err(io)?;
        for (wm, b) in self.weights.iter().zip(&self.biases) {
            for v in wm.iter().chain(b.iter()) {
                w.write_all(&v.as_f64().to_le_bytes()).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let io = |e| Error::io("<model stream>", e);
        let mut magic = [0u8; 12];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Schema("not a model file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::Schema(format!("unsupported model format version {version}")));
        }
        let n = read_u32(&mut r)? as usize;
        if n > 1024 {
            return Err(Error::Schema(format!("implausible layer count {n}")));
        }
        let mut sizes = Vec::with_capacity(n);
        for _ in 0..n {
            sizes.push(read_u32(&mut r)? as usize);
        }
        let dropout = F::lit(read_f64(&mut r)?);
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag).map_err(io)?;
        let activation = Activation::from_tag(tag[0])
            .ok_or_else(|| Error::Schema(format!("unknown activation tag {}", tag[0])))?;
        validate_architecture(&sizes, dropout)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let mut wv = Vec::with_capacity(fan_in * fan_out);
            for _ in 0..fan_in * fan_out {
                wv.push(F::lit(read_f64(&mut r)?));
            }
            let mut bv = Vec::with_capacity(fan_out);
            for _ in 0..fan_out {
                bv.push(F::lit(read_f64(&mut r)?));
            }
            weights.push(
                Array2::from_shape_vec((fan_out, fan_in), wv)
                    .map_err(|e| Error::Schema(e.to_string()))?,
            );
            biases.push(Array1::from_vec(bv));
        }
        Self::from_parameters(&sizes, weights, biases, activation, dropout)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io("<model stream>", e))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| Error::io("<model stream>", e))?;
    Ok(f64::from_le_bytes(buf))
}

fn validate_architecture<F: Scalar>(layer_sizes: &[usize], dropout_rate: F) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 layer sizes (input and output), got {}",
            layer_sizes.len()
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::Config("layer sizes must be positive".into()));
    }
    if !(dropout_rate >= F::zero() && dropout_rate < F::one()) {
        return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {dropout_rate}")));
    }
    Ok(())
}
