//! The five-stage convolutional regressor.
//!
//! Each stage is `conv 3x3 (stride 1, same) -> maxpool 2x2 -> batchnorm -> relu`,
//! so every stage halves the spatial extent. Two dense layers follow, with
//! dropout between them. The head emits log wind speed; predictions are its
//! exponential and therefore always positive.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Mode, Padding, RunningStats, Var};
use crate::rng::{stream_rng, streams};
use crate::tensor::{Scalar, Tensor};

pub const CONV_STAGES: usize = 5;
pub const KERNEL: usize = 3;
pub const POOL: usize = 2;
/// Total downsampling of the conv stack, `2^5`.
pub const DOWNSAMPLE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Head {
    /// `log(speed) = fc2 + offset`; the offset is a fixed constant that puts
    /// a freshly initialized network near typical intensities.
    LogSpeed { offset: f64 },
}

impl Default for Head {
    fn default() -> Self {
        Head::LogSpeed {
            offset: DEFAULT_LOG_SPEED_OFFSET,
        }
    }
}

/// `ln(50)`: a fresh network predicts roughly 50 kt.
pub const DEFAULT_LOG_SPEED_OFFSET: f64 = 3.912_023_005_428_146;

fn default_bn_eps() -> f64 {
    1e-5
}

fn default_bn_momentum() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub conv_channels: Vec<usize>,
    pub fc_widths: Vec<usize>,
    pub dropout_rate: f64,
    pub l2_coeff: f64,
    #[serde(default)]
    pub head: Head,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    /// Weight of the old value in the running-statistics average.
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

impl NetworkConfig {
    /// Full-size network for 366 px imagery resized to 352 px (~4.8M parameters).
    pub fn reference() -> Self {
        NetworkConfig {
            input_size: 352,
            conv_channels: vec![64, 128, 192, 192, 128],
            fc_widths: vec![256, 1],
            dropout_rate: 0.5,
            l2_coeff: 1e-4,
            head: Head::default(),
            bn_eps: default_bn_eps(),
            bn_momentum: default_bn_momentum(),
        }
    }

    /// Desk-scale network for 64 px synthetic imagery.
    pub fn small() -> Self {
        NetworkConfig {
            input_size: 64,
            conv_channels: vec![4, 8, 16, 16, 16],
            fc_widths: vec![32, 1],
            dropout_rate: 0.5,
            l2_coeff: 1e-4,
            head: Head::default(),
            bn_eps: default_bn_eps(),
            bn_momentum: default_bn_momentum(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % DOWNSAMPLE != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of {DOWNSAMPLE}",
                self.input_size
            )));
        }
        if self.conv_channels.len() != CONV_STAGES || self.conv_channels.contains(&0) {
            return Err(Error::Config(format!(
                "conv_channels must list {CONV_STAGES} positive widths, got {:?}",
                self.conv_channels
            )));
        }
        if self.fc_widths.len() != 2 || self.fc_widths[0] == 0 || self.fc_widths[1] != 1 {
            return Err(Error::Config(format!(
                "fc_widths must be [hidden, 1] with hidden > 0, got {:?}",
                self.fc_widths
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(self.l2_coeff >= 0.0) {
            return Err(Error::Config(format!("l2_coeff {} must be nonnegative", self.l2_coeff)));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_eps must be positive and bn_momentum in [0, 1]".into()));
        }
        let Head::LogSpeed { offset } = self.head;
        if !offset.is_finite() {
            return Err(Error::Config("head offset must be finite".into()));
        }
        Ok(())
    }

    /// Spatial extent after the conv stack.
    pub fn final_extent(&self) -> usize {
        self.input_size / DOWNSAMPLE
    }

    pub fn flat_features(&self) -> usize {
        self.conv_channels[CONV_STAGES - 1] * self.final_extent() * self.final_extent()
    }

    /// Trainable parameter count from shape arithmetic alone.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut in_ch = 1;
        for &out in &self.conv_channels {
            total += out * in_ch * KERNEL * KERNEL + out; // conv
            total += 2 * out; // bn gamma, beta
            in_ch = out;
        }
        let hidden = self.fc_widths[0];
        total += self.flat_features() * hidden + hidden;
        total += hidden * self.fc_widths[1] + self.fc_widths[1];
        total
    }

    fn log_offset(&self) -> f64 {
        let Head::LogSpeed { offset } = self.head;
        offset
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    /// Conv kernel or dense weight matrix; subject to L2.
    Weight,
    Bias,
    /// Batch-norm gamma or beta.
    Affine,
    /// Batch-norm running mean or variance; not trained.
    RunningStat,
}

impl TensorRole {
    pub fn trainable(self) -> bool {
        self != TensorRole::RunningStat
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvStage<T: Scalar> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running: RunningStats<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    config: NetworkConfig,
    stages: Vec<ConvStage<T>>,
    fc1_weight: Tensor<T>,
    fc1_bias: Tensor<T>,
    fc2_weight: Tensor<T>,
    fc2_bias: Tensor<T>,
    mode: Mode,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    /// Output of each conv stage (after relu) that ran in this pass.
    pub stages: Vec<Var>,
    /// Head output, shape `[N]`.
    pub log_speed: Var,
    /// Trainable tensors, in [`Model::tensors`] order.
    pub trainable: Vec<Var>,
    /// The subset of `trainable` that is L2-regularized.
    pub weights: Vec<Var>,
    /// Batch statistics per stage (train mode only).
    pub batch_stats: Vec<BatchStats<T>>,
}

/// Sum of element counts. Used for trainable-parameter totals.
pub fn count_elements<'a, T: Scalar>(tensors: impl IntoIterator<Item = &'a Tensor<T>>) -> usize {
    tensors.into_iter().map(Tensor::len).sum()
}

fn he_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.random_range(-limit..limit)))
}

impl<T: Scalar> Model<T> {
    /// Fresh network: He-uniform conv/dense weights, zero biases, unit gamma.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, streams::INIT);
        let mut stages = Vec::with_capacity(CONV_STAGES);
        let mut in_ch = 1;
        for &out in &config.conv_channels {
            let fan_in = in_ch * KERNEL * KERNEL;
            stages.push(ConvStage {
                kernel: he_uniform(&[out, in_ch, KERNEL, KERNEL], fan_in, &mut rng),
                bias: Tensor::zeros([out]),
                gamma: Tensor::ones([out]),
                beta: Tensor::zeros([out]),
                running: RunningStats::new(out),
            });
            in_ch = out;
        }
        let flat = config.flat_features();
        let hidden = config.fc_widths[0];
        let fc1_weight = he_uniform(&[flat, hidden], flat, &mut rng);
        let fc2_weight = he_uniform(&[hidden, 1], hidden, &mut rng);
        Ok(Model {
            stages,
            fc1_weight,
            fc1_bias: Tensor::zeros([hidden]),
            fc2_weight,
            fc2_bias: Tensor::zeros([1]),
            mode: Mode::Eval,
            config,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn stages(&self) -> &[ConvStage<T>] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [ConvStage<T>] {
        &mut self.stages
    }

    /// `(fc1 weight, fc1 bias, fc2 weight, fc2 bias)`.
    pub fn head_mut(&mut self) -> (&mut Tensor<T>, &mut Tensor<T>, &mut Tensor<T>, &mut Tensor<T>) {
        (&mut self.fc1_weight, &mut self.fc1_bias, &mut self.fc2_weight, &mut self.fc2_bias)
    }

    /// Every stored tensor in canonical (checkpoint) order.
    pub fn tensors(&self) -> Vec<(String, TensorRole, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            let k = i + 1;
            out.push((format!("conv{k}.kernel"), TensorRole::Weight, &s.kernel));
            out.push((format!("conv{k}.bias"), TensorRole::Bias, &s.bias));
            out.push((format!("bn{k}.gamma"), TensorRole::Affine, &s.gamma));
            out.push((format!("bn{k}.beta"), TensorRole::Affine, &s.beta));
            out.push((format!("bn{k}.running_mean"), TensorRole::RunningStat, &s.running.mean));
            out.push((format!("bn{k}.running_var"), TensorRole::RunningStat, &s.running.var));
        }
        out.push(("fc1.weight".into(), TensorRole::Weight, &self.fc1_weight));
        out.push(("fc1.bias".into(), TensorRole::Bias, &self.fc1_bias));
        out.push(("fc2.weight".into(), TensorRole::Weight, &self.fc2_weight));
        out.push(("fc2.bias".into(), TensorRole::Bias, &self.fc2_bias));
        out
    }

    /// Mutable view in the same order as [`Model::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(TensorRole, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            out.push((TensorRole::Weight, &mut s.kernel));
            out.push((TensorRole::Bias, &mut s.bias));
            out.push((TensorRole::Affine, &mut s.gamma));
            out.push((TensorRole::Affine, &mut s.beta));
            out.push((TensorRole::RunningStat, &mut s.running.mean));
            out.push((TensorRole::RunningStat, &mut s.running.var));
        }
        out.push((TensorRole::Weight, &mut self.fc1_weight));
        out.push((TensorRole::Bias, &mut self.fc1_bias));
        out.push((TensorRole::Weight, &mut self.fc2_weight));
        out.push((TensorRole::Bias, &mut self.fc2_bias));
        out
    }

    /// Trainable tensors, mutable, in [`Trace::trainable`] order.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.tensors_mut()
            .into_iter()
            .filter(|(role, _)| role.trainable())
            .map(|(_, t)| t)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        count_elements(
            self.tensors()
                .into_iter()
                .filter(|(_, role, _)| role.trainable())
                .map(|(_, _, t)| t),
        )
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            stages: self
                .stages
                .iter()
                .map(|s| ConvStage {
                    kernel: s.kernel.cast(),
                    bias: s.bias.cast(),
                    gamma: s.gamma.cast(),
                    beta: s.beta.cast(),
                    running: RunningStats {
                        mean: s.running.mean.cast(),
                        var: s.running.var.cast(),
                    },
                })
                .collect(),
            fc1_weight: self.fc1_weight.cast(),
            fc1_bias: self.fc1_bias.cast(),
            fc2_weight: self.fc2_weight.cast(),
            fc2_bias: self.fc2_bias.cast(),
            mode: self.mode,
        }
    }

    pub(crate) fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(Error::shape(
                "forward",
                "input axes 1,2,3",
                format!("expected [N, 1, {s}, {s}], got {shape:?}"),
            ));
        }
        Ok(())
    }

    /// Expected activation shape after `stage` conv stages, for batch `n`.
    pub fn stage_shape(&self, stage: usize, n: usize) -> Vec<usize> {
        if stage == 0 {
            return vec![n, 1, self.config.input_size, self.config.input_size];
        }
        let extent = self.config.input_size >> stage;
        vec![n, self.config.conv_channels[stage - 1], extent, extent]
    }

    /// Records the full forward pass on `g`. Parameters enter as leaves when
    /// `differentiable`, otherwise as constants.
    pub fn trace<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        input: Var,
        mode: Mode,
        differentiable: bool,
        rng: &mut R,
    ) -> Result<Trace<T>> {
        self.check_input(g.value(input).shape())?;
        self.trace_from(g, 0, input, mode, differentiable, rng)
    }

    /// Runs the network from the output of conv stage `start` (0 = raw input).
    pub fn trace_from<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        start: usize,
        activation: Var,
        mode: Mode,
        differentiable: bool,
        rng: &mut R,
    ) -> Result<Trace<T>> {
        if start > CONV_STAGES {
            return Err(Error::InvalidArgument(format!("stage {start} beyond {CONV_STAGES}")));
        }
        let n = g.value(activation).shape()[0];
        if g.value(activation).shape() != self.stage_shape(start, n) {
            return Err(Error::shape(
                "forward",
                "activation",
                format!(
                    "stage {start} expects {:?}, got {:?}",
                    self.stage_shape(start, n),
                    g.value(activation).shape()
                ),
            ));
        }
        let register = |g: &mut Graph<T>, t: &Tensor<T>| {
            if differentiable {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let eps = T::lit(self.config.bn_eps);
        let mut trace = Trace {
            stages: Vec::new(),
            log_speed: activation,
            trainable: Vec::new(),
            weights: Vec::new(),
            batch_stats: Vec::new(),
        };
        let mut x = activation;
        for (i, stage) in self.stages.iter().enumerate() {
            let k = register(g, &stage.kernel);
            let b = register(g, &stage.bias);
            let gamma = register(g, &stage.gamma);
            let beta = register(g, &stage.beta);
            trace.trainable.extend([k, b, gamma, beta]);
            trace.weights.push(k);
            if i < start {
                continue;
            }
            let c = g.conv2d(x, k, b, 1, Padding::Same)?;
            let p = g.maxpool2d(c, POOL)?;
            let running = match mode {
                Mode::Train => None,
                Mode::Eval => Some((stage.running.mean.data(), stage.running.var.data())),
            };
            let (bn, stats) = g.batch_norm_with(p, gamma, beta, eps, running)?;
            trace.batch_stats.extend(stats);
            x = g.relu(bn);
            trace.stages.push(x);
        }
        let flat = g.reshape(x, [n, self.config.flat_features()])?;
        let w1 = register(g, &self.fc1_weight);
        let b1 = register(g, &self.fc1_bias);
        let w2 = register(g, &self.fc2_weight);
        let b2 = register(g, &self.fc2_bias);
        trace.trainable.extend([w1, b1, w2, b2]);
        trace.weights.extend([w1, w2]);
        let h = g.dense(flat, w1, b1)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.config.dropout_rate, mode, rng)?;
        let out = g.dense(h, w2, b2)?;
        let out = g.reshape(out, [n])?;
        trace.log_speed = g.add_scalar(out, T::lit(self.config.log_offset()));
        Ok(trace)
    }

    /// Folds one batch's statistics into the running averages.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats<T>]) {
        let momentum = T::lit(self.config.bn_momentum);
        for (stage, s) in self.stages.iter_mut().zip(stats) {
            stage.running.update(s, momentum);
        }
    }

    /// Predicted wind speeds (knots) for a `[N, 1, S, S]` batch. Train mode
    /// uses batch statistics and dropout, and updates the running statistics.
    pub fn forward<R: Rng + ?Sized>(&mut self, batch: &Tensor<T>, mode: Mode, rng: &mut R) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let trace = self.trace(&mut g, x, mode, false, rng)?;
        if mode == Mode::Train {
            self.apply_batch_stats(&trace.batch_stats);
        }
        Ok(g.value(trace.log_speed).data().iter().map(|v| v.exp()).collect())
    }

    /// Eval-mode prediction; never mutates the model.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.predict_log(batch)?.into_iter().map(|v| v.exp()).collect())
    }

    /// Eval-mode head output (log knots).
    pub fn predict_log(&self, batch: &Tensor<T>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let mut unused = stream_rng(0, 0);
        let trace = self.trace(&mut g, x, Mode::Eval, false, &mut unused)?;
        Ok(g.value(trace.log_speed).data().to_vec())
    }
}
