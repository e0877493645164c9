//! MSLE loss, L2 penalty, Adam and the training loop.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{BatchSampler, DatasetIndex, SamplerConfig};
use crate::error::{Error, Result};
use crate::eval;
use crate::graph::{Graph, Mode, Var};
use crate::network::{Model, NetworkConfig, TensorRole};
use crate::predict::SpeedPredictor;
use crate::rng::{stream_rng, streams};
use crate::tensor::{Scalar, Tensor};

fn check_positive(name: &str, values: &[f64]) -> Result<()> {
    if let Some(bad) = values.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::InvalidArgument(format!("msle: {name} contains nonpositive value {bad}")));
    }
    Ok(())
}

/// `(1/N) sum (ln yhat_i - ln y_i)^2`.
pub fn msle(yhat: &[f64], y: &[f64]) -> Result<f64> {
    if yhat.len() != y.len() || y.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "msle needs equal nonempty inputs, got {} and {}",
            yhat.len(),
            y.len()
        )));
    }
    check_positive("predictions", yhat)?;
    check_positive("targets", y)?;
    let sum: f64 = yhat.iter().zip(y).map(|(a, b)| (a.ln() - b.ln()).powi(2)).sum();
    Ok(sum / y.len() as f64)
}

/// MSLE on the graph with predictions in knots.
pub fn msle_graph<T: Scalar>(g: &mut Graph<T>, yhat: Var, y: &[T]) -> Result<Var> {
    if g.value(yhat).len() != y.len() || y.is_empty() {
        return Err(Error::InvalidArgument("msle: prediction/target length mismatch".into()));
    }
    if y.iter().any(|v| !(*v > T::zero())) {
        return Err(Error::InvalidArgument("msle: targets must be positive".into()));
    }
    let log_pred = g.log(yhat)?;
    let shape = g.value(yhat).shape().to_vec();
    let targets = g.constant(Tensor::new(shape, y.iter().map(|v| v.ln()).collect())?);
    let diff = g.sub(log_pred, targets)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// MSLE when the network already emits `ln(yhat)`: plain mean squared error
/// against `ln(y)`.
pub fn log_space_msle<T: Scalar>(g: &mut Graph<T>, log_pred: Var, y: &[T]) -> Result<Var> {
    if y.iter().any(|v| !(*v > T::zero())) {
        return Err(Error::InvalidArgument("msle: targets must be positive".into()));
    }
    let shape = g.value(log_pred).shape().to_vec();
    let targets = g.constant(Tensor::new(shape, y.iter().map(|v| v.ln()).collect())?);
    let diff = g.sub(log_pred, targets)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// `coeff * sum w^2` over conv kernels and dense weights (biases and
/// batch-norm parameters excluded).
pub fn l2_penalty<T: Scalar>(model: &Model<T>, coeff: f64) -> f64 {
    if coeff == 0.0 {
        return 0.0;
    }
    let sum: f64 = model
        .tensors()
        .into_iter()
        .filter(|(_, role, _)| *role == TensorRole::Weight)
        .map(|(_, _, t)| t.data().iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>())
        .sum();
    coeff * sum
}

/// `coeff * sum_w sum(w^2)` on the graph; `None` when there is nothing to add.
pub fn l2_graph<T: Scalar>(g: &mut Graph<T>, weights: &[Var], coeff: f64) -> Result<Option<Var>> {
    if coeff == 0.0 || weights.is_empty() {
        return Ok(None);
    }
    let mut total = g.sum_squares(weights[0]);
    for &w in &weights[1..] {
        let s = g.sum_squares(w);
        total = g.add(total, s)?;
    }
    Ok(Some(g.scale(total, T::lit(coeff))))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Scalar>(params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            "adam_step",
            "parameter list",
            format!("{} parameters, {} gradients", params.len(), grads.len()),
        ));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(Error::shape("adam_step", "state", "moment count differs from parameter count"));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape(
                "adam_step",
                format!("tensor {i}"),
                format!("param {:?}, grad {:?}, state {:?}", p.shape(), g.shape(), state.m[i].shape()),
            ));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let b1 = T::lit(c.beta1);
    let b2 = T::lit(c.beta2);
    let one = T::one();
    let correction1 = T::lit(1.0 - c.beta1.powi(t));
    let correction2 = T::lit(1.0 - c.beta2.powi(t));
    let lr = T::lit(c.learning_rate);
    let eps = T::lit(c.epsilon);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / correction1;
            let v_hat = *vi / correction2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Sampled batches per epoch; default `ceil(images / batch size)`.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Stop after this many epochs without validation improvement and keep
    /// the best weights. Off when `None`.
    #[serde(default)]
    pub early_stopping_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            steps_per_epoch: None,
            adam: AdamConfig::default(),
            early_stopping_patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be >= 1".into()));
        }
        let a = &self.adam;
        if !(a.learning_rate >= 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return Err(Error::Config(format!("invalid Adam hyperparameters {a:?}")));
        }
        if self.early_stopping_patience == Some(0) {
            return Err(Error::Config("early_stopping_patience must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean MSLE (without the L2 term) over the epoch's batches.
    pub train_msle: f64,
    pub val_rmse: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("epoch,train_msle,val_rmse,seconds\n");
        for r in &self.epochs {
            let val = r.val_rmse.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{:.3}\n", r.epoch, r.train_msle, val, r.seconds));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn final_val_rmse(&self) -> Option<f64> {
        self.epochs.last().and_then(|r| r.val_rmse)
    }
}

/// Minimizes MSLE + L2 over batches drawn by `sampler`. Deterministic in
/// `seed`; leaves the model in eval mode.
pub fn train(
    model: &mut Model<f32>,
    sampler: &BatchSampler<'_>,
    config: &TrainConfig,
    val: Option<&DatasetIndex>,
    seed: u64,
) -> Result<TrainReport> {
    config.validate()?;
    let size = model.config().input_size;
    let l2 = model.config().l2_coeff;
    let steps = config
        .steps_per_epoch
        .unwrap_or_else(|| sampler.index().len().div_ceil(sampler.batch_size()));
    let mut sampler_rng = stream_rng(seed, streams::SAMPLER);
    let mut dropout_rng = stream_rng(seed, streams::DROPOUT);
    let mut adam = AdamState::<f32>::new(config.adam);
    let mut report = TrainReport::default();
    let mut best: Option<(f64, Model<f32>)> = None;
    let mut since_best = 0;

    model.set_mode(Mode::Train);
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        for step in 1..=steps {
            let batch = sampler.sample(&mut sampler_rng);
            let mut g = Graph::new();
            let x = g.constant(batch.to_tensor(size));
            let trace = model.trace(&mut g, x, Mode::Train, true, &mut dropout_rng)?;
            let data_loss = log_space_msle(&mut g, trace.log_speed, &batch.speeds)?;
            let loss = match l2_graph(&mut g, &trace.weights, l2)? {
                Some(penalty) => g.add(data_loss, penalty)?,
                None => data_loss,
            };
            let value = g.value(loss).item().unwrap_or(f32::NAN);
            if !value.is_finite() {
                model.set_mode(Mode::Eval);
                return Err(Error::NonFinite { epoch, step });
            }
            loss_sum += g.value(data_loss).item().unwrap_or(f32::NAN) as f64;
            let grads = g.backward(loss)?;
            let grad_refs: Vec<&Tensor<f32>> = trace
                .trainable
                .iter()
                .map(|&v| grads.get(v).expect("parameter gradient"))
                .collect();
            let mut params = model.trainable_mut();
            adam_step(&mut params, &grad_refs, &mut adam)?;
            model.apply_batch_stats(&trace.batch_stats);
        }
        let val_rmse = match val {
            Some(v) if !v.is_empty() => {
                model.set_mode(Mode::Eval);
                let preds = model.predict_speeds(&v.samples().iter().map(|s| s.image.as_ref()).collect::<Vec<_>>())?;
                model.set_mode(Mode::Train);
                let pred: Vec<f64> = preds.iter().map(|&p| p as f64).collect();
                let truth: Vec<f64> = v.samples().iter().map(|s| s.wind_speed as f64).collect();
                Some(eval::rmse(&pred, &truth)?)
            }
            _ => None,
        };
        report.epochs.push(EpochRecord {
            epoch,
            train_msle: loss_sum / steps as f64,
            val_rmse,
            seconds: started.elapsed().as_secs_f64(),
        });
        if let (Some(patience), Some(rmse)) = (config.early_stopping_patience, val_rmse) {
            if best.as_ref().map_or(true, |(b, _)| rmse < *b) {
                best = Some((rmse, model.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    report.stopped_early = true;
                    break;
                }
            }
        }
    }
    if report.stopped_early {
        if let Some((_, m)) = best {
            *model = m;
        }
    }
    model.set_mode(Mode::Eval);
    Ok(report)
}

/// Everything needed to train one network from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingHyper {
    pub network: NetworkConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl TrainingHyper {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.sampler.validate()?;
        self.train.validate()
    }
}

/// Builds and trains a fresh model on `index`; `seed` drives init, sampling
/// and dropout.
pub fn train_model(
    index: &DatasetIndex,
    hyper: &TrainingHyper,
    val: Option<&DatasetIndex>,
    seed: u64,
) -> Result<(Model<f32>, TrainReport)> {
    hyper.validate()?;
    let mut model = Model::build(hyper.network.clone(), seed)?;
    let sampler = BatchSampler::new(index, hyper.sampler.clone())?;
    let report = train(&mut model, &sampler, &hyper.train, val, seed)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    #[test]
    fn msle_examples() {
        assert_eq!(msle(&[3.0, 7.0], &[3.0, 7.0]).unwrap(), 0.0);
        assert!((msle(&[std::f64::consts::E], &[1.0]).unwrap() - 1.0).abs() < 1e-15);
        let v = msle(&[20.0, 50.0], &[10.0, 100.0]).unwrap();
        let expect = (2f64.ln().powi(2) + 0.5f64.ln().powi(2)) / 2.0;
        assert!((v - expect).abs() < 1e-15);
        assert!((v - 0.480453).abs() < 1e-6);
    }

    #[test]
    fn msle_rejects_nonpositive() {
        assert!(msle(&[0.0], &[1.0]).is_err());
        assert!(msle(&[1.0], &[-1.0]).is_err());
        assert!(msle(&[], &[]).is_err());
        let mut g = Graph::<f64>::new();
        let p = g.leaf(Tensor::new([2], vec![1.0, -1.0]).unwrap());
        assert!(msle_graph(&mut g, p, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn msle_graph_matches_formula_and_gradient() {
        let yhat = [20.0, 50.0, 33.0];
        let y = [10.0, 100.0, 30.0];
        let mut g = Graph::<f64>::new();
        let p = g.leaf(Tensor::new([3], yhat.to_vec()).unwrap());
        let l = msle_graph(&mut g, p, &y).unwrap();
        assert!((g.value(l).item().unwrap() - msle(&yhat, &y).unwrap()).abs() < 1e-15);
        let check = grad_check(&[Tensor::new([3], yhat.to_vec()).unwrap()], 1e-6, |g, v| msle_graph(g, v[0], &y)).unwrap();
        assert!(check.passes(1e-6), "{check:?}");
    }

    #[test]
    fn l2_examples() {
        let m = Model::<f32>::build(NetworkConfig::small(), 0).unwrap();
        assert_eq!(l2_penalty(&m, 0.0), 0.0);
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::new([3], vec![1.0, 2.0, 2.0]).unwrap());
        let p = l2_graph(&mut g, &[w], 0.1).unwrap().unwrap();
        assert!((g.value(p).item().unwrap() - 0.9).abs() < 1e-12);

        let mut changed = m.clone();
        for s in changed.stages_mut() {
            s.gamma = s.gamma.map(|v| v * 3.0);
            s.beta = s.beta.map(|v| v + 1.0);
        }
        assert_eq!(l2_penalty(&m, 0.5), l2_penalty(&changed, 0.5));
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = Tensor::new([3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros([3]);
        let mut st = AdamState::new(AdamConfig::default());
        for _ in 0..3 {
            adam_step(&mut [&mut p], &[&g], &mut st).unwrap();
        }
        assert_eq!(p, before);
        assert!(st.m[0].data().iter().all(|&v| v == 0.0));
        assert!(st.v[0].data().iter().all(|&v| v == 0.0));
        assert_eq!(st.step, 3);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = Tensor::scalar(0.0f64);
        let g = Tensor::scalar(1.0f64);
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut [&mut p], &[&g], &mut st).unwrap();
        assert!((p.data()[0] + 0.001).abs() < 1e-10);
    }

    #[test]
    fn adam_two_steps_on_quadratic_match_unrolled_oracle() {
        let c = AdamConfig::default();
        let (mut theta, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            let g = 2.0 * theta;
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let mh = m / (1.0 - c.beta1.powi(t));
            let vh = v / (1.0 - c.beta2.powi(t));
            theta -= c.learning_rate * mh / (vh.sqrt() + c.epsilon);
        }
        let mut p = Tensor::scalar(1.5f64);
        let mut st = AdamState::new(c);
        for _ in 0..2 {
            let g = Tensor::scalar(2.0 * p.data()[0]);
            adam_step(&mut [&mut p], &[&g], &mut st).unwrap();
        }
        assert!((p.data()[0] - theta).abs() < 1e-12);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = Tensor::<f64>::zeros([2]);
        let g = Tensor::<f64>::zeros([3]);
        let mut st = AdamState::new(AdamConfig::default());
        assert!(adam_step(&mut [&mut p], &[&g], &mut st).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn first_update_bounded_by_learning_rate(g in -1e3f64..1e3, lr in 1e-5f64..1e-1) {
                let c = AdamConfig { learning_rate: lr, ..AdamConfig::default() };
                let mut p = Tensor::scalar(0.0f64);
                let mut st = AdamState::new(c);
                adam_step(&mut [&mut p], &[&Tensor::scalar(g)], &mut st).unwrap();
                prop_assert!(p.data()[0].abs() <= lr * (1.0 + 1e-12));
            }
        }
    }
}
