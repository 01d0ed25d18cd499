//! Mini-batch multi-task training with Adam.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffkit::Tensor;
use crate::featurize::ClaimVector;
use crate::ingest::TargetVector;
use crate::model::{attach_loss, forward, ModelConfig, ModelError, NetworkParams};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training data is empty")]
    EmptyData,
    #[error("invalid train configuration: {0}")]
    InvalidConfig(String),
    #[error("missing gradient for parameter \"{0}\"")]
    MissingGradient(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (bce={bce}, cce_claim={cce_claim}, cce_service={cce_service}, l1={l1})")]
    NonFinite { epoch: usize, batch: usize, bce: f64, cce_claim: f64, cce_service: f64, l1: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 128,
            epochs: 30,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 {
            return Err(TrainError::InvalidConfig("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::InvalidConfig("betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Adam first/second moments per parameter plus the shared step counter.
#[derive(Debug, Default)]
pub struct OptimizerState {
    moments: BTreeMap<String, (Tensor, Tensor)>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One Adam update with bias correction over every parameter tensor.
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let mut missing: Option<String> = None;
    let moments = &mut state.moments;
    params.visit_mut(&mut |name, tensor| {
        if missing.is_some() {
            return;
        }
        let Some(grad) = grads.get(&name) else {
            missing = Some(name);
            return;
        };
        let (m, v) = moments
            .entry(name)
            .or_insert_with(|| (Tensor::zeros(tensor.shape().to_vec()), Tensor::zeros(tensor.shape().to_vec())));
        for ((p, &g), (m, v)) in tensor
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *m = config.beta1 * *m + (1.0 - config.beta1) * g;
            *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    });
    match missing {
        Some(name) => Err(TrainError::MissingGradient(name)),
        None => Ok(()),
    }
}

/// Epoch-mean loss components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub bce: f64,
    pub cce_claim: f64,
    pub cce_service: f64,
    pub l1: f64,
    pub total: f64,
}

/// Train over shuffled mini-batches. Returns the final parameters (with BN
/// running statistics folded in) and the per-epoch loss trace.
pub fn train(
    data: &[(ClaimVector, TargetVector)],
    params: NetworkParams,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(NetworkParams, Vec<EpochLoss>), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    train_config.validate()?;

    let mut params = params;
    let mut opt = OptimizerState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.shuffle_seed);
    let mut trace = Vec::with_capacity(train_config.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..train_config.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 5];
        for (batch_no, chunk) in order.chunks(train_config.batch_size).enumerate() {
            let batch: Vec<&ClaimVector> = chunk.iter().map(|&i| &data[i].0).collect();
            let targets: Vec<&TargetVector> = chunk.iter().map(|&i| &data[i].1).collect();

            let mut pass =
                forward(&params, model_config, &batch, crate::diffkit::Mode::Train)?;
            let loss = attach_loss(&mut pass, &targets, model_config.lambda)?;
            let components = [
                pass.graph.value(loss.bce).item(),
                pass.graph.value(loss.cce_claim).item(),
                pass.graph.value(loss.cce_service).item(),
                pass.graph.value(loss.l1).item(),
                pass.graph.value(loss.total).item(),
            ];
            if !components[4].is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: batch_no,
                    bce: components[0],
                    cce_claim: components[1],
                    cce_service: components[2],
                    l1: components[3],
                });
            }
            let grads = pass.graph.backward(loss.total, false).map_err(ModelError::from)?;
            let grad_map = grads.param_map(&pass.graph);
            adam_step(&mut params, &grad_map, &mut opt, train_config)?;
            if let NetworkParams::Deep(deep) = &mut params {
                for (j, stats) in &pass.bn_stats {
                    deep.fusion.bn[*j].update_running(&stats.mean, &stats.var);
                }
            }
            let w = chunk.len() as f64;
            for (s, c) in sums.iter_mut().zip(components) {
                *s += c * w;
            }
        }
        let n = data.len() as f64;
        trace.push(EpochLoss {
            epoch,
            bce: sums[0] / n,
            cce_claim: sums[1] / n,
            cce_service: sums[2] / n,
            l1: sums[3] / n,
            total: sums[4] / n,
        });
    }
    Ok((params, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::SparseVec;
    use crate::model::{init_network, Variant};

    fn tiny_config(lambda: [f64; 3]) -> ModelConfig {
        ModelConfig {
            context_dim: 6,
            embed_dim: 5,
            shared_layers: 2,
            towers: false,
            gates_enabled: true,
            multipliers_enabled: true,
            lambda,
            class_counts: [2, 2],
            seed: 5,
        }
    }

    const DIMS: [usize; 3] = [4, 3, 5];

    /// Separable toy task: x_o index 0 set ⇒ denied, index 1 set ⇒ paid.
    fn separable_data(n: usize) -> Vec<(ClaimVector, TargetVector)> {
        (0..n)
            .map(|i| {
                let denied = i % 3 == 0;
                let proc_idx = i % DIMS[0];
                let flag = if denied { 0 } else { 1 };
                let cv = ClaimVector {
                    x_c: SparseVec { dim: DIMS[0], entries: vec![(proc_idx, 1.0)] },
                    x_d: SparseVec { dim: DIMS[1], entries: vec![(i % DIMS[1], 1.0)] },
                    x_o: SparseVec { dim: DIMS[2], entries: vec![(flag, 1.0), (2 + i % 3, 1.0)] },
                };
                let target = TargetVector {
                    y0: if denied { 1.0 } else { 0.0 },
                    y1: if denied { vec![1.0, 0.0] } else { vec![0.0, 1.0] },
                    y2: if denied { vec![1.0, 0.0] } else { vec![0.0, 1.0] },
                    y3: if denied { 7.0 } else { 3.0 },
                };
                (cv, target)
            })
            .collect()
    }

    fn scalar_params() -> NetworkParams {
        // The smallest valid network; adam tests only need named tensors.
        let config = ModelConfig {
            context_dim: 1,
            embed_dim: 1,
            shared_layers: 0,
            towers: false,
            gates_enabled: false,
            multipliers_enabled: false,
            lambda: [1.0, 1.0, 0.01],
            class_counts: [2, 2],
            seed: 1,
        };
        init_network(Variant::NoGates, &config, [1, 1, 1])
    }

    fn grads_like(params: &NetworkParams, value: f64) -> BTreeMap<String, Tensor> {
        let mut map = BTreeMap::new();
        params.visit(&mut |name, t| {
            map.insert(name, Tensor::filled(t.shape().to_vec(), value));
        });
        map
    }

    #[test]
    fn zero_gradients_leave_parameters_fixed() {
        let mut params = scalar_params();
        let before = params.clone();
        let grads = grads_like(&params, 0.0);
        let mut state = OptimizerState::new();
        adam_step(&mut params, &grads, &mut state, &TrainConfig::default()).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = scalar_params();
        let before = params.clone();
        let grads = grads_like(&params, 3.7);
        let mut state = OptimizerState::new();
        let config = TrainConfig::default();
        adam_step(&mut params, &grads, &mut state, &config).unwrap();
        let mut before_vals = Vec::new();
        before.visit(&mut |_, t| before_vals.extend_from_slice(t.data()));
        let mut after_vals = Vec::new();
        params.visit(&mut |_, t| after_vals.extend_from_slice(t.data()));
        for (b, a) in before_vals.iter().zip(&after_vals) {
            assert!(((b - a) - config.learning_rate).abs() < 1e-9, "step was {}", b - a);
        }
    }

    #[test]
    fn two_constant_steps_decrease_by_twice_the_rate() {
        let mut params = scalar_params();
        let before = params.clone();
        let grads = grads_like(&params, 1.0);
        let mut state = OptimizerState::new();
        let config = TrainConfig::default();
        adam_step(&mut params, &grads, &mut state, &config).unwrap();
        adam_step(&mut params, &grads, &mut state, &config).unwrap();
        let mut total_before = 0.0;
        before.visit(&mut |_, t| total_before += t.data().iter().sum::<f64>());
        let mut total_after = 0.0;
        params.visit(&mut |_, t| total_after += t.data().iter().sum::<f64>());
        let n = before.param_count() as f64;
        let per_param = (total_before - total_after) / n;
        assert!((per_param - 0.002).abs() < 1e-6, "got {per_param}");
    }

    #[test]
    fn missing_gradient_key_is_an_error() {
        let mut params = scalar_params();
        let mut grads = grads_like(&params, 0.5);
        grads.remove("head_days.b");
        let mut state = OptimizerState::new();
        let err = adam_step(&mut params, &grads, &mut state, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::MissingGradient(ref n) if n == "head_days.b"));
    }

    #[test]
    fn zero_epochs_return_initial_params_and_empty_trace() {
        let config = tiny_config([1.0, 1.0, 0.01]);
        let params = init_network(Variant::DeepClaim2, &config, DIMS);
        let initial = params.clone();
        let data = separable_data(10);
        let tc = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let (out, trace) = train(&data, params, &config, &tc).unwrap();
        assert_eq!(out, initial);
        assert!(trace.is_empty());
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let config = tiny_config([1.0, 1.0, 0.01]);
        let data = separable_data(30);
        let tc = TrainConfig { epochs: 3, batch_size: 8, ..TrainConfig::default() };
        let run = || {
            let params = init_network(Variant::DeepClaim2, &config, DIMS);
            train(&data, params, &config, &tc).unwrap()
        };
        let (p1, t1) = run();
        let (p2, t2) = run();
        assert_eq!(p1, p2);
        assert_eq!(t1, t2);
    }

    #[test]
    fn separable_data_halves_the_loss_within_twenty_epochs() {
        let config = tiny_config([1.0, 1.0, 0.01]);
        let data = separable_data(200);
        let params = init_network(Variant::DeepClaim2, &config, DIMS);
        let tc = TrainConfig { epochs: 20, batch_size: 32, ..TrainConfig::default() };
        let (_, trace) = train(&data, params, &config, &tc).unwrap();
        let first = trace.first().unwrap().total;
        let last = trace.last().unwrap().total;
        assert!(last < first, "loss should trend down: {first} -> {last}");
        assert!(last <= 0.5 * first, "expected ≥50% decrease, got {first} -> {last}");
    }

    #[test]
    fn empty_data_is_an_error() {
        let config = tiny_config([1.0, 1.0, 0.01]);
        let params = init_network(Variant::DeepClaim2, &config, DIMS);
        assert!(matches!(
            train(&[], params, &config, &TrainConfig::default()),
            Err(TrainError::EmptyData)
        ));
    }

    #[test]
    fn poisoned_parameters_abort_with_diagnostics() {
        let config = tiny_config([1.0, 1.0, 0.01]);
        let mut params = init_network(Variant::DeepClaim2, &config, DIMS);
        params.visit_mut(&mut |name, t| {
            if name == "ctx_c.l0.w_f" {
                t.data_mut()[0] = f64::INFINITY;
            }
        });
        let data = separable_data(8);
        let tc = TrainConfig { epochs: 1, batch_size: 8, ..TrainConfig::default() };
        let err = train(&data, params, &config, &tc).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { epoch: 0, batch: 0, .. }), "{err}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_lr = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        assert!(bad_lr.validate().is_err());
        let bad_beta = TrainConfig { beta1: 1.0, ..TrainConfig::default() };
        assert!(bad_beta.validate().is_err());
        let bad_batch = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(bad_batch.validate().is_err());
    }
}
