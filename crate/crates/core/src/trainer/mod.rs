//! Datasets, penalty-loss training with Adam, evaluation and checkpoints.

mod checkpoint;
mod loss;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{loss_terms, LossTerms};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor};
use crate::metrics::{evaluate_decision, MetricsError, MetricsRecord};
use crate::network::{batch_input, forward, infer, init_params, NetworkConfig, NetworkError, NetworkParams, Variant};
use crate::scenario::{sample_scenario, Channels, Scenario, ScenarioError, SystemConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss {value} at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, value: f64 },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TrainError {
    /// Failures caused by numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            TrainError::NonFinite { .. } => true,
            TrainError::Autodiff(e) => {
                matches!(e, AutodiffError::NotPositiveDefinite { .. } | AutodiffError::Singular { .. })
            }
            TrainError::Network(NetworkError::Autodiff(e)) => {
                matches!(e, AutodiffError::NotPositiveDefinite { .. } | AutodiffError::Singular { .. })
            }
            TrainError::Metrics(e) => {
                matches!(e, MetricsError::NonPdInterference { .. } | MetricsError::SingularCovariance)
            }
            _ => false,
        }
    }
}

/// Optimizer, dataset and sweep settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub train_size: usize,
    pub test_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub data_seed: u64,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    /// P_max values (W) for the power sweep.
    pub p_max_list: Vec<f64>,
    /// γ₀ values for the sensing-threshold sweep.
    pub gamma_list: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Minutes-scale defaults.
    pub fn desk() -> Self {
        Self {
            train_size: 2000,
            test_size: 500,
            batch_size: 50,
            epochs: 300,
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            data_seed: 0,
            init_seed: 0,
            shuffle_seed: 0,
            p_max_list: vec![0.01, 0.1, 1.0],
            gamma_list: vec![0.001, 0.01, 0.1],
        }
    }

    /// Dataset sizes and batch size of the full-scale setup.
    pub fn full() -> Self {
        Self { train_size: 50_000, test_size: 10_000, batch_size: 150, ..Self::desk() }
    }

    /// Sets all three seeds to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data_seed = seed;
        self.init_seed = seed;
        self.shuffle_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.train_size == 0 || self.test_size == 0 {
            return bad("dataset sizes must be positive");
        }
        if self.batch_size == 0 || self.batch_size > self.train_size {
            return bad("batch size must be in 1..=train_size");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("Adam epsilon must be positive");
        }
        if self.p_max_list.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
            return bad("P_max values must be positive");
        }
        if self.gamma_list.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return bad("gamma0 values must be non-negative");
        }
        Ok(())
    }
}

/// Which dataset stream a scenario belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of scenario `index` in the `split` stream of base seed `seed`.
pub fn derive_seed(seed: u64, split: Split, index: u64) -> u64 {
    let tag = match split {
        Split::Train => 0x7472_6169_6e00_0000,
        Split::Test => 0x7465_7374_0000_0000,
    };
    mix(mix(mix(seed) ^ tag) ^ index)
}

/// `n` scenarios from independent per-index seeds.
pub fn make_dataset(cfg: &SystemConfig, seed: u64, n: usize, split: Split) -> Vec<Scenario> {
    (0..n as u64).map(|i| sample_scenario(cfg, derive_seed(seed, split, i))).collect()
}

/// Adam moments and step counter, one moment tensor per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        let zeros: Vec<Tensor> = params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &[Tensor],
    state: &mut AdamState,
    tc: &TrainConfig,
) -> Result<(), TrainError> {
    if grads.len() != params.tensors.len() || state.m.len() != params.tensors.len() {
        return Err(TrainError::Config("gradient count does not match parameters".into()));
    }
    for ((p, g), (m, v)) in params.tensors.iter().zip(grads).zip(state.m.iter().zip(&state.v)) {
        if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
            return Err(TrainError::Config(format!("shape mismatch {:?} vs {:?}", p.shape(), g.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - tc.beta1.powi(t);
    let c2 = 1.0 - tc.beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let (p, m, v) = (params.tensors[i].data_mut(), state.m[i].data_mut(), state.v[i].data_mut());
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = tc.beta1 * m[j] + (1.0 - tc.beta1) * gj;
            v[j] = tc.beta2 * v[j] + (1.0 - tc.beta2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p[j] -= tc.learning_rate * mh / (vh.sqrt() + tc.epsilon);
        }
    }
    Ok(())
}

/// Per-epoch training statistics (sample means).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_sum_rate: f64,
    pub spacing_penalty: f64,
    pub sinr_penalty: f64,
    /// PA offsets predicted for the first sample of the epoch's first batch.
    pub pa_y: Vec<f64>,
    /// MA coordinates predicted for that sample.
    pub ma: Vec<f64>,
}

/// Scalar sums of one batch's loss terms.
#[derive(Debug, Clone, Copy, Default)]
struct BatchSums {
    loss: f64,
    sum_rate: f64,
    spacing: f64,
    sinr: f64,
}

/// Builds the batch graph, returns the mean loss gradients and the batch sums.
fn batch_gradients(
    params: &NetworkParams,
    batch: &[&Scenario],
    input: Tensor,
    sys: &SystemConfig,
    ncfg: &NetworkConfig,
    variant: Variant,
) -> Result<(Vec<Tensor>, BatchSums, Vec<f64>, Vec<f64>), TrainError> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, true);
    let x = g.constant(input);
    let out = forward(&mut g, x, &vars, ncfg, variant)?;
    let terms = loss_terms(&mut g, &out, batch, sys)?;
    let root = g.mean(terms.total);
    let sum = |v| g.value(v).data().iter().sum::<f64>();
    let sums = BatchSums {
        loss: sum(terms.total),
        sum_rate: sum(terms.sum_rate),
        spacing: sum(terms.spacing_penalty),
        sinr: sum(terms.sinr_penalty),
    };
    let pa_y = g.value(out.y_t).data()[..ncfg.n_tx].to_vec();
    let ma = g.value(out.ma).data()[..ncfg.ma_head].to_vec();
    let loss = g.value(root).item();
    if !loss.is_finite() {
        return Ok((Vec::new(), BatchSums { loss, ..sums }, pa_y, ma));
    }
    let mut grads = g.backward(root)?;
    let grads = vars.iter().map(|v| grads.take(*v).expect("parameter gradient")).collect();
    Ok((grads, sums, pa_y, ma))
}

/// Mean loss, its gradient with respect to every parameter, for one batch.
/// Used by gradient checks and diagnostics.
pub fn loss_and_gradients(
    params: &NetworkParams,
    batch: &[&Scenario],
    sys: &SystemConfig,
    variant: Variant,
) -> Result<(f64, Vec<Tensor>), TrainError> {
    let ncfg = NetworkConfig::from_system(sys);
    let input = batch_input(batch, sys)?;
    let (grads, sums, _, _) = batch_gradients(params, batch, input, sys, &ncfg, variant)?;
    Ok((sums.loss / batch.len() as f64, grads))
}

/// Mean batch loss as a graph over caller-supplied parameter leaves.
pub fn mean_loss_graph(
    g: &mut Graph,
    params: &[crate::autodiff::Var],
    batch: &[&Scenario],
    sys: &SystemConfig,
    variant: Variant,
) -> Result<crate::autodiff::Var, TrainError> {
    let ncfg = NetworkConfig::from_system(sys);
    let x = g.constant(batch_input(batch, sys)?);
    let out = forward(g, x, params, &ncfg, variant)?;
    let terms = loss_terms(g, &out, batch, sys)?;
    Ok(g.mean(terms.total))
}

/// Runs training and reports every finished epoch to `on_epoch`.
pub fn train_observed(
    sys: &SystemConfig,
    tc: &TrainConfig,
    variant: Variant,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Checkpoint, Vec<EpochRecord>), TrainError> {
    sys.validate()?;
    tc.validate()?;
    let ncfg = NetworkConfig::from_system(sys);
    let data = make_dataset(sys, tc.data_seed, tc.train_size, Split::Train);
    let inputs: Vec<Vec<f64>> = data
        .iter()
        .map(|s| crate::network::assemble_and_preprocess(s, sys))
        .collect::<Result<_, _>>()?;
    let mut params = init_params(&ncfg, tc.init_seed);
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.shuffle_seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut acc = BatchSums::default();
        let mut first = None;
        for (bi, idx) in order.chunks(tc.batch_size).enumerate() {
            let batch: Vec<&Scenario> = idx.iter().map(|&i| &data[i]).collect();
            let flat: Vec<f64> = idx.iter().flat_map(|&i| inputs[i].iter().copied()).collect();
            let input = Tensor::new(vec![idx.len(), 1, ncfg.input_len], flat)?;
            let (grads, sums, pa_y, ma) = batch_gradients(&params, &batch, input, sys, &ncfg, variant)?;
            if !sums.loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite { epoch, batch: bi, value: sums.loss });
            }
            adam_step(&mut params, &grads, &mut adam, tc)?;
            acc.loss += sums.loss;
            acc.sum_rate += sums.sum_rate;
            acc.spacing += sums.spacing;
            acc.sinr += sums.sinr;
            first.get_or_insert((pa_y, ma));
        }
        let n = data.len() as f64;
        let (pa_y, ma) = first.unwrap_or_default();
        let record = EpochRecord {
            epoch: epoch + 1,
            mean_loss: acc.loss / n,
            mean_sum_rate: acc.sum_rate / n,
            spacing_penalty: acc.spacing / n,
            sinr_penalty: acc.sinr / n,
            pa_y,
            ma,
        };
        on_epoch(&record);
        history.push(record);
    }
    let ckpt = Checkpoint {
        system: sys.clone(),
        train: tc.clone(),
        variant,
        epoch: tc.epochs as u64,
        params,
        adam,
    };
    Ok((ckpt, history))
}

pub fn train(sys: &SystemConfig, tc: &TrainConfig, variant: Variant) -> Result<(Checkpoint, Vec<EpochRecord>), TrainError> {
    train_observed(sys, tc, variant, |_| {})
}

/// Test-set aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean_sum_rate: f64,
    pub mean_p_s: f64,
    pub mean_gamma_s: f64,
    /// Fraction of scenarios with γ_s ≥ γ₀.
    pub sinr_satisfaction: f64,
    /// Fraction of scenarios where every user meets the MA spacing.
    pub spacing_satisfaction: f64,
    pub records: Vec<MetricsRecord>,
}

const EVAL_CHUNK: usize = 100;

/// Scores a checkpoint on `test` with the closed-form combiner and the complex
/// reference rates, using the checkpoint's system configuration.
pub fn evaluate(ckpt: &Checkpoint, test: &[Scenario]) -> Result<EvalSummary, TrainError> {
    evaluate_with(&ckpt.params, &ckpt.system, ckpt.variant, test)
}

pub fn evaluate_with(
    params: &NetworkParams,
    sys: &SystemConfig,
    variant: Variant,
    test: &[Scenario],
) -> Result<EvalSummary, TrainError> {
    if test.is_empty() {
        return Err(TrainError::Config("empty test set".into()));
    }
    let mut records = Vec::with_capacity(test.len());
    for chunk in test.chunks(EVAL_CHUNK) {
        let refs: Vec<&Scenario> = chunk.iter().collect();
        for (s, d) in chunk.iter().zip(infer(params, &refs, sys, variant)?) {
            let ch = Channels::synthesize(&d.pa, &d.ma, s, sys)?;
            records.push(evaluate_decision(&ch, &d.ma, &d.beams, sys)?);
        }
    }
    let n = records.len() as f64;
    let mean = |f: fn(&MetricsRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    Ok(EvalSummary {
        mean_sum_rate: mean(|r| r.sum_rate),
        mean_p_s: mean(|r| r.p_s),
        mean_gamma_s: mean(|r| r.gamma_s),
        sinr_satisfaction: records.iter().filter(|r| r.sinr_ok).count() as f64 / n,
        spacing_satisfaction: records.iter().filter(|r| r.spacing_ok).count() as f64 / n,
        records,
    })
}

/// Per-scenario (sum-rate, γ_s) as computed inside the training graph.
pub fn graph_metrics(
    params: &NetworkParams,
    sys: &SystemConfig,
    variant: Variant,
    scenarios: &[&Scenario],
) -> Result<Vec<(f64, f64)>, TrainError> {
    let ncfg = NetworkConfig::from_system(sys);
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let x = g.constant(batch_input(scenarios, sys)?);
    let out = forward(&mut g, x, &vars, &ncfg, variant)?;
    let t = loss_terms(&mut g, &out, scenarios, sys)?;
    let r = g.value(t.sum_rate).data();
    let gm = g.value(t.gamma).data();
    Ok(r.iter().copied().zip(gm.iter().copied()).collect())
}

#[cfg(test)]
mod tests;
