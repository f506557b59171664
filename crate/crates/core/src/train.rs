//! SGD training with stable-rank tracking and the full-rank → low-rank switch.
//!
//! Epoch `t` of the rank history holds the weights after `t` training epochs
//! (`t = 0` is the initialization). After epoch `t` trains, the test runs on
//! history `0..=t`; a pass fixes the switch epoch at `t + 1`, and the network
//! is factorized from those weights before epoch `t + 1` trains.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{argmax, DataSplit, Dataset};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::factorize::{apply_plan, build_plan_from_weights, factorized_layer_params, FactorizationPlan};
use crate::model::{Gradients, Layer, ModelSpec, Network, WeightGrad, Weights};
use crate::profiler::{default_stacks, select_k, workloads, ClockKind, ProfileReport, ProfilerConfig};
use crate::rank::{scale_factor, stable_rank, RankEstimatorConfig};
use crate::regularization::{frobenius_decay_grads, l2_decay_grad, DecayConfig, LowRankDecay};
use crate::snapshot::{network_records, snapshot_file_name, write_snapshot};
use crate::svd::singular_values;
use crate::tensor::DenseMatrix;
use crate::trajectory::{all_stabilized, RankTrajectory, StabilizationConfig, TrajectorySet};

const DIVERGENCE_LOSS: f64 = 1e6;
const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay: DecayConfig,
    /// `(epoch, multiplier)`: from `epoch` on the rate is multiplied by `multiplier`.
    pub lr_milestones: Vec<(usize, f64)>,
    /// Extra factor applied from the switch epoch on.
    pub switch_lr_multiplier: f64,
    pub seed: u64,
    pub stabilization: StabilizationConfig,
    pub estimator: RankEstimatorConfig,
    /// Switch at this epoch instead of detecting it; `0` factorizes the initialization.
    #[serde(alias = "forced_E")]
    pub forced_e: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_epochs: 60,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            decay: DecayConfig::default(),
            lr_milestones: vec![(30, 0.1), (45, 0.1)],
            switch_lr_multiplier: 1.0,
            seed: 0,
            stabilization: StabilizationConfig::default(),
            estimator: RankEstimatorConfig::default(),
            forced_e: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if let Some(&(e, m)) = self.lr_milestones.iter().find(|(_, m)| !(*m > 0.0)) {
            return Err(Error::Config(format!("lr milestone at epoch {e}: multiplier {m} must be > 0")));
        }
        if !(self.switch_lr_multiplier > 0.0) {
            return Err(Error::Config(format!(
                "switch_lr_multiplier must be > 0, got {}",
                self.switch_lr_multiplier
            )));
        }
        if let Some(e) = self.forced_e {
            if e >= self.total_epochs {
                return Err(Error::Config(format!(
                    "forced_e {e} must be below total_epochs {}",
                    self.total_epochs
                )));
            }
        }
        self.decay.validate()?;
        self.stabilization.validate()?;
        self.estimator.validate()
    }

    /// Learning rate for `epoch`, given the switch epoch if one is fixed.
    pub fn lr_at(&self, epoch: usize, switch_epoch: Option<usize>) -> f64 {
        let mut lr = self.learning_rate;
        for &(e, m) in &self.lr_milestones {
            if epoch >= e {
                lr *= m;
            }
        }
        if switch_epoch.is_some_and(|s| epoch >= s) {
            lr *= self.switch_lr_multiplier;
        }
        lr
    }
}

/// How the unfactorized prefix length `K` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrefixSelection {
    Fixed { k: usize },
    Profile { config: ProfilerConfig, clock: ClockKind },
}

impl Default for PrefixSelection {
    fn default() -> Self {
        PrefixSelection::Profile {
            config: ProfilerConfig::default(),
            clock: ClockKind::Flop,
        }
    }
}

/// Run-time knobs that do not change the numerical result.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub prefix: PrefixSelection,
    pub exec: Execution,
    /// Write a snapshot per full-rank epoch here.
    pub snapshot_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    FullRank,
    LowRank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchReason {
    Detected,
    /// Never stabilized; switched before the final epoch.
    Fallback,
    Forced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub learning_rate: f64,
    pub loss: f64,
    pub train_accuracy: f64,
    pub accuracy: f64,
}

/// Wall-clock seconds spent per phase; excluded from serialized reports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub profile: f64,
    pub full_rank: f64,
    pub low_rank: f64,
    pub spectra: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    #[serde(rename = "K")]
    pub prefix: usize,
    pub profile: Option<ProfileReport>,
    pub switch_epoch: Option<usize>,
    pub switch_reason: Option<SwitchReason>,
    pub plan: Option<FactorizationPlan>,
    pub params_before: usize,
    pub params_after: usize,
    /// Parameters of the factorized layers before and after the switch.
    pub factorized_params_before: usize,
    pub factorized_params_after: usize,
    pub epochs: Vec<EpochRecord>,
    pub final_accuracy: f64,
    #[serde(skip)]
    pub timing: PhaseTiming,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Network,
    pub report: TrainReport,
    pub trajectories: TrajectorySet,
}

/// Momentum buffers, shaped like the parameters they track.
#[derive(Debug, Clone, PartialEq)]
pub enum Velocity {
    Full(Vec<f64>),
    LowRank { u: Vec<f64>, v_t: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub weights: Velocity,
    pub bias: Vec<f64>,
}

impl LayerState {
    pub fn zeros(layer: &Layer) -> Self {
        let weights = match &layer.weights {
            Weights::Full(w) => Velocity::Full(vec![0.0; w.data().len()]),
            Weights::LowRank(p) => Velocity::LowRank {
                u: vec![0.0; p.u.data().len()],
                v_t: vec![0.0; p.v_t.data().len()],
            },
        };
        Self {
            weights,
            bias: vec![0.0; layer.bias.len()],
        }
    }
}

pub fn zero_velocity(model: &Network) -> Vec<LayerState> {
    model.layers.iter().map(LayerState::zeros).collect()
}

fn momentum_update(w: &mut [f64], v: &mut [f64], g: &[f64], decay: &[f64], lr: f64, momentum: f64) {
    for (((w, v), &g), &d) in w.iter_mut().zip(v.iter_mut()).zip(g).zip(decay) {
        *v = momentum * *v + (g + d);
        *w -= lr * *v;
    }
}

/// `v ← μv + g + decay`, `w ← w − lr·v` for every parameter.
///
/// Full-rank weights get ℓ2 decay; factorized pairs get Frobenius decay
/// (or none); biases get no decay.
pub fn sgd_step(
    model: &mut Network,
    grads: &Gradients,
    velocity: &mut [LayerState],
    lr: f64,
    momentum: f64,
    decay: &DecayConfig,
) -> Result<()> {
    if grads.layers.len() != model.layers.len() || velocity.len() != model.layers.len() {
        return Err(Error::Shape("gradient, velocity and model layer counts differ".into()));
    }
    for ((layer, g), state) in model.layers.iter_mut().zip(&grads.layers).zip(velocity.iter_mut()) {
        match (&mut layer.weights, &g.weights, &mut state.weights) {
            (Weights::Full(w), WeightGrad::Full(gw), Velocity::Full(v)) if v.len() == w.data().len() => {
                let d = l2_decay_grad(w.data(), decay.lambda);
                momentum_update(w.data_mut(), v, gw.data(), &d, lr, momentum);
            }
            (Weights::LowRank(p), WeightGrad::LowRank { u: gu, v_t: gv }, Velocity::LowRank { u: vu, v_t: vv })
                if vu.len() == p.u.data().len() && vv.len() == p.v_t.data().len() =>
            {
                let (du, dv) = match decay.low_rank {
                    LowRankDecay::Frobenius => frobenius_decay_grads(&p.u, &p.v_t, decay.lambda)?,
                    LowRankDecay::None => (
                        DenseMatrix::zeros(p.u.rows(), p.u.cols()),
                        DenseMatrix::zeros(p.v_t.rows(), p.v_t.cols()),
                    ),
                };
                momentum_update(p.u.data_mut(), vu, gu.data(), du.data(), lr, momentum);
                momentum_update(p.v_t.data_mut(), vv, gv.data(), dv.data(), lr, momentum);
            }
            _ => return Err(Error::Shape("gradient or velocity does not match layer form".into())),
        }
        let zeros = vec![0.0; layer.bias.len()];
        momentum_update(&mut layer.bias, &mut state.bias, &g.bias, &zeros, lr, momentum);
    }
    Ok(())
}

/// Fraction of samples whose arg-max logit (lowest index on ties) is the label.
pub fn evaluate(model: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::NotEnoughData("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, y) = data.gather(chunk);
        let logits = model.forward(&x)?;
        correct += y.iter().enumerate().filter(|&(i, &yi)| argmax(logits.row(i)) == yi).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

struct EpochStats {
    loss: f64,
    train_accuracy: f64,
}

fn train_epoch(
    model: &mut Network,
    velocity: &mut [LayerState],
    data: &Dataset,
    order: &[usize],
    lr: f64,
    config: &TrainConfig,
    exec: Execution,
) -> Result<EpochStats> {
    let mut loss_sum = 0.0;
    for batch in order.chunks(config.batch_size) {
        let (x, y) = data.gather(batch);
        let (loss, grads) = model.forward_backward(&x, &y, exec)?;
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Divergence {
                epoch: 0,
                loss,
                partial: None,
            });
        }
        loss_sum += loss * batch.len() as f64;
        sgd_step(model, &grads, velocity, lr, config.momentum, &config.decay)?;
    }
    let train_accuracy = evaluate(model, data)?;
    Ok(EpochStats {
        loss: loss_sum / data.len() as f64,
        train_accuracy,
    })
}

/// Singular values of every full-rank layer, keyed by 1-based index.
fn layer_spectra(model: &Network, exec: Execution) -> Result<Vec<(usize, usize, Vec<f64>)>> {
    let layers: Vec<(usize, &Layer)> = model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.is_low_rank())
        .map(|(i, l)| (i + 1, l))
        .collect();
    exec::map(exec, &layers, |(idx, l)| {
        let m = l.effective_matrix()?;
        singular_values(&m).map(|s| (*idx, l.kind.full_rank(), s))
    })
    .into_iter()
    .collect()
}

fn choose_prefix(model: &Network, config: &TrainConfig, options: &TrainOptions) -> Result<(usize, Option<ProfileReport>)> {
    let last = model.num_layers();
    match options.prefix {
        PrefixSelection::Fixed { k } => {
            if k >= last {
                return Err(Error::Config(format!("prefix K = {k} leaves no factorizable layer in {last}")));
            }
            Ok((k, None))
        }
        PrefixSelection::Profile { config: pc, clock } => {
            let shapes = workloads(model, config.batch_size);
            let stacks = default_stacks(&shapes);
            if stacks.is_empty() {
                return Ok((last.saturating_sub(1), None));
            }
            let mut clock = clock.build();
            let report = select_k(&shapes, &stacks, &pc, clock.as_mut())?;
            Ok((report.k_hat, Some(report)))
        }
    }
}

/// Train `spec` on `data`: full-rank until the rank trajectories of the
/// layers after `K` stabilize, then factorized at scaled stable ranks.
pub fn cuttlefish_train(spec: &ModelSpec, data: &DataSplit, config: &TrainConfig, options: &TrainOptions) -> Result<TrainOutput> {
    config.validate()?;
    if data.train.features.cols() != spec.input_len() {
        return Err(Error::Shape(format!(
            "dataset has {} features, model expects {}",
            data.train.features.cols(),
            spec.input_len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Network::init(spec, &mut rng)?;
    if model.num_classes() < data.train.num_classes {
        return Err(Error::Shape(format!(
            "model has {} outputs but data has {} classes",
            model.num_classes(),
            data.train.num_classes
        )));
    }
    let num_layers = model.num_layers();
    let mut timing = PhaseTiming::default();

    let started = Instant::now();
    let (prefix, profile) = choose_prefix(&model, config, options)?;
    timing.profile = started.elapsed().as_secs_f64();

    if let Some(dir) = &options.snapshot_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let snapshot = |model: &Network, epoch: usize| -> Result<()> {
        match &options.snapshot_dir {
            Some(dir) => write_snapshot(dir.join(snapshot_file_name(epoch as u64)), epoch as u64, &network_records(model)),
            None => Ok(()),
        }
    };

    let started = Instant::now();
    let mut trajectories = TrajectorySet::default();
    for (layer, full, sigma) in layer_spectra(&model, options.exec)? {
        let xi = scale_factor(layer, &sigma, full)?.xi;
        let mut t = RankTrajectory::new(layer, xi, full);
        t.append(0, stable_rank(&sigma)?)?;
        trajectories.insert(t);
    }
    timing.spectra += started.elapsed().as_secs_f64();
    snapshot(&model, 0)?;

    let has_candidates = prefix + 1 < num_layers;
    let (mut switch_epoch, mut switch_reason) = match config.forced_e {
        Some(e) if has_candidates => (Some(e), Some(SwitchReason::Forced)),
        _ => (None, None),
    };
    let mut plan: Option<FactorizationPlan> = None;
    let params_before = model.param_count();
    let (mut fact_before, mut fact_after) = (0, 0);
    let mut velocity = zero_velocity(&model);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut report = TrainReport {
        seed: config.seed,
        prefix,
        profile,
        switch_epoch: None,
        switch_reason: None,
        plan: None,
        params_before,
        params_after: params_before,
        factorized_params_before: 0,
        factorized_params_after: 0,
        epochs: Vec::with_capacity(config.total_epochs),
        final_accuracy: 0.0,
        timing,
    };

    for epoch in 0..config.total_epochs {
        if plan.is_none() && switch_epoch == Some(epoch) {
            let weights = model
                .layers
                .iter()
                .enumerate()
                .filter_map(|(i, l)| l.weight_tensor().map(|w| (i + 1, w)))
                .collect();
            let p = build_plan_from_weights(
                &weights,
                num_layers,
                &trajectories,
                prefix,
                epoch,
                &config.estimator,
                options.exec,
            )?;
            let hybrid = apply_plan(&model, &p)?;
            (fact_before, fact_after) = factorized_layer_params(&model, &hybrid, &p);
            for e in p.active() {
                velocity[e.layer - 1] = LayerState::zeros(&hybrid.layers[e.layer - 1]);
            }
            model = hybrid;
            plan = Some(p);
        }

        let phase = if model.layers.iter().any(Layer::is_low_rank) {
            Phase::LowRank
        } else {
            Phase::FullRank
        };
        let lr = config.lr_at(epoch, switch_epoch);
        order.shuffle(&mut rng);
        let started = Instant::now();
        let stats = match train_epoch(&mut model, &mut velocity, &data.train, &order, lr, config, options.exec) {
            Ok(s) => s,
            Err(Error::Divergence { loss, .. }) => {
                report.switch_epoch = switch_epoch;
                report.switch_reason = switch_reason;
                report.plan = plan;
                return Err(Error::Divergence {
                    epoch,
                    loss,
                    partial: Some(Box::new(report)),
                });
            }
            Err(e) => return Err(e),
        };
        let elapsed = started.elapsed().as_secs_f64();
        match phase {
            Phase::FullRank => report.timing.full_rank += elapsed,
            Phase::LowRank => report.timing.low_rank += elapsed,
        }
        let accuracy = if data.eval.is_empty() {
            stats.train_accuracy
        } else {
            evaluate(&model, &data.eval)?
        };
        report.epochs.push(EpochRecord {
            epoch,
            phase,
            learning_rate: lr,
            loss: stats.loss,
            train_accuracy: stats.train_accuracy,
            accuracy,
        });

        if plan.is_none() && has_candidates {
            if switch_epoch.is_none() {
                let candidates = trajectories.candidates(prefix, num_layers);
                if let Ok(true) = all_stabilized(candidates, &config.stabilization) {
                    switch_epoch = Some(epoch + 1);
                    switch_reason = Some(SwitchReason::Detected);
                } else if epoch + 2 == config.total_epochs {
                    switch_epoch = Some(epoch + 1);
                    switch_reason = Some(SwitchReason::Fallback);
                }
            }
            let started = Instant::now();
            for (layer, _, sigma) in layer_spectra(&model, options.exec)? {
                trajectories.append(layer, epoch + 1, stable_rank(&sigma)?)?;
            }
            report.timing.spectra += started.elapsed().as_secs_f64();
            snapshot(&model, epoch + 1)?;
        }
    }

    report.switch_epoch = switch_epoch;
    report.switch_reason = switch_reason;
    report.plan = plan;
    report.params_after = model.param_count();
    report.factorized_params_before = fact_before;
    report.factorized_params_after = fact_after;
    report.final_accuracy = report.epochs.last().map_or(0.0, |e| e.accuracy);
    Ok(TrainOutput {
        model,
        report,
        trajectories,
    })
}

/// Plain full-rank training with the same data order and schedule, as a control.
pub fn train_full_rank(spec: &ModelSpec, data: &DataSplit, config: &TrainConfig, exec: Execution) -> Result<TrainOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = Network::init(spec, &mut rng)?;
    let options = TrainOptions {
        prefix: PrefixSelection::Fixed {
            k: model.num_layers().saturating_sub(1),
        },
        exec,
        snapshot_dir: None,
    };
    cuttlefish_train(spec, data, config, &options)
}
