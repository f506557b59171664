//! Per-layer stable-rank histories and the stabilization test that fixes
//! the full-rank to low-rank switch epoch.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "epoch,layer,stable_rank,scaled_stable_rank,rank_ratio";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTrajectory {
    pub layer: usize,
    pub xi: f64,
    pub full_rank: usize,
    /// `(epoch, stable rank)`; epoch `t` is measured on the weights after `t` epochs of training.
    values: Vec<(usize, f64)>,
}

impl RankTrajectory {
    pub fn new(layer: usize, xi: f64, full_rank: usize) -> Self {
        Self {
            layer,
            xi,
            full_rank,
            values: Vec::new(),
        }
    }

    pub fn values(&self) -> &[(usize, f64)] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn last_epoch(&self) -> Option<usize> {
        self.values.last().map(|&(e, _)| e)
    }

    pub fn append(&mut self, epoch: usize, stable_rank: f64) -> Result<()> {
        let expected = self.last_epoch().map_or(0, |e| e + 1);
        if epoch != expected {
            return Err(Error::Sequence(format!(
                "layer {}: expected epoch {expected}, got {epoch}",
                self.layer
            )));
        }
        self.values.push((epoch, stable_rank));
        Ok(())
    }

    /// Copy holding only the entries with epoch `<= epoch`.
    pub fn truncated(&self, epoch: usize) -> Self {
        Self {
            values: self.values.iter().copied().filter(|&(e, _)| e <= epoch).collect(),
            ..self.clone()
        }
    }

    /// Mean absolute one-step change over the last `window` epoch pairs.
    pub fn derivative(&self, window: usize) -> Result<f64> {
        if window == 0 || self.values.len() < window + 1 {
            return Err(Error::NotEnoughData(format!(
                "layer {}: {} entries, window {window} needs {}",
                self.layer,
                self.values.len(),
                window + 1
            )));
        }
        let tail = &self.values[self.values.len() - window - 1..];
        let total: f64 = tail.windows(2).map(|w| (w[1].1 - w[0].1).abs()).sum();
        Ok(total / window as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilizationConfig {
    /// Threshold on the windowed derivative, in rank units per epoch.
    pub epsilon: f64,
    pub window: usize,
    pub min_epochs: usize,
}

impl Default for StabilizationConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            window: 3,
            min_epochs: 5,
        }
    }
}

impl StabilizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.window == 0 {
            return Err(Error::Config("stabilization window must be at least 1".into()));
        }
        Ok(())
    }
}

/// True iff every trajectory's windowed derivative is at most `epsilon`.
///
/// Returns `NotEnoughData` when any trajectory is shorter than
/// `min_epochs` or the window.
pub fn all_stabilized<'a, I>(trajectories: I, config: &StabilizationConfig) -> Result<bool>
where
    I: IntoIterator<Item = &'a RankTrajectory>,
{
    let mut all = true;
    for t in trajectories {
        if t.len() < config.min_epochs {
            return Err(Error::NotEnoughData(format!(
                "layer {}: {} entries, need {}",
                t.layer,
                t.len(),
                config.min_epochs
            )));
        }
        if t.derivative(config.window)? > config.epsilon {
            all = false;
        }
    }
    Ok(all)
}

/// `Some(t + 1)` if the test passes on trajectories whose last epoch is `t`.
pub fn detect_switch_epoch<'a, I>(trajectories: I, config: &StabilizationConfig) -> Option<usize>
where
    I: IntoIterator<Item = &'a RankTrajectory> + Clone,
{
    let last = trajectories.clone().into_iter().filter_map(|t| t.last_epoch()).max()?;
    match all_stabilized(trajectories, config) {
        Ok(true) => Some(last + 1),
        _ => None,
    }
}

/// Stateful wrapper: once an epoch is detected it is returned forever after.
#[derive(Debug, Clone, Default)]
pub struct SwitchDetector {
    config: StabilizationConfig,
    detected: Option<usize>,
}

impl SwitchDetector {
    pub fn new(config: StabilizationConfig) -> Self {
        Self {
            config,
            detected: None,
        }
    }

    pub fn observe<'a, I>(&mut self, trajectories: I) -> Option<usize>
    where
        I: IntoIterator<Item = &'a RankTrajectory> + Clone,
    {
        if self.detected.is_none() {
            self.detected = detect_switch_epoch(trajectories, &self.config);
        }
        self.detected
    }

    pub fn detected(&self) -> Option<usize> {
        self.detected
    }
}

/// Replay full histories epoch by epoch and report the first detection.
pub fn scan_switch_epoch(trajectories: &[RankTrajectory], config: &StabilizationConfig) -> Option<usize> {
    let last = trajectories.iter().filter_map(|t| t.last_epoch()).min()?;
    let mut detector = SwitchDetector::new(*config);
    for epoch in 0..=last {
        let prefix: Vec<RankTrajectory> = trajectories.iter().map(|t| t.truncated(epoch)).collect();
        if let Some(e) = detector.observe(prefix.iter()) {
            return Some(e);
        }
    }
    None
}

/// All tracked layers, keyed by 1-based layer index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySet {
    pub layers: BTreeMap<usize, RankTrajectory>,
}

impl TrajectorySet {
    pub fn insert(&mut self, t: RankTrajectory) {
        self.layers.insert(t.layer, t);
    }

    pub fn get(&self, layer: usize) -> Option<&RankTrajectory> {
        self.layers.get(&layer)
    }

    pub fn append(&mut self, layer: usize, epoch: usize, stable_rank: f64) -> Result<()> {
        self.layers
            .get_mut(&layer)
            .ok_or_else(|| Error::Sequence(format!("layer {layer} is not tracked")))?
            .append(epoch, stable_rank)
    }

    /// Trajectories for layers strictly after `prefix` and before `num_layers`.
    pub fn candidates(&self, prefix: usize, num_layers: usize) -> Vec<&RankTrajectory> {
        self.layers
            .range(prefix + 1..num_layers)
            .map(|(_, t)| t)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(usize, usize, f64, f64, f64)> = Vec::new();
        for t in self.layers.values() {
            for &(epoch, sr) in t.values() {
                let scaled = (t.xi * sr).min(t.full_rank as f64);
                rows.push((epoch, t.layer, sr, scaled, sr / t.full_rank as f64));
            }
        }
        rows.sort_by_key(|r| (r.0, r.1));
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for (epoch, layer, sr, scaled, ratio) in rows {
            let _ = writeln!(out, "{epoch},{layer},{sr},{scaled},{ratio}");
        }
        out
    }
}
