//! Choosing how many leading layers stay full-rank by timing each layer
//! stack full-rank against the same stack factorized at a trial rank ratio.
//!
//! Timing goes through [`IterationClock`] so the decision can be driven by
//! wall time or by a deterministic cost model. Profiling is not reentrant:
//! wall-clock measurements assume nothing else is running.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::ConvGeometry;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::factorize::{spectral_factorize, FactorizedPair};
use crate::model::{Layer, LayerKind, Network, Weights};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilerConfig {
    /// Iterations per variant; the first is a warm-up and is discarded.
    pub tau: usize,
    pub rho_bar: f64,
    pub upsilon: f64,
}

impl Default for ProfilerConfig {
    fn default() -> Self {
        Self {
            tau: 11,
            rho_bar: 0.25,
            upsilon: 1.5,
        }
    }
}

impl ProfilerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau < 2 {
            return Err(Error::Config(format!("tau must be >= 2, got {}", self.tau)));
        }
        if !(self.rho_bar > 0.0 && self.rho_bar <= 1.0) {
            return Err(Error::Config(format!("rho_bar must be in (0, 1], got {}", self.rho_bar)));
        }
        if !(self.upsilon > 1.0) {
            return Err(Error::Config(format!("upsilon must be > 1, got {}", self.upsilon)));
        }
        Ok(())
    }
}

/// Sizes of one layer's training workload. Dense layers use `k = H = W = 1`.
///
/// `height`/`width` are the output spatial size (equal to the input size
/// for the stride-1 same-padded convolutions modeled here).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorkloadShape {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
}

impl WorkloadShape {
    pub fn dense(batch: usize, inputs: usize, outputs: usize) -> Self {
        Self {
            batch,
            in_channels: inputs,
            out_channels: outputs,
            kernel: 1,
            height: 1,
            width: 1,
        }
    }

    pub fn conv(batch: usize, in_channels: usize, out_channels: usize, kernel: usize, size: usize) -> Self {
        Self {
            batch,
            in_channels,
            out_channels,
            kernel,
            height: size,
            width: size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.batch, self.in_channels, self.out_channels, self.kernel, self.height, self.width];
        if dims.contains(&0) {
            return Err(Error::Profile(format!("workload has a zero dimension: {self:?}")));
        }
        Ok(())
    }

    pub fn unrolled_rank(&self) -> usize {
        (self.in_channels * self.kernel * self.kernel).min(self.out_channels)
    }

    /// Forward multiply-accumulates, `B·m·n·k²·H·W`.
    pub fn macs(&self) -> f64 {
        (self.batch * self.in_channels * self.out_channels * self.kernel * self.kernel * self.height * self.width)
            as f64
    }

    /// The `(k×k, m→r)` and `(1×1, r→n)` workloads of a rank-`r` factorization.
    pub fn factorized(&self, r: usize) -> [WorkloadShape; 2] {
        [
            WorkloadShape {
                out_channels: r,
                ..*self
            },
            WorkloadShape {
                in_channels: r,
                kernel: 1,
                ..*self
            },
        ]
    }
}

/// `B·m·n·k²·H·W / (m·n·k² + B·m·H·W)`.
pub fn arithmetic_intensity(w: &WorkloadShape) -> f64 {
    let (b, m, n) = (w.batch as f64, w.in_channels as f64, w.out_channels as f64);
    let (k2, hw) = ((w.kernel * w.kernel) as f64, (w.height * w.width) as f64);
    b * m * n * k2 * hw / (m * n * k2 + b * m * hw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerStack {
    pub id: usize,
    pub l_beg: usize,
    pub l_end: usize,
}

/// One layer as timed: full-rank when `rank` is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProfiledLayer {
    pub layer: usize,
    pub workload: WorkloadShape,
    pub rank: Option<usize>,
}

/// Source of per-iteration training times, in seconds.
pub trait IterationClock {
    /// Whether [`IterationClock::time_iteration`] needs `run` to execute real work.
    fn executes(&self) -> bool;

    /// Time one training iteration over `layers`; `run` performs it.
    fn time_iteration(&mut self, layers: &[ProfiledLayer], run: &mut dyn FnMut() -> Result<()>) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WallClock;

impl IterationClock for WallClock {
    fn executes(&self) -> bool {
        true
    }

    fn time_iteration(&mut self, _layers: &[ProfiledLayer], run: &mut dyn FnMut() -> Result<()>) -> Result<f64> {
        let start = Instant::now();
        run()?;
        Ok(start.elapsed().as_secs_f64())
    }
}

/// Charges `seconds_per_mac` for every forward and backward multiply-add
/// (backward counted as twice the forward).
#[derive(Debug, Clone, Copy)]
pub struct FlopClock {
    pub seconds_per_mac: f64,
}

impl Default for FlopClock {
    fn default() -> Self {
        Self { seconds_per_mac: 1e-9 }
    }
}

fn layer_ops(layer: &ProfiledLayer) -> Vec<WorkloadShape> {
    match layer.rank {
        None => vec![layer.workload],
        Some(r) => layer.workload.factorized(r).to_vec(),
    }
}

impl IterationClock for FlopClock {
    fn executes(&self) -> bool {
        false
    }

    fn time_iteration(&mut self, layers: &[ProfiledLayer], _run: &mut dyn FnMut() -> Result<()>) -> Result<f64> {
        Ok(layers
            .iter()
            .flat_map(layer_ops)
            .map(|op| 3.0 * op.macs() * self.seconds_per_mac)
            .sum())
    }
}

/// FLOP cost at an intensity-limited throughput: an op with arithmetic
/// intensity `a` runs at `min(1, a / ridge_intensity)` of peak.
#[derive(Debug, Clone, Copy)]
pub struct RooflineClock {
    pub seconds_per_mac: f64,
    pub ridge_intensity: f64,
}

impl Default for RooflineClock {
    fn default() -> Self {
        Self {
            seconds_per_mac: 1e-9,
            ridge_intensity: 400.0,
        }
    }
}

impl IterationClock for RooflineClock {
    fn executes(&self) -> bool {
        false
    }

    fn time_iteration(&mut self, layers: &[ProfiledLayer], _run: &mut dyn FnMut() -> Result<()>) -> Result<f64> {
        Ok(layers
            .iter()
            .flat_map(layer_ops)
            .map(|op| {
                let efficiency = (arithmetic_intensity(&op) / self.ridge_intensity).min(1.0);
                3.0 * op.macs() * self.seconds_per_mac / efficiency
            })
            .sum())
    }
}

/// Named clock choice for configs and the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockKind {
    #[default]
    Wall,
    Flop,
    Roofline,
}

impl ClockKind {
    pub fn build(self) -> Box<dyn IterationClock> {
        match self {
            ClockKind::Wall => Box::new(WallClock),
            ClockKind::Flop => Box::new(FlopClock::default()),
            ClockKind::Roofline => Box::new(RooflineClock::default()),
        }
    }
}

impl std::str::FromStr for ClockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wall" => Ok(ClockKind::Wall),
            "flop" => Ok(ClockKind::Flop),
            "roofline" => Ok(ClockKind::Roofline),
            _ => Err(Error::Config(format!("unknown clock '{s}': expected wall, flop or roofline"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StackTiming {
    pub avg_full: f64,
    pub avg_low: f64,
}

impl StackTiming {
    pub fn speedup(&self) -> f64 {
        self.avg_full / self.avg_low
    }
}

/// Trial rank for profiling: `⌊ρ̄ · full rank⌋`, at least 1.
pub fn profiling_rank(w: &WorkloadShape, rho_bar: f64) -> usize {
    ((rho_bar * w.unrolled_rank() as f64).floor() as usize).max(1)
}

/// Workloads of every layer, indexed by `layer - 1`.
pub type ProfileModel = [WorkloadShape];

fn stack_layers(model: &ProfileModel, stack: &LayerStack, rank_ratio: Option<f64>) -> Result<Vec<ProfiledLayer>> {
    if stack.l_beg == 0 || stack.l_beg > stack.l_end || stack.l_end > model.len() {
        return Err(Error::Profile(format!(
            "stack {} range {}..={} invalid for {} layers",
            stack.id,
            stack.l_beg,
            stack.l_end,
            model.len()
        )));
    }
    (stack.l_beg..=stack.l_end)
        .map(|layer| {
            let workload = model[layer - 1];
            workload.validate()?;
            Ok(ProfiledLayer {
                layer,
                workload,
                rank: rank_ratio.map(|rho| profiling_rank(&workload, rho)),
            })
        })
        .collect()
}

/// Builds randomly initialized layers for one stack and runs forward+backward.
struct StackRunner {
    layers: Vec<(Layer, DenseMatrix)>,
}

impl StackRunner {
    fn new(layers: &[ProfiledLayer]) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut out = Vec::with_capacity(layers.len());
        for pl in layers {
            let w = pl.workload;
            let kind = if w.kernel == 1 && w.height == 1 && w.width == 1 {
                LayerKind::Dense {
                    inputs: w.in_channels,
                    outputs: w.out_channels,
                }
            } else {
                if w.kernel % 2 == 0 {
                    return Err(Error::Profile(format!("layer {}: even kernel size {}", pl.layer, w.kernel)));
                }
                LayerKind::Conv {
                    geom: ConvGeometry::new(w.in_channels, w.height, w.width, w.kernel, w.kernel / 2)?,
                    out_channels: w.out_channels,
                }
            };
            let full = DenseMatrix::random_normal(kind.rows(), kind.cols(), (2.0 / kind.rows() as f64).sqrt(), &mut rng);
            let weights = match pl.rank {
                None => Weights::Full(full),
                Some(r) => {
                    let mut pair: FactorizedPair = spectral_factorize(&full, r.min(kind.full_rank()))?;
                    pair.origin = kind.origin();
                    Weights::LowRank(pair)
                }
            };
            let layer = Layer {
                kind,
                weights,
                bias: vec![0.0; kind.cols()],
                relu: true,
            };
            let input = DenseMatrix::random_normal(w.batch, kind.input_len(), 1.0, &mut rng);
            out.push((layer, input));
        }
        Ok(Self { layers: out })
    }

    fn run(&self) -> Result<()> {
        for (layer, input) in &self.layers {
            let net = Network {
                input: [input.cols(), 1, 1],
                layers: vec![layer.clone()],
            };
            let labels: Vec<usize> = (0..input.rows()).map(|i| i % layer.kind.output_len()).collect();
            net.forward_backward(input, &labels, Execution::Parallel)
                .map_err(|e| Error::Profile(format!("forward failed: {e}")))?;
        }
        Ok(())
    }
}

fn time_variant(layers: &[ProfiledLayer], config: &ProfilerConfig, clock: &mut dyn IterationClock) -> Result<f64> {
    let runner = if clock.executes() {
        Some(StackRunner::new(layers)?)
    } else {
        None
    };
    let mut run = || runner.as_ref().map_or(Ok(()), StackRunner::run);
    let mut total = 0.0;
    for iter in 0..config.tau {
        let t = clock.time_iteration(layers, &mut run)?;
        if iter > 0 {
            total += t;
        }
    }
    Ok(total / (config.tau - 1) as f64)
}

/// Mean iteration time of the stack full-rank and factorized at `ρ̄`.
pub fn benchmark_stack(
    model: &ProfileModel,
    stack: &LayerStack,
    config: &ProfilerConfig,
    clock: &mut dyn IterationClock,
) -> Result<StackTiming> {
    config.validate()?;
    let full = stack_layers(model, stack, None)?;
    let low = stack_layers(model, stack, Some(config.rho_bar))?;
    let avg_full = time_variant(&full, config, clock)?;
    let avg_low = time_variant(&low, config, clock)?;
    if !(avg_full > 0.0 && avg_low > 0.0) {
        return Err(Error::Profile(format!(
            "stack {}: non-positive timing ({avg_full}, {avg_low})",
            stack.id
        )));
    }
    Ok(StackTiming { avg_full, avg_low })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackReport {
    pub id: usize,
    pub l_beg: usize,
    pub l_end: usize,
    pub avg_full_ms: f64,
    pub avg_low_ms: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub stacks: Vec<StackReport>,
    #[serde(rename = "K_hat")]
    pub k_hat: usize,
    pub upsilon: f64,
    pub rho_bar: f64,
    pub tau: usize,
}

/// Leading stacks whose speedup does not exceed `υ` stay full-rank; `K̂` is
/// the last layer of the last such stack (or the layer before the first
/// stack when the first stack already passes).
pub fn select_k(
    model: &ProfileModel,
    stacks: &[LayerStack],
    config: &ProfilerConfig,
    clock: &mut dyn IterationClock,
) -> Result<ProfileReport> {
    config.validate()?;
    let first = stacks
        .first()
        .ok_or_else(|| Error::Profile("no layer stacks to profile".into()))?;
    if stacks.windows(2).any(|w| w[1].l_beg <= w[0].l_end) {
        return Err(Error::Profile("layer stacks must be ordered and disjoint".into()));
    }
    let mut k_hat = first.l_beg - 1;
    let mut leading = true;
    let mut reports = Vec::with_capacity(stacks.len());
    for stack in stacks {
        let t = benchmark_stack(model, stack, config, clock)?;
        let passes = t.avg_full > config.upsilon * t.avg_low;
        if leading && !passes {
            k_hat = stack.l_end;
        } else {
            leading = false;
        }
        reports.push(StackReport {
            id: stack.id,
            l_beg: stack.l_beg,
            l_end: stack.l_end,
            avg_full_ms: t.avg_full * 1e3,
            avg_low_ms: t.avg_low * 1e3,
            speedup: t.speedup(),
        });
    }
    Ok(ProfileReport {
        stacks: reports,
        k_hat,
        upsilon: config.upsilon,
        rho_bar: config.rho_bar,
        tau: config.tau,
    })
}

/// Contiguous runs of identical workloads over layers `2..=L-1`.
///
/// The first layer and the output layer are never factorized.
pub fn default_stacks(model: &ProfileModel) -> Vec<LayerStack> {
    let mut stacks: Vec<LayerStack> = Vec::new();
    let last = model.len();
    for layer in 2..last {
        match stacks.last_mut() {
            Some(s) if model[s.l_end - 1] == model[layer - 1] && s.l_end + 1 == layer => s.l_end = layer,
            _ => stacks.push(LayerStack {
                id: stacks.len() + 1,
                l_beg: layer,
                l_end: layer,
            }),
        }
    }
    stacks
}

/// Per-layer workloads of a network at the given batch size.
pub fn workloads(model: &Network, batch: usize) -> Vec<WorkloadShape> {
    model
        .layers
        .iter()
        .map(|l| match l.kind {
            LayerKind::Dense { inputs, outputs } => WorkloadShape::dense(batch, inputs, outputs),
            LayerKind::Conv { geom, out_channels } => WorkloadShape {
                batch,
                in_channels: geom.in_channels,
                out_channels,
                kernel: geom.kernel,
                height: geom.out_height(),
                width: geom.out_width(),
            },
        })
        .collect()
}
