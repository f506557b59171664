//! `CFSNAP01` per-epoch weight snapshots and offline trajectory analysis.
//!
//! Layout (little-endian): magic `CFSNAP01`, epoch `u64`, record count
//! `u32`, then per record: name length `u16`, UTF-8 name, kind `u8`
//! (0 dense, 1 conv), dim count `u8`, dims `u32` each, `f64` payload.
//!
//! Networks are stored with one record per parameter: `layer{N}.weight`
//! (dense `[m, n]` or conv `[n, m, k, k]`), `layer{N}.bias` (`[n]`), and for
//! factorized layers `layer{N}.u` (`[m·k², r]`) and `layer{N}.v_t` (`[r, n]`).

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::factorize::{build_plan_from_weights, effective_matrix, spectral_factorize, FactorizationPlan};
use crate::model::{Network, Weights};
use crate::rank::{scale_factor, stable_rank, RankEstimatorConfig};
use crate::svd::singular_values;
use crate::tensor::{ConvKernel, DenseMatrix, WeightTensor};
use crate::trajectory::{all_stabilized, RankTrajectory, StabilizationConfig, TrajectorySet};

pub const MAGIC: &[u8; 8] = b"CFSNAP01";
pub const EXTENSION: &str = "cfsnap";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Dense,
    Conv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub kind: TensorKind,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorRecord {
    pub fn dense(name: impl Into<String>, m: &DenseMatrix) -> Self {
        Self {
            name: name.into(),
            kind: TensorKind::Dense,
            dims: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }

    pub fn vector(name: impl Into<String>, v: &[f64]) -> Self {
        Self {
            name: name.into(),
            kind: TensorKind::Dense,
            dims: vec![v.len()],
            data: v.to_vec(),
        }
    }

    pub fn conv(name: impl Into<String>, k: &ConvKernel) -> Self {
        Self {
            name: name.into(),
            kind: TensorKind::Conv,
            dims: k.dims().to_vec(),
            data: k.data().to_vec(),
        }
    }

    fn validate(&self) -> Result<()> {
        let expected: usize = self.dims.iter().product();
        if expected != self.data.len() {
            return Err(Error::Format(format!(
                "record '{}': dims {:?} need {} values, have {}",
                self.name,
                self.dims,
                expected,
                self.data.len()
            )));
        }
        if self.kind == TensorKind::Conv && self.dims.len() != 4 {
            return Err(Error::Format(format!("record '{}': conv tensors need 4 dims", self.name)));
        }
        Ok(())
    }

    /// The record as a weight tensor: 2-D dense or 4-D conv.
    pub fn to_weight_tensor(&self) -> Result<WeightTensor> {
        self.validate()?;
        match (self.kind, self.dims.as_slice()) {
            (TensorKind::Dense, &[m, n]) => Ok(WeightTensor::Dense(DenseMatrix::new(m, n, self.data.clone())?)),
            (TensorKind::Conv, &[n, m, k, k2]) if k == k2 => {
                Ok(WeightTensor::Conv(ConvKernel::new(n, m, k, self.data.clone())?))
            }
            _ => Err(Error::Format(format!(
                "record '{}': {:?} tensor with dims {:?} is not a weight",
                self.name, self.kind, self.dims
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub epoch: u64,
    pub records: Vec<TensorRecord>,
}

impl Snapshot {
    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Layer count implied by the `layer{N}.*` record names.
    pub fn num_layers(&self) -> usize {
        self.records.iter().filter_map(|r| parse_layer(&r.name).map(|(l, _)| l)).max().unwrap_or(0)
    }

    /// Full-rank weight tensors keyed by 1-based layer index.
    pub fn full_rank_weights(&self) -> Result<BTreeMap<usize, WeightTensor>> {
        self.records
            .iter()
            .filter_map(|r| match parse_layer(&r.name) {
                Some((layer, "weight")) => Some(r.to_weight_tensor().map(|w| (layer, w))),
                _ => None,
            })
            .collect()
    }
}

fn parse_layer(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix("layer")?;
    let (idx, field) = rest.split_once('.')?;
    Some((idx.parse().ok()?, field))
}

/// One record per parameter of `model`.
pub fn network_records(model: &Network) -> Vec<TensorRecord> {
    let mut out = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        let n = i + 1;
        match &layer.weights {
            Weights::Full(_) => match layer.weight_tensor() {
                Some(WeightTensor::Conv(k)) => out.push(TensorRecord::conv(format!("layer{n}.weight"), &k)),
                Some(WeightTensor::Dense(m)) => out.push(TensorRecord::dense(format!("layer{n}.weight"), &m)),
                None => unreachable!("full-rank layers always have a weight tensor"),
            },
            Weights::LowRank(p) => {
                out.push(TensorRecord::dense(format!("layer{n}.u"), &p.u));
                out.push(TensorRecord::dense(format!("layer{n}.v_t"), &p.v_t));
            }
        }
        out.push(TensorRecord::vector(format!("layer{n}.bias"), &layer.bias));
    }
    out
}

pub fn encode_snapshot(epoch: u64, records: &[TensorRecord]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut buf = Vec::with_capacity(16 + records.iter().map(|r| r.data.len() * 8 + 64).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&epoch.to_le_bytes());
    let count = u32::try_from(records.len()).map_err(|_| Error::Format("too many records".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for r in records {
        r.validate()?;
        if !seen.insert(r.name.as_str()) {
            return Err(Error::Format(format!("duplicate record name '{}'", r.name)));
        }
        let name_len = u16::try_from(r.name.len()).map_err(|_| Error::Format(format!("record name too long: {}", r.name)))?;
        let ndims = u8::try_from(r.dims.len()).map_err(|_| Error::Format(format!("record '{}': too many dims", r.name)))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(r.name.as_bytes());
        buf.push(match r.kind {
            TensorKind::Dense => 0,
            TensorKind::Conv => 1,
        });
        buf.push(ndims);
        for &d in &r.dims {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("record '{}': dim {d} too large", r.name)))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in &r.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated {context}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, context: &str) -> Result<[u8; N]> {
        Ok(self.take(N, context)?.try_into().expect("length checked"))
    }
}

pub fn decode_snapshot(bytes: &[u8]) -> Result<Snapshot> {
    let mut rd = Reader { bytes, pos: 0 };
    if rd.take(8, "header").ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("bad magic, not a CFSNAP01 file".into()));
    }
    let epoch = u64::from_le_bytes(rd.array("header")?);
    let count = u32::from_le_bytes(rd.array("header")?) as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    let mut seen = HashSet::new();
    for i in 0..count {
        let ctx = format!("record #{i}");
        let name_len = u16::from_le_bytes(rd.array(&ctx)?) as usize;
        let name = std::str::from_utf8(rd.take(name_len, &ctx)?)
            .map_err(|_| Error::Format(format!("{ctx}: name is not UTF-8")))?
            .to_owned();
        let ctx = format!("record '{name}'");
        let kind = match rd.array::<1>(&ctx)?[0] {
            0 => TensorKind::Dense,
            1 => TensorKind::Conv,
            k => return Err(Error::Format(format!("{ctx}: unknown kind {k}"))),
        };
        let ndims = rd.array::<1>(&ctx)?[0] as usize;
        let dims = (0..ndims)
            .map(|_| rd.array(&ctx).map(|b| u32::from_le_bytes(b) as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format(format!("{ctx}: dims overflow")))?;
        let data = rd
            .take(len, &ctx)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate record name '{name}'")));
        }
        let record = TensorRecord { name, kind, dims, data };
        record.validate()?;
        records.push(record);
    }
    if rd.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - rd.pos)));
    }
    Ok(Snapshot {
        epoch,
        records,
    })
}

pub fn write_snapshot(path: impl AsRef<Path>, epoch: u64, records: &[TensorRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_snapshot(epoch, records)?).map_err(|e| Error::io(path, e))
}

pub fn read_snapshot(path: impl AsRef<Path>) -> Result<Snapshot> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_snapshot(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// File name used for the snapshot of `epoch` inside a snapshot directory.
pub fn snapshot_file_name(epoch: u64) -> String {
    format!("epoch_{epoch:04}.{EXTENSION}")
}

/// Snapshots in `dir` ordered by epoch; epochs must run `0, 1, …` without gaps.
pub fn read_snapshot_dir(dir: impl AsRef<Path>) -> Result<Vec<Snapshot>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    paths.retain(|p| p.extension().is_some_and(|x| x == EXTENSION));
    let mut snaps = paths.iter().map(read_snapshot).collect::<Result<Vec<_>>>()?;
    snaps.sort_by_key(|s| s.epoch);
    for (i, s) in snaps.iter().enumerate() {
        if s.epoch != i as u64 {
            return Err(Error::Sequence(format!(
                "snapshot epochs must run 0..{} without gaps; expected {i}, found {}",
                snaps.len() - 1,
                s.epoch
            )));
        }
    }
    Ok(snaps)
}

/// Per-layer stable ranks of every full-rank weight in one snapshot.
fn snapshot_spectra(snap: &Snapshot, exec: Execution) -> Result<Vec<(usize, usize, Vec<f64>)>> {
    let weights: Vec<(usize, WeightTensor)> = snap.full_rank_weights()?.into_iter().collect();
    exec::map(exec, &weights, |(layer, w)| {
        let m = effective_matrix(w);
        let full = m.rows().min(m.cols());
        singular_values(&m).map(|s| (*layer, full, s))
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum AnalysisStatus {
    /// Fewer snapshots than the stabilization test needs.
    NotEnoughData { epochs: usize },
    NotStabilized,
    Stabilized { switch_epoch: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub trajectories: TrajectorySet,
    pub status: AnalysisStatus,
    /// Present when stabilized and the switch-epoch snapshot exists.
    pub plan: Option<FactorizationPlan>,
}

/// Rebuild rank trajectories from snapshots and replay the switch decision.
///
/// Candidate layers are those after `prefix`, excluding the last layer.
pub fn analyze_snapshots(
    dir: impl AsRef<Path>,
    prefix: usize,
    estimator: &RankEstimatorConfig,
    stabilization: &StabilizationConfig,
    exec: Execution,
) -> Result<Analysis> {
    analyze(&read_snapshot_dir(dir)?, prefix, estimator, stabilization, exec)
}

/// [`analyze_snapshots`] over snapshots already in memory, epochs `0..`.
pub fn analyze(
    snaps: &[Snapshot],
    prefix: usize,
    estimator: &RankEstimatorConfig,
    stabilization: &StabilizationConfig,
    exec: Execution,
) -> Result<Analysis> {
    estimator.validate()?;
    stabilization.validate()?;
    let first = snaps
        .first()
        .ok_or_else(|| Error::NotEnoughData("no snapshots to analyze".into()))?;
    let num_layers = first.num_layers();
    let mut set = TrajectorySet::default();
    for (layer, full, sigma) in snapshot_spectra(first, exec)? {
        let xi = scale_factor(layer, &sigma, full)?.xi;
        let mut t = RankTrajectory::new(layer, xi, full);
        t.append(0, stable_rank(&sigma)?)?;
        set.insert(t);
    }
    for s in &snaps[1..] {
        for (layer, _, sigma) in snapshot_spectra(s, exec)? {
            set.append(layer, s.epoch as usize, stable_rank(&sigma)?)?;
        }
    }

    let candidates: Vec<RankTrajectory> = set.candidates(prefix, num_layers).into_iter().cloned().collect();
    let mut status = AnalysisStatus::NotEnoughData { epochs: snaps.len() };
    if !candidates.is_empty() {
        for t in 0..snaps.len() {
            let prefix_view: Vec<RankTrajectory> = candidates.iter().map(|c| c.truncated(t)).collect();
            match all_stabilized(prefix_view.iter(), stabilization) {
                Ok(true) => {
                    status = AnalysisStatus::Stabilized { switch_epoch: t + 1 };
                    break;
                }
                Ok(false) => status = AnalysisStatus::NotStabilized,
                Err(_) => {}
            }
        }
    }

    let plan = match status {
        AnalysisStatus::Stabilized { switch_epoch } => match snaps.get(switch_epoch) {
            Some(s) => Some(build_plan_from_weights(
                &s.full_rank_weights()?,
                num_layers,
                &set,
                prefix,
                switch_epoch,
                estimator,
                exec,
            )?),
            None => None,
        },
        _ => None,
    };
    Ok(Analysis {
        trajectories: set,
        status,
        plan,
    })
}

/// Apply `plan` to the full-rank weights of a snapshot, replacing each
/// active layer's `weight` record with `u` and `v_t` records.
pub fn factorize_snapshot(snap: &Snapshot, plan: &FactorizationPlan) -> Result<Snapshot> {
    let mut records = snap.records.clone();
    for e in plan.active() {
        let name = format!("layer{}.weight", e.layer);
        let pos = records
            .iter()
            .position(|r| r.name == name)
            .ok_or_else(|| Error::Plan(format!("layer {}: no full-rank '{name}' record in snapshot", e.layer)))?;
        let w = records[pos].to_weight_tensor().map_err(|err| Error::Plan(format!("layer {}: {err}", e.layer)))?;
        let m = effective_matrix(&w);
        let full = m.rows().min(m.cols());
        if e.rank == 0 || e.rank > full {
            return Err(Error::Plan(format!("layer {}: rank {} outside 1..={full}", e.layer, e.rank)));
        }
        let pair = spectral_factorize(&m, e.rank)?;
        records.splice(
            pos..=pos,
            [
                TensorRecord::dense(format!("layer{}.u", e.layer), &pair.u),
                TensorRecord::dense(format!("layer{}.v_t", e.layer), &pair.v_t),
            ],
        );
    }
    Ok(Snapshot {
        epoch: snap.epoch,
        records,
    })
}
