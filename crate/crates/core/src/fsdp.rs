//! In-process simulation of fully sharded data parallelism with quantized,
//! optionally Hadamard-rotated weight all-gathers.
//!
//! Ranks are logical. Collectives run synchronously in rank order, so every
//! result is the same as a sequential execution.
//!
//! Byte model: a collective's payload is the size of the data the whole
//! world ends up sharing. Each of the `W` ranks receives the `(W − 1)/W`
//! part it does not already hold, so the transferred bytes recorded for a
//! collective are `payload × (W − 1)`. Elements cost 2 bytes in bf16, 1 in
//! INT8/FP8, 3/4 packed in FP6, and each scale 4 bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::hadamard::{build_spec, transform_right};
use crate::quantize::{group_absmax, quantize, scale_from_absmax, Codes, Granularity, NumericFormat, QuantizedTensor};
use crate::tensor::Tensor;

/// Which parameters are sharded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WorldConfig {
    pub world_size: usize,
    /// Normalization gains and the output head stay replicated on every
    /// rank; only linear weights are sharded.
    pub shard_linear_only: bool,
}

impl WorldConfig {
    pub fn new(world_size: usize) -> Result<Self> {
        if world_size == 0 {
            return Err(Error::Config("world size must be at least 1".into()));
        }
        Ok(Self {
            world_size,
            shard_linear_only: true,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Collective {
    AllGather,
    ScaleMaxReduce,
    ReduceScatter,
    AllReduce,
}

impl fmt::Display for Collective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Collective::AllGather => "all_gather",
            Collective::ScaleMaxReduce => "scale_max_reduce",
            Collective::ReduceScatter => "reduce_scatter",
            Collective::AllReduce => "all_reduce",
        })
    }
}

/// One collective call.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommRecord {
    pub collective: Collective,
    /// Element precision on the wire.
    pub precision: String,
    pub payload_bytes: u64,
    /// `payload_bytes × (world_size − 1)`.
    pub bytes: u64,
    /// The same payload in bf16 (2 bytes per element, no scales).
    pub bf16_payload_bytes: u64,
    /// Number of computations that consume the result.
    pub consumers: usize,
    /// Part of a backward pass.
    pub backward: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct CommLedger {
    pub world_size: usize,
    pub records: Vec<CommRecord>,
}

impl CommLedger {
    pub fn new(world_size: usize) -> Self {
        Self {
            world_size,
            records: Vec::new(),
        }
    }

    fn push(
        &mut self,
        collective: Collective,
        precision: &str,
        payload: u64,
        bf16_payload: u64,
        consumers: usize,
        backward: bool,
    ) {
        let ranks = self.world_size.saturating_sub(1) as u64;
        self.records.push(CommRecord {
            collective,
            precision: precision.to_string(),
            payload_bytes: payload,
            bytes: payload * ranks,
            bf16_payload_bytes: bf16_payload,
            consumers,
            backward,
        });
    }

    pub fn merge(&mut self, other: &CommLedger) {
        self.records.extend(other.records.iter().cloned());
    }

    /// Per-collective totals, keyed in a fixed order.
    pub fn totals(&self) -> BTreeMap<Collective, CollectiveTotal> {
        let mut out: BTreeMap<Collective, CollectiveTotal> = BTreeMap::new();
        for r in &self.records {
            let t = out.entry(r.collective).or_default();
            t.count += 1;
            t.bytes += r.bytes;
            t.payload_bytes += r.payload_bytes;
            t.bf16_payload_bytes += r.bf16_payload_bytes;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CollectiveTotal {
    pub count: usize,
    pub bytes: u64,
    pub payload_bytes: u64,
    pub bf16_payload_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommReport {
    pub world_size: usize,
    pub gather_payload_bytes: u64,
    pub gather_bytes: u64,
    pub bf16_gather_payload_bytes: u64,
    pub scale_reduce_bytes: u64,
    pub reduce_scatter_bytes: u64,
    /// Quantized gather payload over the bf16 gather payload.
    pub ratio: f64,
}

pub fn comm_report(ledger: &CommLedger) -> CommReport {
    let t = ledger.totals();
    let get = |c| t.get(&c).copied().unwrap_or_default();
    let gather = get(Collective::AllGather);
    CommReport {
        world_size: ledger.world_size,
        gather_payload_bytes: gather.payload_bytes,
        gather_bytes: gather.bytes,
        bf16_gather_payload_bytes: gather.bf16_payload_bytes,
        scale_reduce_bytes: get(Collective::ScaleMaxReduce).bytes,
        reduce_scatter_bytes: get(Collective::ReduceScatter).bytes,
        ratio: if gather.bf16_payload_bytes == 0 {
            1.0
        } else {
            gather.payload_bytes as f64 / gather.bf16_payload_bytes as f64
        },
    }
}

/// A weight split into equal contiguous row blocks, one per rank.
#[derive(Debug, Clone)]
pub struct ShardedParam {
    rows: usize,
    cols: usize,
    padding: usize,
    shards: Vec<Tensor<f32>>,
    format: NumericFormat,
    local_scales: Vec<f32>,
    global_scale: Option<f32>,
    hadamard: bool,
}

/// Pads `w` with zero rows to a multiple of the world size and splits it.
pub fn shard(w: &Tensor<f32>, world: &WorldConfig, format: NumericFormat) -> ShardedParam {
    let ws = world.world_size;
    let padded_rows = w.rows().div_ceil(ws) * ws;
    let padded = w.pad_rows(padded_rows);
    let per = padded_rows / ws;
    let shards = (0..ws).map(|r| padded.slice_rows(r * per, (r + 1) * per)).collect();
    ShardedParam {
        rows: w.rows(),
        cols: w.cols(),
        padding: padded_rows - w.rows(),
        shards,
        format,
        local_scales: Vec::new(),
        global_scale: None,
        hadamard: false,
    }
}

impl ShardedParam {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn world_size(&self) -> usize {
        self.shards.len()
    }

    pub fn shard_rows(&self) -> usize {
        self.shards[0].rows()
    }

    /// Row range of each rank in the padded weight.
    pub fn ranges(&self) -> Vec<Range<usize>> {
        let per = self.shard_rows();
        (0..self.world_size()).map(|r| r * per..(r + 1) * per).collect()
    }

    pub fn shard_of(&self, rank: usize) -> &Tensor<f32> {
        &self.shards[rank]
    }

    /// Direct access to a rank's shard, e.g. for an optimizer step.
    pub fn shard_mut(&mut self, rank: usize) -> &mut Tensor<f32> {
        &mut self.shards[rank]
    }

    pub fn local_scales(&self) -> &[f32] {
        &self.local_scales
    }

    pub fn global_scale(&self) -> Option<f32> {
        self.global_scale
    }

    pub fn format(&self) -> NumericFormat {
        self.format
    }

    /// The padded full weight, reassembled in rank order.
    pub fn padded_weight(&self) -> Tensor<f32> {
        Tensor::vstack(&self.shards).expect("shards share a width")
    }

    /// Drops the dummy rows of a gathered weight.
    pub fn strip_padding(&self, q: &QuantizedTensor) -> Result<QuantizedTensor> {
        q.truncate_rows(self.rows)
    }

    fn rotated_shard(&self, rank: usize, hadamard: bool) -> Result<Tensor<f32>> {
        if hadamard {
            transform_right(&self.shards[rank], &build_spec(self.cols)?)
        } else {
            Ok(self.shards[rank].clone())
        }
    }

    fn local_absmax(&self, hadamard: bool) -> Result<Vec<f64>> {
        (0..self.world_size())
            .map(|r| {
                let t = self.rotated_shard(r, hadamard)?;
                Ok(group_absmax(&t, Granularity::PerTensor)[0])
            })
            .collect()
    }

    fn bf16_payload(&self) -> u64 {
        2 * (self.world_size() * self.shard_rows() * self.cols) as u64
    }

    /// Quantizes every shard with `scale` and concatenates in rank order.
    fn assemble(&self, scale: f32, hadamard: bool) -> Result<QuantizedTensor> {
        let mut int_codes = Vec::new();
        let mut real_codes = Vec::new();
        for r in 0..self.world_size() {
            let t = self.rotated_shard(r, hadamard)?;
            match quantize(&t, self.format, Granularity::PerTensor, Some(&[scale]))?.codes() {
                Codes::Int8(c) => int_codes.extend_from_slice(c),
                Codes::Real(c) => real_codes.extend_from_slice(c),
            }
        }
        let codes = if self.format == NumericFormat::Int8 {
            Codes::Int8(int_codes)
        } else {
            Codes::Real(real_codes)
        };
        QuantizedTensor::from_parts(
            self.world_size() * self.shard_rows(),
            self.cols,
            codes,
            vec![scale],
            self.format,
            Granularity::PerTensor,
        )
    }

    fn packed_payload(&self) -> u64 {
        let per_shard = self.format.payload_bytes(self.shard_rows() * self.cols) as u64;
        let scale = if self.format.is_scaled() { 4 } else { 0 };
        per_shard * self.world_size() as u64 + scale
    }
}

/// Forward gather: optional right rotation of each shard, local AbsMax,
/// max-reduce to a global scale, shard-local quantization, all-gather of
/// the codes. Returns the padded weight every rank now holds.
pub fn quantized_all_gather(
    param: &mut ShardedParam,
    apply_hadamard: bool,
    ledger: &mut CommLedger,
) -> Result<QuantizedTensor> {
    let local = param.local_absmax(apply_hadamard)?;
    param.local_scales = local
        .iter()
        .map(|&m| scale_from_absmax(m, param.format, Granularity::PerTensor))
        .collect();
    let global_absmax = local.iter().copied().fold(0.0f64, f64::max);
    let scale = scale_from_absmax(global_absmax, param.format, Granularity::PerTensor);
    param.global_scale = Some(scale);
    param.hadamard = apply_hadamard;

    let ws = param.world_size() as u64;
    if param.format.is_scaled() {
        ledger.push(Collective::ScaleMaxReduce, "f32", 4 * ws, 0, 1, false);
    }
    let gathered = param.assemble(scale, apply_hadamard)?;
    ledger.push(
        Collective::AllGather,
        param.format.name(),
        param.packed_payload(),
        param.bf16_payload(),
        1,
        false,
    );
    Ok(gathered)
}

/// Backward gather reusing the forward scale: no scale reduction. With
/// `check_stale`, every rank recomputes its AbsMax and the call fails if
/// the weights no longer produce the saved scale. `consumers` is 2 when one
/// gather serves both the recomputed forward and the backward.
pub fn backward_regather(
    param: &ShardedParam,
    saved_scale: Option<f32>,
    check_stale: bool,
    consumers: usize,
    ledger: &mut CommLedger,
) -> Result<QuantizedTensor> {
    let scale = saved_scale.ok_or(Error::MissingScales)?;
    if check_stale {
        let absmax = param.local_absmax(param.hadamard)?.into_iter().fold(0.0f64, f64::max);
        let current = scale_from_absmax(absmax, param.format, Granularity::PerTensor);
        if current.to_bits() != scale.to_bits() {
            return Err(Error::StaleScales { saved: scale, current });
        }
    }
    let gathered = param.assemble(scale, param.hadamard)?;
    ledger.push(
        Collective::AllGather,
        param.format.name(),
        param.packed_payload(),
        param.bf16_payload(),
        consumers,
        true,
    );
    Ok(gathered)
}

/// Elementwise mean over ranks, accumulated in f64 in rank order.
fn rank_mean(grads: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = grads.first().ok_or(Error::Config("no gradients to reduce".into()))?;
    for g in grads {
        if g.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "reduce",
                left: first.shape(),
                right: g.shape(),
            });
        }
    }
    let n = grads.len() as f64;
    let mut acc = vec![0.0f64; first.len()];
    for g in grads {
        for (a, v) in acc.iter_mut().zip(g.data()) {
            *a += *v as f64;
        }
    }
    Tensor::new(
        first.rows(),
        first.cols(),
        acc.into_iter().map(|v| (v / n) as f32).collect(),
    )
}

/// Averages per-rank gradients of a sharded weight and returns each rank's
/// row shard of the mean, with dummy rows removed.
pub fn reduce_scatter_grads(
    grads: &[Tensor<f32>],
    param: &ShardedParam,
    ledger: &mut CommLedger,
) -> Result<Vec<Tensor<f32>>> {
    if grads.len() != param.world_size() {
        return Err(Error::Config(format!(
            "{} gradients for {} ranks",
            grads.len(),
            param.world_size()
        )));
    }
    let mean = rank_mean(grads)?;
    if mean.shape() != param.shape() {
        return Err(Error::ShapeMismatch {
            op: "reduce_scatter",
            left: mean.shape(),
            right: param.shape(),
        });
    }
    let padded = mean.pad_rows(param.rows + param.padding);
    let payload = param.bf16_payload();
    ledger.push(Collective::ReduceScatter, "bf16", payload, payload, 1, true);
    Ok(param
        .ranges()
        .into_iter()
        .map(|r| {
            let end = r.end.min(param.rows);
            let start = r.start.min(end);
            padded.slice_rows(start, end)
        })
        .collect())
}

/// Mean of a replicated parameter's gradients across ranks.
pub fn all_reduce_mean(grads: &[Tensor<f32>], ledger: &mut CommLedger) -> Result<Tensor<f32>> {
    let mean = rank_mean(grads)?;
    let payload = 2 * mean.len() as u64;
    ledger.push(Collective::AllReduce, "bf16", payload, payload, 1, true);
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world(n: usize) -> WorldConfig {
        WorldConfig::new(n).unwrap()
    }

    #[test]
    fn shard_shapes() {
        let w = Tensor::<f32>::filled(8, 4, 1.0);
        let p = shard(&w, &world(4), NumericFormat::Int8);
        assert_eq!((p.world_size(), p.shard_rows(), p.padding()), (4, 2, 0));
        let w = Tensor::<f32>::filled(10, 4, 1.0);
        let p = shard(&w, &world(4), NumericFormat::Int8);
        assert_eq!((p.shard_rows(), p.padding()), (3, 2));
        assert_eq!(p.shard_of(3).data()[4..], [0.0; 8]);
        let p = shard(&w, &world(1), NumericFormat::Int8);
        assert!(p.shard_of(0).bitwise_eq(&w));
        assert!(WorldConfig::new(0).is_err());
    }

    #[test]
    fn global_scale_is_max_of_locals() {
        let w = Tensor::<f32>::from_rows(&[&[1.0], &[-3.0], &[2.0], &[0.5]]);
        let mut p = shard(&w, &world(4), NumericFormat::Int8);
        let mut ledger = CommLedger::new(4);
        quantized_all_gather(&mut p, false, &mut ledger).unwrap();
        let s = |v: f64| (v / 127.0) as f32;
        assert_eq!(p.local_scales(), &[s(1.0), s(3.0), s(2.0), s(0.5)]);
        assert_eq!(p.global_scale(), Some(s(3.0)));
    }

    #[test]
    fn single_rank_moves_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::<f32>::randn(6, 8, 1.0, &mut rng);
        let mut p = shard(&w, &world(1), NumericFormat::Int8);
        let mut ledger = CommLedger::new(1);
        let q = quantized_all_gather(&mut p, true, &mut ledger).unwrap();
        assert_eq!(q.format(), NumericFormat::Int8);
        let r = comm_report(&ledger);
        assert_eq!((r.gather_bytes, r.scale_reduce_bytes), (0, 0));
    }

    #[test]
    fn stale_and_missing_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor::<f32>::randn(8, 8, 1.0, &mut rng);
        let mut p = shard(&w, &world(2), NumericFormat::Int8);
        let mut ledger = CommLedger::new(2);
        let fwd = quantized_all_gather(&mut p, true, &mut ledger).unwrap();
        let saved = p.global_scale();
        let bwd = backward_regather(&p, saved, true, 1, &mut ledger).unwrap();
        assert!(bwd.bitwise_eq(&fwd));
        assert!(matches!(
            backward_regather(&p, None, false, 1, &mut ledger),
            Err(Error::MissingScales)
        ));
        *p.shard_mut(1) = p.shard_of(1).scale(5.0);
        assert!(matches!(
            backward_regather(&p, saved, true, 1, &mut ledger),
            Err(Error::StaleScales { .. })
        ));
    }

    #[test]
    fn reduce_scatter_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Tensor::<f32>::randn(10, 4, 1.0, &mut rng);
        let p = shard(&g, &world(4), NumericFormat::Int8);
        let mut ledger = CommLedger::new(4);
        let same = reduce_scatter_grads(&vec![g.clone(); 4], &p, &mut ledger).unwrap();
        assert!(Tensor::vstack(&same).unwrap().bitwise_eq(&g));
        assert_eq!(same[3].rows(), 1);

        let p2 = shard(&g, &world(2), NumericFormat::Int8);
        let zero = reduce_scatter_grads(&[g.clone(), g.scale(-1.0)], &p2, &mut ledger).unwrap();
        assert!(zero.iter().all(|s| s.max_abs() == 0.0));

        assert!(reduce_scatter_grads(&[g.clone(), Tensor::zeros(2, 2)], &p2, &mut ledger).is_err());
    }
}
