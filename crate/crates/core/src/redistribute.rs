//! Message plans moving a tensor between two block distributions.
//!
//! Along one dimension a source block `p_y` of size `B_y` starts at global
//! offset `p_y B_y = xi B_x + lambda`, so its elements land in destination
//! blocks `xi, xi + 1, ...`, the first one entered at offset `lambda`.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distribution::TensorPlacement;
use crate::tensor::DenseTensor;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RedistError {
    #[error("source extents {from:?} differ from destination extents {to:?}")]
    ShapeMismatch { from: Vec<usize>, to: Vec<usize> },
    #[error("rank {0} holds no source block")]
    MissingBlock(usize),
    #[error("rank {rank} block has shape {got:?}, expected {expected:?}")]
    BlockShape {
        rank: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub dst_block: usize,
    pub src_offsets: Range<usize>,
    pub dst_offsets: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimPartition {
    pub xi: usize,
    pub lambda: usize,
    pub segments: Vec<Segment>,
}

impl DimPartition {
    pub fn k(&self) -> usize {
        self.segments.len()
    }
}

/// Splits source block `p_y` of one dimension into pieces that each fall
/// inside a single destination block.
pub fn dim_partition(b_y: usize, p_y: usize, b_x: usize, n: usize) -> DimPartition {
    assert!(
        b_x >= 1 && b_y >= 1 && p_y * b_y < n,
        "source block out of range"
    );
    let xi = p_y * b_y / b_x;
    let lambda = p_y * b_y % b_x;
    let local = b_y.min(n - p_y * b_y);
    let mut segments = Vec::new();
    let mut s = 0;
    loop {
        let lo = (s * b_x).saturating_sub(lambda);
        if lo >= local {
            break;
        }
        let hi = ((s + 1) * b_x - lambda).min(local);
        let start = if s == 0 { lambda } else { 0 };
        segments.push(Segment {
            dst_block: xi + s,
            src_offsets: lo..hi,
            dst_offsets: start..start + (hi - lo),
        });
        s += 1;
    }
    DimPartition {
        xi,
        lambda,
        segments,
    }
}

/// Upper bound on the number of segments of any source block.
pub fn segment_bound(b_y: usize, b_x: usize) -> usize {
    (b_y - 1).div_ceil(b_x) + 1
}

/// Source blocks overlapping destination block `p_x`, unclamped.
pub fn matching_ranks(p_x: usize, b_x: usize, b_y: usize) -> Range<usize> {
    ((p_x * b_x + 1).div_ceil(b_y) - 1)..((p_x + 1) * b_x).div_ceil(b_y)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub src: usize,
    pub dst: usize,
    pub src_block: Vec<usize>,
    pub dst_block: Vec<usize>,
    /// Offsets within the source rank's local block, per tensor dimension.
    pub src_ranges: Vec<Range<usize>>,
    /// Offsets within the destination rank's local block.
    pub dst_ranges: Vec<Range<usize>>,
    pub elements: usize,
    pub is_self: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedistributionPlan {
    pub tensor: String,
    pub source: TensorPlacement,
    pub destination: TensorPlacement,
    pub messages: Vec<Message>,
    /// Distinct payloads leaving a rank, counted once per source segment.
    pub logical_volume: usize,
    /// Elements sent over the wire, destination fan-out included.
    pub transmitted_volume: usize,
    pub self_volume: usize,
}

fn cartesian(ranges: &[Range<usize>]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for r in ranges {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                r.clone().map(move |c| {
                    let mut v = prefix.clone();
                    v.push(c);
                    v
                })
            })
            .collect();
    }
    out
}

/// Builds the message list: each destination rank receives its whole block,
/// from itself when it already holds the source piece, otherwise from the
/// canonical replica of the source block.
pub fn plan(
    tensor: &str,
    source: &TensorPlacement,
    destination: &TensorPlacement,
) -> Result<RedistributionPlan, RedistError> {
    let extents = source.extents();
    if extents != destination.extents() {
        return Err(RedistError::ShapeMismatch {
            from: extents,
            to: destination.extents(),
        });
    }
    // both grids number their ranks from 0; rank r is one process in either
    let src_ranks = source.dist.grid.size();
    let (b_y, p_y) = (source.block_sizes(), source.procs());
    let b_x = destination.block_sizes();

    let mut messages = Vec::new();
    let mut payloads: BTreeMap<(Vec<usize>, Vec<usize>), usize> = BTreeMap::new();
    for dst in 0..destination.dist.grid.size() {
        let dst_block = destination.block_of(dst);
        let sources: Vec<Range<usize>> = dst_block
            .iter()
            .enumerate()
            .map(|(d, &px)| {
                let m = matching_ranks(px, b_x[d], b_y[d]);
                m.start.min(p_y[d])..m.end.min(p_y[d])
            })
            .collect();
        for src_block in cartesian(&sources) {
            let mut src_ranges = Vec::with_capacity(extents.len());
            let mut dst_ranges = Vec::with_capacity(extents.len());
            for d in 0..extents.len() {
                let part = dim_partition(b_y[d], src_block[d], b_x[d], extents[d]);
                let seg = part
                    .segments
                    .into_iter()
                    .find(|s| s.dst_block == dst_block[d])
                    .expect("matching source overlaps destination");
                src_ranges.push(seg.src_offsets);
                dst_ranges.push(seg.dst_offsets);
            }
            let elements = src_ranges.iter().map(|r| r.len()).product();
            let holds = dst < src_ranks && source.block_of(dst) == src_block;
            let src = if holds {
                dst
            } else {
                source.canonical_rank(&src_block)
            };
            if !holds {
                payloads.insert((src_block.clone(), dst_block.clone()), elements);
            }
            messages.push(Message {
                src,
                dst,
                src_block,
                dst_block: dst_block.clone(),
                src_ranges,
                dst_ranges,
                elements,
                is_self: holds,
            });
        }
    }
    let transmitted_volume = messages
        .iter()
        .filter(|m| !m.is_self)
        .map(|m| m.elements)
        .sum();
    let self_volume = messages
        .iter()
        .filter(|m| m.is_self)
        .map(|m| m.elements)
        .sum();
    Ok(RedistributionPlan {
        tensor: tensor.to_string(),
        source: source.clone(),
        destination: destination.clone(),
        messages,
        logical_volume: payloads.values().sum(),
        transmitted_volume,
        self_volume,
    })
}

/// Executes `plan` on per-rank source blocks, returning per-rank destination
/// blocks.
pub fn apply(
    plan: &RedistributionPlan,
    blocks: &BTreeMap<usize, DenseTensor>,
) -> Result<BTreeMap<usize, DenseTensor>, RedistError> {
    let ranks = plan.destination.dist.grid.size();
    for (&rank, t) in blocks {
        let expected = plan.source.block_shape(&plan.source.block_of(rank));
        if t.shape() != expected.as_slice() {
            return Err(RedistError::BlockShape {
                rank,
                expected,
                got: t.shape().to_vec(),
            });
        }
    }
    let mut out: BTreeMap<usize, DenseTensor> = (0..ranks)
        .map(|r| {
            let shape = plan.destination.block_shape(&plan.destination.block_of(r));
            (r, DenseTensor::zeros(&shape))
        })
        .collect();
    for m in &plan.messages {
        let src = blocks.get(&m.src).ok_or(RedistError::MissingBlock(m.src))?;
        let piece = src.slice(&m.src_ranges);
        out.get_mut(&m.dst)
            .unwrap()
            .write_slice(&m.dst_ranges, &piece);
    }
    Ok(out)
}
