//! Block distributions of term iteration spaces over Cartesian process grids.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::einsum::EinsumSpec;
use crate::planner::{ContractionTree, OperandRef};
use crate::soap::{AccessKind, FusedStatement, PartitionResult};

pub const SCHEDULE_FORMAT: &str = "einplan.schedule/v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DistError {
    #[error("no factorization of P={procs} over ({indices}) leaves every block non-empty")]
    NoValidGrid { procs: usize, indices: String },
    #[error("index {index:?} out of range for extents {extents:?}")]
    OutOfRange {
        index: Vec<usize>,
        extents: Vec<usize>,
    },
    #[error("tensor indices {tensor:?} are not a subset of grid indices {grid:?}")]
    NotInGrid { tensor: String, grid: String },
    #[error("P must be at least 1")]
    ZeroProcs,
}

/// Grid over named dimensions; ranks are row-major with the last dimension
/// varying fastest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessGrid {
    pub indices: String,
    pub dims: Vec<usize>,
}

impl ProcessGrid {
    pub fn new(indices: &str, dims: Vec<usize>) -> Self {
        assert_eq!(indices.chars().count(), dims.len());
        assert!(dims.iter().all(|&d| d >= 1));
        Self {
            indices: indices.to_string(),
            dims,
        }
    }

    pub fn size(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn position(&self, c: char) -> Option<usize> {
        self.indices.chars().position(|x| x == c)
    }

    pub fn dim(&self, c: char) -> Option<usize> {
        self.position(c).map(|p| self.dims[p])
    }

    pub fn coords_of(&self, rank: usize) -> Vec<usize> {
        let mut coords = vec![0; self.dims.len()];
        let mut r = rank;
        for d in (0..self.dims.len()).rev() {
            coords[d] = r % self.dims[d];
            r /= self.dims[d];
        }
        coords
    }

    pub fn rank_of(&self, coords: &[usize]) -> usize {
        coords
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&c, &d)| acc * d + c)
    }

    pub fn as_map(&self) -> BTreeMap<char, usize> {
        self.indices
            .chars()
            .zip(self.dims.iter().copied())
            .collect()
    }
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// `true` when `p` blocks of size `ceil(n/p)` leave none empty.
pub fn nonempty_blocks(n: usize, p: usize) -> bool {
    p >= 1 && p <= n && (p - 1) * ceil_div(n, p) < n
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDistribution {
    pub grid: ProcessGrid,
    pub extents: Vec<usize>,
    pub blocks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Owner {
    pub coords: Vec<usize>,
    pub offsets: Vec<usize>,
    pub bases: Vec<usize>,
}

impl BlockDistribution {
    pub fn new(grid: ProcessGrid, extents: Vec<usize>) -> Self {
        assert_eq!(grid.dims.len(), extents.len());
        let blocks = extents
            .iter()
            .zip(&grid.dims)
            .map(|(&n, &p)| ceil_div(n, p))
            .collect();
        Self {
            grid,
            extents,
            blocks,
        }
    }

    pub fn owner_of(&self, index: &[usize]) -> Result<Owner, DistError> {
        if index.len() != self.extents.len() || index.iter().zip(&self.extents).any(|(i, n)| i >= n)
        {
            return Err(DistError::OutOfRange {
                index: index.to_vec(),
                extents: self.extents.clone(),
            });
        }
        let coords: Vec<usize> = index.iter().zip(&self.blocks).map(|(i, b)| i / b).collect();
        Ok(Owner {
            offsets: index.iter().zip(&self.blocks).map(|(i, b)| i % b).collect(),
            bases: coords
                .iter()
                .zip(&self.blocks)
                .map(|(p, b)| p * b)
                .collect(),
            coords,
        })
    }

    /// Global range of block `p` along dimension `d`.
    pub fn block_range(&self, d: usize, p: usize) -> Range<usize> {
        let lo = (p * self.blocks[d]).min(self.extents[d]);
        lo..((p + 1) * self.blocks[d]).min(self.extents[d])
    }

    pub fn rank_box(&self, rank: usize) -> Vec<Range<usize>> {
        self.grid
            .coords_of(rank)
            .iter()
            .enumerate()
            .map(|(d, &p)| self.block_range(d, p))
            .collect()
    }

    /// Distribution restricted to a tensor's indices, in the tensor's order.
    pub fn placement(&self, tensor: &str, indices: &str) -> Result<TensorPlacement, DistError> {
        let mut positions = Vec::new();
        for c in indices.chars() {
            positions.push(self.grid.position(c).ok_or_else(|| DistError::NotInGrid {
                tensor: indices.to_string(),
                grid: self.grid.indices.clone(),
            })?);
        }
        let owner_blocks: usize = positions.iter().map(|&p| self.grid.dims[p]).product();
        Ok(TensorPlacement {
            tensor: tensor.to_string(),
            indices: indices.to_string(),
            owner_blocks,
            replication: self.grid.size() / owner_blocks,
            dist: self.clone(),
        })
    }

    pub fn reduction_group(&self, output: &str) -> ReductionGroup {
        let dims: String = self
            .grid
            .indices
            .chars()
            .filter(|&c| !output.contains(c))
            .collect();
        let depth = dims.chars().map(|c| self.grid.dim(c).unwrap()).product();
        ReductionGroup { dims, depth }
    }

    /// Ranks partitioned into reduction groups, each in ascending order.
    pub fn reduction_members(&self, output: &str) -> Vec<Vec<usize>> {
        let keep: Vec<bool> = self
            .grid
            .indices
            .chars()
            .map(|c| output.contains(c))
            .collect();
        let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
        for r in 0..self.grid.size() {
            let key: Vec<usize> = self
                .grid
                .coords_of(r)
                .into_iter()
                .zip(&keep)
                .map(|(c, &k)| if k { c } else { usize::MAX })
                .collect();
            groups.entry(key).or_default().push(r);
        }
        groups.into_values().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReductionGroup {
    pub dims: String,
    pub depth: usize,
}

/// A tensor laid out by the block distribution of its term, replicated over
/// grid dimensions outside its index set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorPlacement {
    pub tensor: String,
    pub indices: String,
    pub owner_blocks: usize,
    pub replication: usize,
    pub dist: BlockDistribution,
}

impl TensorPlacement {
    fn positions(&self) -> Vec<usize> {
        self.indices
            .chars()
            .map(|c| self.dist.grid.position(c).unwrap())
            .collect()
    }

    pub fn extents(&self) -> Vec<usize> {
        self.positions()
            .iter()
            .map(|&p| self.dist.extents[p])
            .collect()
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.positions()
            .iter()
            .map(|&p| self.dist.blocks[p])
            .collect()
    }

    pub fn procs(&self) -> Vec<usize> {
        self.positions()
            .iter()
            .map(|&p| self.dist.grid.dims[p])
            .collect()
    }

    /// Block coordinates of the tensor held by `rank`.
    pub fn block_of(&self, rank: usize) -> Vec<usize> {
        let coords = self.dist.grid.coords_of(rank);
        self.positions().iter().map(|&p| coords[p]).collect()
    }

    pub fn block_ranges(&self, block: &[usize]) -> Vec<Range<usize>> {
        self.positions()
            .iter()
            .zip(block)
            .map(|(&p, &b)| self.dist.block_range(p, b))
            .collect()
    }

    pub fn block_shape(&self, block: &[usize]) -> Vec<usize> {
        self.block_ranges(block).iter().map(|r| r.len()).collect()
    }

    /// Ranks holding `block`, ascending.
    pub fn replicas(&self, block: &[usize]) -> Vec<usize> {
        (0..self.dist.grid.size())
            .filter(|&r| self.block_of(r) == block)
            .collect()
    }

    /// The replica whose coordinates outside the tensor's indices are all zero.
    pub fn canonical_rank(&self, block: &[usize]) -> usize {
        let mut coords = vec![0; self.dist.grid.dims.len()];
        for (&p, &b) in self.positions().iter().zip(block) {
            coords[p] = b;
        }
        self.dist.grid.rank_of(&coords)
    }

    pub fn all_blocks(&self) -> Vec<Vec<usize>> {
        let procs = self.procs();
        let mut out = vec![vec![]];
        for &p in &procs {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    (0..p).map(move |c| {
                        let mut v = prefix.clone();
                        v.push(c);
                        v
                    })
                })
                .collect();
        }
        out
    }

    /// Same per-rank block assignment as `other`.
    pub fn same_layout(&self, other: &TensorPlacement) -> bool {
        self.extents() == other.extents()
            && self.dist.grid.size() == other.dist.grid.size()
            && (0..self.dist.grid.size()).all(|r| {
                self.block_ranges(&self.block_of(r)) == other.block_ranges(&other.block_of(r))
            })
    }
}

/// Every ordered factorization of `procs` into `k` factors.
pub fn factorizations(procs: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return if procs == 1 { vec![vec![]] } else { vec![] };
    }
    let mut out = Vec::new();
    for f in 1..=procs {
        if procs.is_multiple_of(f) {
            for mut rest in factorizations(procs / f, k - 1) {
                rest.insert(0, f);
                out.push(rest);
            }
        }
    }
    out
}

/// Data volume of a candidate grid for a statement: replicated read volume
/// summed over ranks plus the reduction volume of its output.
pub fn grid_score(stmt: &FusedStatement, dist: &BlockDistribution) -> usize {
    let procs = dist.grid.size();
    let block = |indices: &str| -> usize {
        indices
            .chars()
            .map(|c| dist.blocks[dist.grid.position(c).unwrap()])
            .product()
    };
    let reads: usize = stmt.reads().map(|a| procs * block(&a.indices)).sum();
    let out = stmt.output();
    let depth = dist.reduction_group(&out.indices).depth;
    reads + block(&out.indices) * (depth - 1) * (procs / depth)
}

fn tile_mismatch(dist: &BlockDistribution, tiles: &BTreeMap<char, f64>) -> f64 {
    let logs: Vec<f64> = dist
        .grid
        .indices
        .chars()
        .zip(dist.extents.iter().zip(&dist.grid.dims))
        .map(|(c, (&n, &p))| {
            (n as f64 / p as f64).ln() - tiles.get(&c).copied().unwrap_or(1.0).ln()
        })
        .collect();
    let mean = logs.iter().sum::<f64>() / logs.len().max(1) as f64;
    logs.iter().map(|v| (v - mean).powi(2)).sum()
}

/// Picks the grid with the least data volume; ties go to the grid whose
/// per-rank block shape best matches the optimal tile proportions, then to
/// the lexicographically smallest dims.
pub fn choose_grid(
    stmt: &FusedStatement,
    tiles: &BTreeMap<char, f64>,
    procs: usize,
) -> Result<ProcessGrid, DistError> {
    if procs == 0 {
        return Err(DistError::ZeroProcs);
    }
    let indices = &stmt.iteration_indices;
    let extents: Vec<usize> = indices.chars().map(|c| stmt.extents[&c]).collect();
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    for dims in factorizations(procs, extents.len()) {
        if !dims
            .iter()
            .zip(&extents)
            .all(|(&p, &n)| nonempty_blocks(n, p))
        {
            continue;
        }
        let dist = BlockDistribution::new(ProcessGrid::new(indices, dims.clone()), extents.clone());
        let score = grid_score(stmt, &dist);
        let mismatch = tile_mismatch(&dist, tiles);
        let better = match &best {
            None => true,
            Some((s, m, _)) => score < *s || (score == *s && mismatch < *m - 1e-12),
        };
        if better {
            best = Some((score, mismatch, dims));
        }
    }
    best.map(|(_, _, dims)| ProcessGrid::new(indices, dims))
        .ok_or_else(|| DistError::NoValidGrid {
            procs,
            indices: indices.clone(),
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub vertices: Vec<String>,
    pub steps: Vec<usize>,
    pub indices: String,
    pub dist: BlockDistribution,
    /// Tensors read by the term, in access order.
    pub reads: Vec<TensorPlacement>,
    pub output: TensorPlacement,
    pub reduction: ReductionGroup,
}

/// Move of an intermediate from its producer's layout to its consumer's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedistributionRecord {
    pub tensor: String,
    pub from_term: usize,
    pub to_term: usize,
    pub source: TensorPlacement,
    pub destination: TensorPlacement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub format: String,
    pub einsum: String,
    pub procs: usize,
    pub terms: Vec<Term>,
    pub redistributions: Vec<RedistributionRecord>,
}

impl Schedule {
    pub fn redistribution_into(&self, term: usize, tensor: &str) -> Option<&RedistributionRecord> {
        self.redistributions
            .iter()
            .find(|r| r.to_term == term && r.tensor == tensor)
    }
}

/// One term per fused block, each on its own grid; intermediates crossing
/// terms get a redistribution whenever their per-rank blocks differ.
pub fn build_schedule(
    spec: &EinsumSpec,
    tree: &ContractionTree,
    partition: &PartitionResult,
    procs: usize,
) -> Result<Schedule, DistError> {
    let mut terms: Vec<Term> = Vec::new();
    let mut redistributions = Vec::new();
    let mut produced_by: BTreeMap<String, usize> = BTreeMap::new();
    for block in &partition.blocks {
        let stmt = &block.statement;
        let grid = choose_grid(stmt, &block.bound.tiles, procs)?;
        let extents = stmt
            .iteration_indices
            .chars()
            .map(|c| spec.extents[&c])
            .collect();
        let dist = BlockDistribution::new(grid, extents);
        let mut reads = Vec::new();
        for access in stmt.reads() {
            let placement = dist.placement(&access.tensor, &access.indices)?;
            if access.kind == AccessKind::Intermediate {
                let from = produced_by[&access.tensor];
                let source = &terms[from].output;
                if !source.same_layout(&placement) {
                    redistributions.push(RedistributionRecord {
                        tensor: access.tensor.clone(),
                        from_term: from,
                        to_term: terms.len(),
                        source: source.clone(),
                        destination: placement.clone(),
                    });
                }
            }
            reads.push(placement);
        }
        let out = stmt.output();
        debug_assert!(matches!(out.operand, OperandRef::Step(_)));
        produced_by.insert(out.tensor.clone(), terms.len());
        terms.push(Term {
            vertices: block.vertices.clone(),
            steps: stmt.steps.clone(),
            indices: stmt.iteration_indices.clone(),
            output: dist.placement(&out.tensor, &out.indices)?,
            reduction: dist.reduction_group(&out.indices),
            reads,
            dist,
        });
    }
    debug_assert_eq!(
        terms.last().map(|t| *t.steps.last().unwrap()),
        Some(tree.output_step())
    );
    Ok(Schedule {
        format: SCHEDULE_FORMAT.to_string(),
        einsum: spec.text(),
        procs,
        terms,
        redistributions,
    })
}
