//! I/O lower bounds for fused statements of a contraction tree.
//!
//! For a fused statement with access arrays `A_1..A_m` over index subsets,
//! the largest computation that `X` loaded elements can support is
//! `max prod_d t_d` subject to `sum_a prod_{d in a} t_d <= X`. The
//! computational intensity is `rho = min_{X > S} prod_d t_d(X) / (X - S)`
//! and the bound is `Q >= |V| / rho`.

mod sdg;
mod solver;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use sdg::{tensor_name, Sdg, Vertex, VertexRole, MAX_PARTITION_VERTICES};

use crate::einsum::EinsumSpec;
use crate::planner::{ContractionTree, OperandRef};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SoapError {
    #[error("budget {budget} cannot hold one element of each of {arrays} access arrays")]
    InfeasibleBudget { budget: f64, arrays: usize },
    #[error("fast memory S={fast_mem} must be at least {required} (access arrays + 1)")]
    FastMemoryTooSmall { fast_mem: f64, required: usize },
    #[error(
        "{0} non-input vertices exceed the partition enumeration limit of {MAX_PARTITION_VERTICES}"
    )]
    TooManyVertices(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    Input,
    Intermediate,
    Output,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Access {
    pub tensor: String,
    pub indices: String,
    pub kind: AccessKind,
    pub operand: OperandRef,
}

/// One SOAP statement: the iteration space of a group of fused steps and the
/// arrays crossing the group's boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedStatement {
    pub steps: Vec<usize>,
    pub iteration_indices: String,
    pub extents: BTreeMap<char, usize>,
    pub accesses: Vec<Access>,
}

impl FusedStatement {
    pub fn volume(&self) -> f64 {
        self.iteration_indices
            .chars()
            .map(|c| self.extents[&c] as f64)
            .product()
    }

    /// Largest budget that still matters: every access array loaded entirely.
    pub fn footprint(&self) -> f64 {
        self.accesses
            .iter()
            .map(|a| {
                a.indices
                    .chars()
                    .map(|c| self.extents[&c] as f64)
                    .product::<f64>()
            })
            .sum()
    }

    /// Same statement with every extent replaced by `n`, used to study the
    /// unbounded-extent regime.
    pub fn with_uniform_extent(&self, n: usize) -> Self {
        let mut s = self.clone();
        for v in s.extents.values_mut() {
            *v = n;
        }
        s
    }

    /// Step result produced by this statement and consumed outside it.
    pub fn output(&self) -> &Access {
        self.accesses
            .iter()
            .find(|a| a.kind == AccessKind::Output)
            .expect("every statement has an output")
    }

    /// Access arrays read by this statement.
    pub fn reads(&self) -> impl Iterator<Item = &Access> {
        self.accesses
            .iter()
            .filter(|a| a.kind != AccessKind::Output)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoBound {
    pub rho: f64,
    pub x0: f64,
    pub tiles: BTreeMap<char, f64>,
    pub q_bound: f64,
    pub volume: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockBound {
    pub vertices: Vec<String>,
    pub statement: FusedStatement,
    pub bound: IoBound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionResult {
    pub blocks: Vec<BlockBound>,
    pub total_q: f64,
    /// Totals of every enumerated partition, in enumeration order.
    pub candidates: Vec<PartitionCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionCandidate {
    pub blocks: Vec<Vec<String>>,
    pub total_q: f64,
}

/// Builds the fused statement of a connected block of non-input vertices.
pub fn fuse(
    block: &[usize],
    sdg: &Sdg,
    spec: &EinsumSpec,
    tree: &ContractionTree,
) -> FusedStatement {
    let mut steps: Vec<usize> = block.iter().map(|&v| sdg.step_of(v)).collect();
    steps.sort_unstable();
    let inside = |r: OperandRef| matches!(r, OperandRef::Step(s) if steps.contains(&s));

    let mut seen = String::new();
    for &s in &steps {
        for c in tree.steps[s].iteration_indices().chars() {
            if !seen.contains(c) {
                seen.push(c);
            }
        }
    }
    let iteration_indices: String = spec
        .symbols()
        .into_iter()
        .filter(|&c| seen.contains(c))
        .collect();
    let extents = iteration_indices
        .chars()
        .map(|c| (c, spec.extents[&c]))
        .collect();

    let mut accesses = Vec::new();
    for &s in &steps {
        for (r, idx) in tree.steps[s].operands() {
            if inside(r) {
                continue;
            }
            accesses.push(Access {
                tensor: tensor_name(tree, r),
                indices: idx.to_string(),
                kind: match r {
                    OperandRef::Input(_) => AccessKind::Input,
                    OperandRef::Step(_) => AccessKind::Intermediate,
                },
                operand: r,
            });
        }
    }
    for &s in &steps {
        let r = OperandRef::Step(s);
        let consumed_inside = tree.consumer_of(r).is_some_and(|c| steps.contains(&c));
        if !consumed_inside {
            accesses.push(Access {
                tensor: tensor_name(tree, r),
                indices: tree.steps[s].result_indices.clone(),
                kind: AccessKind::Output,
                operand: r,
            });
        }
    }
    FusedStatement {
        steps,
        iteration_indices,
        extents,
        accesses,
    }
}

fn solver_inputs(stmt: &FusedStatement) -> (Vec<char>, Vec<Vec<usize>>, Vec<f64>) {
    let vars: Vec<char> = stmt.iteration_indices.chars().collect();
    let arrays = stmt
        .accesses
        .iter()
        .map(|a| {
            a.indices
                .chars()
                .map(|c| {
                    vars.iter()
                        .position(|&v| v == c)
                        .expect("access index in iteration space")
                })
                .collect()
        })
        .collect();
    let extents = vars.iter().map(|c| stmt.extents[c] as f64).collect();
    (vars, arrays, extents)
}

/// Tiles maximizing the computed volume under an access budget of `x` elements.
pub fn max_tiles(stmt: &FusedStatement, x: f64) -> Result<BTreeMap<char, f64>, SoapError> {
    let (vars, arrays, extents) = solver_inputs(stmt);
    let tiles = solver::max_tiles(&arrays, &extents, x).map_err(|e| match e {
        solver::SolveError::Infeasible { budget, arrays } => {
            SoapError::InfeasibleBudget { budget, arrays }
        }
    })?;
    Ok(vars.into_iter().zip(tiles).collect())
}

/// Sum over access arrays of the tile footprint.
pub fn access_sum(stmt: &FusedStatement, tiles: &BTreeMap<char, f64>) -> f64 {
    stmt.accesses
        .iter()
        .map(|a| a.indices.chars().map(|c| tiles[&c]).product::<f64>())
        .sum()
}

const GOLDEN: f64 = 0.618_033_988_749_894_8;
const SCAN_POINTS: usize = 48;

/// Computational intensity and I/O lower bound of a statement for fast memory
/// of `fast_mem` elements.
pub fn intensity(stmt: &FusedStatement, fast_mem: f64) -> Result<IoBound, SoapError> {
    let arrays = stmt.accesses.len();
    if fast_mem.is_nan() || fast_mem < (arrays + 1) as f64 {
        return Err(SoapError::FastMemoryTooSmall {
            fast_mem,
            required: arrays + 1,
        });
    }
    let volume = stmt.volume();
    let x_max = stmt.footprint();
    let lo = fast_mem * (1.0 + 1e-6);
    if x_max <= lo {
        // the whole statement fits: only compulsory traffic remains
        let tiles = stmt.extents.iter().map(|(&c, &n)| (c, n as f64)).collect();
        return Ok(IoBound {
            rho: volume / x_max,
            x0: x_max,
            tiles,
            q_bound: x_max,
            volume,
        });
    }
    let log_rho = |lx: f64| -> Result<f64, SoapError> {
        let x = lx.exp();
        let tiles = max_tiles(stmt, x)?;
        let computed: f64 = tiles.values().map(|t| t.ln()).sum();
        Ok(computed - (x - fast_mem).ln())
    };

    // coarse scan, then golden-section refinement around the best sample
    let (a0, b0) = (lo.ln(), x_max.ln());
    let grid: Vec<f64> = (0..=SCAN_POINTS)
        .map(|k| a0 + (b0 - a0) * k as f64 / SCAN_POINTS as f64)
        .collect();
    let mut best = 0;
    let mut best_val = f64::INFINITY;
    for (k, &g) in grid.iter().enumerate() {
        let v = log_rho(g)?;
        if v < best_val {
            best_val = v;
            best = k;
        }
    }
    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(SCAN_POINTS)];
    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let (mut fc, mut fd) = (log_rho(c)?, log_rho(d)?);
    while b - a > 1e-8 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - GOLDEN * (b - a);
            fc = log_rho(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + GOLDEN * (b - a);
            fd = log_rho(d)?;
        }
    }
    let mut lx = 0.5 * (a + b);
    let mut f = log_rho(lx)?;
    // endpoints of the bracket may win when the minimum sits on a boundary
    for cand in [a0, b0] {
        if (cand - lx).abs() < 2e-8 || best == 0 || best == SCAN_POINTS {
            let v = log_rho(cand)?;
            if v < f {
                f = v;
                lx = cand;
            }
        }
    }
    let x0 = lx.exp();
    let tiles = max_tiles(stmt, x0)?;
    // every access array crosses the memory boundary at least once
    let q_bound = (volume / f.exp()).max(x_max);
    Ok(IoBound {
        rho: volume / q_bound,
        x0,
        tiles,
        q_bound,
        volume,
    })
}

/// Evaluates every connected partition and returns the one with the least
/// total I/O; ties go to fewer blocks, then enumeration order.
pub fn best_partition(
    sdg: &Sdg,
    spec: &EinsumSpec,
    tree: &ContractionTree,
    fast_mem: f64,
) -> Result<PartitionResult, SoapError> {
    let partitions = sdg
        .enumerate_partitions()
        .map_err(SoapError::TooManyVertices)?;
    let mut evaluated: Vec<(Vec<BlockBound>, f64)> = Vec::with_capacity(partitions.len());
    for partition in &partitions {
        let mut blocks = Vec::with_capacity(partition.len());
        let mut total = 0.0;
        for block in partition {
            let statement = fuse(block, sdg, spec, tree);
            let bound = intensity(&statement, fast_mem)?;
            total += bound.q_bound;
            blocks.push(BlockBound {
                vertices: sdg.names(block),
                statement,
                bound,
            });
        }
        evaluated.push((blocks, total));
    }
    let candidates = evaluated
        .iter()
        .map(|(blocks, total)| PartitionCandidate {
            blocks: blocks.iter().map(|b| b.vertices.clone()).collect(),
            total_q: *total,
        })
        .collect();
    let mut pick = 0;
    for k in 1..evaluated.len() {
        let (cur, cur_q) = (&evaluated[pick].0, evaluated[pick].1);
        let (cand, cand_q) = (&evaluated[k].0, evaluated[k].1);
        let tied = (cand_q - cur_q).abs() <= 1e-12 * cur_q.abs().max(cand_q.abs());
        if (!tied && cand_q < cur_q) || (tied && cand.len() < cur.len()) {
            pick = k;
        }
    }
    let (mut blocks, total_q) = evaluated.swap_remove(pick);
    // topological order: a block's output step precedes its consumers
    blocks.sort_by_key(|b| *b.statement.steps.last().unwrap());
    Ok(PartitionResult {
        blocks,
        total_q,
        candidates,
    })
}
