//! Serial simulation of a distributed schedule over virtual ranks.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distribution::{Schedule, TensorPlacement};
use crate::einsum::{EinsumError, EinsumSpec};
use crate::planner::{ContractionTree, OperandRef};
use crate::redistribute::{self, RedistError};
use crate::soap::tensor_name;
use crate::tensor::{naive_evaluate, random_operands, DenseTensor, TensorError};

pub const REPORT_FORMAT: &str = "einplan.run/v1";
pub const ALLREDUCE_MODEL: &str = "block elements x (group size - 1)";

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("rank {rank} holds no block of {tensor}")]
    MissingBlock { rank: usize, tensor: String },
    #[error("rank {rank}: block of {tensor} covers {got:?}, expected {expected:?}")]
    BlockMismatch {
        rank: usize,
        tensor: String,
        expected: Vec<Range<usize>>,
        got: Vec<Range<usize>>,
    },
    #[error("reduction group {group:?} holds blocks of differing shapes")]
    ShapeDivergence { group: Vec<usize> },
    #[error("expected {expected} input tensors, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("input {operand}: shape {got:?} does not match {expected:?}")]
    InputShape {
        operand: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("term {term}: {source}")]
    Term {
        term: usize,
        #[source]
        source: Box<ExecError>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Einsum(#[from] EinsumError),
    #[error(transparent)]
    Redistribute(#[from] RedistError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalBlock {
    /// Global index range covered along each tensor dimension.
    pub ranges: Vec<Range<usize>>,
    pub data: DenseTensor,
}

/// Tensor name and global block ranges.
type BlockKey<'a> = (&'a str, Vec<(usize, usize)>);

/// Per-rank tensors by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankStore {
    pub ranks: Vec<BTreeMap<String, LocalBlock>>,
}

impl RankStore {
    pub fn new(ranks: usize) -> Self {
        Self {
            ranks: vec![BTreeMap::new(); ranks],
        }
    }

    pub fn get(&self, rank: usize, tensor: &str) -> Result<&LocalBlock, ExecError> {
        self.ranks[rank]
            .get(tensor)
            .ok_or_else(|| ExecError::MissingBlock {
                rank,
                tensor: tensor.to_string(),
            })
    }

    /// `true` when every pair of ranks holding the same block of a tensor
    /// holds bit-identical data.
    pub fn replicas_coherent(&self) -> bool {
        let mut seen: BTreeMap<BlockKey, &DenseTensor> = BTreeMap::new();
        for blocks in &self.ranks {
            for (name, b) in blocks {
                let key = (
                    name.as_str(),
                    b.ranges.iter().map(|r| (r.start, r.end)).collect(),
                );
                match seen.get(&key) {
                    Some(prev) if prev.data() != b.data.data() => return false,
                    Some(_) => {}
                    None => {
                        seen.insert(key, &b.data);
                    }
                }
            }
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommKind {
    Allreduce,
    Redistribute,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommRecord {
    pub term: usize,
    pub kind: CommKind,
    pub tensor: String,
    pub elements: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommStats {
    pub records: Vec<CommRecord>,
    pub allreduce: usize,
    pub redistribute: usize,
    pub total: usize,
    /// Elements sent by each rank.
    pub per_rank: Vec<usize>,
    pub max_per_rank: usize,
}

impl CommStats {
    fn new(ranks: usize) -> Self {
        Self {
            per_rank: vec![0; ranks],
            ..Self::default()
        }
    }

    fn record(&mut self, term: usize, kind: CommKind, tensor: &str, elements: usize) {
        match kind {
            CommKind::Allreduce => self.allreduce += elements,
            CommKind::Redistribute => self.redistribute += elements,
        }
        self.total += elements;
        self.records.push(CommRecord {
            term,
            kind,
            tensor: tensor.to_string(),
            elements,
        });
    }

    fn finish(&mut self) {
        self.max_per_rank = self.per_rank.iter().copied().max().unwrap_or(0);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub format: String,
    pub einsum: String,
    pub procs: usize,
    pub seed: Option<u64>,
    pub allreduce_model: String,
    pub comm: CommStats,
    pub replicas_coherent: bool,
    pub verification: Option<Verification>,
    pub schedule: Schedule,
    pub output: DenseTensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub verify: bool,
    pub tolerance: f64,
    /// Skips every allreduce, leaving partial sums in place.
    pub skip_reductions: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            verify: true,
            tolerance: 1e-10,
            skip_reductions: false,
        }
    }
}

/// Hands every rank its block of `global` under `placement`.
pub fn scatter(
    store: &mut RankStore,
    global: &DenseTensor,
    placement: &TensorPlacement,
) -> Result<(), ExecError> {
    let extents = placement.extents();
    if global.shape() != extents.as_slice() {
        return Err(TensorError::ShapeMismatch {
            operand: 0,
            expected: extents,
            got: global.shape().to_vec(),
        }
        .into());
    }
    for (rank, blocks) in store.ranks.iter_mut().enumerate() {
        let ranges = placement.block_ranges(&placement.block_of(rank));
        blocks.insert(
            placement.tensor.clone(),
            LocalBlock {
                data: global.slice(&ranges),
                ranges,
            },
        );
    }
    Ok(())
}

/// Assembles the global tensor from the canonical replica of each block.
pub fn gather(store: &RankStore, placement: &TensorPlacement) -> Result<DenseTensor, ExecError> {
    let mut out = DenseTensor::zeros(&placement.extents());
    for block in placement.all_blocks() {
        let rank = placement.canonical_rank(&block);
        let local = store.get(rank, &placement.tensor)?;
        out.write_slice(&local.ranges, &local.data);
    }
    Ok(out)
}

/// Evaluates one binary (or unary) step on local operand blocks.
pub fn local_contract(einsum: &str, operands: &[&DenseTensor]) -> Result<DenseTensor, ExecError> {
    let shapes: Vec<Vec<usize>> = operands.iter().map(|t| t.shape().to_vec()).collect();
    let spec = EinsumSpec::parse(einsum)?.bind_extents(&shapes)?;
    let owned: Vec<DenseTensor> = operands.iter().map(|t| (*t).clone()).collect();
    Ok(naive_evaluate(&spec, &owned)?)
}

/// Sums the blocks of `tensor` over `group` in ascending rank order and
/// leaves the sum on every member. Returns the accounted volume.
pub fn allreduce(
    store: &mut RankStore,
    group: &[usize],
    tensor: &str,
    stats: Option<&mut CommStats>,
) -> Result<usize, ExecError> {
    if group.len() <= 1 {
        return Ok(0);
    }
    let mut acc = store.get(group[0], tensor)?.clone();
    for &r in &group[1..] {
        let b = store.get(r, tensor)?;
        if b.data.shape() != acc.data.shape() || b.ranges != acc.ranges {
            return Err(ExecError::ShapeDivergence {
                group: group.to_vec(),
            });
        }
        acc.data.add_assign(&b.data);
    }
    let elements = acc.data.len();
    for &r in group {
        store.ranks[r].insert(tensor.to_string(), acc.clone());
    }
    if let Some(stats) = stats {
        for &r in &group[1..] {
            stats.per_rank[r] += elements;
        }
    }
    Ok(elements * (group.len() - 1))
}

fn term_error(term: usize) -> impl Fn(ExecError) -> ExecError {
    move |e| ExecError::Term {
        term,
        source: Box::new(e),
    }
}

fn run_term(
    t: usize,
    schedule: &Schedule,
    tree: &ContractionTree,
    store: &mut RankStore,
    stats: &mut CommStats,
    options: &RunOptions,
) -> Result<(), ExecError> {
    let term = &schedule.terms[t];
    for read in &term.reads {
        if let Some(rec) = schedule.redistribution_into(t, &read.tensor) {
            let plan = redistribute::plan(&rec.tensor, &rec.source, &rec.destination)?;
            let blocks: BTreeMap<usize, DenseTensor> = (0..store.ranks.len())
                .map(|r| Ok((r, store.get(r, &rec.tensor)?.data.clone())))
                .collect::<Result<_, ExecError>>()?;
            let moved = redistribute::apply(&plan, &blocks)?;
            for (r, data) in moved {
                let ranges = rec.destination.block_ranges(&rec.destination.block_of(r));
                store.ranks[r].insert(rec.tensor.clone(), LocalBlock { ranges, data });
            }
            for m in plan.messages.iter().filter(|m| !m.is_self) {
                stats.per_rank[m.src] += m.elements;
            }
            stats.record(
                t,
                CommKind::Redistribute,
                &rec.tensor,
                plan.transmitted_volume,
            );
        }
    }

    let last = *term.steps.last().unwrap();
    for rank in 0..store.ranks.len() {
        for read in &term.reads {
            let expected = read.block_ranges(&read.block_of(rank));
            let got = &store.get(rank, &read.tensor)?.ranges;
            if *got != expected {
                return Err(ExecError::BlockMismatch {
                    rank,
                    tensor: read.tensor.clone(),
                    expected,
                    got: got.clone(),
                });
            }
        }
        let mut local: BTreeMap<usize, DenseTensor> = BTreeMap::new();
        for &s in &term.steps {
            let step = &tree.steps[s];
            let mut operands = Vec::with_capacity(2);
            for (r, _) in step.operands() {
                let t = match r {
                    OperandRef::Step(p) if term.steps.contains(&p) => &local[&p],
                    _ => &store.get(rank, &tensor_name(tree, r))?.data,
                };
                operands.push(t);
            }
            let result = local_contract(&step.einsum_text(), &operands)?;
            local.insert(s, result);
        }
        let out = &term.output;
        store.ranks[rank].insert(
            out.tensor.clone(),
            LocalBlock {
                ranges: out.block_ranges(&out.block_of(rank)),
                data: local.remove(&last).unwrap(),
            },
        );
    }

    if !options.skip_reductions {
        for group in term.dist.reduction_members(&term.output.indices) {
            let v = allreduce(store, &group, &term.output.tensor, Some(stats))?;
            if group.len() > 1 {
                stats.record(t, CommKind::Allreduce, &term.output.tensor, v);
            }
        }
    }
    Ok(())
}

/// Runs `schedule` on `inputs`, ranks in ascending order, and compares the
/// gathered output with the naive oracle when requested.
pub fn run(
    spec: &EinsumSpec,
    tree: &ContractionTree,
    schedule: &Schedule,
    inputs: &[DenseTensor],
    options: &RunOptions,
) -> Result<SimulationReport, ExecError> {
    if inputs.len() != spec.num_inputs() {
        return Err(ExecError::InputCount {
            expected: spec.num_inputs(),
            got: inputs.len(),
        });
    }
    for (k, t) in inputs.iter().enumerate() {
        let expected = spec.input_shape(k)?;
        if t.shape() != expected.as_slice() {
            return Err(ExecError::InputShape {
                operand: k,
                expected,
                got: t.shape().to_vec(),
            });
        }
    }
    let mut store = RankStore::new(schedule.procs);
    let mut stats = CommStats::new(schedule.procs);
    for term in &schedule.terms {
        for read in &term.reads {
            if let Some(k) = read
                .tensor
                .strip_prefix("in")
                .and_then(|k| k.parse::<usize>().ok())
            {
                scatter(&mut store, &inputs[k], read)?;
            }
        }
    }
    let mut coherent = store.replicas_coherent();
    for t in 0..schedule.terms.len() {
        run_term(t, schedule, tree, &mut store, &mut stats, options).map_err(term_error(t))?;
        coherent &= store.replicas_coherent();
    }
    stats.finish();
    let output = gather(
        &store,
        &schedule.terms.last().expect("schedule has terms").output,
    )?;
    let verification = if options.verify {
        let oracle = naive_evaluate(spec, inputs)?;
        let err = output.max_relative_error(&oracle);
        Some(Verification {
            max_relative_error: err,
            tolerance: options.tolerance,
            passed: err <= options.tolerance,
        })
    } else {
        None
    };
    Ok(SimulationReport {
        format: REPORT_FORMAT.to_string(),
        einsum: spec.text(),
        procs: schedule.procs,
        seed: None,
        allreduce_model: ALLREDUCE_MODEL.to_string(),
        comm: stats,
        replicas_coherent: coherent,
        verification,
        schedule: schedule.clone(),
        output,
    })
}

/// [`run`] on inputs drawn uniformly from `[-1, 1)` with a seeded ChaCha8
/// stream.
pub fn run_seeded(
    spec: &EinsumSpec,
    tree: &ContractionTree,
    schedule: &Schedule,
    seed: u64,
    options: &RunOptions,
) -> Result<SimulationReport, ExecError> {
    let inputs = random_operands(spec, seed)?;
    let mut report = run(spec, tree, schedule, &inputs, options)?;
    report.seed = Some(seed);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::{build_schedule, BlockDistribution, ProcessGrid};
    use crate::planner::optimal_path;
    use crate::soap::{best_partition, Sdg};

    fn pipeline(
        text: &str,
        dims: &[(char, usize)],
        procs: usize,
    ) -> (EinsumSpec, ContractionTree, Schedule) {
        let spec = EinsumSpec::parse(text)
            .unwrap()
            .with_extents(&dims.iter().copied().collect())
            .unwrap();
        let tree = optimal_path(&spec).unwrap();
        let sdg = Sdg::build(&spec, &tree);
        let part = best_partition(&sdg, &spec, &tree, 64.0).unwrap();
        let sched = build_schedule(&spec, &tree, &part, procs).unwrap();
        (spec, tree, sched)
    }

    fn uniform(text: &str, n: usize, procs: usize) -> (EinsumSpec, ContractionTree, Schedule) {
        let spec = EinsumSpec::parse(text).unwrap();
        let dims: Vec<(char, usize)> = spec.symbols().into_iter().map(|c| (c, n)).collect();
        pipeline(text, &dims, procs)
    }

    #[test]
    fn worked_example_verifies() {
        let (spec, tree, sched) = uniform("ijk,ja,ka,al->il", 10, 8);
        let r = run_seeded(&spec, &tree, &sched, 7, &RunOptions::default()).unwrap();
        let v = r.verification.unwrap();
        assert!(v.passed, "error {}", v.max_relative_error);
        assert!(r.replicas_coherent);
        let kinds: Vec<CommKind> = r.comm.records.iter().map(|c| c.kind).collect();
        use CommKind::{Allreduce as A, Redistribute as R};
        assert_eq!(kinds, vec![A, A, R, A, A, A, A]);
        // t1: 2 groups of depth 4, 50-element blocks; out: 4 groups of depth 2, 25-element blocks
        let ar: Vec<usize> = r
            .comm
            .records
            .iter()
            .filter(|c| c.kind == CommKind::Allreduce)
            .map(|c| c.elements)
            .collect();
        assert_eq!(ar, vec![150, 150, 25, 25, 25, 25]);
        assert_eq!(r.comm.total, r.comm.allreduce + r.comm.redistribute);
    }

    #[test]
    fn single_rank_moves_nothing() {
        let (spec, tree, sched) = uniform("ij,jk,kl->il", 5, 1);
        let r = run_seeded(&spec, &tree, &sched, 1, &RunOptions::default()).unwrap();
        assert_eq!(r.comm.total, 0);
        assert!(r.verification.unwrap().max_relative_error <= 1e-12);
    }

    #[test]
    fn scatter_rank_three_block() {
        let grid = ProcessGrid::new("ijka", vec![2, 2, 2, 1]);
        let dist = BlockDistribution::new(grid, vec![10; 4]);
        let x = dist.placement("X", "ijk").unwrap();
        let global =
            DenseTensor::from_fn(&[10, 10, 10], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64);
        let mut store = RankStore::new(8);
        scatter(&mut store, &global, &x).unwrap();
        let b = store.get(3, "X").unwrap();
        assert_eq!(b.ranges, vec![0..5, 5..10, 5..10]);
        assert_eq!(b.data, global.slice(&[0..5, 5..10, 5..10]));
        assert_eq!(gather(&store, &x).unwrap(), global);

        let a = dist.placement("A", "ja").unwrap();
        let ga = DenseTensor::from_fn(&[10, 10], |i| (i[0] * 10 + i[1]) as f64);
        scatter(&mut store, &ga, &a).unwrap();
        let holders: Vec<usize> = (0..8)
            .filter(|&r| store.get(r, "A").unwrap().ranges == vec![0..5, 0..10])
            .collect();
        assert_eq!(holders, vec![0, 1, 4, 5]);
        assert!(store.replicas_coherent());
    }

    #[test]
    fn allreduce_pair() {
        let mut store = RankStore::new(2);
        for (r, v) in [(0, [1.0, 2.0]), (1, [3.0, 4.0])] {
            store.ranks[r].insert(
                "t".into(),
                LocalBlock {
                    ranges: std::iter::once(0..2).collect(),
                    data: DenseTensor::new(vec![2], v.to_vec()).unwrap(),
                },
            );
        }
        assert_eq!(allreduce(&mut store, &[0], "t", None).unwrap(), 0);
        assert_eq!(allreduce(&mut store, &[0, 1], "t", None).unwrap(), 2);
        for r in 0..2 {
            assert_eq!(store.get(r, "t").unwrap().data.data(), &[4.0, 6.0]);
        }
        store.ranks[1].get_mut("t").unwrap().data = DenseTensor::zeros(&[3]);
        assert!(matches!(
            allreduce(&mut store, &[0, 1], "t", None),
            Err(ExecError::ShapeDivergence { .. })
        ));
    }

    #[test]
    fn skipped_reductions_fail_verification() {
        let (spec, tree, sched) = uniform("ijk,ja,ka->ia", 6, 8);
        let opts = RunOptions {
            skip_reductions: true,
            ..RunOptions::default()
        };
        let r = run_seeded(&spec, &tree, &sched, 3, &opts).unwrap();
        assert!(!r.verification.unwrap().passed);
        assert!(!r.replicas_coherent);
    }

    #[test]
    fn redistribution_volume_matches_plan() {
        let (spec, tree, sched) = uniform("ijk,ja,ka,al->il", 10, 8);
        let rec = &sched.redistributions[0];
        let plan = redistribute::plan(&rec.tensor, &rec.source, &rec.destination).unwrap();
        let r = run_seeded(&spec, &tree, &sched, 2, &RunOptions::default()).unwrap();
        assert_eq!(r.comm.redistribute, plan.transmitted_volume);
    }

    #[test]
    fn ragged_blocks_verify() {
        let (spec, tree, sched) = pipeline("ij,jk->ik", &[('i', 7), ('j', 5), ('k', 3)], 4);
        let r = run_seeded(&spec, &tree, &sched, 9, &RunOptions::default()).unwrap();
        assert!(r.verification.unwrap().passed);
    }

    #[test]
    fn deterministic_reports() {
        let (spec, tree, sched) = uniform("ijk,ia,ja->ka", 6, 4);
        let a = run_seeded(&spec, &tree, &sched, 5, &RunOptions::default()).unwrap();
        let b = run_seeded(&spec, &tree, &sched, 5, &RunOptions::default()).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn input_validation() {
        let (spec, tree, sched) = uniform("ij,jk->ik", 4, 2);
        let opts = RunOptions::default();
        assert!(matches!(
            run(&spec, &tree, &sched, &[], &opts),
            Err(ExecError::InputCount { .. })
        ));
        let bad = vec![DenseTensor::zeros(&[4, 4]), DenseTensor::zeros(&[4, 3])];
        assert!(matches!(
            run(&spec, &tree, &sched, &bad, &opts),
            Err(ExecError::InputShape { operand: 1, .. })
        ));
    }
}
