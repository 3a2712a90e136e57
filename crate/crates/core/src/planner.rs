//! FLOP-minimal binary contraction trees.
//!
//! Exhaustive dynamic programming over operand subsets. Each subset's
//! intermediate keeps exactly the indices still needed by the rest of the
//! kernel or by the output (sum-early policy), and each step costs
//! `2 * iterations` when it sums an index away and `1 * iterations` otherwise.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::einsum::{EinsumError, EinsumSpec};

pub const MAX_OPERANDS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("{0} operands exceed the exhaustive enumeration limit of {MAX_OPERANDS}")]
    TooManyOperands(usize),
    #[error(transparent)]
    Einsum(#[from] EinsumError),
}

/// Reference to a tree operand: an original input or the result of an
/// earlier step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperandRef {
    Input(usize),
    Step(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum OpClass {
    Krp,
    Ttm,
    Tdot,
    Gemm,
    Outer,
    Elementwise,
}

impl fmt::Display for OpClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OpClass::Krp => "KRP",
            OpClass::Ttm => "TTM",
            OpClass::Tdot => "TDOT",
            OpClass::Gemm => "GEMM",
            OpClass::Outer => "OUTER",
            OpClass::Elementwise => "ELEMENTWISE",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractionStep {
    pub lhs: OperandRef,
    /// `None` only for single-operand kernels (transpose / partial sum).
    pub rhs: Option<OperandRef>,
    pub lhs_indices: String,
    pub rhs_indices: Option<String>,
    pub result_indices: String,
    pub flops: u128,
    pub op_class: OpClass,
}

impl ContractionStep {
    /// The binary einsum this step evaluates.
    pub fn einsum_text(&self) -> String {
        match &self.rhs_indices {
            Some(r) => format!("{},{}->{}", self.lhs_indices, r, self.result_indices),
            None => format!("{}->{}", self.lhs_indices, self.result_indices),
        }
    }

    pub fn operands(&self) -> impl Iterator<Item = (OperandRef, &str)> {
        std::iter::once((self.lhs, self.lhs_indices.as_str()))
            .chain(self.rhs.iter().copied().zip(self.rhs_indices.as_deref()))
    }

    /// Union of the operand index sets, in operand order.
    pub fn iteration_indices(&self) -> String {
        let mut out = String::new();
        for (_, s) in self.operands() {
            for c in s.chars() {
                if !out.contains(c) {
                    out.push(c);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractionTree {
    pub einsum: String,
    pub steps: Vec<ContractionStep>,
    pub total_flops: u128,
}

impl ContractionTree {
    pub fn output_step(&self) -> usize {
        self.steps.len() - 1
    }

    /// Index string of a tree operand.
    pub fn indices_of<'a>(&'a self, spec: &'a EinsumSpec, r: OperandRef) -> &'a str {
        match r {
            OperandRef::Input(k) => &spec.inputs[k],
            OperandRef::Step(s) => &self.steps[s].result_indices,
        }
    }

    /// Step that consumes the result of `step`, if any.
    pub fn consumer_of(&self, r: OperandRef) -> Option<usize> {
        self.steps
            .iter()
            .position(|st| st.lhs == r || st.rhs == Some(r))
    }
}

fn extent_product(indices: &str, extents: &BTreeMap<char, usize>) -> Result<u128, EinsumError> {
    indices.chars().try_fold(1u128, |acc, c| {
        let n = extents.get(&c).ok_or(EinsumError::UnboundIndex(c))?;
        Ok(acc * *n as u128)
    })
}

fn union(a: &str, b: &str) -> String {
    let mut out = a.to_string();
    for c in b.chars() {
        if !out.contains(c) {
            out.push(c);
        }
    }
    out
}

/// Cost of one step under the multiply-accumulate rule.
pub fn step_flops(
    lhs: &str,
    rhs: Option<&str>,
    result: &str,
    extents: &BTreeMap<char, usize>,
) -> Result<u128, EinsumError> {
    let Some(rhs) = rhs else {
        return extent_product(lhs, extents);
    };
    let all = union(lhs, rhs);
    let iterations = extent_product(&all, extents)?;
    let contracts = all.chars().any(|c| !result.contains(c));
    Ok(if contracts {
        2 * iterations
    } else {
        iterations
    })
}

pub fn classify(lhs: &str, rhs: Option<&str>, result: &str) -> OpClass {
    let Some(rhs) = rhs else {
        return OpClass::Elementwise;
    };
    let shared: Vec<char> = lhs.chars().filter(|&c| rhs.contains(c)).collect();
    let all = union(lhs, rhs);
    let contracted: Vec<char> = all.chars().filter(|&c| !result.contains(c)).collect();
    if shared.is_empty() {
        return OpClass::Outer;
    }
    if contracted.is_empty() {
        let lhs_private = lhs.chars().any(|c| !rhs.contains(c));
        let rhs_private = rhs.chars().any(|c| !lhs.contains(c));
        return if lhs_private && rhs_private {
            OpClass::Krp
        } else {
            OpClass::Elementwise
        };
    }
    let single_mode = contracted.len() == 1 && shared == contracted;
    if single_mode && lhs.len() == 2 && rhs.len() == 2 && result.len() == 2 {
        return OpClass::Gemm;
    }
    if single_mode {
        let (small, big) = if lhs.len() <= rhs.len() {
            (lhs, rhs)
        } else {
            (rhs, lhs)
        };
        if small.len() == 2 && big.len() >= 3 && result.len() == big.len() {
            return OpClass::Ttm;
        }
    }
    OpClass::Tdot
}

type MakeStep<'a> =
    dyn Fn(OperandRef, OperandRef, u32, u32, u32, &[ContractionStep]) -> ContractionStep + 'a;

#[derive(Clone)]
struct Best {
    flops: u128,
    inter: u128,
    seq: Vec<(u32, u32)>,
    split: Option<(u32, u32)>,
}

impl Best {
    fn key(&self) -> (u128, u128, &[(u32, u32)]) {
        (self.flops, self.inter, &self.seq)
    }
}

/// Globally FLOP-minimal binary contraction tree. Ties prefer fewer total
/// intermediate elements, then the lexicographically smallest step sequence.
pub fn optimal_path(spec: &EinsumSpec) -> Result<ContractionTree, PlanError> {
    let n = spec.num_inputs();
    if n > MAX_OPERANDS {
        return Err(PlanError::TooManyOperands(n));
    }
    let symbols = spec.symbols();
    for &c in &symbols {
        spec.extent(c)?;
    }
    if n == 1 {
        let lhs = spec.inputs[0].clone();
        let result = spec.output.clone();
        let flops = step_flops(&lhs, None, &result, &spec.extents)?;
        let step = ContractionStep {
            lhs: OperandRef::Input(0),
            rhs: None,
            op_class: classify(&lhs, None, &result),
            lhs_indices: lhs,
            rhs_indices: None,
            result_indices: result,
            flops,
        };
        return Ok(ContractionTree {
            einsum: spec.text(),
            total_flops: flops,
            steps: vec![step],
        });
    }

    let bit = |c: char| 1u64 << symbols.iter().position(|&s| s == c).unwrap();
    let mask_of = |s: &str| s.chars().fold(0u64, |m, c| m | bit(c));
    let ops: Vec<u64> = spec.inputs.iter().map(|s| mask_of(s)).collect();
    let out_mask = mask_of(&spec.output);
    let full = (1u32 << n) - 1;
    let members = |set: u32| (0..n).filter(move |k| set & (1 << k) != 0);
    let union_of = |set: u32| members(set).fold(0u64, |m, k| m | ops[k]);

    let subset_indices: Vec<u64> = (0..=full)
        .map(|set| {
            if set.count_ones() <= 1 {
                return union_of(set);
            }
            let inside = union_of(set);
            let outside = union_of(full & !set) | out_mask;
            inside & outside
        })
        .collect();
    let index_string = |mask: u64, set: u32| -> String {
        if set == full {
            return spec.output.clone();
        }
        symbols.iter().filter(|&&c| mask & bit(c) != 0).collect()
    };
    let size_of = |mask: u64| -> u128 {
        symbols
            .iter()
            .filter(|&&c| mask & bit(c) != 0)
            .map(|c| spec.extents[c] as u128)
            .product()
    };

    let mut best: Vec<Option<Best>> = vec![None; full as usize + 1];
    for k in 0..n {
        best[1 << k] = Some(Best {
            flops: 0,
            inter: 0,
            seq: Vec::new(),
            split: None,
        });
    }
    let mut order: Vec<u32> = (1..=full).filter(|s| s.count_ones() >= 2).collect();
    order.sort_by_key(|s| s.count_ones());
    for set in order {
        let low = set & set.wrapping_neg();
        let result_mask = subset_indices[set as usize];
        let mut candidate: Option<Best> = None;
        // enumerate proper sub-masks containing the lowest member as lhs
        let mut a = (set - 1) & set;
        while a > 0 {
            if a & low != 0 {
                let b = set & !a;
                let (ba, bb) = (
                    best[a as usize].as_ref().unwrap(),
                    best[b as usize].as_ref().unwrap(),
                );
                let (ma, mb) = (subset_indices[a as usize], subset_indices[b as usize]);
                let all = ma | mb;
                let iterations = size_of(all);
                let cost = if all & !result_mask != 0 {
                    2 * iterations
                } else {
                    iterations
                };
                let mut seq = Vec::with_capacity(ba.seq.len() + bb.seq.len() + 1);
                seq.extend_from_slice(&ba.seq);
                seq.extend_from_slice(&bb.seq);
                seq.push((a, b));
                let c = Best {
                    flops: ba.flops + bb.flops + cost,
                    inter: ba.inter + bb.inter + size_of(result_mask),
                    seq,
                    split: Some((a, b)),
                };
                if candidate.as_ref().is_none_or(|cur| c.key() < cur.key()) {
                    candidate = Some(c);
                }
            }
            a = (a - 1) & set;
        }
        best[set as usize] = candidate;
    }

    // materialize in post-order
    let mut steps = Vec::new();
    fn emit(
        set: u32,
        best: &[Option<Best>],
        steps: &mut Vec<ContractionStep>,
        make: &MakeStep,
    ) -> OperandRef {
        let entry = best[set as usize].as_ref().unwrap();
        match entry.split {
            None => OperandRef::Input(set.trailing_zeros() as usize),
            Some((a, b)) => {
                let lhs = emit(a, best, steps, make);
                let rhs = emit(b, best, steps, make);
                let step = make(lhs, rhs, a, b, set, steps);
                steps.push(step);
                OperandRef::Step(steps.len() - 1)
            }
        }
    }
    let make =
        |lhs: OperandRef, rhs: OperandRef, a: u32, b: u32, set: u32, done: &[ContractionStep]| {
            let name = |r: OperandRef, sub: u32| match r {
                OperandRef::Input(k) => spec.inputs[k].clone(),
                OperandRef::Step(s) => {
                    debug_assert_eq!(
                        done[s].result_indices,
                        index_string(subset_indices[sub as usize], sub)
                    );
                    done[s].result_indices.clone()
                }
            };
            let lhs_indices = name(lhs, a);
            let rhs_indices = name(rhs, b);
            let result_indices = index_string(subset_indices[set as usize], set);
            let flops = step_flops(
                &lhs_indices,
                Some(&rhs_indices),
                &result_indices,
                &spec.extents,
            )
            .expect("extents checked");
            ContractionStep {
                lhs,
                rhs: Some(rhs),
                op_class: classify(&lhs_indices, Some(&rhs_indices), &result_indices),
                lhs_indices,
                rhs_indices: Some(rhs_indices),
                result_indices,
                flops,
            }
        };
    emit(full, &best, &mut steps, &make);
    let total_flops = steps.iter().map(|s| s.flops).sum();
    debug_assert_eq!(total_flops, best[full as usize].as_ref().unwrap().flops);
    Ok(ContractionTree {
        einsum: spec.text(),
        steps,
        total_flops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::einsum::make_mttkrp;

    fn bound(text: &str, n: usize) -> EinsumSpec {
        EinsumSpec::parse(text)
            .unwrap()
            .with_uniform_extent(n)
            .unwrap()
    }

    #[test]
    fn workflow_example_decomposition() {
        let spec = bound("ijk,ja,ka,al->il", 10);
        let tree = optimal_path(&spec).unwrap();
        let texts: Vec<String> = tree.steps.iter().map(|s| s.einsum_text()).collect();
        assert_eq!(texts, vec!["ja,ka->jka", "ijk,jka->ia", "ia,al->il"]);
        let classes: Vec<OpClass> = tree.steps.iter().map(|s| s.op_class).collect();
        assert_eq!(classes, vec![OpClass::Krp, OpClass::Tdot, OpClass::Gemm]);
        assert_eq!(tree.steps[0].flops, 1000);
        assert_eq!(tree.steps[1].flops, 2 * 10_000);
        assert_eq!(tree.steps[2].flops, 2 * 1000);
        assert_eq!(tree.total_flops, 23_000);
        assert_eq!(tree.steps[1].lhs, OperandRef::Input(0));
        assert_eq!(tree.steps[1].rhs, Some(OperandRef::Step(0)));
    }

    #[test]
    fn single_gemm() {
        let spec = EinsumSpec::parse("ij,jk->ik")
            .unwrap()
            .bind_extents(&[vec![3, 5], vec![5, 7]])
            .unwrap();
        let tree = optimal_path(&spec).unwrap();
        assert_eq!(tree.steps.len(), 1);
        assert_eq!(tree.total_flops, 2 * 3 * 5 * 7);
        assert_eq!(tree.steps[0].op_class, OpClass::Gemm);
    }

    #[test]
    fn unary_kernel() {
        let spec = bound("ijk->kj", 3);
        let tree = optimal_path(&spec).unwrap();
        assert_eq!(tree.steps.len(), 1);
        assert_eq!(tree.steps[0].rhs, None);
        assert_eq!(tree.steps[0].result_indices, "kj");
        assert_eq!(tree.total_flops, 27);
    }

    #[test]
    fn step_flop_rule() {
        let ext = BTreeMap::from([('i', 4), ('j', 4), ('k', 4), ('a', 3), ('l', 5)]);
        // KRP: pure multiply per iteration point
        assert_eq!(
            step_flops("ja", Some("ka"), "jka", &ext).unwrap(),
            4 * 4 * 3
        );
        // TDOT: multiply-accumulate
        assert_eq!(
            step_flops("ijk", Some("jka"), "ia", &ext).unwrap(),
            2 * 64 * 3
        );
        assert_eq!(
            step_flops("ia", Some("al"), "il", &ext).unwrap(),
            2 * 4 * 3 * 5
        );
    }

    #[test]
    fn classification() {
        assert_eq!(classify("ja", Some("ka"), "jka"), OpClass::Krp);
        assert_eq!(classify("ia", Some("al"), "il"), OpClass::Gemm);
        assert_eq!(classify("i", Some("j"), "ij"), OpClass::Outer);
        assert_eq!(classify("ijk", Some("jka"), "ia"), OpClass::Tdot);
        assert_eq!(classify("ijk", Some("jb"), "ibk"), OpClass::Ttm);
        assert_eq!(classify("ij", Some("ij"), "ij"), OpClass::Elementwise);
        assert_eq!(classify("ij", Some("j"), "ij"), OpClass::Elementwise);
        assert_eq!(classify("ij", None, "ji"), OpClass::Elementwise);
    }

    #[test]
    fn operand_limit() {
        let text = "ab,bc,cd,de,ef,fg,gh,hi,ij->aj";
        let spec = bound(text, 2);
        assert_eq!(optimal_path(&spec), Err(PlanError::TooManyOperands(9)));
        let spec = bound("ab,bc,cd,de,ef,fg,gh,hi->ai", 2);
        assert_eq!(optimal_path(&spec).unwrap().steps.len(), 7);
    }

    #[test]
    fn unbound_extent_is_an_error() {
        let spec = EinsumSpec::parse("ij,jk->ik").unwrap();
        assert!(matches!(optimal_path(&spec), Err(PlanError::Einsum(_))));
    }

    #[test]
    fn mttkrp_tree_shape() {
        let spec = make_mttkrp(3, 0).unwrap().with_uniform_extent(8).unwrap();
        let tree = optimal_path(&spec).unwrap();
        let texts: Vec<String> = tree.steps.iter().map(|s| s.einsum_text()).collect();
        assert_eq!(texts, vec!["ja,ka->jka", "ijk,jka->ia"]);
    }

    #[test]
    fn deterministic() {
        let spec = bound("ij,jk,kl,lm->im", 6);
        assert_eq!(optimal_path(&spec).unwrap(), optimal_path(&spec).unwrap());
    }
}
