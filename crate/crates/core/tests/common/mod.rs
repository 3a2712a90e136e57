//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use einplan::einsum::EinsumSpec;
use einplan::planner::{ContractionTree, OperandRef};
use einplan::tensor::{naive_evaluate, DenseTensor};

fn points(indices: &[char], extents: &BTreeMap<char, usize>) -> u128 {
    indices.iter().map(|c| extents[c] as u128).product()
}

/// Cost of merging `a` and `b` into `keep`: one operation per point of the
/// joint loop nest, two when any index is summed away.
fn pair_cost(a: &[char], b: &[char], keep: &[char], extents: &BTreeMap<char, usize>) -> u128 {
    let mut joint: Vec<char> = a.to_vec();
    for &c in b {
        if !joint.contains(&c) {
            joint.push(c);
        }
    }
    let sums = joint.iter().any(|c| !keep.contains(c));
    points(&joint, extents) * if sums { 2 } else { 1 }
}

fn merge(a: &[char], b: &[char], rest: &[Vec<char>], output: &[char]) -> Vec<char> {
    let mut joint: Vec<char> = a.to_vec();
    for &c in b {
        if !joint.contains(&c) {
            joint.push(c);
        }
    }
    joint
        .into_iter()
        .filter(|c| output.contains(c) || rest.iter().any(|r| r.contains(c)))
        .collect()
}

fn search(ops: Vec<Vec<char>>, output: &[char], extents: &BTreeMap<char, usize>) -> u128 {
    if ops.len() == 1 {
        return 0;
    }
    let mut best = u128::MAX;
    for i in 0..ops.len() {
        for j in i + 1..ops.len() {
            let rest: Vec<Vec<char>> = ops
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != i && k != j)
                .map(|(_, o)| o.clone())
                .collect();
            let keep = merge(&ops[i], &ops[j], &rest, output);
            let cost = pair_cost(&ops[i], &ops[j], &keep, extents);
            let mut next = rest;
            next.push(keep);
            best = best.min(cost + search(next, output, extents));
        }
    }
    best
}

/// Minimum total cost over every pairwise contraction order, by exhaustive
/// recursion without any memoization.
pub fn brute_force_min_flops(spec: &EinsumSpec) -> u128 {
    let ops: Vec<Vec<char>> = spec.inputs.iter().map(|s| s.chars().collect()).collect();
    let output: Vec<char> = spec.output.chars().collect();
    if ops.len() == 1 {
        // a unary step touches each element once, reduction or not
        return points(&ops[0], &spec.extents);
    }
    search(ops, &output, &spec.extents)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Costs of every left-deep chain `((o_p0 o_p1) o_p2) ...`.
pub fn left_deep_costs(spec: &EinsumSpec) -> Vec<u128> {
    let ops: Vec<Vec<char>> = spec.inputs.iter().map(|s| s.chars().collect()).collect();
    let output: Vec<char> = spec.output.chars().collect();
    permutations(ops.len())
        .into_iter()
        .map(|perm| {
            let mut acc = ops[perm[0]].clone();
            // a lone operand still needs its unary step
            let mut total = if perm.len() == 1 {
                points(&acc, &spec.extents)
            } else {
                0
            };
            for k in 1..perm.len() {
                let rest: Vec<Vec<char>> = perm[k + 1..].iter().map(|&p| ops[p].clone()).collect();
                let keep = merge(&acc, &ops[perm[k]], &rest, &output);
                total += pair_cost(&acc, &ops[perm[k]], &keep, &spec.extents);
                acc = keep;
            }
            total
        })
        .collect()
}

/// Evaluates a tree step by step with the naive oracle on whole tensors.
pub fn evaluate_tree(tree: &ContractionTree, inputs: &[DenseTensor]) -> DenseTensor {
    let mut results: Vec<DenseTensor> = Vec::new();
    for step in &tree.steps {
        let operands: Vec<DenseTensor> = step
            .operands()
            .map(|(r, _)| match r {
                OperandRef::Input(k) => inputs[k].clone(),
                OperandRef::Step(s) => results[s].clone(),
            })
            .collect();
        let shapes: Vec<Vec<usize>> = operands.iter().map(|t| t.shape().to_vec()).collect();
        let step_spec = EinsumSpec::parse(&step.einsum_text())
            .unwrap()
            .bind_extents(&shapes)
            .unwrap();
        results.push(naive_evaluate(&step_spec, &operands).unwrap());
    }
    results.pop().unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}
