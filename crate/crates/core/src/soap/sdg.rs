//! Symbolic directed graph of a contraction tree and its fusion partitions.

use serde::{Deserialize, Serialize};

use crate::einsum::EinsumSpec;
use crate::planner::{ContractionTree, OperandRef};

pub const MAX_PARTITION_VERTICES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VertexRole {
    Input,
    Intermediate,
    Output,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vertex {
    pub name: String,
    pub indices: String,
    pub role: VertexRole,
    pub source: OperandRef,
}

/// Vertices are the tree's inputs (in operand order) followed by one vertex per
/// step; the last step is the output. Edges point producer to consumer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sdg {
    pub vertices: Vec<Vertex>,
    pub edges: Vec<(usize, usize)>,
    num_inputs: usize,
}

/// Tensor name used across plans and reports.
pub fn tensor_name(tree: &ContractionTree, r: OperandRef) -> String {
    match r {
        OperandRef::Input(k) => format!("in{k}"),
        OperandRef::Step(s) if s == tree.output_step() => "out".to_string(),
        OperandRef::Step(s) => format!("t{s}"),
    }
}

impl Sdg {
    pub fn build(spec: &EinsumSpec, tree: &ContractionTree) -> Self {
        let n = spec.num_inputs();
        let mut vertices: Vec<Vertex> = spec
            .inputs
            .iter()
            .enumerate()
            .map(|(k, s)| Vertex {
                name: tensor_name(tree, OperandRef::Input(k)),
                indices: s.clone(),
                role: VertexRole::Input,
                source: OperandRef::Input(k),
            })
            .collect();
        let last = tree.output_step();
        let mut edges = Vec::new();
        for (s, step) in tree.steps.iter().enumerate() {
            vertices.push(Vertex {
                name: tensor_name(tree, OperandRef::Step(s)),
                indices: step.result_indices.clone(),
                role: if s == last {
                    VertexRole::Output
                } else {
                    VertexRole::Intermediate
                },
                source: OperandRef::Step(s),
            });
            for (r, _) in step.operands() {
                let from = match r {
                    OperandRef::Input(k) => k,
                    OperandRef::Step(p) => n + p,
                };
                edges.push((from, n + s));
            }
        }
        Self {
            vertices,
            edges,
            num_inputs: n,
        }
    }

    pub fn num_inputs(&self) -> usize {
        self.num_inputs
    }

    /// Vertex ids of every non-input vertex.
    pub fn non_input(&self) -> Vec<usize> {
        (self.num_inputs..self.vertices.len()).collect()
    }

    /// Step index of a non-input vertex.
    pub fn step_of(&self, v: usize) -> usize {
        v - self.num_inputs
    }

    pub fn vertex_of_step(&self, s: usize) -> usize {
        self.num_inputs + s
    }

    pub fn names(&self, block: &[usize]) -> Vec<String> {
        block
            .iter()
            .map(|&v| self.vertices[v].name.clone())
            .collect()
    }

    fn connected(&self, block: &[usize]) -> bool {
        let Some(&start) = block.first() else {
            return false;
        };
        let mut seen = vec![start];
        let mut frontier = vec![start];
        while let Some(v) = frontier.pop() {
            for &(a, b) in &self.edges {
                let other = if a == v {
                    b
                } else if b == v {
                    a
                } else {
                    continue;
                };
                if block.contains(&other) && !seen.contains(&other) {
                    seen.push(other);
                    frontier.push(other);
                }
            }
        }
        seen.len() == block.len()
    }

    /// Every set partition of the non-input vertices whose blocks are
    /// connected, in restricted-growth order.
    pub fn enumerate_partitions(&self) -> Result<Vec<Vec<Vec<usize>>>, usize> {
        let items = self.non_input();
        if items.len() > MAX_PARTITION_VERTICES {
            return Err(items.len());
        }
        let mut out = Vec::new();
        let mut labels = vec![0usize; items.len()];
        self.grow(&items, &mut labels, 0, 0, &mut out);
        Ok(out)
    }

    fn grow(
        &self,
        items: &[usize],
        labels: &mut [usize],
        pos: usize,
        used: usize,
        out: &mut Vec<Vec<Vec<usize>>>,
    ) {
        if pos == items.len() {
            let blocks: Vec<Vec<usize>> = (0..used)
                .map(|b| {
                    items
                        .iter()
                        .zip(labels.iter())
                        .filter(|(_, &l)| l == b)
                        .map(|(&v, _)| v)
                        .collect()
                })
                .collect();
            if blocks.iter().all(|b| self.connected(b)) {
                out.push(blocks);
            }
            return;
        }
        for label in 0..=used {
            labels[pos] = label;
            let next = if label == used { used + 1 } else { used };
            self.grow(items, labels, pos + 1, next, out);
        }
    }
}
