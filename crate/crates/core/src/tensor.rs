//! Dense row-major `f64` tensors, the naive loop-nest oracle, and the
//! JSON-lines tensor file format.

use std::io::{BufRead, Write};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::einsum::{EinsumError, EinsumSpec};

/// Header line of the tensor file format.
pub const TENSOR_FORMAT: &str = "einplan-tensor/v1";

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("non-finite value at flat position {0}")]
    NonFinite(usize),
    #[error("operand {operand}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        operand: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Einsum(#[from] EinsumError),
    #[error("tensor file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    shape: Vec<usize>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(pos));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut out = Self::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for v in out.data.iter_mut() {
            *v = f(&idx);
            advance(&mut idx, shape);
        }
        out
    }

    /// Uniform values in `[-1, 1)` drawn from a ChaCha8 stream.
    pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn strides(&self) -> Vec<usize> {
        row_major_strides(&self.shape)
    }

    fn flat(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (&i, &n) in idx.iter().zip(&self.shape) {
            debug_assert!(i < n);
            off = off * n + i;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.flat(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let k = self.flat(idx);
        self.data[k] = v;
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    /// Copies the hyper-rectangle `ranges` out into a new tensor.
    pub fn slice(&self, ranges: &[Range<usize>]) -> Self {
        let shape: Vec<usize> = ranges.iter().map(|r| r.len()).collect();
        let base: Vec<usize> = ranges.iter().map(|r| r.start).collect();
        let mut global = vec![0; ranges.len()];
        Self::from_fn(&shape, |local| {
            for ((g, l), b) in global.iter_mut().zip(local).zip(&base) {
                *g = l + b;
            }
            self.get(&global)
        })
    }

    /// Writes `src` into the hyper-rectangle `ranges`.
    pub fn write_slice(&mut self, ranges: &[Range<usize>], src: &DenseTensor) {
        let shape: Vec<usize> = ranges.iter().map(|r| r.len()).collect();
        assert_eq!(shape, src.shape, "slice shape mismatch");
        let mut local = vec![0usize; shape.len()];
        let mut global = vec![0usize; shape.len()];
        for &v in &src.data {
            for ((g, l), r) in global.iter_mut().zip(&local).zip(ranges) {
                *g = r.start + l;
            }
            self.set(&global, v);
            advance(&mut local, &shape);
        }
    }

    /// Elementwise in-place sum.
    pub fn add_assign(&mut self, other: &DenseTensor) {
        assert_eq!(self.shape, other.shape, "add shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max |self - reference| / max |reference|`; absolute error when the
    /// reference is identically zero.
    pub fn max_relative_error(&self, reference: &DenseTensor) -> f64 {
        assert_eq!(self.shape, reference.shape, "compare shape mismatch");
        let diff = self
            .data
            .iter()
            .zip(&reference.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let scale = reference.max_abs();
        if scale > 0.0 {
            diff / scale
        } else {
            diff
        }
    }

    /// Axis permutation: output axis `k` is input axis `perm[k]`.
    pub fn permute(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.shape.len());
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let mut src = vec![0usize; perm.len()];
        Self::from_fn(&shape, |idx| {
            for (k, &p) in perm.iter().enumerate() {
                src[p] = idx[k];
            }
            self.get(&src)
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), TensorError> {
        let header = Header {
            format: TENSOR_FORMAT.to_string(),
            shape: self.shape.clone(),
        };
        serde_json::to_writer(&mut w, &header).map_err(|e| TensorError::Format(e.to_string()))?;
        writeln!(w)?;
        for v in &self.data {
            serde_json::to_writer(&mut w, v).map_err(|e| TensorError::Format(e.to_string()))?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, TensorError> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| TensorError::Format("empty file".into()))??;
        let header: Header =
            serde_json::from_str(&first).map_err(|e| TensorError::Format(e.to_string()))?;
        if header.format != TENSOR_FORMAT {
            return Err(TensorError::Format(format!(
                "unknown format tag `{}`",
                header.format
            )));
        }
        let mut data = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v: f64 =
                serde_json::from_str(&line).map_err(|e| TensorError::Format(e.to_string()))?;
            data.push(v);
        }
        Self::new(header.shape, data)
    }
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Odometer increment, last index fastest. Returns false after wrapping.
fn advance(idx: &mut [usize], shape: &[usize]) -> bool {
    for d in (0..idx.len()).rev() {
        idx[d] += 1;
        if idx[d] < shape[d] {
            return true;
        }
        idx[d] = 0;
    }
    false
}

/// One random operand per input of `spec`, drawn in operand order from a
/// single ChaCha8 stream seeded with `seed`.
pub fn random_operands(spec: &EinsumSpec, seed: u64) -> Result<Vec<DenseTensor>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..spec.num_inputs())
        .map(|k| Ok(DenseTensor::random(&spec.input_shape(k)?, &mut rng)))
        .collect()
}

/// Ground-truth evaluation: zero the output and accumulate the product of
/// all operands over the full Cartesian iteration space.
pub fn naive_evaluate(
    spec: &EinsumSpec,
    operands: &[DenseTensor],
) -> Result<DenseTensor, TensorError> {
    if operands.len() != spec.num_inputs() {
        return Err(EinsumError::OperandCount {
            expected: spec.num_inputs(),
            got: operands.len(),
        }
        .into());
    }
    for (k, t) in operands.iter().enumerate() {
        let expected = spec.input_shape(k)?;
        if t.shape() != expected.as_slice() {
            return Err(TensorError::ShapeMismatch {
                operand: k,
                expected,
                got: t.shape().to_vec(),
            });
        }
    }
    let loops = spec.symbols();
    let dims: Vec<usize> = loops
        .iter()
        .map(|&c| spec.extent(c))
        .collect::<Result<_, _>>()?;
    let out_shape = spec.output_shape()?;
    let mut out = DenseTensor::zeros(&out_shape);
    if dims.contains(&0) {
        return Ok(out);
    }

    // stride of loop variable d inside each tensor
    let stride_table = |indices: &str, shape_strides: Vec<usize>| -> Vec<usize> {
        loops
            .iter()
            .map(|&c| indices.find(c).map_or(0, |p| shape_strides[p]))
            .collect()
    };
    let op_strides: Vec<Vec<usize>> = spec
        .inputs
        .iter()
        .zip(operands)
        .map(|(s, t)| stride_table(s, t.strides()))
        .collect();
    let out_strides = stride_table(&spec.output, row_major_strides(&out_shape));

    let mut idx = vec![0usize; dims.len()];
    let mut offsets = vec![0usize; operands.len()];
    let mut out_off = 0usize;
    loop {
        let mut prod = 1.0;
        for (t, &off) in operands.iter().zip(&offsets) {
            prod *= t.data[off];
        }
        out.data[out_off] += prod;

        // odometer with incremental offsets
        let mut d = dims.len();
        loop {
            if d == 0 {
                return Ok(out);
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < dims[d] {
                for (off, st) in offsets.iter_mut().zip(&op_strides) {
                    *off += st[d];
                }
                out_off += out_strides[d];
                break;
            }
            let back = dims[d] - 1;
            for (off, st) in offsets.iter_mut().zip(&op_strides) {
                *off -= st[d] * back;
            }
            out_off -= out_strides[d] * back;
            idx[d] = 0;
        }
    }
}
