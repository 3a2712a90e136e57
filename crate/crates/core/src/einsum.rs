//! Einstein-notation kernel descriptions.
//!
//! An [`EinsumSpec`] keeps only the index strings of a kernel (`"ijk,ja,ka->ia"`)
//! plus, once bound, the extent of every index symbol.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EinsumError {
    #[error("malformed einsum `{text}`: {reason}")]
    Malformed { text: String, reason: String },
    #[error("index `{symbol}` repeats inside operand {operand}")]
    RepeatedIndex { operand: usize, symbol: char },
    #[error("index `{0}` repeats in the output")]
    RepeatedOutputIndex(char),
    #[error("output index `{0}` does not appear in any input")]
    OrphanOutputIndex(char),
    #[error("expected {expected} operand shapes, got {got}")]
    OperandCount { expected: usize, got: usize },
    #[error("operand {operand} has rank {got}, but its index string has {expected} symbols")]
    RankMismatch {
        operand: usize,
        expected: usize,
        got: usize,
    },
    #[error("conflicting extents for index `{symbol}`: {first} vs {second}")]
    ConflictingExtent {
        symbol: char,
        first: usize,
        second: usize,
    },
    #[error("index `{0}` has no extent")]
    UnboundIndex(char),
    #[error("index `{0}` has extent 0")]
    ZeroExtent(char),
    #[error("mode {mode} out of range for an order-{order} tensor")]
    ModeOutOfRange { mode: usize, order: usize },
    #[error("tensor order {0} not supported (2..=8)")]
    UnsupportedOrder(usize),
}

/// A parsed einsum kernel: one index string per operand, an output string,
/// and (optionally bound) extents for every symbol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EinsumSpec {
    pub inputs: Vec<String>,
    pub output: String,
    pub extents: BTreeMap<char, usize>,
}

impl EinsumSpec {
    /// Parses `<op>,<op>,...-><out>`. Whitespace is ignored.
    pub fn parse(text: &str) -> Result<Self, EinsumError> {
        let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
        let malformed = |reason: &str| EinsumError::Malformed {
            text: text.to_string(),
            reason: reason.to_string(),
        };
        let (lhs, rhs) = compact
            .split_once("->")
            .ok_or_else(|| malformed("missing `->`"))?;
        if rhs.contains("->") {
            return Err(malformed("more than one `->`"));
        }
        if lhs.is_empty() {
            return Err(malformed("no operands"));
        }
        let inputs: Vec<String> = lhs.split(',').map(str::to_string).collect();
        for (operand, s) in inputs.iter().enumerate() {
            if s.is_empty() {
                return Err(malformed("empty operand"));
            }
            if let Some(c) = s.chars().find(|c| !c.is_ascii_alphabetic()) {
                return Err(malformed(&format!("invalid character `{c}`")));
            }
            let mut seen = BTreeSet::new();
            for c in s.chars() {
                if !seen.insert(c) {
                    return Err(EinsumError::RepeatedIndex { operand, symbol: c });
                }
            }
        }
        if let Some(c) = rhs.chars().find(|c| !c.is_ascii_alphabetic()) {
            return Err(malformed(&format!("invalid character `{c}` in output")));
        }
        let mut seen = BTreeSet::new();
        for c in rhs.chars() {
            if !seen.insert(c) {
                return Err(EinsumError::RepeatedOutputIndex(c));
            }
            if !inputs.iter().any(|s| s.contains(c)) {
                return Err(EinsumError::OrphanOutputIndex(c));
            }
        }
        Ok(Self {
            inputs,
            output: rhs.to_string(),
            extents: BTreeMap::new(),
        })
    }

    /// Binds extents from one shape per operand.
    pub fn bind_extents(mut self, shapes: &[Vec<usize>]) -> Result<Self, EinsumError> {
        if shapes.len() != self.inputs.len() {
            return Err(EinsumError::OperandCount {
                expected: self.inputs.len(),
                got: shapes.len(),
            });
        }
        let mut extents = BTreeMap::new();
        for (operand, (s, shape)) in self.inputs.iter().zip(shapes).enumerate() {
            if s.len() != shape.len() {
                return Err(EinsumError::RankMismatch {
                    operand,
                    expected: s.len(),
                    got: shape.len(),
                });
            }
            for (c, &n) in s.chars().zip(shape) {
                if n == 0 {
                    return Err(EinsumError::ZeroExtent(c));
                }
                match extents.insert(c, n) {
                    Some(prev) if prev != n => {
                        return Err(EinsumError::ConflictingExtent {
                            symbol: c,
                            first: prev,
                            second: n,
                        })
                    }
                    _ => {}
                }
            }
        }
        self.extents = extents;
        Ok(self)
    }

    /// Binds extents from an explicit symbol table. Every symbol must be present;
    /// entries for symbols the kernel does not use are ignored.
    pub fn with_extents(mut self, table: &BTreeMap<char, usize>) -> Result<Self, EinsumError> {
        let mut extents = BTreeMap::new();
        for c in self.symbols() {
            let n = *table.get(&c).ok_or(EinsumError::UnboundIndex(c))?;
            if n == 0 {
                return Err(EinsumError::ZeroExtent(c));
            }
            extents.insert(c, n);
        }
        self.extents = extents;
        Ok(self)
    }

    /// Same extent for every symbol.
    pub fn with_uniform_extent(self, n: usize) -> Result<Self, EinsumError> {
        let table = self.symbols().into_iter().map(|c| (c, n)).collect();
        self.with_extents(&table)
    }

    /// All symbols, ordered by first appearance across the input strings.
    pub fn symbols(&self) -> Vec<char> {
        let mut out = Vec::new();
        for c in self.inputs.iter().flat_map(|s| s.chars()) {
            if !out.contains(&c) {
                out.push(c);
            }
        }
        out
    }

    pub fn num_inputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_bound(&self) -> bool {
        self.symbols().iter().all(|c| self.extents.contains_key(c))
    }

    pub fn extent(&self, c: char) -> Result<usize, EinsumError> {
        self.extents
            .get(&c)
            .copied()
            .ok_or(EinsumError::UnboundIndex(c))
    }

    /// Shape of operand `k` (requires bound extents).
    pub fn input_shape(&self, k: usize) -> Result<Vec<usize>, EinsumError> {
        self.inputs[k].chars().map(|c| self.extent(c)).collect()
    }

    pub fn output_shape(&self) -> Result<Vec<usize>, EinsumError> {
        self.output.chars().map(|c| self.extent(c)).collect()
    }

    /// Number of points in the full Cartesian iteration space.
    pub fn iteration_points(&self) -> Result<u128, EinsumError> {
        self.symbols()
            .into_iter()
            .try_fold(1u128, |acc, c| Ok(acc * self.extent(c)? as u128))
    }

    /// Arithmetic cost of the naive loop nest: `m` operations (m-1 multiplies and
    /// one add) per iteration point for an `m`-operand kernel.
    pub fn flop_count_naive(&self) -> Result<u128, EinsumError> {
        Ok(self.inputs.len() as u128 * self.iteration_points()?)
    }

    pub fn text(&self) -> String {
        format!("{}->{}", self.inputs.join(","), self.output)
    }
}

impl fmt::Display for EinsumSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

/// Parses `i=4,j=8` style extent tables.
pub fn parse_dims(text: &str) -> Result<BTreeMap<char, usize>, EinsumError> {
    let malformed = |reason: String| EinsumError::Malformed {
        text: text.to_string(),
        reason,
    };
    let mut out = BTreeMap::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (sym, val) = item
            .split_once('=')
            .ok_or_else(|| malformed(format!("`{item}` is not symbol=extent")))?;
        let mut chars = sym.trim().chars();
        let c = match (chars.next(), chars.next()) {
            (Some(c), None) if c.is_ascii_alphabetic() => c,
            _ => return Err(malformed(format!("`{sym}` is not a single index symbol"))),
        };
        let n: usize = val
            .trim()
            .parse()
            .map_err(|_| malformed(format!("`{val}` is not a positive integer")))?;
        if n == 0 {
            return Err(EinsumError::ZeroExtent(c));
        }
        if out.insert(c, n).is_some() {
            return Err(malformed(format!("`{c}` given twice")));
        }
    }
    Ok(out)
}

const MODE_SYMBOLS: &[u8] = b"ijklmnop";

fn mode_symbols(order: usize) -> Result<Vec<char>, EinsumError> {
    if !(2..=MODE_SYMBOLS.len()).contains(&order) {
        return Err(EinsumError::UnsupportedOrder(order));
    }
    Ok(MODE_SYMBOLS[..order].iter().map(|&b| b as char).collect())
}

fn check_mode(order: usize, mode: usize) -> Result<Vec<char>, EinsumError> {
    let modes = mode_symbols(order)?;
    if mode >= order {
        return Err(EinsumError::ModeOutOfRange { mode, order });
    }
    Ok(modes)
}

fn build(inputs: Vec<String>, output: String) -> EinsumSpec {
    EinsumSpec {
        inputs,
        output,
        extents: BTreeMap::new(),
    }
}

/// Mode-`n` matricization, transposition part only: mode `n` moves last.
/// Flattening the leading modes is a reshape left to callers.
pub fn make_matricization(order: usize, n: usize) -> Result<EinsumSpec, EinsumError> {
    let modes = check_mode(order, n)?;
    let input: String = modes.iter().collect();
    let mut output: String = modes.iter().filter(|&&c| c != modes[n]).collect();
    output.push(modes[n]);
    Ok(build(vec![input], output))
}

/// Tensor-times-matrix along mode `n`: `ijk,jr->irk` for order 3, mode 1.
pub fn make_ttm(order: usize, n: usize) -> Result<EinsumSpec, EinsumError> {
    let modes = check_mode(order, n)?;
    let tensor: String = modes.iter().collect();
    let matrix = format!("{}r", modes[n]);
    let output: String = modes
        .iter()
        .map(|&c| if c == modes[n] { 'r' } else { c })
        .collect();
    Ok(build(vec![tensor, matrix], output))
}

/// Khatri-Rao product of two matrices sharing the column index `r`.
pub fn make_krp() -> EinsumSpec {
    build(vec!["ir".into(), "jr".into()], "ijr".into())
}

/// Tensor-times-matrix chain over every mode except `n`. Mode `d` contracts
/// against a matrix whose second index is the `d`-th letter starting at `a`,
/// so order 5, mode 0 gives `ijklm,jb,kc,ld,me->ibcde`.
pub fn make_ttmc(order: usize, n: usize) -> Result<EinsumSpec, EinsumError> {
    let modes = check_mode(order, n)?;
    let rank = |d: usize| (b'a' + d as u8) as char;
    let mut inputs = vec![modes.iter().collect::<String>()];
    let mut output = String::new();
    for (d, &c) in modes.iter().enumerate() {
        if d == n {
            output.push(c);
        } else {
            inputs.push(format!("{c}{}", rank(d)));
            output.push(rank(d));
        }
    }
    Ok(build(inputs, output))
}

/// Mode-`n` MTTKRP with shared rank index `a`: order 3, mode 0 gives
/// `ijk,ja,ka->ia`.
pub fn make_mttkrp(order: usize, n: usize) -> Result<EinsumSpec, EinsumError> {
    let modes = check_mode(order, n)?;
    let mut inputs = vec![modes.iter().collect::<String>()];
    for (d, &c) in modes.iter().enumerate() {
        if d != n {
            inputs.push(format!("{c}a"));
        }
    }
    Ok(build(inputs, format!("{}a", modes[n])))
}
