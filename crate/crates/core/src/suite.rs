//! Benchmark kernels and their initial problem sizes.

use std::collections::BTreeMap;

use crate::einsum::{EinsumError, EinsumSpec};

/// Default cap on the naive loop space of any executed kernel.
pub const DEFAULT_MAX_POINTS: u128 = 100_000_000;
pub const MAX_POINTS_ENV: &str = "EINPLAN_MAX_POINTS";

/// Smallest extent a scaled fixture is allowed to shrink to.
pub const MIN_EXTENT: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Kernel {
    pub name: &'static str,
    pub einsum: &'static str,
    /// Initial extent per index.
    pub base: BTreeMap<char, usize>,
}

impl Kernel {
    pub fn spec(&self, extents: &BTreeMap<char, usize>) -> Result<EinsumSpec, EinsumError> {
        EinsumSpec::parse(self.einsum)?.with_extents(extents)
    }
}

fn kernel(name: &'static str, einsum: &'static str, size: usize, rank: usize) -> Kernel {
    let spec = EinsumSpec::parse(einsum).expect("fixture einsum parses");
    // rank-like indices are the ones never indexing the leading operand
    let lead = spec.inputs[0].clone();
    let base = spec
        .symbols()
        .into_iter()
        .map(|c| {
            (
                c,
                if lead.contains(c) || rank == 0 {
                    size
                } else {
                    rank
                },
            )
        })
        .collect();
    Kernel { name, einsum, base }
}

/// The ten-kernel suite: matrix chains, MTTKRP of order 3 and 5, and the
/// order-5 TTM chain.
pub fn table3() -> Vec<Kernel> {
    vec![
        kernel("1MM", "ij,jk->ik", 4096, 0),
        kernel("2MM", "ij,jk,kl->il", 4096, 0),
        kernel("3MM", "ij,jk,kl,lm->im", 4096, 0),
        kernel("MTTKRP-O3-M0", "ijk,ja,ka->ia", 1024, 24),
        kernel("MTTKRP-O3-M1", "ijk,ia,ka->ja", 1024, 24),
        kernel("MTTKRP-O3-M2", "ijk,ia,ja->ka", 1024, 24),
        kernel("MTTKRP-O5-M0", "ijklm,ja,ka,la,ma->ia", 1024, 24),
        kernel("MTTKRP-O5-M2", "ijklm,ia,ja,la,ma->ka", 1024, 24),
        kernel("MTTKRP-O5-M4", "ijklm,ia,ja,ka,la->ma", 1024, 24),
        kernel("TTMc-O5-M0", "ijklm,jb,kc,ld,me->ibcde", 60, 24),
    ]
}

/// Resource cap from the environment, falling back to the default.
pub fn max_points() -> u128 {
    std::env::var(MAX_POINTS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(DEFAULT_MAX_POINTS)
}

/// Multiplies every initial extent by `scale` (rounded, at least
/// [`MIN_EXTENT`]), then shrinks the largest extents one step at a time until
/// the loop space fits under `cap`.
pub fn scaled_extents(kernel: &Kernel, scale: f64, cap: u128) -> BTreeMap<char, usize> {
    let mut ext: BTreeMap<char, usize> = kernel
        .base
        .iter()
        .map(|(&c, &n)| {
            (
                c,
                ((n as f64 * scale).round() as usize).clamp(MIN_EXTENT, n.max(MIN_EXTENT)),
            )
        })
        .collect();
    let points = |e: &BTreeMap<char, usize>| e.values().map(|&n| n as u128).product::<u128>();
    while points(&ext) > cap {
        let max = *ext.values().max().unwrap();
        if max <= MIN_EXTENT {
            break;
        }
        // shrink the largest extent, last symbol first for determinism
        let c = *ext.iter().rev().find(|(_, &n)| n == max).unwrap().0;
        *ext.get_mut(&c).unwrap() -= 1;
    }
    ext
}

/// Parses `1/64`, `0.25` or `1`.
pub fn parse_scale(text: &str) -> Option<f64> {
    let v = match text.split_once('/') {
        Some((a, b)) => a.trim().parse::<f64>().ok()? / b.trim().parse::<f64>().ok()?,
        None => text.trim().parse().ok()?,
    };
    (v.is_finite() && v > 0.0).then_some(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::einsum::{make_mttkrp, make_ttmc};

    #[test]
    fn suite_strings() {
        let s = table3();
        assert_eq!(s.len(), 10);
        let m = s.iter().find(|k| k.name == "MTTKRP-O5-M2").unwrap();
        assert_eq!(m.einsum, "ijklm,ia,ja,la,ma->ka");
        for (name, order, mode) in [
            ("MTTKRP-O3-M0", 3, 0),
            ("MTTKRP-O3-M1", 3, 1),
            ("MTTKRP-O3-M2", 3, 2),
            ("MTTKRP-O5-M0", 5, 0),
            ("MTTKRP-O5-M2", 5, 2),
            ("MTTKRP-O5-M4", 5, 4),
        ] {
            let k = s.iter().find(|k| k.name == name).unwrap();
            assert_eq!(k.einsum, make_mttkrp(order, mode).unwrap().text());
        }
        let t = s.iter().find(|k| k.name == "TTMc-O5-M0").unwrap();
        assert_eq!(t.einsum, make_ttmc(5, 0).unwrap().text());
    }

    #[test]
    fn base_sizes() {
        let s = table3();
        assert!(s[2].base.values().all(|&n| n == 4096));
        let m = &s[3].base;
        assert_eq!((m[&'i'], m[&'a']), (1024, 24));
        let t = &s[9].base;
        assert_eq!((t[&'m'], t[&'e']), (60, 24));
    }

    #[test]
    fn scaling_respects_cap() {
        for k in table3() {
            let e = scaled_extents(&k, 1.0 / 64.0, 100_000_000);
            let pts: u128 = e.values().map(|&n| n as u128).product();
            assert!(pts <= 100_000_000, "{}", k.name);
            assert!(e.values().all(|&n| n >= MIN_EXTENT));
        }
        let e = scaled_extents(&table3()[0], 1.0 / 64.0, u128::MAX);
        assert!(e.values().all(|&n| n == 64));
    }

    #[test]
    fn scale_text() {
        assert_eq!(parse_scale("1/64"), Some(1.0 / 64.0));
        assert_eq!(parse_scale("0.5"), Some(0.5));
        assert_eq!(parse_scale("0"), None);
        assert_eq!(parse_scale("x"), None);
    }
}
