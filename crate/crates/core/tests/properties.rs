mod common;

use std::collections::BTreeMap;

use einplan::distribution::{build_schedule, BlockDistribution, ProcessGrid};
use einplan::einsum::{make_mttkrp, EinsumSpec};
use einplan::executor::{run_seeded, RunOptions};
use einplan::planner::{classify, optimal_path, OpClass};
use einplan::redistribute::{dim_partition, matching_ranks, plan, segment_bound};
use einplan::soap::{access_sum, best_partition, fuse, intensity, Sdg};
use einplan::tensor::{naive_evaluate, random_operands, DenseTensor};
use proptest::prelude::*;

use common::{brute_force_min_flops, evaluate_tree, left_deep_costs, rel_err};

const KERNELS: &[&str] = &[
    "ij,jk->ik",
    "ij,jk,kl->il",
    "ij,jk,kl,lm->im",
    "ijk,ja,ka->ia",
    "ijk,ia,ka->ja",
    "ijk,ja,ka,al->il",
    "ijklm,ja,ka,la,ma->ia",
    "ijklm,jb,kc,ld,me->ibcde",
    "i,j->ij",
    "ij->ji",
    "ijk->",
    "ia,ja->ija",
    "ij,ij->i",
    "abc,cd,de,bf->af",
    "ij,jk->i",
    "ijk,kl,lm->i",
];

/// Extents for `text`, every index at most `max`, shrunk until the loop
/// space stays small.
fn spec_with(text: &str, raw: &[usize], limit: u128) -> EinsumSpec {
    let spec = EinsumSpec::parse(text).unwrap();
    let mut table: BTreeMap<char, usize> = spec
        .symbols()
        .into_iter()
        .zip(raw.iter().cycle())
        .map(|(c, &n)| (c, n))
        .collect();
    while table.values().map(|&n| n as u128).product::<u128>() > limit {
        let (&c, _) = table.iter().max_by_key(|(_, &n)| n).unwrap();
        *table.get_mut(&c).unwrap() -= 1;
    }
    spec.with_extents(&table).unwrap()
}

fn kernel_strategy(max_extent: usize) -> impl Strategy<Value = EinsumSpec> {
    (0..KERNELS.len(), prop::collection::vec(1..=max_extent, 10))
        .prop_map(|(k, raw)| spec_with(KERNELS[k], &raw, 20_000))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn oracle_is_linear_in_each_operand(spec in kernel_strategy(5), seed in 0u64..1000, alpha in -3.0f64..3.0) {
        let ops = random_operands(&spec, seed).unwrap();
        let base = naive_evaluate(&spec, &ops).unwrap();
        for k in 0..ops.len() {
            let mut scaled = ops.clone();
            scaled[k] = scaled[k].scale(alpha);
            let out = naive_evaluate(&spec, &scaled).unwrap();
            prop_assert!(out.max_relative_error(&base.scale(alpha)) <= 1e-12);
        }
    }

    #[test]
    fn oracle_ignores_operand_order(spec in kernel_strategy(5), seed in 0u64..1000, rot in 0usize..8) {
        let ops = random_operands(&spec, seed).unwrap();
        let n = ops.len();
        let perm: Vec<usize> = (0..n).map(|k| (k + rot) % n).collect();
        let permuted = EinsumSpec {
            inputs: perm.iter().map(|&k| spec.inputs[k].clone()).collect(),
            output: spec.output.clone(),
            extents: spec.extents.clone(),
        };
        let pops: Vec<DenseTensor> = perm.iter().map(|&k| ops[k].clone()).collect();
        let a = naive_evaluate(&spec, &ops).unwrap();
        let b = naive_evaluate(&permuted, &pops).unwrap();
        prop_assert!(b.max_relative_error(&a) <= 1e-12);
    }

    #[test]
    fn mttkrp_equals_krp_then_contract(i in 1usize..=6, j in 1usize..=6, k in 1usize..=6, r in 1usize..=6, seed in 0u64..1000) {
        let spec = make_mttkrp(3, 0).unwrap()
            .with_extents(&BTreeMap::from([('i', i), ('j', j), ('k', k), ('a', r)])).unwrap();
        let ops = random_operands(&spec, seed).unwrap();
        let direct = naive_evaluate(&spec, &ops).unwrap();
        let krp_spec = EinsumSpec::parse("ja,ka->jka").unwrap().bind_extents(&[vec![j, r], vec![k, r]]).unwrap();
        let krp = naive_evaluate(&krp_spec, &ops[1..]).unwrap();
        let contract = EinsumSpec::parse("ijk,jka->ia").unwrap().bind_extents(&[vec![i, j, k], vec![j, k, r]]).unwrap();
        let two_step = naive_evaluate(&contract, &[ops[0].clone(), krp]).unwrap();
        prop_assert!(two_step.max_relative_error(&direct) <= 1e-12);
        prop_assert_eq!(classify("ja", Some("ka"), "jka"), OpClass::Krp);
    }

    #[test]
    fn tree_evaluation_matches_oracle(spec in kernel_strategy(6), seed in 0u64..1000) {
        let tree = optimal_path(&spec).unwrap();
        let ops = random_operands(&spec, seed).unwrap();
        let chained = evaluate_tree(&tree, &ops);
        let direct = naive_evaluate(&spec, &ops).unwrap();
        prop_assert!(chained.max_relative_error(&direct) <= 1e-12);
        prop_assert_eq!(&tree.steps.last().unwrap().result_indices, &spec.output);
    }

    #[test]
    fn optimal_path_is_exhaustive_minimum(spec in kernel_strategy(9)) {
        let tree = optimal_path(&spec).unwrap();
        prop_assert_eq!(tree.total_flops, brute_force_min_flops(&spec));
        prop_assert_eq!(tree.total_flops, tree.steps.iter().map(|s| s.flops).sum::<u128>());
        prop_assert!(tree.steps.iter().all(|s| s.flops > 0));
        if spec.num_inputs() <= 5 {
            for c in left_deep_costs(&spec) {
                prop_assert!(tree.total_flops <= c);
            }
        }
    }

    #[test]
    fn redistribution_routes_like_owner_computation(
        dims in prop::collection::vec((1usize..=12, 1usize..=12, 1usize..=12), 1..=3),
        rep_src in 1usize..=2,
        rep_dst in 1usize..=2,
    ) {
        // extents and per-side block sizes, clamped into range
        let ext: Vec<usize> = dims.iter().map(|d| d.0).collect();
        let by: Vec<usize> = dims.iter().map(|d| d.1.min(d.0)).collect();
        let bx: Vec<usize> = dims.iter().map(|d| d.2.min(d.0)).collect();
        let names = &"ijk"[..ext.len()];
        let side = |blocks: &[usize], rep: usize| {
            let mut idx = names.to_string();
            let mut pd: Vec<usize> = ext.iter().zip(blocks).map(|(&n, &b)| n.div_ceil(b)).collect();
            let mut full_ext = ext.clone();
            let mut full_b = blocks.to_vec();
            idx.push('z');
            pd.push(rep);
            full_ext.push(rep);
            full_b.push(1);
            BlockDistribution { grid: ProcessGrid::new(&idx, pd), extents: full_ext, blocks: full_b }
                .placement("T", names).unwrap()
        };
        let src = side(&by, rep_src);
        let dst = side(&bx, rep_dst);
        let p = plan("T", &src, &dst).unwrap();
        let total: usize = ext.iter().product();
        for r in 0..dst.dist.grid.size() {
            let ranges = dst.block_ranges(&dst.block_of(r));
            let mut hits = DenseTensor::zeros(&ranges.iter().map(|r| r.len()).collect::<Vec<_>>());
            for m in p.messages.iter().filter(|m| m.dst == r) {
                prop_assert_eq!(m.elements, m.src_ranges.iter().map(|x| x.len()).product::<usize>());
                // the source rank really owns each delivered element
                let sranges = src.block_ranges(&m.src_block);
                prop_assert_eq!(src.block_of(m.src), m.src_block.clone());
                for (d, (sr, dr)) in m.src_ranges.iter().zip(&m.dst_ranges).enumerate() {
                    prop_assert_eq!(sranges[d].start + sr.start, ranges[d].start + dr.start);
                    let g = sranges[d].start + sr.start;
                    prop_assert_eq!(g / by[d], m.src_block[d]);
                    prop_assert_eq!(g / bx[d], m.dst_block[d]);
                }
                let mut cur = hits.slice(&m.dst_ranges);
                cur.add_assign(&DenseTensor::from_fn(cur.shape(), |_| 1.0));
                hits.write_slice(&m.dst_ranges, &cur);
            }
            prop_assert!(hits.data().iter().all(|&v| v == 1.0));
        }
        let received: usize = p.messages.iter().map(|m| m.elements).sum();
        prop_assert_eq!(received, total * rep_dst);
        for d in 0..ext.len() {
            for py in 0..ext[d].div_ceil(by[d]) {
                let part = dim_partition(by[d], py, bx[d], ext[d]);
                prop_assert!(part.k() <= segment_bound(by[d], bx[d]));
                for s in &part.segments {
                    prop_assert!(matching_ranks(s.dst_block, bx[d], by[d]).contains(&py));
                }
            }
        }
    }

    #[test]
    fn bounds_are_monotone_in_fast_memory(k in 0..6usize, n in 8usize..64, s_lo in 16.0f64..512.0, grow in 1.01f64..8.0) {
        let text = ["ij,jk->ik", "ijk,ja,ka->ia", "ij,jk,kl->il", "ijk,ja,ka,al->il", "ij->ji", "ijklm,ja,ka,la,ma->ia"][k];
        let spec = EinsumSpec::parse(text).unwrap().with_uniform_extent(n).unwrap();
        let tree = optimal_path(&spec).unwrap();
        let sdg = Sdg::build(&spec, &tree);
        let stmt = fuse(&sdg.non_input(), &sdg, &spec, &tree);
        let lo = intensity(&stmt, s_lo).unwrap();
        let hi = intensity(&stmt, s_lo * grow).unwrap();
        prop_assert!(hi.rho >= lo.rho * (1.0 - 1e-6), "rho {} -> {}", lo.rho, hi.rho);
        prop_assert!(hi.q_bound <= lo.q_bound * (1.0 + 1e-6));
        for b in [&lo, &hi] {
            prop_assert!(access_sum(&stmt, &b.tiles) <= b.x0 * (1.0 + 1e-6));
            for (c, t) in &b.tiles {
                prop_assert!(*t <= stmt.extents[c] as f64 && *t >= 1.0);
            }
        }
    }
}

#[test]
fn gemm_bound_scales_with_root_of_fast_memory() {
    let n = 1usize << 20;
    let spec = EinsumSpec::parse("ij,jk->ik")
        .unwrap()
        .with_uniform_extent(n)
        .unwrap();
    let tree = optimal_path(&spec).unwrap();
    let sdg = Sdg::build(&spec, &tree);
    let stmt = fuse(&sdg.non_input(), &sdg, &spec, &tree);
    for s in [256.0f64, 1024.0, 4096.0] {
        let b = intensity(&stmt, s).unwrap();
        let ratio = b.q_bound * s.sqrt() / (2.0 * stmt.volume());
        assert!((ratio - 1.0).abs() < 5e-3, "S={s}: {ratio}");
    }
}

#[test]
fn fused_mttkrp_beats_unfused() {
    let spec = make_mttkrp(3, 0)
        .unwrap()
        .with_uniform_extent(1 << 16)
        .unwrap();
    let tree = optimal_path(&spec).unwrap();
    let sdg = Sdg::build(&spec, &tree);
    for s in [64.0f64, 256.0, 1024.0, 4096.0, 1e5] {
        let r = best_partition(&sdg, &spec, &tree, s).unwrap();
        let fused = r.candidates.iter().find(|c| c.blocks.len() == 1).unwrap();
        let split = r.candidates.iter().find(|c| c.blocks.len() == 2).unwrap();
        let volume = fuse(&sdg.non_input(), &sdg, &spec, &tree).volume();
        let rho_fused = volume / fused.total_q;
        let rho_split = volume / split.total_q;
        assert!(rho_fused > rho_split, "S={s}");
        assert_eq!(r.blocks.len(), 1);
        // the rank index is bounded by the extent, so the gap grows like S^(1/6)
        let _ = rel_err(rho_fused, rho_split);
    }
}

#[test]
fn simulation_verifies_across_process_counts() {
    let cases: &[(&str, usize)] = &[
        ("ij,jk->ik", 9),
        ("ij,jk,kl->il", 7),
        ("ijk,ja,ka->ia", 6),
        ("ijk,ia,ja->ka", 5),
        ("ijk,ja,ka,al->il", 6),
        ("ijklm,jb,kc,ld,me->ibcde", 2),
        ("i,j->ij", 8),
        ("ij->ji", 8),
    ];
    for &(text, n) in cases {
        let spec = EinsumSpec::parse(text)
            .unwrap()
            .with_uniform_extent(n)
            .unwrap();
        let tree = optimal_path(&spec).unwrap();
        let sdg = Sdg::build(&spec, &tree);
        let part = best_partition(&sdg, &spec, &tree, 32.0).unwrap();
        for procs in [1, 2, 4, 8] {
            let sched = build_schedule(&spec, &tree, &part, procs).unwrap();
            let r = run_seeded(&spec, &tree, &sched, procs as u64, &RunOptions::default()).unwrap();
            let v = r.verification.unwrap();
            assert!(v.passed, "{text} P={procs}: {}", v.max_relative_error);
            assert!(r.replicas_coherent, "{text} P={procs}");
            if procs == 1 {
                assert_eq!(r.comm.total, 0);
            }
        }
    }
}
