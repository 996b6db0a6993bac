#![allow(clippy::needless_range_loop)]

use std::sync::atomic::{AtomicUsize, Ordering};

use cabs_core::analysis::{balance_grid, ortho_check, overlap_rate};
use cabs_core::checkpoint::{write_checkpoint, Body, Checkpoint, Dtype, TensorData};
use cabs_core::conflict::{ca_sequential, make_mask_with_target_overlap, FillMode};
use cabs_core::pruning::{
    keep_count, prune_balanced_nm, prune_magnitude_layer, prune_magnitude_row, prune_random, Granularity,
};
use cabs_core::search::{grid_search, EvalResult, GridConfig};
use cabs_core::taskvec::{apply_mask_tensor, merge_tensor, MergeTerm};
use cabs_core::{BitMask, Tensor};
use proptest::prelude::*;

fn values(len: usize) -> impl Strategy<Value = Vec<f32>> {
    proptest::collection::vec(-8.0f32..8.0, len)
}

/// A 2-D shape and one value vector per task, of matching length.
fn tasks(k: usize, max_rows: usize, max_cols: usize) -> impl Strategy<Value = (Vec<usize>, Vec<Vec<f32>>)> {
    (1..=max_rows, 1..=max_cols)
        .prop_flat_map(move |(r, c)| (Just(vec![r, c]), proptest::collection::vec(values(r * c), k)))
}

fn shuffled(k: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..k).collect::<Vec<_>>()).prop_shuffle()
}

fn raw_tensor(name: String, dtype: &str, shape: Vec<usize>, fill: u8) -> TensorData {
    let dtype = Dtype::parse(dtype).unwrap();
    let n: usize = shape.iter().product();
    let bytes = (0..n * dtype.width())
        .map(|i| (i as u8).wrapping_mul(31).wrapping_add(fill))
        .collect();
    TensorData {
        name,
        dtype,
        shape,
        body: Body::Raw(bytes),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn container_round_trip_and_order_independent_reads(
        specs in proptest::collection::vec(
            (prop::sample::select(vec!["F32", "F16", "BF16", "I64", "U8", "BOOL"]),
             proptest::collection::vec(0usize..5, 0..3),
             any::<u8>()),
            0..6),
        reverse in any::<bool>(),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let tensors: Vec<TensorData> = specs
            .into_iter()
            .enumerate()
            .map(|(i, (dt, shape, fill))| raw_tensor(format!("t{i}"), dt, shape, fill))
            .collect();
        let first = dir.path().join("a.safetensors");
        write_checkpoint(&first, &[("k".into(), "v".into())], &tensors).unwrap();
        let ckpt = Checkpoint::open(&first).unwrap();
        let second = dir.path().join("b.safetensors");
        write_checkpoint(&second, ckpt.metadata(), &ckpt.to_entries().unwrap()).unwrap();
        prop_assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());

        let mut names: Vec<String> = ckpt.metas().iter().map(|m| m.name.clone()).collect();
        let forward: Vec<Vec<u8>> = names.iter().map(|n| ckpt.raw(n).unwrap().to_vec()).collect();
        if reverse {
            names.reverse();
        }
        for n in &names {
            let i: usize = n[1..].parse().unwrap();
            prop_assert_eq!(ckpt.raw(n).unwrap(), &forward[i][..]);
            if ckpt.meta(n).unwrap().dtype.is_float() {
                let bits = |t: Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                let fresh = Checkpoint::open(&first).unwrap();
                prop_assert_eq!(bits(ckpt.read_tensor(n).unwrap()), bits(fresh.read_tensor(n).unwrap()));
            }
        }
    }

    #[test]
    fn merge_matches_left_to_right_oracle(
        (shape, vs) in tasks(4, 6, 9),
        k in 1usize..=3,
        lambdas in proptest::collection::vec(0.05f32..3.0, 3),
        seed in any::<u64>(),
    ) {
        let n = shape.iter().product::<usize>();
        let base = Tensor::new(shape.clone(), vs[3].clone());
        let deltas: Vec<Tensor> = vs[..k].iter().map(|v| Tensor::new(shape.clone(), v.clone())).collect();
        let masks: Vec<BitMask> = (0..k).map(|i| prune_random(n, 0.5, seed, &format!("m{i}")).unwrap()).collect();
        let terms: Vec<MergeTerm> = (0..k)
            .map(|i| MergeTerm { delta: &deltas[i], mask: &masks[i], lambda: lambdas[i] })
            .collect();
        let got = merge_tensor("w", &base, &terms).unwrap();
        for j in 0..n {
            let mut want = base.data()[j];
            for i in 0..k {
                let m = if masks[i].get(j) { deltas[i].data()[j] } else { 0.0 };
                want += lambdas[i] * m;
            }
            prop_assert_eq!(got[j].to_bits(), want.to_bits());
        }
        let once = apply_mask_tensor(&deltas[0], &masks[0]).unwrap();
        prop_assert_eq!(apply_mask_tensor(&once, &masks[0]).unwrap(), once);
    }

    #[test]
    fn magnitude_masks_keep_exact_counts((shape, vs) in tasks(1, 12, 20), keep in 0.01f64..=1.0) {
        let v = &vs[0];
        let layer = prune_magnitude_layer(v, keep).unwrap();
        prop_assert_eq!(layer.count_ones(), keep_count(keep, v.len()));
        let row = prune_magnitude_row(v, &shape, keep).unwrap();
        prop_assert_eq!(row.count_ones(), shape[0] * keep_count(keep, shape[1]));
        let grid = balance_grid(&layer, shape[0], shape[1], 1, 1).unwrap();
        prop_assert_eq!(grid.total(), layer.count_ones());
    }

    #[test]
    fn random_masks_depend_only_on_seed_and_name(len in 1usize..500, keep in 0.01f64..=1.0, seed in any::<u64>()) {
        let a = prune_random(len, keep, seed, "layer.weight").unwrap();
        let b = prune_random(len, keep, seed, "layer.weight").unwrap();
        prop_assert_eq!(&a, &b);
        if a.count_ones() > 0 {
            prop_assert_eq!(overlap_rate(&a, &a).unwrap().rate, 1.0);
        }
    }

    #[test]
    fn ca_blocks_are_disjoint_orthogonal_and_balanced(
        (shape, vs) in tasks(4, 6, 24),
        m in 1usize..=8,
        k in 2usize..=4,
        order in shuffled(4),
    ) {
        let n = (m / k).max(1);
        prop_assume!(k * n <= m);
        let order: Vec<usize> = order.into_iter().filter(|&i| i < k).collect();
        let tensors: Vec<Tensor> = vs[..k].iter().map(|v| Tensor::new(shape.clone(), v.clone())).collect();
        let refs: Vec<&Tensor> = tensors.iter().collect();
        let masks = ca_sequential("w", &refs, Granularity::Blocks { n, m }, &order, FillMode::PerBlock).unwrap();
        let cols = shape[1];
        for (i, mask) in masks.iter().enumerate() {
            let plain = prune_balanced_nm(tensors[i].data(), &shape, n, m).unwrap();
            if i == order[0] {
                prop_assert_eq!(mask, &plain);
            }
            let tail = cols % m;
            for r in 0..shape[0] {
                for b in 0..cols / m {
                    let s = r * cols + b * m;
                    prop_assert_eq!(mask.count_range(s, s + m), n);
                }
                let s = r * cols + cols - tail;
                let (got, want) = (mask.count_range(s, s + tail), plain.count_range(s, s + tail));
                prop_assert!(got.abs_diff(want) <= 1);
            }
            for j in i + 1..k {
                prop_assert!(mask.is_disjoint(&masks[j]));
            }
        }
        let masked: Vec<Tensor> = (0..k).map(|i| apply_mask_tensor(&tensors[i], &masks[i]).unwrap()).collect();
        let mrefs: Vec<&Tensor> = masked.iter().collect();
        let ortho = ortho_check(&mrefs, &vec![1.3; k]).unwrap();
        prop_assert!(ortho.inner_products.iter().all(|&(_, _, v)| v == 0.0));
        prop_assert!(ortho.relative_residual <= 1e-6, "residual {}", ortho.relative_residual);
    }

    #[test]
    fn ca_overlap_is_minimal_for_any_quota((shape, vs) in tasks(2, 5, 16), m in 1usize..=8, na in 1usize..=8, swap in any::<bool>()) {
        let n = na.min(m);
        let a = Tensor::new(shape.clone(), vs[0].clone());
        let b = Tensor::new(shape.clone(), vs[1].clone());
        let order = if swap { vec![1, 0] } else { vec![0, 1] };
        let masks = ca_sequential("w", &[&a, &b], Granularity::Blocks { n, m }, &order, FillMode::PerBlock).unwrap();
        let both = masks[0].and(&masks[1]);
        let cols = shape[1];
        for r in 0..shape[0] {
            for blk in 0..cols / m {
                let s = r * cols + blk * m;
                prop_assert_eq!(both.count_range(s, s + m), (2 * n).saturating_sub(m));
            }
        }
    }

    #[test]
    fn ca_layer_masks_are_disjoint(vs in proptest::collection::vec(values(60), 3), keep in 0.01f64..=0.33, order in shuffled(3)) {
        let tensors: Vec<Tensor> = vs.iter().map(|v| Tensor::new(vec![60], v.clone())).collect();
        let refs: Vec<&Tensor> = tensors.iter().collect();
        for fill in [FillMode::PerBlock, FillMode::Global] {
            let masks = ca_sequential("w", &refs, Granularity::Layer { keep_fraction: keep }, &order, fill).unwrap();
            prop_assert_eq!(masks[order[0]].count_ones(), keep_count(keep, 60));
            let total: usize = masks.iter().map(BitMask::count_ones).sum();
            prop_assert_eq!(total, keep_count(3.0 * keep, 60));
            for i in 0..3 {
                for j in i + 1..3 {
                    prop_assert!(masks[i].is_disjoint(&masks[j]));
                }
            }
        }
    }

    #[test]
    fn target_overlap_is_met_and_monotone(len in 50usize..400, keep_a in 0.05f64..0.45, seed in any::<u64>()) {
        let a = BitMask::from_indices(len, (0..keep_count(keep_a, len)).map(|i| (i * 7 + seed as usize % 5) % len));
        prop_assume!(a.count_ones() == keep_count(keep_a, len));
        let kept_a = a.count_ones() as f64;
        let mut last = -1.0;
        for step in 0..=10 {
            let target = step as f64 / 10.0;
            let b = make_mask_with_target_overlap(&a, keep_a, target, seed).unwrap();
            let rate = overlap_rate(&a, &b).unwrap().rate;
            prop_assert!((rate - target).abs() <= 1.0 / kept_a, "target {} got {}", target, rate);
            prop_assert!(rate >= last);
            last = rate;
        }
    }

    #[test]
    fn search_argmax_is_scale_invariant(opt in 0.0f64..3.0, scale in 0.01f64..100.0) {
        let names = vec!["a".to_string()];
        let config = GridConfig::unified(0.0, 3.0);
        let calls = AtomicUsize::new(0);
        let f = |c: f64| move |l: &[f64]| EvalResult::new([("t".to_string(), -c * (l[0] - opt).powi(2))]);
        let counted = |l: &[f64]| {
            calls.fetch_add(1, Ordering::SeqCst);
            f(1.0)(l)
        };
        let plain = grid_search(&config, &names, &counted).unwrap();
        let scaled = grid_search(&config, &names, &f(scale)).unwrap();
        prop_assert_eq!(&plain.best_lambdas, &scaled.best_lambdas);
        let c = plain.coarse_best_lambdas[0];
        prop_assert!(plain.best_lambdas[0] >= c - 0.1 - 1e-9 && plain.best_lambdas[0] <= c + 0.1 + 1e-9);
        prop_assert!(plain.best_objective >= plain.coarse_best_objective);
        // Each λ is evaluated once; the fine window shares 3 points with the
        // coarse lattice (2 at the range ends).
        let fine = ((c + 0.1).min(3.0) - (c - 0.1).max(0.0)) / 0.01;
        let shared = if c == 0.0 || c == 3.0 { 2 } else { 3 };
        let expected = 31 + fine.round() as usize + 1 - shared;
        prop_assert_eq!(calls.load(Ordering::SeqCst), expected);
        prop_assert_eq!(plain.evaluations, expected);
    }
}
