use std::collections::BTreeMap;

use mdcdet_core::matching::solve;
use mdcdet_core::memory::{MemoryPool, PoolShape};
use mdcdet_core::metrics::{average_precision, continual_map, Detection};
use mdcdet_core::optim::Adam;
use mdcdet_core::{apply_gradient_mask, Annotation, BBox, GradientMask, Tape, Tensor};
use proptest::prelude::*;

fn permutations(n: usize, m: usize) -> Vec<Vec<usize>> {
    // Injective maps from n rows into m columns.
    fn go(n: usize, m: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for c in 0..m {
            if !cur.contains(&c) {
                cur.push(c);
                go(n, m, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(n, m, &mut Vec::new(), &mut out);
    out
}

fn cost_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=4, 0usize..=2)
        .prop_flat_map(|(n, extra)| prop::collection::vec(prop::collection::vec(-3.0f64..3.0, n + extra), n))
}

fn small_box() -> impl Strategy<Value = BBox> {
    (0.2f64..0.8, 0.2f64..0.8, 0.05f64..0.3, 0.05f64..0.3).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
}

proptest! {
    #[test]
    fn solver_reaches_the_exhaustive_minimum(cost in cost_matrix()) {
        let cols = solve(&cost).unwrap();
        let total = |a: &[usize]| a.iter().enumerate().map(|(r, &c)| cost[r][c]).sum::<f64>();
        let best = permutations(cost.len(), cost[0].len())
            .iter()
            .map(|p| total(p))
            .fold(f64::INFINITY, f64::min);
        let mut seen = cols.clone();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), cols.len());
        prop_assert!((total(&cols) - best).abs() <= 1e-12);
    }

    #[test]
    fn ap_is_a_fraction_and_ignores_score_scale(
        gt in prop::collection::vec(small_box(), 1..4),
        dets in prop::collection::vec((small_box(), 0.0f64..1.0), 0..6),
        scale in 0.1f64..10.0,
    ) {
        let truth = vec![gt.iter().map(|b| Annotation::new(0, *b)).collect::<Vec<_>>()];
        let make = |k: f64| dets.iter().map(|(b, s)| Detection { image: 0, class: 0, score: s * k, bbox: *b }).collect::<Vec<_>>();
        let a = average_precision(0, &make(1.0), &truth, 0.5).unwrap().unwrap();
        let b = average_precision(0, &make(scale), &truth, 0.5).unwrap().unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn perfect_detections_score_one(gt in prop::collection::vec(small_box(), 1..5)) {
        let truth = vec![gt.iter().map(|b| Annotation::new(2, *b)).collect::<Vec<_>>()];
        let dets: Vec<Detection> = gt
            .iter()
            .enumerate()
            .map(|(i, b)| Detection { image: 0, class: 2, score: 1.0 - i as f64 * 0.01, bbox: *b })
            .collect();
        prop_assert_eq!(average_precision(2, &dets, &truth, 0.5).unwrap(), Some(1.0));
    }

    #[test]
    fn continual_means_match_split_and_mean(
        sizes in prop::collection::vec(1usize..4, 1..5),
        values in prop::collection::vec(prop::option::weighted(0.8, 0.0f64..1.0), 16),
        pick in 0usize..5,
    ) {
        let mut splits = Vec::new();
        let mut next = 0;
        for s in &sizes {
            splits.push((next..next + s).collect::<Vec<usize>>());
            next += s;
        }
        let aps: BTreeMap<usize, Option<f64>> = (0..next).map(|c| (c, values[c])).collect();
        let t = pick % splits.len();
        let got = continual_map(&aps, t, &splits).unwrap();
        let mean = |cs: Vec<usize>| {
            let v: Vec<f64> = cs.iter().filter_map(|c| aps[c]).collect();
            if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) }
        };
        let past: Vec<usize> = splits[..t].concat();
        let all: Vec<usize> = splits[..=t].concat();
        prop_assert_eq!(got.map_p, if t == 0 { None } else { mean(past) });
        prop_assert_eq!(got.map_c, mean(splits[t].clone()));
        prop_assert_eq!(got.map_a, mean(all));
    }

    #[test]
    fn retrieval_weights_are_modulated_cosines(seed in 0u64..500) {
        let shape = PoolShape { n_units: 6, length: 4, dim: 5, n_tasks: 3 };
        let pool = MemoryPool::new(shape, seed).unwrap();
        let q: Vec<f64> = (0..5).map(|j| ((seed + j) as f64 * 0.77).sin() + 0.1).collect();
        let out = pool.retrieve(&Tensor::vector(q.clone())).unwrap();
        let (a, k, m) = (pool.modulation(), pool.keys(), pool.units());
        for i in 0..6 {
            let x: Vec<f64> = (0..5).map(|d| q[d] * a.at(&[d, i])).collect();
            let y: Vec<f64> = (0..5).map(|d| k.at(&[i, d])).collect();
            let dot: f64 = x.iter().zip(&y).map(|(p, r)| p * r).sum();
            let norm = |v: &[f64]| v.iter().map(|e| e * e).sum::<f64>().sqrt();
            let w = dot / (norm(&x) * norm(&y));
            prop_assert!((out.weights[i] - w).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&out.weights[i]));
        }
        for l in 0..4 {
            for d in 0..5 {
                let direct: f64 = (0..6).map(|i| out.weights[i] * m.at(&[l, d, i])).sum();
                prop_assert!((out.combined.at(&[l, d]) - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adam_leaves_frozen_chunks_untouched(seed in 0u64..200, task in 0usize..3) {
        let shape = PoolShape { n_units: 6, length: 2, dim: 3, n_tasks: 3 };
        let mut pool = MemoryPool::new(shape, seed).unwrap();
        pool.freeze_for_task(task).unwrap();
        let before = pool.clone();
        let mut tape = Tape::new();
        let q = tape.constant(&Tensor::vector(vec![0.3, -0.2, 0.9]));
        let (_, m) = pool.retrieve_on(&mut tape, q).unwrap();
        let loss = tape.sum(m).unwrap();
        tape.backward(loss, &mut [pool.store_mut()]).unwrap();
        let masks = pool.frozen_masks();
        Adam::new(0.1, 0.01).step(&mut [pool.store_mut()], &masks).unwrap();
        let own = pool.chunk_bounds(task).unwrap();
        for i in 0..6 {
            let frozen = !own.contains(&i);
            prop_assert_eq!(frozen, before.keys().row(i) == pool.keys().row(i));
            for d in 0..3 {
                prop_assert_eq!(frozen, before.modulation().at(&[d, i]) == pool.modulation().at(&[d, i]));
            }
        }
    }

    #[test]
    fn masking_zeroes_exactly_the_named_entries(
        values in prop::collection::vec(-5.0f64..5.0, 12),
        picked in prop::collection::btree_set(0usize..12, 0..12),
    ) {
        let g = Tensor::new(&[3, 4], values.clone()).unwrap();
        let mask = GradientMask::new("w", picked.iter().copied().collect());
        let once = apply_gradient_mask(&g, &mask).unwrap();
        for (j, (&a, &b)) in once.data().iter().zip(&values).enumerate() {
            prop_assert_eq!(a, if picked.contains(&j) { 0.0 } else { b });
        }
        prop_assert_eq!(apply_gradient_mask(&once, &mask).unwrap(), once);
    }

    #[test]
    fn tape_matmul_matches_the_triple_loop(
        (n, k, m) in (1usize..4, 1usize..4, 1usize..4),
        seed in 0u64..1000,
    ) {
        let val = |i: u64| ((seed * 31 + i) as f64 * 0.618).fract() - 0.5;
        let a = Tensor::new(&[n, k], (0..(n * k) as u64).map(val).collect()).unwrap();
        let b = Tensor::new(&[k, m], (100..100 + (k * m) as u64).map(val).collect()).unwrap();
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(&a), tape.constant(&b));
        let c = tape.matmul(va, vb).unwrap();
        let c = tape.tensor(c);
        for i in 0..n {
            for j in 0..m {
                let direct: f64 = (0..k).map(|l| a.at(&[i, l]) * b.at(&[l, j])).sum();
                prop_assert!((c.at(&[i, j]) - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(values in prop::collection::vec(-30.0f64..30.0, 6)) {
        let x = Tensor::new(&[2, 3], values).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(&x);
        let s = tape.softmax_rows(v).unwrap();
        let s = tape.tensor(s);
        for r in 0..2 {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(s.row(r).iter().all(|&p| p > 0.0));
        }
    }
}

#[test]
fn hand_walked_average_precision() {
    // Hit at 0.9, miss at 0.8, hit at 0.7 over two objects.
    let a = BBox::from_corners(0.1, 0.1, 0.3, 0.3);
    let b = BBox::from_corners(0.6, 0.6, 0.8, 0.8);
    let stray = BBox::from_corners(0.35, 0.6, 0.5, 0.9);
    let truth = vec![vec![Annotation::new(0, a), Annotation::new(0, b)]];
    let dets = vec![
        Detection { image: 0, class: 0, score: 0.9, bbox: a },
        Detection { image: 0, class: 0, score: 0.8, bbox: stray },
        Detection { image: 0, class: 0, score: 0.7, bbox: b },
    ];
    let ap = average_precision(0, &dets, &truth, 0.5).unwrap().unwrap();
    assert!((ap - 5.0 / 6.0).abs() <= 1e-9);
}
