//! Invariants checked over generated inputs.

use hytnas::autodiff::Graph;
use hytnas::derivation::{derive_genotype, ArchSnapshot, CellArch, Genotype, LayerArch, NetShape};
use hytnas::optim::{cosine_lr, sgd_update};
use hytnas::pipeline::{
    coverage_counts, overlap_average, sample_split, window_origins, MetricsReport, Transform,
};
use hytnas::search_space::MENU_LEN;
use hytnas::Tensor;
use proptest::prelude::*;
use std::path::Path;

fn snapshot_strategy() -> impl Strategy<Value = ArchSnapshot> {
    (1usize..=3, 1usize..=4).prop_flat_map(|(layers, nodes)| {
        let edges: usize = (0..nodes).map(|i| i + 2).sum();
        let cell = prop::collection::vec(-3.0f64..3.0, edges * MENU_LEN);
        prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, cell.clone(), cell), layers).prop_map(move |ls| {
            let shape = NetShape {
                bands: 8,
                classes: 2,
                layers,
                nodes,
                width: 2,
            };
            let unflatten = |flat: Vec<f64>| -> CellArch {
                let mut it = flat.chunks(MENU_LEN).map(|c| c.to_vec());
                (0..nodes).map(|i| (0..i + 2).map(|_| it.next().unwrap()).collect()).collect()
            };
            ArchSnapshot {
                shape,
                normalized: false,
                layers: ls
                    .into_iter()
                    .map(|(alpha, beta, spa, spe)| LayerArch {
                        alpha,
                        beta,
                        spa: Some(unflatten(spa)),
                        spe: Some(unflatten(spe)),
                    })
                    .collect(),
            }
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-20.0f64..20.0, 12)) {
        let g = Graph::new();
        let y = g.constant(Tensor::new(&[3, 4], data)).softmax(1);
        for row in y.value().data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn derived_genotypes_are_valid(snap in snapshot_strategy()) {
        let g = derive_genotype(&snap).unwrap();
        g.validate().unwrap();
        for layer in &g.layers {
            for (i, node) in layer.nodes.iter().enumerate() {
                prop_assert_eq!(node.len(), 2);
                prop_assert!(node[0].input < node[1].input);
                prop_assert!(node[1].input < i + 2);
                prop_assert!(node.iter().all(|e| !e.op.is_discarding()));
            }
        }
        // normalizing first does not change the result
        prop_assert_eq!(derive_genotype(&snap.normalized()).unwrap(), g.clone());
        let back = Genotype::from_json(Path::new("g.json"), &g.to_canonical_json()).unwrap();
        prop_assert_eq!(back, g);
    }

    #[test]
    fn windows_cover_every_pixel(h in 1usize..40, w in 1usize..40, win in 1usize..20, overlap: bool) {
        let win = win.min(h).min(w);
        let stride = if overlap { (win / 2).max(1) } else { win };
        for (extent, origins) in [(h, window_origins(h, win, stride)), (w, window_origins(w, win, stride))] {
            prop_assert_eq!(*origins.last().unwrap(), extent - win);
            prop_assert!(origins.windows(2).all(|p| p[0] < p[1]));
        }
        let cov = coverage_counts(h, w, win, stride);
        prop_assert!(cov.iter().all(|&c| c >= 1));
    }

    #[test]
    fn averaging_constant_tiles_is_exact(h in 2usize..20, w in 2usize..20, win in 1usize..8, p in 0.05f64..0.95) {
        let win = win.min(h).min(w);
        let pred = overlap_average(h, w, 2, win, (win / 2).max(1), 3, |origins| {
            Ok(origins
                .iter()
                .map(|_| {
                    let mut t = vec![p; win * win];
                    t.extend(std::iter::repeat_n(1.0 - p, win * win));
                    t
                })
                .collect())
        })
        .unwrap();
        prop_assert!(pred.probs.iter().take(h * w).all(|&v| (v - p).abs() < 1e-12));
        let expected = if p >= 0.5 { 1 } else { 2 };
        prop_assert!(pred.class_map.iter().all(|&c| c == expected));
    }

    #[test]
    fn transforms_permute_the_patch(flip_rows: bool, flip_cols: bool, rot in 0u8..4, p in 1usize..9) {
        let t = Transform { flip_rows, flip_cols, rot };
        let mut seen = vec![false; p * p];
        for r in 0..p {
            for c in 0..p {
                let (a, b) = t.apply(r, c, p);
                prop_assert!(a < p && b < p);
                prop_assert!(!seen[a * p + b]);
                seen[a * p + b] = true;
            }
        }
    }

    #[test]
    fn splits_are_disjoint_and_capped(
        labels in prop::collection::vec(0u32..4, 30..200),
        n_train in 1usize..8,
        n_val in 1usize..5,
        seed: u64,
    ) {
        let width = 10;
        let labels: Vec<u32> = labels.iter().copied().take(labels.len() / width * width).collect();
        let present: Vec<usize> = (1..=3).filter(|&k| labels.contains(&(k as u32))).collect();
        prop_assume!(present.len() == 3);
        let split = sample_split(&labels, width, 3, n_train, n_val, seed).unwrap();
        let mut seen = std::collections::HashSet::new();
        for px in split.train.iter().chain(&split.val).chain(&split.test) {
            prop_assert!(seen.insert((px.row, px.col)));
            prop_assert_eq!(labels[px.row * width + px.col], px.label);
        }
        prop_assert_eq!(seen.len(), labels.iter().filter(|&&l| l != 0).count());
        for k in 1..=3u32 {
            let n = labels.iter().filter(|&&l| l == k).count();
            let train = split.train.iter().filter(|p| p.label == k).count();
            prop_assert_eq!(train, n_train.min(n));
        }
        let again = sample_split(&labels, width, 3, n_train, n_val, seed).unwrap();
        prop_assert_eq!(again, split);
    }

    #[test]
    fn metrics_stay_in_range(cells in prop::collection::vec(0u64..50, 9)) {
        prop_assume!(cells.iter().sum::<u64>() > 0);
        let m: Vec<Vec<u64>> = cells.chunks(3).map(|r| r.to_vec()).collect();
        let r = MetricsReport::from_confusion(m).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.oa));
        prop_assert!((0.0..=1.0).contains(&r.aa));
        prop_assert!(r.kappa <= 1.0 + 1e-12);
    }

    #[test]
    fn perfect_predictions_score_one(diag in prop::collection::vec(1u64..100, 2..6)) {
        let k = diag.len();
        let m: Vec<Vec<u64>> = (0..k).map(|i| (0..k).map(|j| if i == j { diag[i] } else { 0 }).collect()).collect();
        let r = MetricsReport::from_confusion(m).unwrap();
        prop_assert_eq!((r.oa, r.aa, r.kappa), (1.0, 1.0, 1.0));
    }

    #[test]
    fn cosine_schedule_never_increases(total in 1usize..200, lr_min in 0.0f64..0.01, span in 0.001f64..0.1) {
        let lr_max = lr_min + span;
        let lrs: Vec<f64> = (0..=total).map(|s| cosine_lr(s, total, lr_max, lr_min)).collect();
        prop_assert!(lrs.windows(2).all(|p| p[1] <= p[0]));
        prop_assert_eq!(lrs[0], lr_max);
        prop_assert_eq!(lrs[total], lr_min);
    }

    #[test]
    fn plain_sgd_is_gradient_descent(
        p in prop::collection::vec(-5.0f64..5.0, 6),
        grad in prop::collection::vec(-5.0f64..5.0, 6),
        lr in 0.0f64..1.0,
    ) {
        let mut q = p.clone();
        let mut v = vec![0.0; 6];
        sgd_update(&mut q, &grad, &mut v, lr, 0.0, 0.0);
        for i in 0..6 {
            prop_assert_eq!(q[i], p[i] - lr * grad[i]);
        }
    }
}

#[test]
fn shared_leaves_accumulate_gradients() {
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(&[2], vec![1.5, -2.0]));
    let y = x.add(x).add(x.scale(3.0)).sum();
    let grads = y.backward_all();
    assert_eq!(grads.wrt(x).unwrap().data(), &[5.0, 5.0]);
}
