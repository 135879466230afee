use datacl_core::adapter::DecomposedAdapterLayer;
use datacl_core::lifecycle::{apply_restoration, expand_for_task, ortho_loss, ortho_loss_grad, RestorationPolicy, SourceSnapshot};
use datacl_core::metrics::{ap, forget, fp, AccuracyMatrix};
use datacl_core::numerics::{cosine_sim, central_difference, Matrix, Rng};
use datacl_core::tasks::{gen_task_stream, StreamConfig};
use datacl_core::weighting::{ComponentBank, QueryVector};
use proptest::prelude::*;

fn random_layer(d_in: usize, d_out: usize, rl: usize, rh: usize, rng: &mut Rng) -> DecomposedAdapterLayer {
    let w0 = Matrix::randn(d_out, d_in, 0.5, rng);
    let b0 = (0..d_out).map(|_| rng.normal()).collect();
    let mut layer = DecomposedAdapterLayer::new(w0, b0, rl, rh, rng).unwrap();
    layer.a_low = Matrix::randn(d_out, rl, 0.5, rng);
    layer.a_high = Matrix::randn(d_out, rh, 0.5, rng);
    layer
}

fn bank_with(tasks: usize, rng: &mut Rng) -> ComponentBank {
    let mut bank = ComponentBank::new(4, 6, 5, true).unwrap();
    for t in 1..=tasks {
        expand_for_task(&mut bank, t, 2, rng).unwrap();
    }
    bank
}

/// Numerical rank by singular values above `tol` (relative to the largest).
fn rank(m: &Matrix, tol: f64) -> usize {
    let n = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    let sv = n.singular_values();
    let top = sv.iter().cloned().fold(0.0, f64::max);
    sv.iter().filter(|s| **s > tol * top.max(1.0)).count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_is_associative(seed in any::<u64>(), m in 1usize..6, k in 1usize..6, l in 1usize..6, n in 1usize..6) {
        let mut rng = Rng::new(seed);
        let a = Matrix::randn(m, k, 1.0, &mut rng);
        let b = Matrix::randn(k, l, 1.0, &mut rng);
        let c = Matrix::randn(l, n, 1.0, &mut rng);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        let scale = left.as_slice().iter().fold(1.0f64, |s, v| s.max(v.abs()));
        prop_assert!(left.max_abs_diff(&right) / scale < 1e-9);
    }

    #[test]
    fn cosine_is_scale_invariant(seed in any::<u64>(), c in 1e-3f64..1e3, d in 1usize..10) {
        let mut rng = Rng::new(seed);
        let u: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let cu: Vec<f64> = u.iter().map(|x| c * x).collect();
        prop_assert!((cosine_sim(&cu, &v) - cosine_sim(&u, &v)).abs() < 1e-12);
    }

    #[test]
    fn attention_weights_are_query_scale_invariant_and_bounded(seed in any::<u64>(), c in 1e-3f64..1e3) {
        let mut rng = Rng::new(seed);
        let bank = bank_with(2, &mut rng);
        let q: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let a = bank.attention_weights(&QueryVector(q.clone())).unwrap();
        let b = bank.attention_weights(&QueryVector(q.iter().map(|x| c * x).collect())).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!(x.abs() <= 1.0);
        }
    }

    #[test]
    fn expansion_leaves_old_weights_unchanged(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut bank = bank_with(1, &mut rng);
        let q = QueryVector((0..5).map(|_| rng.normal()).collect());
        let before = bank.attention_weights(&q).unwrap();
        expand_for_task(&mut bank, 2, 2, &mut rng).unwrap();
        let after = bank.attention_weights(&q).unwrap();
        prop_assert_eq!(after.len(), 4);
        for (x, y) in before.iter().zip(&after) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn compose_lambda_is_linear(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let bank = bank_with(2, &mut rng);
        let a1: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let a2: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let sum: Vec<f64> = a1.iter().zip(&a2).map(|(x, y)| x + y).collect();
        let lhs = bank.compose_lambda(&sum).unwrap();
        let rhs = bank.compose_lambda(&a1).unwrap().add(&bank.compose_lambda(&a2).unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn merged_layer_matches_branched_forward(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let layer = random_layer(7, 5, 2, 4, &mut rng);
        let lh: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let ll: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let merged = layer.reparameterize(&lh, &ll).unwrap();
        let x: Vec<f64> = (0..7).map(|_| rng.normal()).collect();
        let a = layer.fuse(&x, &lh, &ll).unwrap();
        let b = merged.forward(&x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() / u.abs().max(1.0) < 1e-6);
        }
    }

    #[test]
    fn branch_updates_respect_rank_bounds(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let layer = random_layer(10, 9, 2, 5, &mut rng);
        let lh: Vec<f64> = (0..9).map(|_| rng.normal()).collect();
        let ll: Vec<f64> = (0..9).map(|_| rng.normal()).collect();
        let high = layer.a_high.scale_rows(&lh).unwrap().matmul(&layer.b_high).unwrap();
        let low = layer.a_low.scale_rows(&ll).unwrap().matmul(&layer.b_low).unwrap();
        prop_assert!(rank(&high, 1e-8) <= 5);
        prop_assert!(rank(&low, 1e-8) <= 2);
    }

    #[test]
    fn ortho_gradient_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let b = Matrix::randn(4, 8, 0.7, &mut rng);
        let (value, grad) = ortho_loss_grad(&b);
        prop_assert!((value - ortho_loss(&b)).abs() < 1e-12);
        let mut flat = b.as_slice().to_vec();
        let numeric = central_difference(&mut flat, 1e-5, |p| ortho_loss(&Matrix::new(4, 8, p.to_vec()).unwrap()));
        for (a, n) in grad.as_slice().iter().zip(&numeric) {
            prop_assert!((a - n).abs() / n.abs().max(1.0) < 1e-6);
        }
    }

    #[test]
    fn restoration_preserves_shapes_and_only_touches_snapshotted(seed in any::<u64>(), p in 0.0f64..=1.0) {
        let mut rng = Rng::new(seed);
        let mut a: Vec<f64> = (0..30).map(|_| rng.normal()).collect();
        let mut b: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let b_before = b.clone();
        let mut snap = SourceSnapshot::new();
        snap.insert("a", vec![0.0; 30]);
        let policy = RestorationPolicy::new(p, 1).unwrap();
        let mut params = vec![("a".to_string(), a.as_mut_slice()), ("b".to_string(), b.as_mut_slice())];
        let restored = apply_restoration(&mut params, &snap, &policy, &mut rng).unwrap();
        prop_assert_eq!(a.len(), 30);
        prop_assert_eq!(&b, &b_before);
        prop_assert!(a.iter().filter(|v| **v == 0.0).count() >= restored);
    }

    #[test]
    fn metrics_are_permutation_equivariant(seed in any::<u64>(), n in 1usize..7) {
        let mut rng = Rng::new(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.uniform()).collect()).collect();
        let m = AccuracyMatrix::from_rows(&rows).unwrap();
        let mut perm = rng.permutation(n - 1);
        perm.push(n - 1);
        let r = m.relabel(&perm);
        prop_assert!((fp(&m).unwrap() - fp(&r).unwrap()).abs() < 1e-9);
        prop_assert!((ap(&m).unwrap() - ap(&r).unwrap()).abs() < 1e-9);
        prop_assert_eq!(forget(&m).unwrap(), ap(&m).unwrap() - fp(&m).unwrap());
    }

    #[test]
    fn raising_a_final_entry_raises_fp_and_lowers_forget(seed in any::<u64>(), n in 1usize..7, bump in 0.0f64..1.0) {
        let mut rng = Rng::new(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| 0.5 * rng.uniform()).collect()).collect();
        let m = AccuracyMatrix::from_rows(&rows).unwrap();
        let q = rng.below(n);
        let mut up = m.clone();
        up.set(q, n - 1, (m.get(q, n - 1).unwrap() + 0.5 * bump).min(1.0)).unwrap();
        prop_assert!(fp(&up).unwrap() >= fp(&m).unwrap());
        if q != n - 1 {
            prop_assert!(forget(&up).unwrap() <= forget(&m).unwrap());
        }
    }

    #[test]
    fn streams_are_deterministic_balanced_and_disjoint(seed in 0u64..1000) {
        let cfg = StreamConfig { num_tasks: 2, d_in: 6, train_size: 30, val_size: 7, test_size: 13, seed, ..StreamConfig::default() };
        let a = gen_task_stream(&cfg).unwrap();
        let b = gen_task_stream(&cfg).unwrap();
        prop_assert_eq!(&a, &b);
        for task in &a.tasks {
            let mut seen = std::collections::HashSet::new();
            for split in [&task.train, &task.val, &task.test] {
                let mut counts = vec![0usize; cfg.classes];
                split.labels.iter().for_each(|l| counts[*l] += 1);
                prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
                for r in 0..split.len() {
                    let key: Vec<u64> = split.x.row(r).iter().map(|v| v.to_bits()).collect();
                    prop_assert!(seen.insert(key));
                }
            }
        }
    }
}
