use ndarray::Array2;
use proptest::prelude::*;

use spmll::adversarial::{fgsm_perturb, project_linf};
use spmll::corrgraph::{ClassSemantic, CorrelationGraph};
use spmll::model::{gcn_refine, predict_probs, ModelDims, VerbClassifier};

fn semantics(rows: &[Vec<f64>]) -> Vec<ClassSemantic> {
    rows.iter()
        .enumerate()
        .map(|(c, e)| ClassSemantic {
            class_id: c,
            name: format!("c{c}"),
            definition: String::new(),
            embedding: e.clone(),
        })
        .collect()
}

fn embeddings(l: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), l)
        .prop_filter("nonzero rows", |rows| rows.iter().all(|r| r.iter().any(|v| v.abs() > 1e-3)))
}

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn graph_rows_are_stochastic(
        rows in (3usize..12).prop_flat_map(|l| embeddings(l, 5)),
        k in 1usize..3,
        s in 0.1f64..0.9,
    ) {
        let Ok(g) = CorrelationGraph::from_semantics(&semantics(&rows), k, s) else {
            // Rows whose k neighbors all have negative similarity are rejected.
            return Ok(());
        };
        for (i, row) in g.entries().rows().into_iter().enumerate() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            prop_assert_eq!(row[i], 1.0 - s);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            let off = row.iter().enumerate().filter(|&(j, &v)| j != i && v > 0.0).count();
            prop_assert!(off <= k);
        }
    }

    #[test]
    fn graph_ignores_embedding_scale(
        rows in embeddings(6, 4),
        scales in prop::collection::vec(0.1f64..10.0, 6),
    ) {
        let scaled: Vec<Vec<f64>> = rows
            .iter()
            .zip(&scales)
            .map(|(r, &a)| r.iter().map(|v| v * a).collect())
            .collect();
        let a = CorrelationGraph::from_semantics(&semantics(&rows), 2, 0.5);
        let b = CorrelationGraph::from_semantics(&semantics(&scaled), 2, 0.5);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                for (x, y) in a.entries().iter().zip(b.entries()) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }
            (a, b) => prop_assert_eq!(a.is_ok(), b.is_ok()),
        }
    }

    #[test]
    fn graph_is_permutation_equivariant(rows in embeddings(6, 4), shift in 1usize..6) {
        let perm: Vec<usize> = (0..6).map(|i| (i + shift) % 6).collect();
        let mut permuted = vec![Vec::new(); 6];
        for (i, &p) in perm.iter().enumerate() {
            permuted[p] = rows[i].clone();
        }
        let a = CorrelationGraph::from_semantics(&semantics(&rows), 2, 0.4);
        let b = CorrelationGraph::from_semantics(&semantics(&permuted), 2, 0.4);
        if let (Ok(a), Ok(b)) = (a, b) {
            for i in 0..6 {
                for j in 0..6 {
                    prop_assert!((a.entries()[[i, j]] - b.entries()[[perm[i], perm[j]]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn head_ignores_positive_rescaling(
        e in matrix(3, 4, -1.0, 1.0),
        c in matrix(5, 4, -1.0, 1.0),
        row_scales in prop::collection::vec(0.01f64..100.0, 3),
        center_scales in prop::collection::vec(0.01f64..100.0, 5),
    ) {
        prop_assume!(e.rows().into_iter().all(|r| r.dot(&r) > 1e-4));
        prop_assume!(c.rows().into_iter().all(|r| r.dot(&r) > 1e-4));
        let mut e2 = e.clone();
        for (mut r, &a) in e2.rows_mut().into_iter().zip(&row_scales) {
            r *= a;
        }
        let mut c2 = c.clone();
        for (mut r, &a) in c2.rows_mut().into_iter().zip(&center_scales) {
            r *= a;
        }
        let p = predict_probs(&e, &c, 10.0).unwrap();
        let q = predict_probs(&e2, &c2, 10.0).unwrap();
        for (x, y) in p.iter().zip(&q) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn head_is_monotone_in_cosine(t1 in 0.0f64..3.1, dt in 1e-3f64..3.0) {
        // Rotating the center away from e lowers the cosine and the probability.
        let t2 = (t1 + dt).min(std::f64::consts::PI);
        prop_assume!(t2 > t1);
        let e = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        let near = Array2::from_shape_vec((1, 2), vec![t1.cos(), t1.sin()]).unwrap();
        let far = Array2::from_shape_vec((1, 2), vec![t2.cos(), t2.sin()]).unwrap();
        let p_near = predict_probs(&e, &near, 10.0).unwrap()[[0, 0]];
        let p_far = predict_probs(&e, &far, 10.0).unwrap()[[0, 0]];
        prop_assert!(p_near > p_far);
    }

    #[test]
    fn gcn_identity_doubles_nonnegative_centers(c in matrix(4, 3, 0.0, 2.0), layers in 1usize..4) {
        let eye4 = Array2::eye(4);
        let weights = vec![Array2::eye(3); layers];
        let out = gcn_refine(&c, eye4.view(), &weights).unwrap();
        for (x, y) in out.iter().zip(&c) {
            prop_assert!((x - 2.0 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_pure(seed in any::<u64>(), x in matrix(3, 5, -1.0, 1.0)) {
        let dims = ModelDims { input: 5, hidden: 6, embed: 4, layers: 2, classes: 3, gcn_layers: 0 };
        let model = VerbClassifier::init(dims, None, 10.0, seed).unwrap();
        let a = model.predict_probs(&x);
        let b = model.predict_probs(&x);
        prop_assert_eq!(a.ok(), b.ok());
    }

    #[test]
    fn fgsm_moves_each_coordinate_by_zero_or_epsilon(
        x in matrix(2, 5, -1.0, 1.0),
        g in matrix(2, 5, -1.0, 1.0),
        mask in prop::collection::vec(any::<bool>(), 10),
        eps in 1e-4f64..0.5,
    ) {
        let mut g = g;
        for (v, &zero) in g.iter_mut().zip(&mask) {
            if zero {
                *v = 0.0;
            }
        }
        let out = fgsm_perturb(&x, &g, eps).unwrap();
        for ((o, xi), gi) in out.iter().zip(&x).zip(&g) {
            let expect = if *gi == 0.0 { *xi } else { xi + eps * gi.signum() };
            prop_assert_eq!(*o, expect);
            let moved = (o - xi).abs();
            prop_assert!(moved == 0.0 || (moved - eps).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_is_idempotent_and_nonexpansive(
        a in matrix(2, 4, -2.0, 2.0),
        b in matrix(2, 4, -2.0, 2.0),
        origin in matrix(2, 4, -1.0, 1.0),
        r in 0.01f64..1.0,
    ) {
        let pa = project_linf(&a, &origin, r).unwrap();
        let pb = project_linf(&b, &origin, r).unwrap();
        prop_assert_eq!(project_linf(&pa, &origin, r).unwrap(), pa.clone());
        let linf = |u: &Array2<f64>, v: &Array2<f64>| u.iter().zip(v).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(linf(&pa, &pb) <= linf(&a, &b) + 1e-12);
        prop_assert!(linf(&pa, &origin) <= r + 1e-12);
    }
}
