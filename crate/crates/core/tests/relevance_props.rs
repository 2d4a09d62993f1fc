use proptest::prelude::*;

use tabrel::nn::{Graph, Tensor};
use tabrel::relevance::{
    clustering_loss, fuse_scores, separation_loss, soft_assign, sparsification_loss, target_distribution, FusionWeights,
};

fn matrix(rows: std::ops::Range<usize>, cols: usize, range: f64) -> impl Strategy<Value = Tensor<f64>> {
    rows.prop_flat_map(move |n| {
        prop::collection::vec(-range..range, n * cols).prop_map(move |v| Tensor::from_vec(n, cols, v))
    })
}

fn assign(h: &Tensor<f64>, mu: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new(&[], &[]);
    let hv = g.input(h.clone());
    let mv = g.input(mu.clone());
    let q = soft_assign(&mut g, hv, mv, 1.0);
    g.value(q).clone()
}

fn swap_rows(t: &Tensor<f64>) -> Tensor<f64> {
    let mut out = t.clone();
    out.row_mut(0).copy_from_slice(t.row(1));
    out.row_mut(1).copy_from_slice(t.row(0));
    out
}

/// Distributions over two clusters, strictly inside the simplex.
fn assignments(n: std::ops::Range<usize>) -> impl Strategy<Value = Tensor<f64>> {
    n.prop_flat_map(|n| {
        prop::collection::vec(0.01f64..0.99, n).prop_map(move |p| {
            Tensor::from_vec(n, 2, p.iter().flat_map(|&x| [x, 1.0 - x]).collect())
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn soft_assignment_rows_are_distributions(h in matrix(1..12, 4, 3.0), mu in matrix(2..3, 4, 3.0)) {
        let q = assign(&h, &mu);
        for r in 0..q.rows() {
            let (a, b) = (q.get(r, 0), q.get(r, 1));
            prop_assert!(a > 0.0 && b > 0.0);
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
        // relabelling the centroids swaps the columns
        let s = assign(&h, &swap_rows(&mu));
        for r in 0..q.rows() {
            prop_assert!((q.get(r, 0) - s.get(r, 1)).abs() < 1e-12);
        }
    }

    #[test]
    fn clustering_loss_is_non_negative(q in assignments(1..20), b in 1usize..5) {
        let z = target_distribution(&q);
        let mut g = Graph::new(&[], &[]);
        let qv = g.input(q.clone());
        let l = clustering_loss(&mut g, qv, &z, b);
        prop_assert!(g.value(l).item() >= -1e-12);
        for r in 0..z.rows() {
            prop_assert!((z.get(r, 0) + z.get(r, 1) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn target_sharpens_under_balanced_frequencies(q in assignments(1..10)) {
        // mirror every row so both clusters carry the same total mass
        let n = q.rows();
        let mut data = q.data().to_vec();
        for r in 0..n {
            data.extend_from_slice(&[q.get(r, 1), q.get(r, 0)]);
        }
        let both = Tensor::from_vec(2 * n, 2, data);
        let z = target_distribution(&both);
        for r in 0..2 * n {
            let qm = both.get(r, 0).max(both.get(r, 1));
            let zm = z.get(r, 0).max(z.get(r, 1));
            prop_assert!(zm >= qm - 1e-12);
        }
    }

    #[test]
    fn separation_and_sparsity_stay_in_range(mu in matrix(2..3, 6, 2.0), z in matrix(1..30, 1, 6.0)) {
        prop_assume!((0..2).all(|r| mu.row(r).iter().map(|x| x * x).sum::<f64>() > 1e-6));
        let mut g = Graph::new(&[], &[]);
        let mv = g.input(mu.clone());
        let sep = separation_loss(&mut g, mv).unwrap();
        let s = g.value(sep).item();
        prop_assert!((-2.0 - 1e-12..=2.0 + 1e-12).contains(&s));
        let zv = g.input(z.clone());
        let sp = sparsification_loss(&mut g, zv).unwrap();
        let p = g.value(sp).item();
        prop_assert!(p > 0.0 && p <= 1.0);
    }

    #[test]
    fn fused_scores_stay_in_the_convex_range(
        pairs in prop::collection::vec((0.0f64..=1.0, prop::bool::ANY), 1..40),
        uns in 0.0f64..=1.0,
    ) {
        let w = FusionWeights { uns, cell: 1.0 - uns };
        let u: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let c: Vec<f64> = pairs.iter().map(|p| f64::from(u8::from(p.1))).collect();
        let eta = fuse_scores(&u, &c, w).unwrap();
        for ((&e, &ui), &ci) in eta.iter().zip(&u).zip(&c) {
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&e));
            prop_assert!((e - (uns * ui + (1.0 - uns) * ci)).abs() < 1e-12);
        }
    }
}

#[test]
fn fusion_rejects_misaligned_inputs() {
    assert!(fuse_scores(&[0.5, 0.5], &[1.0], FusionWeights::default()).is_err());
}

#[test]
fn zero_centroid_and_empty_region_are_errors() {
    let mut g: Graph<'_, f64> = Graph::new(&[], &[]);
    let mu = g.input(Tensor::from_f64(2, 2, &[0.0, 0.0, 1.0, 0.0]));
    assert!(separation_loss(&mut g, mu).is_err());
    let z = g.input(Tensor::zeros(0, 1));
    assert!(sparsification_loss(&mut g, z).is_err());
}
