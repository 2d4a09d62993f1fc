//! Unsupervised relevance scoring of table tokens.
//!
//! A variational head turns contextual vectors into logits
//! `z = mu + s * sigma` and scores `sigmoid(z)`. The latent space is shaped by
//! a Student's-t soft clustering into a relevant and an irrelevant cluster,
//! trained against a sharpened self-target, plus a centroid separation term
//! and a sparsification term that pushes logits away from zero.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Graph, Linear, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;
use crate::table::{LinearizedTable, TokenTag};
use crate::vocab::tokenize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RelevanceError {
    #[error("centroid {0} has zero norm and cannot be normalized")]
    ZeroCentroid(usize),
    #[error("table region is empty")]
    EmptyTableRegion,
    #[error("score vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Per-token scores over the table region of one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceVector {
    pub eta_uns: Vec<f64>,
    pub eta_cell: Vec<f64>,
    pub eta: Vec<f64>,
    pub z: Vec<f64>,
    /// `|Q_tokens|`; score `i` belongs to input position `question_boundary + i`.
    pub question_boundary: usize,
}

/// Weights of the linear fusion `eta = uns * eta_uns + cell * eta_cell`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub uns: f64,
    pub cell: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self { uns: 0.7, cell: 0.3 }
    }
}

/// Source of the noise `s` in `z = mu + s * sigma`.
#[derive(Clone, Debug, PartialEq)]
pub enum Noise {
    /// Evaluation: `s = 0`.
    Zero,
    /// One standard-normal draw per table token.
    Given(Vec<f64>),
}

/// The `phi_mu` / `phi_sigma` projections.
#[derive(Clone, Debug)]
pub struct VariationalHead {
    pub mu: Linear,
    pub sigma: Linear,
}

impl VariationalHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, d_model: usize, rng: &mut R) -> Self {
        Self {
            mu: Linear::new(store, "head.mu", ParamGroup::RelevanceHead, d_model, 1, rng),
            sigma: Linear::new(store, "head.sigma", ParamGroup::RelevanceHead, d_model, 1, rng),
        }
    }
}

pub struct RelevanceOutput {
    pub mu: Var,
    pub sigma: Var,
    /// Pre-sigmoid logits, `n x 1`.
    pub z: Var,
    /// `sigmoid(z)`, `n x 1`.
    pub eta_uns: Var,
}

/// Scores the table-region rows `h_table` (`n x d`).
pub fn relevance_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    h_table: Var,
    head: &VariationalHead,
    noise: &Noise,
) -> RelevanceOutput {
    let mu = head.mu.forward(g, h_table);
    let sigma = head.sigma.forward(g, h_table);
    let z = match noise {
        Noise::Zero => mu,
        Noise::Given(s) => {
            assert_eq!(s.len(), g.value(h_table).rows(), "one noise draw per table token");
            let s = g.constant(Tensor::column(s.iter().map(|&x| T::of(x)).collect()));
            let ss = g.mul(s, sigma);
            g.add(mu, ss)
        }
    };
    let eta_uns = g.sigmoid(z);
    RelevanceOutput {
        mu,
        sigma,
        z,
        eta_uns,
    }
}

/// Two learnable centroids (row 0 relevant, row 1 irrelevant) and the
/// Student's-t degrees of freedom.
#[derive(Clone, Debug)]
pub struct ClusterState {
    pub centroids: ParamId,
    pub alpha: f64,
}

impl ClusterState {
    pub const RELEVANT: usize = 0;
    pub const IRRELEVANT: usize = 1;

    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, d_model: usize, rng: &mut R) -> Self {
        let centroids = store.add(
            "clusters.centroids",
            ParamGroup::Clusters,
            orthogonal_pair(d_model, rng),
        );
        Self { centroids, alpha: 1.0 }
    }
}

/// Student's-t soft assignment of every row of `h` to the two centroids; `n x 2`.
pub fn soft_assign<T: Scalar>(g: &mut Graph<'_, T>, h: Var, centroids: Var, alpha: f64) -> Var {
    let d2 = g.sq_dist(h, centroids);
    let base = g.affine(d2, T::of(1.0 / alpha), T::one());
    let kernel = g.powf(base, T::of(-(alpha + 1.0) / 2.0));
    let norm = g.sum_cols(kernel);
    g.div_rows(kernel, norm)
}

/// Sharpened self-training target from soft assignments `q` (`n x 2`).
/// The result is a constant: no gradient flows into it.
pub fn target_distribution<T: Scalar>(q: &Tensor<T>) -> Tensor<T> {
    let (n, k) = q.shape();
    let freq: Vec<T> = (0..k).map(|j| (0..n).map(|p| q.get(p, j)).sum()).collect();
    let mut z = Tensor::zeros(n, k);
    for p in 0..n {
        let w: Vec<T> = (0..k).map(|j| q.get(p, j) * q.get(p, j) / freq[j]).collect();
        let total: T = w.iter().copied().sum();
        for j in 0..k {
            z.set(p, j, w[j] / total);
        }
    }
    z
}

/// `KL(Z || Q)` summed over tokens and clusters, divided by `batch_size`.
pub fn clustering_loss<T: Scalar>(g: &mut Graph<'_, T>, q: Var, target: &Tensor<T>, batch_size: usize) -> Var {
    assert_eq!(g.value(q).shape(), target.shape(), "target must match assignments");
    let entropy_term: T = target
        .data()
        .iter()
        .filter(|&&z| z > T::zero())
        .map(|&z| z * z.ln())
        .sum();
    let zc = g.constant(target.clone());
    let lq = g.ln(q);
    let cross = g.mul(zc, lq);
    let cross = g.sum(cross);
    let b = T::of(batch_size as f64);
    // (sum z ln z - sum z ln q) / B
    g.affine(cross, -T::one() / b, entropy_term / b)
}

/// `2 - || u_rel - u_irr ||^2` on unit-normalized copies of the centroids.
pub fn separation_loss<T: Scalar>(g: &mut Graph<'_, T>, centroids: Var) -> Result<Var, RelevanceError> {
    let c = g.value(centroids);
    for r in 0..c.rows() {
        let norm2: T = c.row(r).iter().map(|&x| x * x).sum();
        if norm2 <= T::zero() {
            return Err(RelevanceError::ZeroCentroid(r));
        }
    }
    let sq = g.square(centroids);
    let norms2 = g.sum_cols(sq);
    let norms = g.sqrt(norms2);
    let unit = g.div_rows(centroids, norms);
    let rel = g.slice_rows(unit, ClusterState::RELEVANT, 1);
    let irr = g.slice_rows(unit, ClusterState::IRRELEVANT, 1);
    let diff = g.sub(rel, irr);
    let d2 = g.square(diff);
    let dist = g.sum(d2);
    Ok(g.affine(dist, -T::one(), T::of(2.0)))
}

/// Mean of `exp(-z^2)` over table-region logits.
pub fn sparsification_loss<T: Scalar>(g: &mut Graph<'_, T>, z: Var) -> Result<Var, RelevanceError> {
    if g.value(z).is_empty() {
        return Err(RelevanceError::EmptyTableRegion);
    }
    let sq = g.square(z);
    let neg = g.neg(sq);
    let e = g.exp(neg);
    Ok(g.mean(e))
}

pub fn fuse_scores(eta_uns: &[f64], eta_cell: &[f64], w: FusionWeights) -> Result<Vec<f64>, RelevanceError> {
    if eta_uns.len() != eta_cell.len() {
        return Err(RelevanceError::LengthMismatch(eta_uns.len(), eta_cell.len()));
    }
    Ok(eta_uns
        .iter()
        .zip(eta_cell)
        .map(|(&u, &c)| w.uns * u + w.cell * c)
        .collect())
}

/// Graph form of [`fuse_scores`]; `eta_uns` is `n x 1`.
pub fn fuse_scores_var<T: Scalar>(g: &mut Graph<'_, T>, eta_uns: Var, eta_cell: &[f64], w: FusionWeights) -> Var {
    let n = g.value(eta_uns).rows();
    assert_eq!(n, eta_cell.len(), "fusion inputs must align");
    let scaled = g.scale(eta_uns, T::of(w.uns));
    let cell = g.constant(Tensor::column(eta_cell.iter().map(|&c| T::of(w.cell * c)).collect()));
    g.add(scaled, cell)
}

/// Multiplies the embedding of every table token by its score; question
/// embeddings (`e[..boundary]`) pass through unchanged.
pub fn scale_embeddings<T: Scalar>(g: &mut Graph<'_, T>, e: Var, eta_table: Var, boundary: usize) -> Var {
    let n = g.value(e).rows();
    let t = g.value(eta_table).rows();
    assert_eq!(boundary + t, n, "scores must cover exactly the table region");
    let scale = if boundary == 0 {
        eta_table
    } else {
        let ones = g.constant(Tensor::filled(boundary, 1, T::one()));
        g.concat_rows(&[ones, eta_table])
    };
    g.scale_rows(e, scale)
}

/// Row-level bag-of-tokens similarity baseline: each row (header included)
/// is scored by the fraction of its distinct cell tokens that occur in the
/// question, and every token of the row, markers included, gets that score.
pub fn overlap_baseline_score(question: &str, lin: &LinearizedTable) -> Vec<f64> {
    let q: BTreeSet<String> = tokenize(question).into_iter().map(|(t, _)| t).collect();
    let row_of = |tag: &TokenTag| -> usize {
        match tag {
            TokenTag::Head => 0,
            TokenTag::Row(k) => *k,
            TokenTag::Cell(c) => c.row,
            TokenTag::Separator => usize::MAX,
        }
    };
    // Separators belong to the row of the preceding token.
    let mut rows = Vec::with_capacity(lin.len());
    let mut current = 0usize;
    for tag in &lin.token_cell_map {
        let r = row_of(tag);
        if r != usize::MAX {
            current = r;
        }
        rows.push(current);
    }
    let n_rows = rows.iter().copied().max().unwrap_or(0) + 1;
    let mut row_tokens: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); n_rows];
    for (i, tag) in lin.token_cell_map.iter().enumerate() {
        if let TokenTag::Cell(c) = tag {
            row_tokens[c.row].insert(lin.token_text(i));
        }
    }
    let scores: Vec<f64> = row_tokens
        .iter()
        .map(|toks| {
            if toks.is_empty() {
                0.0
            } else {
                toks.iter().filter(|t| q.contains(**t)).count() as f64 / toks.len() as f64
            }
        })
        .collect();
    rows.into_iter().map(|r| scores[r]).collect()
}

/// Two random orthogonal unit vectors, `2 x d`.
pub fn orthogonal_pair<T: Scalar, R: Rng + ?Sized>(d: usize, rng: &mut R) -> Tensor<T> {
    assert!(d >= 2, "need at least two dimensions for orthogonal centroids");
    loop {
        let a = Tensor::<f64>::randn(1, d, 1.0, rng).into_vec();
        let mut b = Tensor::<f64>::randn(1, d, 1.0, rng).into_vec();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na < 1e-9 {
            continue;
        }
        let a: Vec<f64> = a.iter().map(|x| x / na).collect();
        let proj: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        for (bi, ai) in b.iter_mut().zip(&a) {
            *bi -= proj * ai;
        }
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nb < 1e-9 {
            continue;
        }
        let mut data = a;
        data.extend(b.iter().map(|x| x / nb));
        return Tensor::from_f64(2, d, &data);
    }
}

/// 2-means over the rows of `points`; falls back to a random orthogonal
/// pair when a cluster ends up empty.
pub fn two_means<T: Scalar, R: Rng + ?Sized>(points: &Tensor<T>, iterations: usize, rng: &mut R) -> Tensor<T> {
    let (n, d) = points.shape();
    if n < 2 {
        return orthogonal_pair(d, rng);
    }
    let dist = |a: &[T], b: &[T]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x - y).as_f64().powi(2))
            .sum()
    };
    // Farthest-point seeding from row 0.
    let first = points.row(0).to_vec();
    let far = (0..n)
        .max_by(|&i, &j| {
            dist(points.row(i), &first)
                .partial_cmp(&dist(points.row(j), &first))
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .unwrap_or(0);
    let mut centers = [
        first.iter().map(|x| x.as_f64()).collect::<Vec<_>>(),
        points.row(far).iter().map(|x| x.as_f64()).collect::<Vec<_>>(),
    ];
    let to_t = |c: &[f64]| c.iter().map(|&x| T::of(x)).collect::<Vec<_>>();
    for _ in 0..iterations {
        let mut sums = vec![vec![0.0; d]; 2];
        let mut counts = [0usize; 2];
        for i in 0..n {
            let row = points.row(i);
            let j = usize::from(dist(row, &to_t(&centers[1])) < dist(row, &to_t(&centers[0])));
            counts[j] += 1;
            for (s, &x) in sums[j].iter_mut().zip(row) {
                *s += x.as_f64();
            }
        }
        if counts.contains(&0) {
            return orthogonal_pair(d, rng);
        }
        for j in 0..2 {
            centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
        }
    }
    if centers.iter().any(|c| c.iter().all(|&x| x == 0.0)) {
        return orthogonal_pair(d, rng);
    }
    let mut data = centers[0].clone();
    data.extend_from_slice(&centers[1]);
    Tensor::from_f64(2, d, &data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, GradCheckConfig, GraphObjective};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn empty_graph<T: Scalar>() -> (Vec<Tensor<T>>, Vec<bool>) {
        (Vec::new(), Vec::new())
    }

    #[test]
    fn relevance_forward_scalar_oracles() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = VariationalHead::new(&mut store, 2, &mut rng);
        // mu = h[0], sigma = h[1]
        *store.get_mut(head.mu.weight) = Tensor::from_f64(2, 1, &[1.0, 0.0]);
        *store.get_mut(head.sigma.weight) = Tensor::from_f64(2, 1, &[0.0, 1.0]);
        let h = Tensor::from_f64(3, 2, &[0.0, 5.0, 2.0, -3.0, 0.5, 0.25]);

        let mut g = Graph::new(store.tensors(), store.trainable());
        let hv = g.constant(h.clone());
        let out = relevance_forward(&mut g, hv, &head, &Noise::Zero);
        let eta = g.value(out.eta_uns);
        assert!((eta.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((eta.get(1, 0) - 0.880_797_077_977_882_3).abs() < 1e-12);

        let mut g = Graph::new(store.tensors(), store.trainable());
        let hv = g.constant(h);
        let out = relevance_forward(&mut g, hv, &head, &Noise::Given(vec![1.0, 1.0, 1.0]));
        assert!((g.value(out.z).get(2, 0) - 0.75).abs() < 1e-15);
        let expect = 1.0 / (1.0 + (-0.75f64).exp());
        assert!((g.value(out.eta_uns).get(2, 0) - expect).abs() < 1e-15);
    }

    fn assign(h: &[f64], d: usize, mu: &[f64], alpha: f64) -> Tensor<f64> {
        let (p, t) = empty_graph::<f64>();
        let mut g = Graph::new(&p, &t);
        let hv = g.constant(Tensor::from_f64(h.len() / d, d, h));
        let mv = g.constant(Tensor::from_f64(2, d, mu));
        let q = soft_assign(&mut g, hv, mv, alpha);
        g.value(q).clone()
    }

    #[test]
    fn soft_assign_oracles() {
        // equidistant
        let q = assign(&[0.0, 0.0], 2, &[1.0, 0.0, -1.0, 0.0], 1.0);
        assert!((q.get(0, 0) - 0.5).abs() < 1e-12);
        // alpha = 1, d0 = 0, d1 = 1: kernel (1, 1/2) -> (2/3, 1/3)
        let q = assign(&[0.0, 0.0], 2, &[0.0, 0.0, 1.0, 0.0], 1.0);
        assert!((q.get(0, 0) - 2.0 / 3.0).abs() < 1e-9);
        assert!((q.get(0, 1) - 1.0 / 3.0).abs() < 1e-9);
        // relabeling swaps
        let q2 = assign(&[0.0, 0.0], 2, &[1.0, 0.0, 0.0, 0.0], 1.0);
        assert!((q2.get(0, 0) - q.get(0, 1)).abs() < 1e-15);
    }

    #[test]
    fn target_distribution_oracles() {
        let q = Tensor::<f64>::from_f64(2, 2, &[0.9, 0.1, 0.6, 0.4]);
        let z = target_distribution(&q);
        // f = (1.5, 0.5); token 1: (0.54, 0.02) / 0.56; token 2: (0.24, 0.32) / 0.56
        assert!((z.get(0, 0) - 0.54 / 0.56).abs() < 1e-9);
        assert!((z.get(0, 1) - 0.02 / 0.56).abs() < 1e-9);
        assert!((z.get(1, 0) - 0.24 / 0.56).abs() < 1e-9);
        assert!((z.get(1, 1) - 0.32 / 0.56).abs() < 1e-9);
        assert!((z.get(0, 0) - 0.964).abs() < 5e-4 && (z.get(1, 1) - 0.571).abs() < 5e-4);

        let uniform = Tensor::<f64>::from_f64(3, 2, &[0.5; 6]);
        assert_eq!(target_distribution(&uniform), uniform);
    }

    #[test]
    fn clustering_loss_oracles() {
        let (p, t) = empty_graph::<f64>();
        let q = Tensor::<f64>::from_f64(2, 2, &[0.9, 0.1, 0.6, 0.4]);
        let z = target_distribution(&q);
        let mut g = Graph::new(&p, &t);
        let qv = g.constant(q.clone());
        let l = clustering_loss(&mut g, qv, &z, 1);
        let mut expect = 0.0;
        for i in 0..4 {
            expect += z.data()[i] * (z.data()[i] / q.data()[i]).ln();
        }
        assert!((g.value(l).item() - expect).abs() < 1e-12);
        // hand value: 0.066529 - 0.036772 - 0.144202 + 0.203814
        assert!((expect - 0.089_369).abs() < 2e-6, "{expect}");

        let mut g = Graph::new(&p, &t);
        let qv = g.constant(q.clone());
        let l = clustering_loss(&mut g, qv, &q, 1);
        assert!(g.value(l).item().abs() < 1e-15);
    }

    #[test]
    fn separation_loss_oracles() {
        let (p, t) = empty_graph::<f64>();
        for (mu, expect) in [
            ([1.0, 0.0, 3.0, 0.0], 2.0),
            ([1.0, 0.0, -2.0, 0.0], -2.0),
            ([1.0, 0.0, 0.0, 5.0], 0.0),
        ] {
            let mut g = Graph::new(&p, &t);
            let c = g.constant(Tensor::from_f64(2, 2, &mu));
            let l = separation_loss(&mut g, c).unwrap();
            assert!((g.value(l).item() - expect).abs() < 1e-12);
        }
        let mut g = Graph::new(&p, &t);
        let c = g.constant(Tensor::from_f64(2, 2, &[0.0, 0.0, 1.0, 0.0]));
        assert_eq!(separation_loss(&mut g, c).unwrap_err(), RelevanceError::ZeroCentroid(0));
    }

    #[test]
    fn sparsification_loss_oracles() {
        let (p, t) = empty_graph::<f64>();
        let mut g = Graph::new(&p, &t);
        let z = g.constant(Tensor::column(vec![0.0, 0.0, 0.0]));
        let l = sparsification_loss(&mut g, z).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let z = g.constant(Tensor::column(vec![0.0, 2.0]));
        let l = sparsification_loss(&mut g, z).unwrap();
        assert!((g.value(l).item() - (1.0 + (-4.0f64).exp()) / 2.0).abs() < 1e-15);
        assert!((g.value(l).item() - 0.509_157_819_444_367_1).abs() < 1e-9);
        let z = g.constant(Tensor::zeros(0, 1));
        assert!(sparsification_loss(&mut g, z).is_err());
    }

    #[test]
    fn sparsification_gradient_matches_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let z = store.add("z", ParamGroup::RelevanceHead, Tensor::from_f64(4, 1, &[0.3, -1.1, 2.0, 0.05]));
        let obj = GraphObjective(move |g: &mut Graph<'_, f64>| {
            let v = g.param(z.0);
            sparsification_loss(g, v).unwrap()
        });
        let r = grad_check(&obj, &store, GradCheckConfig::default());
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }

    #[test]
    fn fusion_examples() {
        let w = FusionWeights { uns: 0.7, cell: 0.3 };
        let f = fuse_scores(&[0.8], &[1.0], w).unwrap();
        assert!((f[0] - 0.86).abs() < 1e-12);
        assert_eq!(fuse_scores(&[0.2, 0.9], &[1.0, 0.0], FusionWeights { uns: 1.0, cell: 0.0 }).unwrap(), vec![0.2, 0.9]);
        assert_eq!(fuse_scores(&[0.2, 0.9], &[1.0, 0.0], FusionWeights { uns: 0.0, cell: 1.0 }).unwrap(), vec![1.0, 0.0]);
        assert!(fuse_scores(&[0.2], &[1.0, 0.0], w).is_err());
    }

    #[test]
    fn scale_embeddings_identity_and_zero() {
        let (p, t) = empty_graph::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = Tensor::<f64>::randn(5, 3, 1.0, &mut rng);
        let mut g = Graph::new(&p, &t);
        let ev = g.constant(e.clone());
        let ones = g.constant(Tensor::filled(3, 1, 1.0));
        let out = scale_embeddings(&mut g, ev, ones, 2);
        assert_eq!(g.value(out), &e);
        let zeros = g.constant(Tensor::zeros(3, 1));
        let out = scale_embeddings(&mut g, ev, zeros, 2);
        let v = g.value(out);
        assert_eq!(v.row(0), e.row(0));
        assert_eq!(v.row(1), e.row(1));
        assert!((2..5).all(|r| v.row(r).iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn two_means_separates_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut data = Vec::new();
        for i in 0..20 {
            let off = if i % 2 == 0 { 5.0 } else { -5.0 };
            data.extend([off + 0.1 * (i as f64).sin(), off]);
        }
        let pts = Tensor::<f64>::from_f64(20, 2, &data);
        let c = two_means(&pts, 10, &mut rng);
        let mut firsts = [c.get(0, 0), c.get(1, 0)];
        firsts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((firsts[0] + 5.0).abs() < 0.2 && (firsts[1] - 5.0).abs() < 0.2);
        // identical points: one cluster empties, fallback is orthonormal
        let same = Tensor::<f64>::filled(4, 3, 1.0);
        let c = two_means(&same, 5, &mut rng);
        let dotp: f64 = c.row(0).iter().zip(c.row(1)).map(|(a, b)| a * b).sum();
        assert!(dotp.abs() < 1e-9);
    }
}
