//! Metric-learning losses over a batch of labelled embeddings: triplet loss
//! with semi-hard negative mining and the top-k loss.
//!
//! Both return the loss value and its gradient with respect to the
//! embedding matrix. Distances are Euclidean.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::embedder::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletConfig {
    pub margin: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self { margin: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopKConfig {
    pub k: usize,
    pub n_plus: usize,
    pub margin: f64,
}

impl Default for TopKConfig {
    fn default() -> Self {
        Self {
            k: 4,
            n_plus: 8,
            margin: 0.25,
        }
    }
}

/// Loss selection as stored in training configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "loss", rename_all = "snake_case")]
pub enum LossConfig {
    Triplet(TripletConfig),
    #[serde(rename = "topk")]
    TopK(TopKConfig),
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let margin = match self {
            LossConfig::Triplet(c) => c.margin,
            LossConfig::TopK(c) => {
                if c.k < 1 || c.n_plus < 2 {
                    return Err(Error::Config(
                        "top-k loss needs k >= 1 and n_plus >= 2".into(),
                    ));
                }
                c.margin
            }
        };
        if !(margin > 0.0 && margin.is_finite()) {
            return Err(Error::Config(format!(
                "margin must be positive, got {margin}"
            )));
        }
        Ok(())
    }

    pub fn evaluate<F: Scalar>(&self, batch: LabeledEmbeddings<'_, F>) -> Result<LossOutput<F>> {
        match self {
            LossConfig::Triplet(c) => triplet_semihard_loss(batch, c),
            LossConfig::TopK(c) => topk_loss(batch, c),
        }
    }
}

/// Rows of `vectors` are embeddings; `labels[i]` is the author of row `i`.
#[derive(Debug, Clone, Copy)]
pub struct LabeledEmbeddings<'a, F> {
    pub vectors: ArrayView2<'a, F>,
    pub labels: &'a [usize],
}

impl<'a, F: Scalar> LabeledEmbeddings<'a, F> {
    pub fn new(vectors: ArrayView2<'a, F>, labels: &'a [usize]) -> Result<Self> {
        if vectors.nrows() != labels.len() {
            return Err(Error::Data(format!(
                "{} embeddings but {} labels",
                vectors.nrows(),
                labels.len()
            )));
        }
        let mut distinct = labels.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 2 {
            return Err(Error::Data(
                "a loss batch needs at least two distinct labels".into(),
            ));
        }
        Ok(Self { vectors, labels })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<F> {
    pub value: F,
    pub grad: Array2<F>,
}

pub fn pairwise_distances<F: Scalar>(vectors: ArrayView2<'_, F>) -> Array2<F> {
    let b = vectors.nrows();
    let mut d = Array2::zeros((b, b));
    for i in 0..b {
        for j in i + 1..b {
            let s: F = vectors
                .row(i)
                .iter()
                .zip(vectors.row(j))
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum();
            d[[i, j]] = s.sqrt();
            d[[j, i]] = d[[i, j]];
        }
    }
    d
}

/// Adds `w * d(dist_ij)/d(embeddings)` to `grad`.
fn push_distance_grad<F: Scalar>(
    v: ArrayView2<'_, F>,
    dist: &Array2<F>,
    i: usize,
    j: usize,
    w: F,
    grad: &mut Array2<F>,
) {
    let d = dist[[i, j]];
    if d == F::zero() || w == F::zero() {
        return;
    }
    let scale = w / d;
    for c in 0..v.ncols() {
        let g = scale * (v[[i, c]] - v[[j, c]]);
        grad[[i, c]] += g;
        grad[[j, c]] -= g;
    }
}

/// Semi-hard mining: the closest negative farther than `d_ap`, else the
/// farthest negative. Ties go to the lowest index.
fn mine_negative<F: Scalar>(
    dist: &Array2<F>,
    labels: &[usize],
    a: usize,
    d_ap: F,
) -> Option<usize> {
    let mut semi: Option<usize> = None;
    let mut far: Option<usize> = None;
    for n in (0..labels.len()).filter(|&n| labels[n] != labels[a]) {
        let d = dist[[a, n]];
        if d > d_ap && semi.is_none_or(|s| d < dist[[a, s]]) {
            semi = Some(n);
        }
        if far.is_none_or(|f| d > dist[[a, f]]) {
            far = Some(n);
        }
    }
    semi.or(far)
}

pub fn triplet_semihard_loss<F: Scalar>(
    batch: LabeledEmbeddings<'_, F>,
    cfg: &TripletConfig,
) -> Result<LossOutput<F>> {
    let LabeledEmbeddings { vectors, labels } =
        LabeledEmbeddings::new(batch.vectors, batch.labels)?;
    let dist = pairwise_distances(vectors);
    let m = F::of(cfg.margin);
    let mut pairs = Vec::new();
    for a in 0..labels.len() {
        for p in (0..labels.len()).filter(|&p| p != a && labels[p] == labels[a]) {
            let n = mine_negative(&dist, labels, a, dist[[a, p]]).expect("two labels");
            pairs.push((a, p, n));
        }
    }
    let mut grad = Array2::zeros(vectors.raw_dim());
    if pairs.is_empty() {
        return Ok(LossOutput {
            value: F::zero(),
            grad,
        });
    }
    let w = F::one() / F::of(pairs.len() as f64);
    let mut total = F::zero();
    for &(a, p, n) in &pairs {
        let hinge = dist[[a, p]] - dist[[a, n]] + m;
        if hinge > F::zero() {
            total += hinge;
            push_distance_grad(vectors, &dist, a, p, w, &mut grad);
            push_distance_grad(vectors, &dist, a, n, -w, &mut grad);
        }
    }
    Ok(LossOutput {
        value: total * w,
        grad,
    })
}

/// One query's top-k objective over distances to its positives and
/// negatives, with the derivative of the objective for each distance.
///
/// The `k' = min(k, |P|)` nearest positives must enter the top `k`, which
/// leaves room for the `k - k'` nearest negatives. Every other negative must
/// leave. The cost is the least total hinge movement that places one
/// boundary `b` with the entering positives at least `m/2` inside it and the
/// leaving negatives at least `m/2` outside it:
///
/// `min_b  sum_in [d_p - b + m/2]+  +  sum_out [b - d_n + m/2]+`
pub fn topk_query<F: Scalar>(pos: &[F], neg: &[F], k: usize, margin: F) -> (F, Vec<F>, Vec<F>) {
    let half = margin / F::of(2.0);
    let mut dpos = vec![F::zero(); pos.len()];
    let mut dneg = vec![F::zero(); neg.len()];
    let k_in = k.min(pos.len());
    let mut pi: Vec<usize> = (0..pos.len()).collect();
    pi.sort_by(|&a, &b| pos[a].partial_cmp(&pos[b]).expect("finite").then(a.cmp(&b)));
    let mut ni: Vec<usize> = (0..neg.len()).collect();
    ni.sort_by(|&a, &b| neg[a].partial_cmp(&neg[b]).expect("finite").then(a.cmp(&b)));
    let entering = &pi[..k_in];
    let leaving = &ni[(k - k_in).min(neg.len())..];
    if k_in == 0 || leaving.is_empty() {
        return (F::zero(), dpos, dneg);
    }
    // terms: (distance index, is_positive, breakpoint)
    let terms: Vec<(usize, bool, F)> = entering
        .iter()
        .map(|&i| (i, true, pos[i] + half))
        .chain(leaving.iter().map(|&i| (i, false, neg[i] - half)))
        .collect();
    let cost = |b: F| -> F {
        terms
            .iter()
            .map(|&(i, is_pos, _)| {
                if is_pos {
                    (pos[i] - b + half).max(F::zero())
                } else {
                    (b - neg[i] + half).max(F::zero())
                }
            })
            .sum()
    };
    // the objective is convex and piecewise linear: the minimum sits on a breakpoint
    let mut best: Option<(F, usize)> = None;
    for (t, &(_, _, bp)) in terms.iter().enumerate() {
        let c = cost(bp);
        if best.is_none_or(|(bc, bt)| c < bc || (c == bc && bp < terms[bt].2)) {
            best = Some((c, t));
        }
    }
    let (value, pin) = best.expect("non-empty");
    let b = terms[pin].2;
    let mut slope = F::zero();
    for (t, &(i, is_pos, _)) in terms.iter().enumerate() {
        if t == pin {
            continue;
        }
        if is_pos && pos[i] - b + half > F::zero() {
            dpos[i] = F::one();
            slope -= F::one();
        } else if !is_pos && b - neg[i] + half > F::zero() {
            dneg[i] = -F::one();
            slope += F::one();
        }
    }
    // the boundary moves with the pinning distance
    let (i, is_pos, _) = terms[pin];
    if is_pos {
        dpos[i] = slope;
    } else {
        dneg[i] = slope;
    }
    (value, dpos, dneg)
}

/// Mean of the per-query top-k objective over queries with at least one
/// positive; every other row of the batch is a target of the query.
pub fn topk_loss<F: Scalar>(
    batch: LabeledEmbeddings<'_, F>,
    cfg: &TopKConfig,
) -> Result<LossOutput<F>> {
    let LabeledEmbeddings { vectors, labels } =
        LabeledEmbeddings::new(batch.vectors, batch.labels)?;
    if cfg.k == 0 {
        return Err(Error::Config("top-k loss needs k >= 1".into()));
    }
    let dist = pairwise_distances(vectors);
    let m = F::of(cfg.margin);
    let mut grad = Array2::zeros(vectors.raw_dim());
    let mut per_query = Vec::new();
    for q in 0..labels.len() {
        let pos_idx: Vec<usize> = (0..labels.len())
            .filter(|&j| j != q && labels[j] == labels[q])
            .collect();
        if pos_idx.is_empty() {
            continue;
        }
        let neg_idx: Vec<usize> = (0..labels.len())
            .filter(|&j| labels[j] != labels[q])
            .collect();
        let pos: Vec<F> = pos_idx.iter().map(|&j| dist[[q, j]]).collect();
        let neg: Vec<F> = neg_idx.iter().map(|&j| dist[[q, j]]).collect();
        let (v, dpos, dneg) = topk_query(&pos, &neg, cfg.k, m);
        per_query.push((q, v, pos_idx, dpos, neg_idx, dneg));
    }
    if per_query.is_empty() {
        return Ok(LossOutput {
            value: F::zero(),
            grad,
        });
    }
    let w = F::one() / F::of(per_query.len() as f64);
    let mut total = F::zero();
    for (q, v, pos_idx, dpos, neg_idx, dneg) in per_query {
        total += v;
        for (&j, &g) in pos_idx.iter().zip(&dpos).chain(neg_idx.iter().zip(&dneg)) {
            push_distance_grad(vectors, &dist, q, j, w * g, &mut grad);
        }
    }
    Ok(LossOutput {
        value: total * w,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(
        seed: u64,
        authors: usize,
        per: usize,
        dim: usize,
    ) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Array2::from_shape_fn((authors * per, dim), |_| rng.random_range(-1.0..1.0));
        let labels = (0..authors * per).map(|i| i / per).collect();
        (v, labels)
    }

    /// Exhaustive minimal-movement search: every choice of entering positives
    /// and tolerated negatives, every boundary on a fine grid and at every
    /// breakpoint.
    fn topk_oracle(pos: &[f64], neg: &[f64], k: usize, m: f64) -> f64 {
        let k_in = k.min(pos.len());
        if k_in == 0 {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for pmask in 0u32..1 << pos.len() {
            if pmask.count_ones() as usize != k_in {
                continue;
            }
            for nmask in 0u32..1 << neg.len() {
                if nmask.count_ones() as usize > k - k_in {
                    continue;
                }
                let mut cands: Vec<f64> = pos.iter().map(|p| p + m / 2.0).collect();
                cands.extend(neg.iter().map(|n| n - m / 2.0));
                let mut cost_min = f64::INFINITY;
                for &b in &cands {
                    let mut c = 0.0;
                    for (i, p) in pos.iter().enumerate() {
                        if pmask >> i & 1 == 1 {
                            c += (p - b + m / 2.0).max(0.0);
                        }
                    }
                    for (i, n) in neg.iter().enumerate() {
                        if nmask >> i & 1 == 0 {
                            c += (b - n + m / 2.0).max(0.0);
                        }
                    }
                    cost_min = cost_min.min(c);
                }
                best = best.min(cost_min);
            }
        }
        best
    }

    #[test]
    fn distances_basic() {
        let v = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        let d = pairwise_distances(v.view());
        assert_eq!(d[[0, 2]], 0.0);
        assert!((d[[0, 1]] - 2f64.sqrt()).abs() < 1e-15);
        let (r, _) = random_batch(1, 5, 1, 3);
        let d = pairwise_distances(r.view());
        for i in 0..5 {
            for j in 0..5 {
                let direct: f64 = (0..3)
                    .map(|c| (r[[i, c]] - r[[j, c]]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert_eq!(d[[i, j]], direct);
                assert_eq!(d[[i, j]], d[[j, i]]);
                for k in 0..5 {
                    assert!(d[[i, k]] <= d[[i, j]] + d[[j, k]] + 1e-12);
                }
            }
        }
    }

    /// Places rows on a line so that distances from row 0 are exactly `xs`.
    fn line(xs: &[f64]) -> Array2<f64> {
        let mut v = Array2::zeros((xs.len() + 1, 1));
        for (i, &x) in xs.iter().enumerate() {
            v[[i + 1, 0]] = x;
        }
        v
    }

    #[test]
    fn semihard_mining_examples() {
        // anchor 0, positive at 0.5, negatives at 0.4, 0.55, 0.9
        let v = line(&[0.5, 0.4, 0.55, 0.9]);
        let labels = [0, 0, 1, 2, 3];
        let dist = pairwise_distances(v.view());
        assert_eq!(mine_negative(&dist, &labels, 0, 0.5), Some(3));
        let hinge = 0.5 - dist[[0, 3]] + 0.2;
        assert!((hinge - 0.15).abs() < 1e-12);
        // the hinge itself
        let v = line(&[0.5, 0.6]);
        let dist = pairwise_distances(v.view());
        assert!((dist[[0, 1]] - dist[[0, 2]] + 0.2 - 0.1).abs() < 1e-12);
        let v = line(&[0.5, 0.8]);
        let dist = pairwise_distances(v.view());
        assert!((dist[[0, 1]] - dist[[0, 2]] + 0.2).max(0.0) == 0.0);
        // nothing farther than the positive: the farthest negative
        assert_eq!(
            mine_negative(
                &pairwise_distances(line(&[0.9, 0.1, 0.3]).view()),
                &[0, 0, 1, 2],
                0,
                0.9
            ),
            Some(3)
        );
        // ties go to the lowest index
        assert_eq!(
            mine_negative(
                &pairwise_distances(line(&[0.1, 0.5, 0.5]).view()),
                &[0, 0, 1, 2],
                0,
                0.1
            ),
            Some(2)
        );
    }

    #[test]
    fn triplet_mean_over_pairs() {
        // two labels, two rows each, on a line
        let v = array![[0.0], [0.5], [0.6], [3.0]];
        let labels = [0, 0, 1, 1];
        let out = triplet_semihard_loss(
            LabeledEmbeddings::new(v.view(), &labels).unwrap(),
            &TripletConfig { margin: 0.2 },
        )
        .unwrap();
        // pairs (0,1): d_ap .5 -> neg .6 -> .1; (1,0): d_ap .5 -> negs .1, 2.5 -> 2.5 -> 0
        // (2,3): d_ap 2.4 -> negs .6, .1 -> none farther, farthest .6 -> 2.0
        // (3,2): d_ap 2.4 -> negs 3.0, 2.5 -> 2.5 -> .1
        assert!((out.value - (0.1 + 0.0 + 2.0 + 0.1) / 4.0f64).abs() < 1e-12);
    }

    #[test]
    fn fewer_than_two_labels_is_an_error() {
        let v = array![[0.0], [1.0]];
        assert!(triplet_semihard_loss(
            LabeledEmbeddings {
                vectors: v.view(),
                labels: &[3, 3]
            },
            &TripletConfig::default()
        )
        .is_err());
        assert!(topk_loss(
            LabeledEmbeddings {
                vectors: v.view(),
                labels: &[3, 3]
            },
            &TopKConfig::default()
        )
        .is_err());
    }

    #[test]
    fn topk_one_dimensional_example() {
        let (v, _, _) = topk_query(&[0.1, 5.0], &[0.2, 0.3], 2, 0.25);
        assert!((v - topk_oracle(&[0.1, 5.0], &[0.2, 0.3], 2, 0.25)).abs() < 1e-12);
        assert!((v - 5.1).abs() < 1e-12, "{v}");
        // the same distances read off embedded points
        let e = line(&[0.1, 5.0, 0.2, 0.3]);
        let dist = pairwise_distances(e.view());
        let (direct, _, _) = topk_query(
            &[dist[[0, 1]], dist[[0, 2]]],
            &[dist[[0, 3]], dist[[0, 4]]],
            2,
            0.25,
        );
        assert!((direct - 5.1).abs() < 1e-12);
    }

    #[test]
    fn topk_zero_when_separated_or_k_covers_batch() {
        // three classes, two members each, far apart
        let v = array![[0.0], [0.01], [10.0], [10.01], [20.0], [20.01]];
        let labels = [0, 0, 1, 1, 2, 2];
        let b = LabeledEmbeddings::new(v.view(), &labels).unwrap();
        assert_eq!(
            topk_loss(
                b,
                &TopKConfig {
                    k: 1,
                    n_plus: 2,
                    margin: 0.25
                }
            )
            .unwrap()
            .value,
            0.0
        );
        assert_eq!(
            triplet_semihard_loss(b, &TripletConfig::default())
                .unwrap()
                .value,
            0.0
        );
        let (r, l) = random_batch(4, 3, 2, 2);
        let b = LabeledEmbeddings::new(r.view(), &l).unwrap();
        let out = topk_loss(
            b,
            &TopKConfig {
                k: 5,
                n_plus: 2,
                margin: 0.25,
            },
        )
        .unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad.iter().all(|&g| g == 0.0));
    }

    proptest! {
        #[test]
        fn topk_query_matches_exhaustive_search(
            pos in proptest::collection::vec(0.0f64..2.0, 1..5),
            neg in proptest::collection::vec(0.0f64..2.0, 1..6),
            k in 1usize..6,
            m in 0.05f64..0.5,
        ) {
            let (v, _, _) = topk_query(&pos, &neg, k, m);
            let o = topk_oracle(&pos, &neg, k, m);
            prop_assert!((v - o).abs() < 1e-9, "{} vs {}", v, o);
            prop_assert!(v >= 0.0);
        }

        #[test]
        fn losses_ignore_label_names_and_row_order(seed in 0u64..500, shift in 1usize..50) {
            let (v, labels) = random_batch(seed, 4, 3, 3);
            let renamed: Vec<usize> = labels.iter().map(|l| (l * 7 + shift) % 1000).collect();
            let mut perm: Vec<usize> = (0..labels.len()).collect();
            perm.reverse();
            perm.rotate_left(shift % labels.len());
            let pv = v.select(ndarray::Axis(0), &perm);
            let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let base = LabeledEmbeddings::new(v.view(), &labels).unwrap();
            let tc = TripletConfig::default();
            let kc = TopKConfig { k: 2, n_plus: 3, margin: 0.25 };
            let t0 = triplet_semihard_loss(base, &tc).unwrap().value;
            let k0 = topk_loss(base, &kc).unwrap().value;
            let t1 = triplet_semihard_loss(LabeledEmbeddings::new(v.view(), &renamed).unwrap(), &tc).unwrap().value;
            let k1 = topk_loss(LabeledEmbeddings::new(v.view(), &renamed).unwrap(), &kc).unwrap().value;
            let t2 = triplet_semihard_loss(LabeledEmbeddings::new(pv.view(), &pl).unwrap(), &tc).unwrap().value;
            let k2 = topk_loss(LabeledEmbeddings::new(pv.view(), &pl).unwrap(), &kc).unwrap().value;
            prop_assert!(t0 >= 0.0 && k0 >= 0.0);
            prop_assert_eq!(t0, t1);
            prop_assert_eq!(k0, k1);
            prop_assert!((t0 - t2).abs() < 1e-12);
            prop_assert!((k0 - k2).abs() < 1e-12);
        }
    }

    fn fd_check(loss: &dyn Fn(&Array2<f64>) -> LossOutput<f64>, v: &Array2<f64>) -> f64 {
        let out = loss(v);
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for idx in ndarray::indices(v.dim()) {
            let mut plus = v.clone();
            plus[idx] += eps;
            let mut minus = v.clone();
            minus[idx] -= eps;
            let fd = (loss(&plus).value - loss(&minus).value) / (2.0 * eps);
            worst = worst.max((fd - out.grad[idx]).abs() / (1.0 + fd.abs()));
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let (v, labels) = random_batch(seed, 3, 3, 4);
            let t = |e: &Array2<f64>| {
                triplet_semihard_loss(
                    LabeledEmbeddings::new(e.view(), &labels).unwrap(),
                    &TripletConfig { margin: 0.2 },
                )
                .unwrap()
            };
            let k = |e: &Array2<f64>| {
                topk_loss(
                    LabeledEmbeddings::new(e.view(), &labels).unwrap(),
                    &TopKConfig {
                        k: 2,
                        n_plus: 3,
                        margin: 0.25,
                    },
                )
                .unwrap()
            };
            assert!(fd_check(&t, &v) < 1e-6, "triplet seed {seed}");
            assert!(fd_check(&k, &v) < 1e-6, "topk seed {seed}");
        }
    }
}
