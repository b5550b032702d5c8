//! Ranking-aware training objective.
//!
//! For every anchor in a batch the other members are ranked by ground-truth
//! similarity. Each correctly ordered pair `(i, j)` in that ranking adds a
//! Bradley-Terry term `log2 σ(x_i − x_j)` weighted by the difference of
//! rank discounts and the difference of normalized gains. A weighted MSE on
//! the raw similarities is blended in with weight `λ`.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_LAMBDA: f64 = 0.2;
const MAX_DCG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    /// Multiply each anchor's ranking term by its list length.
    pub include_n_scale: bool,
    /// Leave the anchor out of its own list.
    pub exclude_self: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            include_n_scale: true,
            exclude_self: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

/// One anchor's list: members sorted by ground truth, descending, ties by
/// original index.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityRow {
    pub anchor: usize,
    /// Batch indices in rank order.
    pub order: Vec<usize>,
    /// Ground-truth similarities in rank order.
    pub y: Vec<f64>,
}

impl SimilarityRow {
    /// Row `anchor` of the row-major `n × n` ground-truth matrix `y`.
    pub fn new(y: &[f64], n: usize, anchor: usize, exclude_self: bool) -> Self {
        let row = &y[anchor * n..(anchor + 1) * n];
        let mut order: Vec<usize> = (0..n).filter(|&j| !(exclude_self && j == anchor)).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let y = order.iter().map(|&j| row[j]).collect();
        Self { anchor, order, y }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// `G_i = (2^{y_i} − 1) / maxDCG` for `y` in rank order.
pub fn compute_gains(y_sorted: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = y_sorted.iter().map(|&y| y.exp2() - 1.0).collect();
    let max_dcg: f64 = raw
        .iter()
        .enumerate()
        .map(|(i, g)| g / ((i + 2) as f64).log2())
        .sum();
    let max_dcg = max_dcg.max(MAX_DCG_FLOOR);
    raw.into_iter().map(|g| g / max_dcg).collect()
}

/// `1/log2(Δ+1) − 1/log2(Δ+2)` for rank distance `Δ = j − i ≥ 1`.
pub fn discount_delta(gap: usize) -> f64 {
    1.0 / ((gap + 1) as f64).log2() - 1.0 / ((gap + 2) as f64).log2()
}

/// Flattened pair list of the ranking term over a whole batch: the loss is
/// `Σ_k coef[k] · log2 σ(x[left[k]] − x[right[k]])` with `x` the row-major
/// predicted-similarity matrix. Coefficients already carry the sign, the
/// list-length factor and the average over anchors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnnPlan {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub coef: Vec<f64>,
}

impl KnnPlan {
    pub fn new(y: &[f64], n: usize, cfg: &LossConfig) -> Result<Self> {
        if y.len() != n * n {
            return Err(Error::Shape(format!("similarity matrix has {} values, expected {n}²", y.len())));
        }
        let mut plan = Self::default();
        if n == 0 {
            return Ok(plan);
        }
        for a in 0..n {
            let row = SimilarityRow::new(y, n, a, cfg.exclude_self);
            let gains = compute_gains(&row.y);
            let scale = if cfg.include_n_scale { row.len() as f64 } else { 1.0 };
            let w = -scale / n as f64;
            for i in 0..row.len() {
                for j in i + 1..row.len() {
                    if row.y[i] > row.y[j] {
                        let c = w * discount_delta(j - i) * (gains[i] - gains[j]);
                        if c != 0.0 {
                            plan.left.push(a * n + row.order[i]);
                            plan.right.push(a * n + row.order[j]);
                            plan.coef.push(c);
                        }
                    }
                }
            }
        }
        Ok(plan)
    }

    pub fn len(&self) -> usize {
        self.coef.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coef.is_empty()
    }

    /// Loss value for a plain predicted-similarity matrix.
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.left
            .iter()
            .zip(&self.right)
            .zip(&self.coef)
            .map(|((&l, &r), &c)| c * log2_sigmoid(x[l] - x[r]))
            .sum()
    }

    /// Differentiable loss over a predicted-similarity node `x: (N, N)`.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        if self.is_empty() {
            let zero = g.constant(Tensor::scalar(T::zero()));
            let scaled = g.mul(x, zero)?;
            return Ok(g.sum(scaled));
        }
        let xl = g.gather(x, self.left.clone())?;
        let xr = g.gather(x, self.right.clone())?;
        let diff = g.sub(xl, xr)?;
        let ls = g.log2_sigmoid(diff);
        let c = g.constant(Tensor::from_f64(&[self.len()], &self.coef)?);
        let terms = g.mul(ls, c)?;
        Ok(g.sum(terms))
    }
}

fn log2_sigmoid(z: f64) -> f64 {
    // log σ(z) = −softplus(−z)
    let sp = if z > 0.0 { (-z).exp().ln_1p() } else { -z + z.exp().ln_1p() };
    -sp / std::f64::consts::LN_2
}

/// Ranking loss for plain matrices.
pub fn knn_loss(x: &[f64], y: &[f64], n: usize, cfg: &LossConfig) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("x has {} values, y has {}", x.len(), y.len())));
    }
    Ok(KnnPlan::new(y, n, cfg)?.evaluate(x))
}

fn included_pairs(n: usize, exclude_self: bool) -> Vec<usize> {
    (0..n * n).filter(|&k| !(exclude_self && k / n == k % n)).collect()
}

/// Mean over included ordered pairs of `y·(y − x)²`.
pub fn weighted_mse(x: &[f64], y: &[f64], n: usize, exclude_self: bool) -> Result<f64> {
    if x.len() != n * n || y.len() != n * n {
        return Err(Error::Shape(format!("expected {n}² values, got x={} y={}", x.len(), y.len())));
    }
    let idx = included_pairs(n, exclude_self);
    if idx.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = idx.iter().map(|&k| y[k] * (y[k] - x[k]).powi(2)).sum();
    Ok(s / idx.len() as f64)
}

/// Differentiable weighted MSE over `x: (N, N)`.
pub fn weighted_mse_graph<T: Scalar>(g: &mut Graph<T>, x: Var, y: &[f64], exclude_self: bool) -> Result<Var> {
    let n = g.shape(x)[0];
    if g.shape(x) != [n, n] || y.len() != n * n {
        return Err(Error::Shape(format!("weighted_mse needs matching (N, N) inputs, got {:?}", g.shape(x))));
    }
    let idx = included_pairs(n, exclude_self);
    let w: Vec<f64> = idx.iter().map(|&k| y[k]).collect();
    let m = idx.len();
    let xs = g.gather(x, idx)?;
    let yv = g.constant(Tensor::from_f64(&[m], &w)?);
    let diff = g.sub(yv, xs)?;
    let sq = g.mul(diff, diff)?;
    let weighted = g.mul(sq, yv)?;
    Ok(g.mean(weighted))
}

/// `x_ij = 1 − ‖h_i − h_j‖` for plain embeddings.
pub fn predicted_similarity_matrix(emb: &[Vec<f64>]) -> Vec<f64> {
    let n = emb.len();
    let mut x = vec![1.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = emb[i].iter().zip(&emb[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            x[i * n + j] = 1.0 - d;
            x[j * n + i] = 1.0 - d;
        }
    }
    x
}

/// Differentiable `1 − pairwise distance` over `emb: (N, d)`.
pub fn predicted_similarity_graph<T: Scalar>(g: &mut Graph<T>, emb: Var) -> Result<Var> {
    let d = g.pairwise_distance(emb)?;
    let neg = g.scale(d, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Nodes of one combined-loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: Var,
    pub mse: Var,
    pub knn: Var,
}

/// `λ·mse + (1 − λ)·knn` on embeddings `emb: (N, d)` against the aligned
/// ground-truth submatrix `y`.
pub fn combined_loss<T: Scalar>(g: &mut Graph<T>, emb: Var, y: &[f64], cfg: &LossConfig) -> Result<LossNodes> {
    cfg.validate()?;
    let n = g.shape(emb)[0];
    let x = predicted_similarity_graph(g, emb)?;
    let mse = weighted_mse_graph(g, x, y, cfg.exclude_self)?;
    let knn = KnnPlan::new(y, n, cfg)?.apply(g, x)?;
    let a = g.scale(mse, cfg.lambda);
    let b = g.scale(knn, 1.0 - cfg.lambda);
    let total = g.add(a, b)?;
    Ok(LossNodes { total, mse, knn })
}

/// Combined loss for plain matrices.
pub fn combined_loss_value(x: &[f64], y: &[f64], n: usize, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    let mse = weighted_mse(x, y, n, cfg.exclude_self)?;
    let knn = knn_loss(x, y, n, cfg)?;
    Ok(cfg.lambda * mse + (1.0 - cfg.lambda) * knn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, DEFAULT_STEP};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straight transcription of the per-anchor sum with its own sort and
    /// its own gain computation.
    fn oracle(x: &[f64], y: &[f64], n: usize, include_n: bool) -> f64 {
        let mut total = 0.0;
        for a in 0..n {
            let mut members = Vec::new();
            for j in 0..n {
                if j != a {
                    members.push(j);
                }
            }
            // insertion sort, descending y, stable on index
            for p in 1..members.len() {
                let mut q = p;
                while q > 0 && y[a * n + members[q - 1]] < y[a * n + members[q]] {
                    members.swap(q - 1, q);
                    q -= 1;
                }
            }
            let mut max_dcg = 0.0;
            for (pos, &m) in members.iter().enumerate() {
                max_dcg += (2f64.powf(y[a * n + m]) - 1.0) / ((pos + 2) as f64).log2();
            }
            if max_dcg < 1e-12 {
                max_dcg = 1e-12;
            }
            let mut s = 0.0;
            for i in 0..members.len() {
                for j in 0..members.len() {
                    let (yi, yj) = (y[a * n + members[i]], y[a * n + members[j]]);
                    if i < j && yi > yj {
                        let (ri, rj) = ((i + 1) as f64, (j + 1) as f64);
                        let delta = 1.0 / (rj - ri + 1.0).log2() - 1.0 / (rj - ri + 2.0).log2();
                        let gi = (2f64.powf(yi) - 1.0) / max_dcg;
                        let gj = (2f64.powf(yj) - 1.0) / max_dcg;
                        let z = x[a * n + members[i]] - x[a * n + members[j]];
                        let sig = 1.0 / (1.0 + (-z).exp());
                        s += delta * (gi - gj) * sig.log2();
                    }
                }
            }
            let scale = if include_n { members.len() as f64 } else { 1.0 };
            total += -scale * s;
        }
        total / n as f64
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut y = vec![1.0; n * n];
        let mut x = vec![1.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                // coarse values so that ties occur
                let v = (rng.random_range(0.0..1.0f64) * 8.0).round() / 8.0;
                y[i * n + j] = v;
                y[j * n + i] = v;
                let p = rng.random_range(-1.0..1.0);
                x[i * n + j] = p;
                x[j * n + i] = p;
            }
        }
        (x, y)
    }

    #[test]
    fn predicted_similarity_examples() {
        let x = predicted_similarity_matrix(&[vec![0.3, 0.4], vec![0.3, 0.4], vec![0.3, 1.4]]);
        assert_eq!(x[1], 1.0);
        assert!((x[2] - 0.0).abs() < 1e-15);
        for i in 0..3 {
            assert_eq!(x[i * 4], 1.0);
            for j in 0..3 {
                assert!((x[i * 3 + j] - x[j * 3 + i]).abs() < 1e-7);
            }
        }
        let mut g = Graph::<f64>::new();
        let e = g.input(Tensor::from_f64(&[3, 2], &[0.3, 0.4, 0.3, 0.4, 0.3, 1.4]).unwrap());
        let xg = predicted_similarity_graph(&mut g, e).unwrap();
        assert_eq!(g.value(xg).data(), &x[..]);
    }

    #[test]
    fn gain_examples() {
        assert_eq!(compute_gains(&[1.0]), vec![1.0]);
        let g = compute_gains(&[0.9, 0.1]);
        let max_dcg = (2f64.powf(0.9) - 1.0) + (2f64.powf(0.1) - 1.0) / 3f64.log2();
        assert!((g[0] - (2f64.powf(0.9) - 1.0) / max_dcg).abs() < 1e-15);
        assert!((g[0] - 0.9503).abs() < 5e-5);
        assert!((g[1] - 0.0788).abs() < 5e-5);
        let eq = compute_gains(&[0.4; 5]);
        assert!(eq.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(compute_gains(&[0.0, 0.0]), vec![0.0, 0.0]);
        let sorted = compute_gains(&[0.9, 0.7, 0.7, 0.2, 0.0]);
        assert!(sorted.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn two_member_list_example() {
        // Anchor 0 with members 1 and 2; only anchor 0's row matters for
        // this check, so evaluate the per-anchor term directly.
        let y = [1.0, 0.9, 0.1, 0.9, 1.0, 0.1, 0.1, 0.1, 1.0];
        let x = [1.0, 0.5, 0.5, 0.5, 1.0, 0.5, 0.5, 0.5, 1.0];
        let cfg = LossConfig::default();
        let plan = KnnPlan::new(&y, 3, &cfg).unwrap();
        let anchor0: f64 = plan
            .left
            .iter()
            .zip(&plan.coef)
            .filter(|(&l, _)| l / 3 == 0)
            .map(|(_, &c)| -c)
            .sum::<f64>()
            * 3.0;
        let g = compute_gains(&[0.9, 0.1]);
        let want = 2.0 * discount_delta(1) * (g[0] - g[1]);
        assert!((anchor0 - want).abs() < 1e-12);
        assert!((anchor0 - 0.6434).abs() < 5e-4);
        assert!((discount_delta(1) - 0.3691).abs() < 5e-5);
        assert!((knn_loss(&x, &y, 3, &cfg).unwrap() - oracle(&x, &y, 3, true)).abs() < 1e-12);
    }

    #[test]
    fn matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..50 {
            let n = rng.random_range(2..=17);
            let (x, y) = random_batch(&mut rng, n);
            for include_n in [true, false] {
                let cfg = LossConfig {
                    include_n_scale: include_n,
                    ..LossConfig::default()
                };
                let want = oracle(&x, &y, n, include_n);
                let got = knn_loss(&x, &y, n, &cfg).unwrap();
                assert!((got - want).abs() < 1e-9, "trial {trial}: {got} vs {want}");
                let mut g = Graph::<f64>::new();
                let xv = g.input(Tensor::new(&[n, n], x.clone()).unwrap());
                let l = KnnPlan::new(&y, n, &cfg).unwrap().apply(&mut g, xv).unwrap();
                assert!((g.value(l).item() - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn equal_targets_give_zero() {
        let n = 5;
        let y = vec![0.4; n * n];
        let x: Vec<f64> = (0..n * n).map(|k| k as f64 * 0.01).collect();
        assert_eq!(knn_loss(&x, &y, n, &LossConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = rng.random_range(3..12);
            let (x, y) = random_batch(&mut rng, n);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let permute = |m: &[f64]| {
                let mut out = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        out[i * n + j] = m[perm[i] * n + perm[j]];
                    }
                }
                out
            };
            // Ties are broken by index, so invariance needs distinct targets.
            let mut y = y;
            for i in 0..n {
                for j in i + 1..n {
                    let v = y[i * n + j] + rng.random_range(0.0..1e-3);
                    y[i * n + j] = v;
                    y[j * n + i] = v;
                }
            }
            let cfg = LossConfig::default();
            let a = knn_loss(&x, &y, n, &cfg).unwrap();
            let b = knn_loss(&permute(&x), &permute(&y), n, &cfg).unwrap();
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn gradient_wrt_similarities_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let n = rng.random_range(3..9);
            let (x, y) = random_batch(&mut rng, n);
            for lambda in [0.0, 0.2, 1.0] {
                let cfg = LossConfig {
                    lambda,
                    ..LossConfig::default()
                };
                let plan = KnnPlan::new(&y, n, &cfg).unwrap();
                let r = grad_check(
                    &[Tensor::new(&[n, n], x.clone()).unwrap()],
                    |g, p| {
                        let mse = weighted_mse_graph(g, p[0], &y, true)?;
                        let knn = plan.apply(g, p[0])?;
                        let a = g.scale(mse, lambda);
                        let b = g.scale(knn, 1.0 - lambda);
                        g.add(a, b)
                    },
                    DEFAULT_STEP,
                    usize::MAX,
                    4,
                )
                .unwrap();
                assert!(r.max_rel_error < 1e-6, "{r:?}");
            }
        }
    }

    #[test]
    fn full_composite_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 6;
        let (_, y) = random_batch(&mut rng, n);
        let emb: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = grad_check(
            &[Tensor::new(&[n, 4], emb).unwrap()],
            |g, p| Ok(combined_loss(g, p[0], &y, &LossConfig::default())?.total),
            DEFAULT_STEP,
            usize::MAX,
            5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn margin_growth_lowers_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 6;
        let (x, y) = random_batch(&mut rng, n);
        let cfg = LossConfig::default();
        let plan = KnnPlan::new(&y, n, &cfg).unwrap();
        let base = plan.evaluate(&x);
        for k in 0..plan.len() {
            // Widen one pair's margin with every other term held fixed.
            let mut one = KnnPlan::default();
            one.left.push(plan.left[k]);
            one.right.push(plan.right[k]);
            one.coef.push(plan.coef[k]);
            let mut x2 = x.clone();
            x2[plan.left[k]] += 0.1;
            assert!(one.evaluate(&x2) < one.evaluate(&x));
        }
        // Perfect ordering with growing margins drives the loss to zero.
        let mut last = base;
        for scale in [1.0, 8.0, 64.0, 512.0] {
            let xs: Vec<f64> = y.iter().map(|v| v * scale).collect();
            let l = plan.evaluate(&xs);
            assert!(l < last);
            last = l;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn mse_examples() {
        assert_eq!(weighted_mse(&[1.0, 0.5, 0.5, 1.0], &[1.0, 1.0, 1.0, 1.0], 2, true).unwrap(), 0.25);
        let y = [1.0, 0.3, 0.3, 1.0];
        assert_eq!(weighted_mse(&y, &y, 2, true).unwrap(), 0.0);
        let a = weighted_mse(&[1.0, 0.1, 0.1, 1.0], &y, 2, true).unwrap();
        let b = weighted_mse(&[1.0, -0.1, -0.1, 1.0], &y, 2, true).unwrap();
        assert!((b - 4.0 * a).abs() < 1e-15);
        assert!(weighted_mse(&[1.0], &y, 2, true).is_err());
        let mut g = Graph::<f64>::new();
        let xv = g.input(Tensor::from_f64(&[2, 2], &[1.0, 0.1, 0.1, 1.0]).unwrap());
        let m = weighted_mse_graph(&mut g, xv, &y, true).unwrap();
        assert!((g.value(m).item() - a).abs() < 1e-15);
    }

    #[test]
    fn combined_endpoints_and_blend() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 8;
        let (x, y) = random_batch(&mut rng, n);
        let with = |lambda| {
            combined_loss_value(
                &x,
                &y,
                n,
                &LossConfig {
                    lambda,
                    ..LossConfig::default()
                },
            )
            .unwrap()
        };
        let mse = weighted_mse(&x, &y, n, true).unwrap();
        let knn = knn_loss(&x, &y, n, &LossConfig::default()).unwrap();
        assert_eq!(with(1.0), mse);
        assert_eq!(with(0.0), knn);
        assert!((with(0.2) - (0.2 * mse + 0.8 * knn)).abs() < 1e-12);
        let vals: Vec<f64> = (0..=10).map(|k| with(k as f64 / 10.0)).collect();
        let up = vals.windows(2).all(|w| w[1] >= w[0]);
        let down = vals.windows(2).all(|w| w[1] <= w[0]);
        assert!(up || down);
        assert!(LossConfig { lambda: 1.5, ..LossConfig::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn loss_is_non_negative(seed in 0u64..500, n in 2usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, y) = random_batch(&mut rng, n);
            prop_assert!(knn_loss(&x, &y, n, &LossConfig::default()).unwrap() >= 0.0);
        }
    }
}
