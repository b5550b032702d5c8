//! Retrieval metrics and the test protocol.

use std::fmt;

use crate::error::{Error, Result};
use crate::geo::{mask_points_keeping, shift_points, NormStats, Trajectory};
use crate::measures::GroundTruthMatrix;
use crate::model::{encode_all, Model};

/// Candidate indices ordered by descending score, ties by lower index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ranking(Vec<usize>);

impl Ranking {
    /// Ranks every candidate except `exclude`.
    pub fn from_scores(scores: &[f64], exclude: Option<usize>) -> Self {
        let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| Some(i) != exclude).collect();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Ranking(idx)
    }

    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let mut seen = order.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("ranking contains duplicates".into()));
        }
        Ok(Ranking(order))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn top(&self, k: usize) -> &[usize] {
        &self.0[..k.min(self.0.len())]
    }
}

fn overlap(a: &[usize], b: &[usize]) -> usize {
    a.iter().filter(|x| b.contains(x)).count()
}

/// `|top-k(gt) ∩ top-k(pred)| / k`
pub fn hr_at_k(gt: &Ranking, pred: &Ranking, k: usize) -> Result<f64> {
    if k == 0 || k > gt.len() || k > pred.len() {
        return Err(Error::InvalidArgument(format!(
            "HR@{k} needs at least {k} candidates, have {} and {}",
            gt.len(),
            pred.len()
        )));
    }
    Ok(overlap(gt.top(k), pred.top(k)) as f64 / k as f64)
}

/// `|top-10(gt) ∩ top-50(pred)| / 10`
pub fn r10_at_50(gt: &Ranking, pred: &Ranking) -> Result<f64> {
    if gt.len() < 50 || pred.len() < 50 {
        return Err(Error::InvalidArgument(format!(
            "R10@50 needs at least 50 candidates, have {} and {}",
            gt.len(),
            pred.len()
        )));
    }
    Ok(overlap(gt.top(10), pred.top(50)) as f64 / 10.0)
}

/// Euclidean distance in f64.
pub fn embedding_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Exhaustive top-`k` search by predicted similarity `1 − ‖q − c‖`.
pub fn knn_query(query: &[f32], corpus: &[Vec<f32>], k: usize) -> Result<Vec<usize>> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    if k > corpus.len() {
        return Err(Error::InvalidArgument(format!("k={k} exceeds corpus size {}", corpus.len())));
    }
    let scores: Vec<f64> = corpus.iter().map(|c| 1.0 - embedding_distance(query, c)).collect();
    let mut r = Ranking::from_scores(&scores, None).0;
    r.truncate(k);
    Ok(r)
}

/// Mean retrieval metrics over all queries; a metric is `None` when the
/// query set is too small for it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub queries: usize,
    pub hr10: Option<f64>,
    pub hr50: Option<f64>,
    pub r10_50: Option<f64>,
}

impl MetricsReport {
    pub fn entries(&self) -> [(&'static str, Option<f64>); 3] {
        [("hr10", self.hr10), ("hr50", self.hr50), ("r10_50", self.r10_50)]
    }
}

impl fmt::Display for MetricsReport {
    /// `metric<TAB>value` lines with 6 decimals; absent metrics say so.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, v) in self.entries() {
            match v {
                Some(v) => writeln!(f, "{name}\t{v:.6}")?,
                None => writeln!(f, "{name}\tabsent")?,
            }
        }
        Ok(())
    }
}

/// Metrics from two row-major `n × n` score matrices: row `q` scores every
/// candidate for query `q`. The query itself is excluded on both sides.
pub fn metrics_from_scores(gt: &[f64], pred: &[f64], n: usize) -> Result<MetricsReport> {
    if gt.len() != n * n || pred.len() != n * n {
        return Err(Error::Shape(format!("score matrices must be {n}×{n}")));
    }
    let candidates = n.saturating_sub(1);
    let mut sums = [0.0f64; 3];
    for q in 0..n {
        let g = Ranking::from_scores(&gt[q * n..(q + 1) * n], Some(q));
        let p = Ranking::from_scores(&pred[q * n..(q + 1) * n], Some(q));
        if candidates >= 10 {
            sums[0] += hr_at_k(&g, &p, 10)?;
        }
        if candidates >= 50 {
            sums[1] += hr_at_k(&g, &p, 50)?;
            sums[2] += r10_at_50(&g, &p)?;
        }
    }
    let mean = |s: f64, ok: bool| ok.then(|| s / n as f64);
    Ok(MetricsReport {
        queries: n,
        hr10: mean(sums[0], candidates >= 10),
        hr50: mean(sums[1], candidates >= 50),
        r10_50: mean(sums[2], candidates >= 50),
    })
}

pub fn gt_scores(gt: &GroundTruthMatrix) -> Vec<f64> {
    gt.values().iter().map(|&v| v as f64).collect()
}

/// Predicted-similarity matrix between query and corpus embeddings.
pub fn predicted_scores(queries: &[Vec<f32>], corpus: &[Vec<f32>]) -> Vec<f64> {
    let n = corpus.len();
    let mut out = vec![0.0; queries.len() * n];
    for (i, q) in queries.iter().enumerate() {
        for (j, c) in corpus.iter().enumerate() {
            out[i * n + j] = 1.0 - embedding_distance(q, c);
        }
    }
    out
}

/// Robustness transforms applied to the query side only.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalOptions {
    /// Fraction of points removed from each query.
    pub mask_ratio: f64,
    /// Maximum displacement in meters of each query point.
    pub shift_m: f64,
    pub seed: u64,
    /// Score with the ground truth itself (pipeline self-test).
    pub oracle: bool,
}

/// Embeds the planar test set and scores retrieval against `gt`, which
/// must be aligned with `test`.
pub fn evaluate(
    model: &Model<f32>,
    stats: &NormStats,
    test: &[Trajectory],
    gt: &GroundTruthMatrix,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let n = test.len();
    if gt.n() != n {
        return Err(Error::Shape(format!("ground truth covers {} trajectories, test set has {n}", gt.n())));
    }
    let truth = gt_scores(gt);
    if opts.oracle {
        return metrics_from_scores(&truth, &truth, n);
    }
    let corpus = encode_all(test, model, stats, 128)?;
    let queries = if opts.mask_ratio > 0.0 || opts.shift_m > 0.0 {
        let keep = model.config().min_points();
        let noisy = test
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let s = opts.seed.wrapping_add(i as u64);
                let t = if opts.mask_ratio > 0.0 {
                    mask_points_keeping(t, opts.mask_ratio, keep, s)?
                } else {
                    t.clone()
                };
                shift_points(&t, opts.shift_m, s ^ 0x5eed)
            })
            .collect::<Result<Vec<_>>>()?;
        encode_all(&noisy, model, stats, 128)?
    } else {
        corpus.clone()
    };
    metrics_from_scores(&truth, &predicted_scores(&queries, &corpus), n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn r(v: &[usize]) -> Ranking {
        Ranking::from_order(v.to_vec()).unwrap()
    }

    #[test]
    fn hit_ratio_cases() {
        let a = r(&[0, 1, 2, 3, 4, 5]);
        assert_eq!(hr_at_k(&a, &a, 3).unwrap(), 1.0);
        assert_eq!(hr_at_k(&a, &r(&[3, 4, 5, 0, 1, 2]), 3).unwrap(), 0.0);
        // gt top-3 {A,B,C}, pred top-3 {A,C,D}
        let got = hr_at_k(&r(&[0, 1, 2, 3]), &r(&[0, 2, 3, 1]), 3).unwrap();
        assert_eq!(got, 2.0 / 3.0);
        assert!(hr_at_k(&a, &a, 7).is_err());
        assert!(Ranking::from_order(vec![1, 1]).is_err());
    }

    #[test]
    fn recall_cases() {
        let gt: Vec<usize> = (0..60).collect();
        let g = r(&gt);
        assert_eq!(r10_at_50(&g, &g).unwrap(), 1.0);
        // gt top-10 at predicted positions 41..50
        let mut p: Vec<usize> = (10..50).collect();
        p.extend(0..10);
        p.extend(50..60);
        assert_eq!(r10_at_50(&g, &r(&p)).unwrap(), 1.0);
        let mut p: Vec<usize> = (10..60).collect();
        p.extend(0..10);
        assert_eq!(r10_at_50(&g, &r(&p)).unwrap(), 0.0);
        assert!(r10_at_50(&r(&gt[..49]), &r(&gt[..49])).is_err());
    }

    #[test]
    fn reordering_below_k_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut gt: Vec<usize> = (0..80).collect();
        gt.shuffle(&mut rng);
        let mut pred: Vec<usize> = (0..80).collect();
        pred.shuffle(&mut rng);
        let base = (hr_at_k(&r(&gt), &r(&pred), 10).unwrap(), r10_at_50(&r(&gt), &r(&pred)).unwrap());
        pred[50..].shuffle(&mut rng);
        gt[10..].shuffle(&mut rng);
        pred[..10].reverse();
        assert_eq!(hr_at_k(&r(&gt), &r(&pred), 10).unwrap(), base.0);
        assert_eq!(r10_at_50(&r(&gt), &r(&pred)).unwrap(), base.1);
    }

    #[test]
    fn knn_query_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let corpus: Vec<Vec<f32>> = (0..20).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        assert_eq!(knn_query(&corpus[5], &corpus, 1).unwrap(), vec![5]);
        let mut all = knn_query(&corpus[0], &corpus, 20).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        let q: Vec<f32> = vec![0.1, 0.2, -0.3, 0.0];
        let mut naive: Vec<(f64, usize)> = corpus.iter().enumerate().map(|(i, c)| (1.0 - embedding_distance(&q, c), i)).collect();
        naive.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let want: Vec<usize> = naive.iter().take(7).map(|p| p.1).collect();
        assert_eq!(knn_query(&q, &corpus, 7).unwrap(), want);
        assert!(knn_query(&q, &[], 1).is_err());
        assert!(knn_query(&q, &corpus, 21).is_err());
    }

    #[test]
    fn ties_break_to_lower_index() {
        let rk = Ranking::from_scores(&[0.5, 0.9, 0.5, 0.9], Some(3));
        assert_eq!(rk.as_slice(), &[1, 0, 2]);
    }

    fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let mut m = vec![1.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = rng.random::<f64>();
                m[i * n + j] = v;
                m[j * n + i] = v;
            }
        }
        m
    }

    #[test]
    fn oracle_scores_are_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = random_symmetric(&mut rng, 60);
        let m = metrics_from_scores(&gt, &gt, 60).unwrap();
        assert_eq!((m.hr10, m.hr50, m.r10_50), (Some(1.0), Some(1.0), Some(1.0)));
    }

    #[test]
    fn small_sets_report_absent_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_symmetric(&mut rng, 20);
        let m = metrics_from_scores(&gt, &gt, 20).unwrap();
        assert_eq!(m.hr10, Some(1.0));
        assert_eq!((m.hr50, m.r10_50), (None, None));
        let text = m.to_string();
        assert!(text.starts_with("hr10\t1.000000\n"));
        assert!(text.contains("hr50\tabsent"));
        let m = metrics_from_scores(&gt[..25], &gt[..25], 5).unwrap();
        assert_eq!(m.hr10, None);
    }

    #[test]
    fn random_predictions_hit_at_chance() {
        let n = 200;
        let mut hr10 = Vec::new();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
            let gt = random_symmetric(&mut rng, n);
            let pred = random_symmetric(&mut rng, n);
            let m = metrics_from_scores(&gt, &pred, n).unwrap();
            hr10.push(m.hr10.unwrap());
            assert!(m.hr50.unwrap() >= m.hr10.unwrap() - 0.03);
            assert!(m.r10_50.unwrap() >= m.hr10.unwrap());
        }
        let mean = hr10.iter().sum::<f64>() / 5.0;
        assert!((mean - 10.0 / 199.0).abs() < 0.03, "{mean}");
    }
}
