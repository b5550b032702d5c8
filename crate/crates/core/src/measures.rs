//! Non-learned trajectory measures and the ground-truth similarity matrix.
//!
//! All three measures work on planar points with Euclidean point distance.
//! Each has a dynamic-programming implementation and a literal recursive
//! oracle ([`naive_measure`]) that is only usable on tiny inputs.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geo::{Point, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MeasureKind {
    Dtw,
    DiscreteFrechet,
    Edwp,
}

impl MeasureKind {
    pub const ALL: [MeasureKind; 3] = [Self::Dtw, Self::DiscreteFrechet, Self::Edwp];

    /// Short tag used in file names and configs.
    pub fn tag(self) -> &'static str {
        match self {
            Self::Dtw => "dtw",
            Self::DiscreteFrechet => "dfd",
            Self::Edwp => "edwp",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Self::Dtw => 0,
            Self::DiscreteFrechet => 1,
            Self::Edwp => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }

    /// Smallest trajectory length the measure accepts.
    pub fn min_points(self) -> usize {
        match self {
            Self::Edwp => 2,
            _ => 1,
        }
    }

    pub fn eval(self, a: &[Point], b: &[Point]) -> Result<f64> {
        match self {
            Self::Dtw => dtw(a, b),
            Self::DiscreteFrechet => discrete_frechet(a, b),
            Self::Edwp => edwp(a, b),
        }
    }
}

impl fmt::Display for MeasureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for MeasureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dtw" => Ok(Self::Dtw),
            "dfd" | "frechet" | "discrete_frechet" => Ok(Self::DiscreteFrechet),
            "edwp" => Ok(Self::Edwp),
            other => Err(Error::InvalidArgument(format!(
                "unknown measure {other:?} (expected dtw, dfd or edwp)"
            ))),
        }
    }
}

fn check_len(a: &[Point], b: &[Point], min: usize) -> Result<()> {
    if a.len() < min || b.len() < min {
        return Err(Error::InvalidArgument(format!(
            "measure needs at least {min} point(s) per trajectory, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Classic DTW, sum of Euclidean costs along the optimal warping path.
pub fn dtw(a: &[Point], b: &[Point]) -> Result<f64> {
    check_len(a, b, 1)?;
    Ok(two_row_dp(a, b, |cost, best| cost + best))
}

/// Discrete Fréchet distance: the smallest achievable maximum coupling distance.
pub fn discrete_frechet(a: &[Point], b: &[Point]) -> Result<f64> {
    check_len(a, b, 1)?;
    Ok(two_row_dp(a, b, f64::max))
}

/// Shared `O(n·m)` time, `O(min(n, m))` memory recurrence
/// `C[i][j] = combine(d(a_i, b_j), min(C[i-1][j], C[i][j-1], C[i-1][j-1]))`.
fn two_row_dp(a: &[Point], b: &[Point], combine: impl Fn(f64, f64) -> f64) -> f64 {
    // Keep the shorter sequence along the row.
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let m = short.len();
    let mut prev = vec![f64::INFINITY; m];
    let mut cur = vec![f64::INFINITY; m];
    for (i, &p) in long.iter().enumerate() {
        for j in 0..m {
            let cost = p.dist(short[j]);
            cur[j] = if i == 0 && j == 0 {
                cost
            } else {
                let mut best = f64::INFINITY;
                if i > 0 {
                    best = best.min(prev[j]);
                    if j > 0 {
                        best = best.min(prev[j - 1]);
                    }
                }
                if j > 0 {
                    best = best.min(cur[j - 1]);
                }
                combine(cost, best)
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m - 1]
}

/// Closest point to `p` on segment `[a, b]`.
pub fn project_on_segment(p: Point, a: Point, b: Point) -> Point {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return a;
    }
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
    Point::new(a.x + t * dx, a.y + t * dy)
}

/// Replacement cost times coverage for two segments.
#[inline]
fn edit_cost(e: (Point, Point), f: (Point, Point)) -> f64 {
    let rep = e.0.dist(f.0) + e.1.dist(f.1);
    let cov = e.0.dist(e.1) + f.0.dist(f.1);
    rep * cov
}

/// Cost of matching every remaining segment of `rest` against a lone point.
fn edwp_single(p: Point, rest: impl Iterator<Item = (Point, Point)>) -> f64 {
    rest.map(|(s, e)| (s.dist(p) + e.dist(p)) * s.dist(e)).sum()
}

/// Edit Distance with Projections.
///
/// Each step consumes the leading segment of one or both trajectories:
/// replace both leading segments, or split the other trajectory's leading
/// segment at the projection of the next point and match against the piece.
/// When one side is down to a single point the remaining segments of the
/// other are matched against that point.
pub fn edwp(a: &[Point], b: &[Point]) -> Result<f64> {
    check_len(a, b, 2)?;
    let mut solver = Edwp {
        a,
        b,
        memo: HashMap::new(),
    };
    Ok(solver.solve(State {
        i: 0,
        j: 0,
        split: Split::None,
    }))
}

/// Which side (if any) currently starts at a projected point instead of its
/// original vertex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Split {
    None,
    A(u64, u64),
    B(u64, u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct State {
    i: usize,
    j: usize,
    split: Split,
}

struct Edwp<'a> {
    a: &'a [Point],
    b: &'a [Point],
    memo: HashMap<State, f64>,
}

impl Edwp<'_> {
    fn heads(&self, s: State) -> (Point, Point) {
        let unpack = |x: u64, y: u64| Point::new(f64::from_bits(x), f64::from_bits(y));
        match s.split {
            Split::None => (self.a[s.i], self.b[s.j]),
            Split::A(x, y) => (unpack(x, y), self.b[s.j]),
            Split::B(x, y) => (self.a[s.i], unpack(x, y)),
        }
    }

    fn solve(&mut self, s: State) -> f64 {
        if let Some(&v) = self.memo.get(&s) {
            return v;
        }
        let (a, b) = (self.a, self.b);
        let (ha, hb) = self.heads(s);
        let a_single = s.i + 1 == a.len();
        let b_single = s.j + 1 == b.len();
        let value = match (a_single, b_single) {
            (true, true) => 0.0,
            (true, false) => edwp_single(
                ha,
                std::iter::once((hb, b[s.j + 1])).chain(b[s.j + 1..].windows(2).map(|w| (w[0], w[1]))),
            ),
            (false, true) => edwp_single(
                hb,
                std::iter::once((ha, a[s.i + 1])).chain(a[s.i + 1..].windows(2).map(|w| (w[0], w[1]))),
            ),
            (false, false) => {
                let (na, nb) = (a[s.i + 1], b[s.j + 1]);
                let replace = edit_cost((ha, na), (hb, nb))
                    + self.solve(State {
                        i: s.i + 1,
                        j: s.j + 1,
                        split: Split::None,
                    });
                let pb = project_on_segment(na, hb, nb);
                let insert_b = edit_cost((ha, na), (hb, pb))
                    + self.solve(State {
                        i: s.i + 1,
                        j: s.j,
                        split: Split::B(pb.x.to_bits(), pb.y.to_bits()),
                    });
                let pa = project_on_segment(nb, ha, na);
                let insert_a = edit_cost((ha, pa), (hb, nb))
                    + self.solve(State {
                        i: s.i,
                        j: s.j + 1,
                        split: Split::A(pa.x.to_bits(), pa.y.to_bits()),
                    });
                replace.min(insert_b).min(insert_a)
            }
        };
        self.memo.insert(s, value);
        value
    }
}

/// Largest combined length accepted by [`naive_measure`].
pub const NAIVE_MAX_POINTS: usize = 16;

/// Literal, un-memoized recursion of each measure's definition. Exponential;
/// test oracle only.
pub fn naive_measure(kind: MeasureKind, a: &[Point], b: &[Point]) -> Result<f64> {
    if a.len() + b.len() > NAIVE_MAX_POINTS {
        return Err(Error::InvalidArgument(format!(
            "naive recursion limited to {NAIVE_MAX_POINTS} combined points, got {}",
            a.len() + b.len()
        )));
    }
    check_len(a, b, kind.min_points())?;
    Ok(match kind {
        MeasureKind::Dtw => naive_warp(a, b, a.len() - 1, b.len() - 1, &|c, r| c + r),
        MeasureKind::DiscreteFrechet => naive_warp(a, b, a.len() - 1, b.len() - 1, &f64::max),
        MeasureKind::Edwp => naive_edwp(a.to_vec(), b.to_vec()),
    })
}

fn naive_warp(a: &[Point], b: &[Point], i: usize, j: usize, combine: &dyn Fn(f64, f64) -> f64) -> f64 {
    let d = a[i].dist(b[j]);
    if i == 0 && j == 0 {
        return d;
    }
    let mut best = f64::INFINITY;
    if i > 0 {
        best = best.min(naive_warp(a, b, i - 1, j, combine));
    }
    if j > 0 {
        best = best.min(naive_warp(a, b, i, j - 1, combine));
    }
    if i > 0 && j > 0 {
        best = best.min(naive_warp(a, b, i - 1, j - 1, combine));
    }
    combine(d, best)
}

fn naive_edwp(a: Vec<Point>, b: Vec<Point>) -> f64 {
    let seg_sum = |p: Point, t: &[Point]| -> f64 {
        t.windows(2)
            .map(|w| (w[0].dist(p) + w[1].dist(p)) * w[0].dist(w[1]))
            .sum()
    };
    match (a.len(), b.len()) {
        (1, 1) => 0.0,
        (1, _) => seg_sum(a[0], &b),
        (_, 1) => seg_sum(b[0], &a),
        _ => {
            let rep = |e: (Point, Point), f: (Point, Point)| {
                (e.0.dist(f.0) + e.1.dist(f.1)) * (e.0.dist(e.1) + f.0.dist(f.1))
            };
            let (p1, p2, q1, q2) = (a[0], a[1], b[0], b[1]);
            let replace = rep((p1, p2), (q1, q2)) + naive_edwp(a[1..].to_vec(), b[1..].to_vec());

            let proj_b = project_on_segment(p2, q1, q2);
            let mut b_split = b.clone();
            b_split[0] = proj_b;
            let insert_b = rep((p1, p2), (q1, proj_b)) + naive_edwp(a[1..].to_vec(), b_split);

            let proj_a = project_on_segment(q2, p1, p2);
            let mut a_split = a.clone();
            a_split[0] = proj_a;
            let insert_a = rep((p1, proj_a), (q1, q2)) + naive_edwp(a_split, b[1..].to_vec());

            replace.min(insert_b).min(insert_a)
        }
    }
}

/// Distance scale `s` of the map `y = exp(-dist / s)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityScale(f64);

impl SimilarityScale {
    pub fn new(s: f64) -> Result<Self> {
        if s > 0.0 && s.is_finite() {
            Ok(Self(s))
        } else {
            Err(Error::InvalidArgument(format!("similarity scale {s} must be positive")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// Mean measure value over up to `max_pairs` distinct pairs (all pairs
    /// when there are fewer), sampled with `seed`. Falls back to 1 when the
    /// mean is zero.
    pub fn estimate(trajs: &[Trajectory], kind: MeasureKind, max_pairs: usize, seed: u64) -> Result<Self> {
        let n = trajs.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 trajectories to estimate a scale, got {n}"
            )));
        }
        let total = n * (n - 1) / 2;
        let pairs: Vec<(usize, usize)> = if total <= max_pairs {
            (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..max_pairs)
                .map(|_| {
                    let i = rng.random_range(0..n);
                    let mut j = rng.random_range(0..n - 1);
                    if j >= i {
                        j += 1;
                    }
                    (i, j)
                })
                .collect()
        };
        let values = pairs
            .par_iter()
            .map(|&(i, j)| measure_pair(trajs, kind, i, j))
            .collect::<Result<Vec<f64>>>()?;
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Self::new(if mean > 0.0 { mean } else { 1.0 })
    }
}

/// Number of pairs sampled by default when estimating the scale.
pub const SCALE_SAMPLE_PAIRS: usize = 10_000;

/// `exp(-dist / s)`, in `(0, 1]`.
pub fn distance_to_similarity(dist: f64, scale: SimilarityScale) -> Result<f64> {
    if !(dist >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "distance {dist} must be non-negative"
        )));
    }
    Ok((-dist / scale.get()).exp())
}

/// Symmetric `n×n` matrix of ground-truth similarities, row-major `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMatrix {
    n: usize,
    values: Vec<f32>,
}

impl GroundTruthMatrix {
    pub fn from_values(n: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::Shape(format!(
                "ground-truth matrix needs {} values, got {}",
                n * n,
                values.len()
            )));
        }
        Ok(Self { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    /// Square submatrix over `idx` (in that order).
    pub fn submatrix(&self, idx: &[usize]) -> GroundTruthMatrix {
        let values = idx
            .iter()
            .flat_map(|&i| idx.iter().map(move |&j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .collect();
        GroundTruthMatrix {
            n: idx.len(),
            values,
        }
    }
}

fn measure_pair(trajs: &[Trajectory], kind: MeasureKind, i: usize, j: usize) -> Result<f64> {
    kind.eval(&trajs[i].points, &trajs[j].points).map_err(|e| Error::Pair {
        a: trajs[i].id.clone(),
        b: trajs[j].id.clone(),
        message: e.to_string(),
    })
}

fn pair_similarity(trajs: &[Trajectory], kind: MeasureKind, scale: SimilarityScale, i: usize, j: usize) -> Result<f32> {
    let d = measure_pair(trajs, kind, i, j)?;
    distance_to_similarity(d, scale)
        .map(|y| y as f32)
        .map_err(|e| Error::Pair {
            a: trajs[i].id.clone(),
            b: trajs[j].id.clone(),
            message: e.to_string(),
        })
}

fn assemble(n: usize, upper: Vec<f32>) -> GroundTruthMatrix {
    let mut values = vec![0f32; n * n];
    let mut it = upper.into_iter();
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let v = it.next().expect("one value per upper-triangle pair");
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    GroundTruthMatrix { n, values }
}

/// Ground-truth similarities for every pair, upper triangle computed in
/// parallel and mirrored. `progress(done, total)` is called as pairs finish.
pub fn build_gt_matrix(
    trajs: &[Trajectory],
    kind: MeasureKind,
    scale: SimilarityScale,
    progress: &(dyn Fn(usize, usize) + Sync),
) -> Result<GroundTruthMatrix> {
    let n = trajs.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let total = pairs.len();
    let done = AtomicUsize::new(0);
    let upper = pairs
        .par_iter()
        .map(|&(i, j)| {
            let v = pair_similarity(trajs, kind, scale, i, j);
            progress(done.fetch_add(1, Ordering::Relaxed) + 1, total);
            v
        })
        .collect::<Result<Vec<f32>>>()?;
    Ok(assemble(n, upper))
}

/// Single-threaded reference for [`build_gt_matrix`].
pub fn build_gt_matrix_serial(trajs: &[Trajectory], kind: MeasureKind, scale: SimilarityScale) -> Result<GroundTruthMatrix> {
    let n = trajs.len();
    let mut upper = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            upper.push(pair_similarity(trajs, kind, scale, i, j)?);
        }
    }
    Ok(assemble(n, upper))
}
