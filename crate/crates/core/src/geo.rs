//! Trajectories in a local planar frame and everything done to them before
//! they reach the model: cleaning, projection, point features, normalization,
//! synthetic generation and the robustness perturbations used at test time.

use std::f64::consts::PI;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use crate::error::{Error, Result};

/// Mean Earth radius used by the equirectangular projection, meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Default cleaning bounds.
pub const MIN_POINTS: usize = 20;
pub const MAX_POINTS: usize = 200;

/// Number of per-point features produced by [`augment_features`].
pub const FEATURES: usize = 7;

/// A point. Planar trajectories carry meters (x east, y north); raw
/// trajectories carry longitude in `x` and latitude in `y`, both in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub points: Vec<Point>,
}

impl Trajectory {
    pub fn new(id: impl Into<String>, points: Vec<Point>) -> Self {
        Self {
            id: id.into(),
            points,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Total polyline length.
    pub fn path_length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].dist(w[1])).sum()
    }

    fn check_finite(&self) -> Result<()> {
        match self.points.iter().position(|p| !p.is_finite()) {
            Some(index) => Err(Error::NonFinite {
                id: self.id.clone(),
                index,
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    TooShort(usize),
    TooLong(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cleaned {
    Accepted(Trajectory),
    Rejected(Rejection),
}

impl Cleaned {
    pub fn accepted(self) -> Option<Trajectory> {
        match self {
            Cleaned::Accepted(t) => Some(t),
            Cleaned::Rejected(_) => None,
        }
    }
}

/// Collapses consecutive duplicate points and applies the length bounds.
///
/// Rejection is an ordinary outcome; only non-finite coordinates are errors.
pub fn clean_trajectory(raw: &Trajectory, min_len: usize, max_len: usize) -> Result<Cleaned> {
    if raw.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "trajectory {:?} has no points",
            raw.id
        )));
    }
    raw.check_finite()?;
    let mut points: Vec<Point> = Vec::with_capacity(raw.len());
    for &p in &raw.points {
        if points.last() != Some(&p) {
            points.push(p);
        }
    }
    let n = points.len();
    Ok(if n < min_len {
        Cleaned::Rejected(Rejection::TooShort(n))
    } else if n > max_len {
        Cleaned::Rejected(Rejection::TooLong(n))
    } else {
        Cleaned::Accepted(Trajectory::new(raw.id.clone(), points))
    })
}

/// Equirectangular frame about a reference latitude.
///
/// `x = R·lon·cos(lat0)`, `y = R·lat` with angles in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFrame {
    pub lat0_deg: f64,
}

impl LocalFrame {
    pub fn new(lat0_deg: f64) -> Result<Self> {
        if !lat0_deg.is_finite() || lat0_deg <= -90.0 || lat0_deg >= 90.0 {
            return Err(Error::InvalidArgument(format!(
                "reference latitude {lat0_deg} outside (-90, 90)"
            )));
        }
        Ok(Self { lat0_deg })
    }

    /// Frame centred on the mean latitude of every point in `trajs`.
    pub fn from_mean_latitude(trajs: &[Trajectory]) -> Result<Self> {
        let (sum, count) = trajs
            .iter()
            .flat_map(|t| t.points.iter())
            .fold((0.0, 0usize), |(s, c), p| (s + p.y, c + 1));
        if count == 0 {
            return Err(Error::InvalidArgument("no points to derive a frame from".into()));
        }
        Self::new(sum / count as f64)
    }

    pub fn project_point(&self, lonlat: Point) -> Point {
        let cos0 = self.lat0_deg.to_radians().cos();
        Point::new(
            EARTH_RADIUS_M * lonlat.x.to_radians() * cos0,
            EARTH_RADIUS_M * lonlat.y.to_radians(),
        )
    }

    pub fn unproject_point(&self, p: Point) -> Point {
        let cos0 = self.lat0_deg.to_radians().cos();
        Point::new(
            (p.x / (EARTH_RADIUS_M * cos0)).to_degrees(),
            (p.y / EARTH_RADIUS_M).to_degrees(),
        )
    }

    /// Projects a lon/lat trajectory into this frame.
    pub fn project(&self, lonlat: &Trajectory) -> Result<Trajectory> {
        check_lonlat(lonlat)?;
        let points = lonlat.points.iter().map(|&p| self.project_point(p)).collect();
        Ok(Trajectory::new(lonlat.id.clone(), points))
    }

    pub fn unproject(&self, planar: &Trajectory) -> Trajectory {
        Trajectory::new(
            planar.id.clone(),
            planar.points.iter().map(|&p| self.unproject_point(p)).collect(),
        )
    }
}

/// Checks that every point is a finite `(lon, lat)` with lon in
/// `[-180, 180]` and lat strictly inside `(-90, 90)`.
pub fn check_lonlat(t: &Trajectory) -> Result<()> {
    t.check_finite()?;
    match t
        .points
        .iter()
        .position(|p| !(-180.0..=180.0).contains(&p.x) || p.y <= -90.0 || p.y >= 90.0)
    {
        Some(index) => Err(Error::OutOfRange {
            id: t.id.clone(),
            index,
            lon: t.points[index].x,
            lat: t.points[index].y,
        }),
        None => Ok(()),
    }
}

/// Projects a whole dataset about its own mean latitude.
pub fn project_to_local_plane(lonlat: &[Trajectory]) -> Result<(Vec<Trajectory>, LocalFrame)> {
    let frame = LocalFrame::from_mean_latitude(lonlat)?;
    let planar = lonlat
        .iter()
        .map(|t| frame.project(t))
        .collect::<Result<Vec<_>>>()?;
    Ok((planar, frame))
}

/// Per-point features, one `[f64; 7]` row per point:
/// `x, y, |p[i-1]p[i]|, |p[i]p[i+1]|, heading in, heading out, interior angle`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: Vec<[f64; FEATURES]>,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Builds the seven-column point features.
///
/// The first point has no incoming segment and the last has no outgoing one;
/// entries that depend on the missing neighbour are zero.
pub fn augment_features(t: &Trajectory) -> Result<FeatureMatrix> {
    let n = t.len();
    if n < 2 {
        return Err(Error::TooShort {
            id: t.id.clone(),
            len: n,
            min: 2,
        });
    }
    let p = &t.points;
    let rows = (0..n)
        .map(|i| {
            let mut row = [0.0; FEATURES];
            row[0] = p[i].x;
            row[1] = p[i].y;
            let incoming = (i > 0).then(|| (p[i].x - p[i - 1].x, p[i].y - p[i - 1].y));
            let outgoing = (i + 1 < n).then(|| (p[i + 1].x - p[i].x, p[i + 1].y - p[i].y));
            if let Some((dx, dy)) = incoming {
                row[2] = dx.hypot(dy);
                row[4] = dy.atan2(dx);
            }
            if let Some((dx, dy)) = outgoing {
                row[3] = dx.hypot(dy);
                row[5] = dy.atan2(dx);
            }
            if let (Some(a), Some(b)) = (incoming, outgoing) {
                row[6] = interior_angle(a, b);
            }
            row
        })
        .collect();
    Ok(FeatureMatrix { rows })
}

/// Angle between two direction vectors in `[0, π]`; zero if either is degenerate.
fn interior_angle(a: (f64, f64), b: (f64, f64)) -> f64 {
    let na = a.0.hypot(a.1);
    let nb = b.0.hypot(b.1);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let cos = ((a.0 * b.0 + a.1 * b.1) / (na * nb)).clamp(-1.0, 1.0);
    cos.acos()
}

/// Column-wise mean and standard deviation of training features.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: [f64; FEATURES],
    pub std: [f64; FEATURES],
}

impl NormStats {
    /// Identity statistics (mean 0, std 1).
    pub fn identity() -> Self {
        Self {
            mean: [0.0; FEATURES],
            std: [1.0; FEATURES],
        }
    }

    /// Population statistics over every row of every matrix. Columns with zero
    /// spread get std 1.
    pub fn compute<'a>(features: impl IntoIterator<Item = &'a FeatureMatrix>) -> Self {
        let mut count = 0usize;
        let mut sum = [0.0; FEATURES];
        let mut sq = [0.0; FEATURES];
        let matrices: Vec<&FeatureMatrix> = features.into_iter().collect();
        for row in matrices.iter().flat_map(|f| f.rows.iter()) {
            count += 1;
            for c in 0..FEATURES {
                sum[c] += row[c];
            }
        }
        if count == 0 {
            return Self::identity();
        }
        let mean = sum.map(|s| s / count as f64);
        for row in matrices.iter().flat_map(|f| f.rows.iter()) {
            for c in 0..FEATURES {
                let d = row[c] - mean[c];
                sq[c] += d * d;
            }
        }
        let std = sq.map(|s| {
            let sd = (s / count as f64).sqrt();
            if sd > 0.0 && sd.is_finite() {
                sd
            } else {
                1.0
            }
        });
        Self { mean, std }
    }
}

/// Column-wise z-score. Apply exactly once: the transform is not idempotent.
pub fn normalize_features(f: &FeatureMatrix, stats: &NormStats) -> FeatureMatrix {
    let rows = f
        .rows
        .iter()
        .map(|row| {
            let mut out = [0.0; FEATURES];
            for c in 0..FEATURES {
                out[c] = (row[c] - stats.mean[c]) / stats.std[c];
            }
            out
        })
        .collect();
    FeatureMatrix { rows }
}

/// Random-walk generator settings. Lengths are in meters, angles in radians.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// `[x_min, y_min, x_max, y_max]` in the local frame.
    pub bbox: [f64; 4],
    pub heading_noise: f64,
    /// Log-normal step length: `ln(step) ~ N(step_mu, step_sigma²)`.
    pub step_mu: f64,
    pub step_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 1000,
            min_len: MIN_POINTS,
            max_len: 50,
            bbox: [-5_000.0, -5_000.0, 5_000.0, 5_000.0],
            heading_noise: 0.3,
            step_mu: 100f64.ln(),
            step_sigma: 0.5,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let [x0, y0, x1, y1] = self.bbox;
        if !(x1 > x0 && y1 > y0) || self.bbox.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "degenerate bounding box {:?}",
                self.bbox
            )));
        }
        if self.min_len < MIN_POINTS || self.max_len < self.min_len {
            return Err(Error::InvalidArgument(format!(
                "length range [{}, {}] invalid (minimum is {MIN_POINTS})",
                self.min_len, self.max_len
            )));
        }
        if !(self.heading_noise >= 0.0 && self.step_sigma >= 0.0 && self.step_mu.is_finite()) {
            return Err(Error::InvalidArgument(
                "heading noise and step sigma must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Generates `cfg.count` random-walk trajectories in the local frame.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let heading = Normal::new(0.0, cfg.heading_noise)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let step = LogNormal::new(cfg.step_mu, cfg.step_sigma)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let [x0, y0, x1, y1] = cfg.bbox;
    let trajs = (0..cfg.count)
        .map(|k| {
            let n = rng.random_range(cfg.min_len..=cfg.max_len);
            let mut p = Point::new(rng.random_range(x0..x1), rng.random_range(y0..y1));
            let mut theta: f64 = rng.random_range(-PI..PI);
            let mut points = Vec::with_capacity(n);
            points.push(p);
            while points.len() < n {
                theta += heading.sample(&mut rng);
                let len = step.sample(&mut rng);
                let next = Point::new(p.x + len * theta.cos(), p.y + len * theta.sin());
                // A zero step would produce a duplicate that cleaning removes.
                if next != p {
                    points.push(next);
                    p = next;
                }
            }
            Trajectory::new(format!("synth-{k}"), points)
        })
        .collect();
    Ok(trajs)
}

/// Removes `⌊ratio·n⌋` interior points chosen uniformly; endpoints stay.
///
/// When fewer interior points exist than requested, all of them go.
pub fn mask_points(t: &Trajectory, ratio: f64, seed: u64) -> Result<Trajectory> {
    mask_points_keeping(t, ratio, 2, seed)
}

/// [`mask_points`] that never leaves fewer than `keep` points.
pub fn mask_points_keeping(t: &Trajectory, ratio: f64, keep: usize, seed: u64) -> Result<Trajectory> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "mask ratio {ratio} outside [0, 1)"
        )));
    }
    let n = t.len();
    if n <= 2 {
        return Ok(t.clone());
    }
    let interior = n - 2;
    let remove = ((ratio * n as f64).floor() as usize)
        .min(interior)
        .min(n.saturating_sub(keep));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drop = vec![false; n];
    for i in index::sample(&mut rng, interior, remove) {
        drop[i + 1] = true;
    }
    let points = t
        .points
        .iter()
        .zip(&drop)
        .filter(|(_, &d)| !d)
        .map(|(&p, _)| p)
        .collect();
    Ok(Trajectory::new(t.id.clone(), points))
}

/// Displaces each point by an offset drawn uniformly from the disk of radius
/// `max_dist`.
pub fn shift_points(t: &Trajectory, max_dist: f64, seed: u64) -> Result<Trajectory> {
    if !(max_dist >= 0.0 && max_dist.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "shift distance {max_dist} must be a non-negative number"
        )));
    }
    if max_dist == 0.0 {
        return Ok(t.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = t
        .points
        .iter()
        .map(|p| {
            let r = max_dist * rng.random::<f64>().sqrt();
            let a = rng.random_range(-PI..PI);
            Point::new(p.x + r * a.cos(), p.y + r * a.sin())
        })
        .collect();
    Ok(Trajectory::new(t.id.clone(), points))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(pts: &[(f64, f64)]) -> Trajectory {
        Trajectory::new("t", pts.iter().map(|&(x, y)| Point::new(x, y)).collect())
    }

    fn line(n: usize) -> Trajectory {
        traj(&(0..n).map(|i| (i as f64, (i * i) as f64 * 0.1)).collect::<Vec<_>>())
    }

    #[test]
    fn dedup_collapses_runs() {
        let mut pts = Vec::new();
        for i in 0..10 {
            let o = i as f64 * 10.0;
            pts.extend([(o, o), (o, o), (o + 1.0, o + 1.0), (o + 1.0, o + 1.0)]);
        }
        let raw = traj(&pts);
        assert_eq!(raw.len(), 40);
        let out = clean_trajectory(&raw, 20, 200).unwrap().accepted().unwrap();
        assert_eq!(out.len(), 20);
    }

    #[test]
    fn length_bounds() {
        assert_eq!(
            clean_trajectory(&line(19), 20, 200).unwrap(),
            Cleaned::Rejected(Rejection::TooShort(19))
        );
        assert_eq!(
            clean_trajectory(&line(250), 20, 200).unwrap(),
            Cleaned::Rejected(Rejection::TooLong(250))
        );
        assert!(clean_trajectory(&line(20), 20, 200).unwrap().accepted().is_some());
        assert!(clean_trajectory(&line(200), 20, 200).unwrap().accepted().is_some());
    }

    #[test]
    fn non_finite_is_an_error() {
        let t = traj(&[(0.0, 0.0), (f64::NAN, 1.0)]);
        assert!(matches!(
            clean_trajectory(&t, 1, 10),
            Err(Error::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn projection_values() {
        let f = LocalFrame::new(0.0).unwrap();
        assert_eq!(f.project_point(Point::new(0.0, 0.0)), Point::new(0.0, 0.0));
        let p = f.project_point(Point::new(0.001, 0.0));
        let expected = EARTH_RADIUS_M * 0.001f64.to_radians();
        assert!((p.x - expected).abs() < 1e-9);
        assert!((p.x - 111.19).abs() < 0.01);
        assert_eq!(p.y, 0.0);
        for lat0 in [0.0, 30.0, 60.0] {
            let f = LocalFrame::new(lat0).unwrap();
            let a = f.project_point(Point::new(10.0, 40.0));
            let b = f.project_point(Point::new(10.0, 40.001));
            assert!((b.y - a.y - 111.19).abs() < 0.01);
        }
    }

    #[test]
    fn projection_rejects_out_of_range() {
        let f = LocalFrame::new(0.0).unwrap();
        assert!(matches!(
            f.project(&traj(&[(0.0, 0.0), (181.0, 0.0)])),
            Err(Error::OutOfRange { index: 1, .. })
        ));
        assert!(f.project(&traj(&[(0.0, 90.0)])).is_err());
    }

    #[test]
    fn feature_rows() {
        let t = traj(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)]);
        let f = augment_features(&t).unwrap();
        assert_eq!(f.rows[0], [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let mid = f.rows[1];
        let expected = [1.0, 0.0, 1.0, 1.0, 0.0, PI / 2.0, PI / 2.0];
        for c in 0..FEATURES {
            assert!((mid[c] - expected[c]).abs() < 1e-12, "col {c}");
        }
        // Independent check of the interior angle through the law of cosines.
        let (a, b, c) = (1.0f64, 1.0f64, 2f64.sqrt());
        let law = ((a * a + b * b - c * c) / (2.0 * a * b)).acos();
        assert!((PI - law - mid[6]).abs() < 1e-12);
        assert_eq!(f.rows[2][3], 0.0);
        assert_eq!(f.rows[2][5], 0.0);
        assert_eq!(f.rows[2][6], 0.0);

        let collinear = augment_features(&traj(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)])).unwrap();
        assert_eq!(collinear.rows[1][6], 0.0);
        assert!(augment_features(&traj(&[(0.0, 0.0)])).is_err());
    }

    #[test]
    fn zscore() {
        let f = FeatureMatrix {
            rows: vec![[1.0; FEATURES], [3.0; FEATURES]],
        };
        let stats = NormStats::compute([&f]);
        assert_eq!(stats.mean, [2.0; FEATURES]);
        assert_eq!(stats.std, [1.0; FEATURES]);
        let z = normalize_features(&f, &stats);
        assert_eq!(z.rows[1], [1.0; FEATURES]);

        let flat = FeatureMatrix {
            rows: vec![[5.0; FEATURES]; 4],
        };
        let stats = NormStats::compute([&flat]);
        assert_eq!(stats.std, [1.0; FEATURES]);
        assert_eq!(normalize_features(&flat, &stats).rows[0], [0.0; FEATURES]);

        // Applying twice is not the same as applying once.
        let s = NormStats {
            mean: [1.0; FEATURES],
            std: [2.0; FEATURES],
        };
        let once = normalize_features(&f, &s);
        let twice = normalize_features(&once, &s);
        assert_ne!(once, twice);
    }

    #[test]
    fn synth_contract() {
        let cfg = SynthConfig {
            count: 100,
            min_len: 20,
            max_len: 50,
            ..SynthConfig::default()
        };
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        assert!(a.iter().all(|t| (20..=50).contains(&t.len())));
        let bad = SynthConfig {
            bbox: [0.0, 0.0, 0.0, 10.0],
            ..cfg
        };
        assert!(synth_generate(&bad).is_err());
    }

    #[test]
    fn synth_path_length_matches_lognormal_sum() {
        let (mu, sigma) = (10f64.ln(), 0.5);
        let cfg = SynthConfig {
            count: 50,
            min_len: 20,
            max_len: 20,
            step_mu: mu,
            step_sigma: sigma,
            ..SynthConfig::default()
        };
        let steps = 19.0;
        let mean = (mu + sigma * sigma / 2.0).exp();
        let var = ((sigma * sigma).exp() - 1.0) * (2.0 * mu + sigma * sigma).exp();
        let (expected, sd) = (steps * mean, (steps * var).sqrt());
        for t in synth_generate(&cfg).unwrap() {
            let len = t.path_length();
            assert!((len - expected).abs() <= 5.0 * sd, "{len} vs {expected}±{sd}");
        }
    }

    #[test]
    fn masking() {
        let t = line(20);
        assert_eq!(mask_points(&t, 0.0, 1).unwrap(), t);
        let m = mask_points(&t, 0.4, 1).unwrap();
        assert_eq!(m.len(), 12);
        assert_eq!(m.points[0], t.points[0]);
        assert_eq!(m.points[11], t.points[19]);
        assert_eq!(mask_points(&t, 0.4, 1).unwrap(), m);
        assert!(mask_points(&t, 1.0, 1).is_err());
    }

    #[test]
    fn shifting() {
        let t = line(30);
        assert_eq!(shift_points(&t, 0.0, 3).unwrap(), t);
        let s = shift_points(&t, 100.0, 3).unwrap();
        for (a, b) in t.points.iter().zip(&s.points) {
            assert!(a.dist(*b) <= 100.0);
        }
        assert_ne!(s, shift_points(&t, 100.0, 4).unwrap());
    }

    fn arb_traj() -> impl Strategy<Value = Trajectory> {
        prop::collection::vec((-3i32..3, -3i32..3), 1..40).prop_map(|v| {
            traj(&v.into_iter().map(|(x, y)| (x as f64, y as f64)).collect::<Vec<_>>())
        })
    }

    proptest! {
        #[test]
        fn clean_is_idempotent(t in arb_traj()) {
            if let Cleaned::Accepted(once) = clean_trajectory(&t, 2, 30).unwrap() {
                prop_assert_eq!(clean_trajectory(&once, 2, 30).unwrap(), Cleaned::Accepted(once));
            }
        }

        #[test]
        fn feature_invariants(t in arb_traj(), dx in -1e4f64..1e4, dy in -1e4f64..1e4) {
            prop_assume!(t.len() >= 2);
            let f = augment_features(&t).unwrap();
            prop_assert_eq!(f.len(), t.len());
            for r in &f.rows {
                prop_assert!(r[2] >= 0.0 && r[3] >= 0.0);
                prop_assert!((0.0..=PI).contains(&r[6]));
            }
            let moved = Trajectory::new("m", t.points.iter().map(|p| Point::new(p.x + dx, p.y + dy)).collect());
            let g = augment_features(&moved).unwrap();
            for (a, b) in f.rows.iter().zip(&g.rows) {
                for c in 2..FEATURES {
                    prop_assert!((a[c] - b[c]).abs() < 1e-6, "col {} {} vs {}", c, a[c], b[c]);
                }
            }
        }

        #[test]
        fn projection_keeps_local_distance_ratios(
            lat in -60.0f64..60.0,
            lon in -170.0f64..170.0,
            pts in prop::collection::vec((-0.06f64..0.06, -0.06f64..0.06), 3),
        ) {
            // Reference: haversine distances on the sphere.
            let hav = |a: Point, b: Point| {
                let (p1, p2) = (a.y.to_radians(), b.y.to_radians());
                let dp = p2 - p1;
                let dl = (b.x - a.x).to_radians();
                let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
                2.0 * EARTH_RADIUS_M * h.sqrt().asin()
            };
            let ll: Vec<Point> = pts.iter().map(|&(a, b)| Point::new(lon + a * 0.9, lat + b * 0.9)).collect();
            let frame = LocalFrame::new(lat).unwrap();
            let xy: Vec<Point> = ll.iter().map(|&p| frame.project_point(p)).collect();
            let (s01, s02) = (hav(ll[0], ll[1]), hav(ll[0], ll[2]));
            prop_assume!(s01 > 100.0 && s02 > 100.0);
            let ratio_sphere = s01 / s02;
            let ratio_plane = xy[0].dist(xy[1]) / xy[0].dist(xy[2]);
            prop_assert!((ratio_plane / ratio_sphere - 1.0).abs() < 0.01);
        }
    }
}
