//! Localization metrics: reprojection AUC, pose-error quantiles, precision,
//! and the ground-truth-match upper bound.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bearing_from_point, CameraIntrinsics, GtMatchConfig, Point3D, Pose};
use crate::matches::MatchSet;
use crate::pose::{pose_error, ransac_pnp, refine_lm, Correspondence, PoseEstimate, RansacConfig};
use crate::scene::ScenePair;

pub const AUC_THRESHOLDS_PX: [f64; 3] = [1.0, 5.0, 10.0];
pub const REPORT_PERCENTILES: [f64; 3] = [25.0, 50.0, 75.0];

/// Per-match reprojection distances plus the number of matches skipped
/// because the point lies behind one of the two cameras.
#[derive(Clone, Debug, PartialEq)]
pub struct ReprojectionErrors {
    pub errors: Vec<f64>,
    pub skipped: usize,
}

impl ReprojectionErrors {
    /// Mean error, `+∞` when nothing could be measured.
    pub fn mean(&self) -> f64 {
        if self.errors.is_empty() {
            f64::INFINITY
        } else {
            self.errors.iter().sum::<f64>() / self.errors.len() as f64
        }
    }
}

/// Distance between the projections of each matched 3D point under `gt` and `est`.
pub fn reprojection_errors(
    m_final: &MatchSet,
    est: &Pose,
    gt: &Pose,
    k: &CameraIntrinsics,
    points: &[Point3D],
) -> Result<ReprojectionErrors> {
    let mut errors = Vec::with_capacity(m_final.len());
    let mut skipped = 0;
    for m in m_final {
        let q = points
            .get(m.point)
            .ok_or_else(|| Error::Input(format!("match point {} out of range ({})", m.point, points.len())))?;
        match (bearing_from_point(&q.position, gt), bearing_from_point(&q.position, est)) {
            (Ok(a), Ok(b)) => errors.push((k.to_pixel(&a.0) - k.to_pixel(&b.0)).norm()),
            _ => skipped += 1,
        }
    }
    Ok(ReprojectionErrors { errors, skipped })
}

/// Normalized area under the cumulative error curve on `[0, τ]`, in percent.
/// The curve starts at the origin and joins `(e_i, i/n)` linearly, so `+∞`
/// entries count in `n` but never contribute area.
pub fn reprojection_auc(errors: &[f64], thresholds: &[f64]) -> Vec<f64> {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    thresholds
        .iter()
        .map(|&t| {
            if sorted.is_empty() || !(t > 0.0) {
                return 0.0;
            }
            let (mut e0, mut r0, mut area) = (0.0, 0.0, 0.0);
            for (i, &e) in sorted.iter().enumerate() {
                if e >= t {
                    break;
                }
                let r = (i + 1) as f64 / n;
                area += 0.5 * (r0 + r) * (e - e0);
                (e0, r0) = (e, r);
            }
            area += r0 * (t - e0);
            100.0 * area / t
        })
        .collect()
}

/// Linear interpolation between order statistics at `percentiles` (0–100).
pub fn quantiles(values: &[f64], percentiles: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Input("quantiles of an empty list".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Input("quantiles of a list containing NaN".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentiles
        .iter()
        .map(|&p| {
            if !(0.0..=100.0).contains(&p) {
                return Err(Error::Input(format!("percentile {p} outside [0, 100]")));
            }
            let pos = p / 100.0 * (sorted.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            let (a, b) = (sorted[lo], sorted[hi]);
            let frac = pos - lo as f64;
            Ok(if frac == 0.0 || a == b { a } else { a + frac * (b - a) })
        })
        .collect()
}

/// `100·|inliers ∩ m_final| / |m_final|`, 0 for an empty match set.
pub fn precision(m_final: &MatchSet, inliers: &[(usize, usize)]) -> f64 {
    if m_final.is_empty() {
        return 0.0;
    }
    let set: HashSet<(usize, usize)> = inliers.iter().copied().collect();
    let hits = m_final.pair_set().intersection(&set).count();
    100.0 * hits as f64 / m_final.len() as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ransac: RansacConfig,
    pub gt: GtMatchConfig,
}

/// RANSAC followed by refinement on the inliers. `None` when fewer than four
/// matches are given or no hypothesis gathers four inliers.
pub fn localize(pair: &ScenePair, matches: &MatchSet, cfg: &RansacConfig) -> Result<Option<PoseEstimate>> {
    if matches.len() < 4 {
        return Ok(None);
    }
    let (pixels, positions) = (pair.pixels(), pair.positions());
    let Some(mut est) = ransac_pnp(&pixels, &positions, matches, &pair.intrinsics, cfg)? else {
        return Ok(None);
    };
    let corr: Vec<Correspondence> = est
        .inliers
        .iter()
        .map(|&(q, p)| Correspondence {
            pixel: pixels[q],
            point: positions[p],
        })
        .collect();
    let lm = refine_lm(&est.pose, &corr, &pair.intrinsics)?;
    est.pose = lm.pose;
    est.rms_px = (lm.final_cost / corr.len() as f64).sqrt();
    Ok(Some(est))
}

/// One localization attempt. Failures carry `+∞` errors and zero precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub scene: String,
    pub success: bool,
    #[serde(with = "inf_as_null")]
    pub reprojection_px: f64,
    #[serde(with = "inf_as_null")]
    pub rotation_deg: f64,
    #[serde(with = "inf_as_null")]
    pub translation: f64,
    pub precision: f64,
    pub num_matches: usize,
    pub num_inliers: usize,
    pub skipped_points: usize,
}

impl QueryResult {
    pub fn failure(scene: &str, num_matches: usize) -> Self {
        Self {
            scene: scene.to_string(),
            success: false,
            reprojection_px: f64::INFINITY,
            rotation_deg: f64::INFINITY,
            translation: f64::INFINITY,
            precision: 0.0,
            num_matches,
            num_inliers: 0,
            skipped_points: 0,
        }
    }
}

/// Localizes from `m_final` and scores the result against the query's true pose.
/// The per-query reprojection error is the mean over `m_final`.
pub fn evaluate_query(scene: &str, pair: &ScenePair, m_final: &MatchSet, cfg: &RansacConfig) -> Result<QueryResult> {
    Ok(localize_and_score(scene, pair, m_final, cfg)?.0)
}

/// [`evaluate_query`] that also returns the refined pose estimate.
pub fn localize_and_score(
    scene: &str,
    pair: &ScenePair,
    m_final: &MatchSet,
    cfg: &RansacConfig,
) -> Result<(QueryResult, Option<PoseEstimate>)> {
    let est = localize(pair, m_final, cfg)?;
    let result = match &est {
        None => QueryResult::failure(scene, m_final.len()),
        Some(est) => {
            let errs = reprojection_errors(m_final, &est.pose, &pair.query_pose, &pair.intrinsics, &pair.points)?;
            let (rot, trans) = pose_error(&est.pose, &pair.query_pose);
            QueryResult {
                scene: scene.to_string(),
                success: true,
                reprojection_px: errs.mean(),
                rotation_deg: rot,
                translation: trans,
                precision: precision(m_final, &est.inliers),
                num_matches: m_final.len(),
                num_inliers: est.inliers.len(),
                skipped_points: errs.skipped,
            }
        }
    };
    Ok((result, est))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// AUC in percent at 1, 5 and 10 px.
    pub auc: [f64; 3],
    #[serde(with = "inf_as_null_array")]
    pub rotation_quantiles_deg: [f64; 3],
    #[serde(with = "inf_as_null_array")]
    pub translation_quantiles: [f64; 3],
    /// Mean per-query precision in percent.
    pub precision: f64,
    pub queries: Vec<QueryResult>,
}

fn triad(v: Vec<f64>) -> [f64; 3] {
    [v[0], v[1], v[2]]
}

impl EvalReport {
    /// Aggregates per-query results; queries are ordered by scene id.
    pub fn from_queries(mut queries: Vec<QueryResult>) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::Input("report needs at least one query".into()));
        }
        queries.sort_by(|a, b| a.scene.cmp(&b.scene));
        let reproj: Vec<f64> = queries.iter().map(|q| q.reprojection_px).collect();
        let rot: Vec<f64> = queries.iter().map(|q| q.rotation_deg).collect();
        let trans: Vec<f64> = queries.iter().map(|q| q.translation).collect();
        Ok(Self {
            auc: triad(reprojection_auc(&reproj, &AUC_THRESHOLDS_PX)),
            rotation_quantiles_deg: triad(quantiles(&rot, &REPORT_PERCENTILES)?),
            translation_quantiles: triad(quantiles(&trans, &REPORT_PERCENTILES)?),
            precision: queries.iter().map(|q| q.precision).sum::<f64>() / queries.len() as f64,
            queries,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn csv_header() -> &'static str {
        "method,auc_1px,auc_5px,auc_10px,rot_q25,rot_q50,rot_q75,trans_q25,trans_q50,trans_q75,precision"
    }

    /// One summary row in the AUC / rotation / translation / precision layout.
    pub fn csv_row(&self, method: &str) -> String {
        let mut s = method.to_string();
        for v in self
            .auc
            .iter()
            .chain(&self.rotation_quantiles_deg)
            .chain(&self.translation_quantiles)
            .chain(std::iter::once(&self.precision))
        {
            let _ = write!(s, ",{v}");
        }
        s
    }

    pub fn to_csv(&self, method: &str) -> String {
        format!("{}\n{}\n", Self::csv_header(), self.csv_row(method))
    }

    pub fn queries_csv(&self) -> String {
        let mut s = String::from(
            "scene,success,reprojection_px,rotation_deg,translation,precision,num_matches,num_inliers,skipped_points\n",
        );
        for q in &self.queries {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                q.scene,
                q.success,
                q.reprojection_px,
                q.rotation_deg,
                q.translation,
                q.precision,
                q.num_matches,
                q.num_inliers,
                q.skipped_points
            );
        }
        s
    }
}

/// Runs the pose and metric stack on the ground-truth matches of `pair`.
pub fn oracle_query(scene: &str, pair: &ScenePair, cfg: &EvalConfig) -> Result<QueryResult> {
    let gt = pair.ground_truth(&cfg.gt)?;
    evaluate_query(scene, pair, &gt, &cfg.ransac)
}

pub fn oracle_report(scene: &str, pair: &ScenePair, cfg: &EvalConfig) -> Result<EvalReport> {
    EvalReport::from_queries(vec![oracle_query(scene, pair, cfg)?])
}

/// Non-finite values are written as JSON `null` and read back as `+∞`.
mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

mod inf_as_null_array {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64; 3], s: S) -> Result<S::Ok, S::Error> {
        v.map(|x| x.is_finite().then_some(x)).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; 3], D::Error> {
        Ok(<[Option<f64>; 3]>::deserialize(d)?.map(|x| x.unwrap_or(f64::INFINITY)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, Keypoint2D};
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Array-based construction: prepend (0, 0), cut at the first error ≥ τ,
    /// close at τ, integrate with the trapezoid rule.
    fn auc_oracle(errors: &[f64], t: f64) -> f64 {
        let mut e = errors.to_vec();
        e.sort_by(f64::total_cmp);
        let n = e.len() as f64;
        let mut xs = vec![0.0];
        xs.extend(e.iter().copied());
        let mut ys = vec![0.0];
        ys.extend((1..=e.len()).map(|i| i as f64 / n));
        let last = xs.iter().position(|&x| x >= t).unwrap_or(xs.len());
        let last = last.max(1);
        let mut r: Vec<f64> = ys[..last].to_vec();
        r.push(ys[last - 1]);
        let mut x: Vec<f64> = xs[..last].to_vec();
        x.push(t);
        let area: f64 = (1..x.len()).map(|i| 0.5 * (r[i] + r[i - 1]) * (x[i] - x[i - 1])).sum();
        100.0 * area / t
    }

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap()
    }

    fn scene(rng: &mut ChaCha8Rng, n: usize) -> ScenePair {
        let pose = Pose::from_axis_angle(&Vector3::new(0.05, -0.1, 0.02), Vector3::new(0.2, -0.1, 0.5));
        let mut points = Vec::new();
        let mut keypoints = Vec::new();
        while points.len() < n {
            let c = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), rng.random_range(4.0..8.0));
            let q = pose.rotation.transpose() * (c - pose.translation);
            let px = project(&q, &pose, &k()).unwrap();
            points.push(Point3D { position: q, color: [0.5; 3] });
            keypoints.push(Keypoint2D { pixel: px, color: [0.5; 3] });
        }
        ScenePair {
            intrinsics: k(),
            query_pose: pose,
            reference_pose: pose,
            keypoints,
            points,
            gt_matches: None,
        }
    }

    #[test]
    fn auc_endpoints() {
        assert_eq!(reprojection_auc(&[0.0; 5], &AUC_THRESHOLDS_PX), vec![100.0; 3]);
        assert_eq!(reprojection_auc(&[10.5, 20.0, f64::INFINITY], &AUC_THRESHOLDS_PX), vec![0.0; 3]);
        assert_eq!(reprojection_auc(&[], &AUC_THRESHOLDS_PX), vec![0.0; 3]);
    }

    #[test]
    fn auc_uniform_errors_is_half() {
        let errs: Vec<f64> = (0..=1000).map(|i| i as f64 * 0.01).collect();
        let auc = reprojection_auc(&errs, &[10.0])[0];
        assert!((auc - 50.0).abs() < 0.1, "{auc}");
        assert!((auc - auc_oracle(&errs, 10.0)).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let errs: Vec<f64> = (0..20000).map(|_| rng.random_range(0.0..10.0)).collect();
        let auc = reprojection_auc(&errs, &[10.0])[0];
        assert!((auc - 50.0).abs() < 1.0, "{auc}");
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(quantiles(&[4.0, 1.0, 3.0, 2.0], &[50.0]).unwrap(), vec![2.5]);
        assert_eq!(quantiles(&[7.0; 9], &REPORT_PERCENTILES).unwrap(), vec![7.0; 3]);
        assert!(matches!(quantiles(&[], &[50.0]), Err(Error::Input(_))));
        assert_eq!(quantiles(&[1.0, f64::INFINITY], &[0.0, 50.0, 100.0]).unwrap()[1], f64::INFINITY);
        assert_eq!(quantiles(&[f64::INFINITY; 3], &[60.0]).unwrap(), vec![f64::INFINITY]);
    }

    #[test]
    fn quantiles_match_sort_and_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v: Vec<f64> = (0..101).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        // with 101 values, percentile p sits exactly on order statistic p
        let q = quantiles(&v, &REPORT_PERCENTILES).unwrap();
        assert_eq!(q, vec![s[25], s[50], s[75]]);
        let q = quantiles(&v, &[12.5]).unwrap()[0];
        assert!((q - 0.5 * (s[12] + s[13])).abs() < 1e-12);
    }

    #[test]
    fn precision_examples() {
        let m = MatchSet::from_pairs((0..10).map(|i| (i, i)));
        let inl: Vec<(usize, usize)> = (0..7).map(|i| (i, i)).collect();
        assert_eq!(precision(&m, &inl), 70.0);
        assert_eq!(precision(&m, &m.index_pairs()), 100.0);
        assert_eq!(precision(&MatchSet::default(), &[]), 0.0);
        let mut rev = m.clone();
        rev.pairs.reverse();
        assert_eq!(precision(&rev, &inl), 70.0);
    }

    #[test]
    fn reprojection_error_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pair = scene(&mut rng, 12);
        let gt = MatchSet::from_pairs((0..12).map(|i| (i, i)));
        let e = reprojection_errors(&gt, &pair.query_pose, &pair.query_pose, &k(), &pair.points).unwrap();
        assert!(e.errors.iter().all(|&x| x == 0.0) && e.skipped == 0);
        let empty = reprojection_errors(&MatchSet::default(), &pair.query_pose, &pair.query_pose, &k(), &pair.points);
        assert!(empty.unwrap().errors.is_empty());

        // camera-frame lateral shift δ: error f·δ/z exactly
        let delta = 1e-3;
        let mut shifted = pair.query_pose;
        shifted.translation.x += delta;
        let e = reprojection_errors(&gt, &shifted, &pair.query_pose, &k(), &pair.points).unwrap();
        for (m, err) in gt.iter().zip(&e.errors) {
            let z = pair.query_pose.transform(&pair.points[m.point].position).z;
            assert!((err - 500.0 * delta / z).abs() < 1e-9);
        }
    }

    #[test]
    fn oracle_on_exact_scene_is_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pair = scene(&mut rng, 20);
        let r = oracle_report("s0", &pair, &EvalConfig::default()).unwrap();
        assert!(r.auc.iter().all(|&a| a > 99.9999), "{:?}", r.auc);
        assert!(r.rotation_quantiles_deg[2] < 1e-6 && r.translation_quantiles[2] < 1e-6);
        assert_eq!(r.precision, 100.0);
    }

    #[test]
    fn oracle_with_pixel_noise_drops_below_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pair = scene(&mut rng, 30);
        pair.gt_matches = Some(MatchSet::from_pairs((0..30).map(|i| (i, i))));
        for kp in &mut pair.keypoints {
            kp.pixel.x += rng.random_range(-1.7..1.7);
            kp.pixel.y += rng.random_range(-1.7..1.7);
        }
        let r = oracle_report("s0", &pair, &EvalConfig::default()).unwrap();
        assert!(r.auc[0] < 100.0 && r.auc[0] > 0.0, "{:?}", r.auc);
    }

    #[test]
    fn zero_matches_give_failure_entry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pair = scene(&mut rng, 6);
        pair.gt_matches = Some(MatchSet::default());
        let r = oracle_report("s0", &pair, &EvalConfig::default()).unwrap();
        assert!(!r.queries[0].success);
        assert_eq!(r.queries[0].reprojection_px, f64::INFINITY);
        assert_eq!(r.auc, [0.0; 3]);
        let json = r.to_json().unwrap();
        assert!(json.contains("null"));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn csv_layout() {
        let q = QueryResult::failure("a", 0);
        let r = EvalReport::from_queries(vec![q]).unwrap();
        let csv = r.to_csv("oracle");
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
        assert!(lines[1].starts_with("oracle,0,0,0,inf"));
    }

    proptest! {
        #[test]
        fn auc_properties(errs in proptest::collection::vec(0.0f64..15.0, 1..40), inf in 0usize..3) {
            let mut e = errs.clone();
            e.extend(std::iter::repeat(f64::INFINITY).take(inf));
            let a = reprojection_auc(&e, &AUC_THRESHOLDS_PX);
            prop_assert!(a.iter().all(|v| (0.0..=100.0 + 1e-9).contains(v)));
            prop_assert!(a[0] <= a[1] + 1e-9 && a[1] <= a[2] + 1e-9);
            for (t, v) in AUC_THRESHOLDS_PX.iter().zip(&a) {
                prop_assert!((v - auc_oracle(&e, *t)).abs() < 1e-9);
            }
            // dropping the worst entry never lowers any value
            let mut s = e.clone();
            s.sort_by(f64::total_cmp);
            s.pop();
            if !s.is_empty() {
                let b = reprojection_auc(&s, &AUC_THRESHOLDS_PX);
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!(y + 1e-9 >= *x);
                }
            }
        }

        #[test]
        fn quantiles_monotone(v in proptest::collection::vec(-1e3f64..1e3, 1..60)) {
            let q = quantiles(&v, &[0.0, 25.0, 50.0, 75.0, 100.0]).unwrap();
            prop_assert!(q.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
