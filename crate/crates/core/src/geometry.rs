//! Pinhole camera model, bearing vectors and reprojection-based ground truth.

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matches::{Match, MatchSet};

pub type Color = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn identity() -> Self {
        Self {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Validation {
                path: "intrinsics".into(),
                reason: format!("focal lengths must be positive and finite, got {self:?}"),
            });
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Maps normalized camera-plane coordinates to pixels.
    pub fn to_pixel(&self, b: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * b.x + self.cx, self.fy * b.y + self.cy)
    }
}

/// World-to-camera transform: `x_cam = R·q + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let p = Self {
            rotation,
            translation,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_axis_angle(axis_angle: &Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: *Rotation3::new(*axis_angle).matrix(),
            translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let orth = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        let det = self.rotation.determinant();
        if !(orth <= 1e-9 && (det - 1.0).abs() <= 1e-9) || !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation {
                path: "pose".into(),
                reason: format!("rotation is not orthonormal (|RᵀR−I|={orth:e}, det={det})"),
            });
        }
        Ok(())
    }

    pub fn transform(&self, q: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * q + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint2D {
    pub pixel: Vector2<f64>,
    pub color: Color,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point3D {
    pub position: Vector3<f64>,
    pub color: Color,
}

/// Normalized camera-plane coordinates; the implicit third component is 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BearingVector(pub Vector2<f64>);

impl BearingVector {
    pub fn x(&self) -> f64 {
        self.0.x
    }

    pub fn y(&self) -> f64 {
        self.0.y
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdSpace {
    Pixel,
    Normalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GtMatchConfig {
    pub epsilon: f64,
    pub space: ThresholdSpace,
}

impl Default for GtMatchConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.001,
            space: ThresholdSpace::Normalized,
        }
    }
}

impl GtMatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "ground-truth threshold must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

pub fn color_in_range(c: &Color) -> bool {
    c.iter().all(|v| (0.0..=1.0).contains(v))
}

fn behind(q: &Vector3<f64>, depth: f64) -> Error {
    Error::BehindCamera {
        point: format!("({}, {}, {})", q.x, q.y, q.z),
        depth,
    }
}

/// Perspective projection of a world point to pixels.
pub fn project(q: &Vector3<f64>, pose: &Pose, k: &CameraIntrinsics) -> Result<Vector2<f64>> {
    let b = bearing_from_point(q, pose)?;
    Ok(k.to_pixel(&b.0))
}

/// `[b, 1]ᵀ = K⁻¹ [p, 1]ᵀ`.
pub fn bearing_from_pixel(p: &Vector2<f64>, k: &CameraIntrinsics) -> BearingVector {
    BearingVector(Vector2::new((p.x - k.cx) / k.fx, (p.y - k.cy) / k.fy))
}

/// Camera-frame point divided by its depth.
pub fn bearing_from_point(q: &Vector3<f64>, pose: &Pose) -> Result<BearingVector> {
    let x = pose.transform(q);
    if !(x.z > 0.0) {
        return Err(behind(q, x.z));
    }
    Ok(BearingVector(Vector2::new(x.x / x.z, x.y / x.z)))
}

/// A ground-truth candidate with its residual in the configured space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtCandidate {
    pub query: usize,
    pub point: usize,
    pub residual: f64,
}

/// All `(n, m)` pairs whose reprojection residual is within `cfg.epsilon`,
/// in row-major `(n, m)` order.
pub fn ground_truth_candidates(
    keypoints: &[Keypoint2D],
    points: &[Point3D],
    pose: &Pose,
    k: &CameraIntrinsics,
    cfg: &GtMatchConfig,
) -> Vec<GtCandidate> {
    // Reproject once; points behind the camera drop out.
    let projected: Vec<Option<Vector2<f64>>> = points
        .iter()
        .map(|q| {
            bearing_from_point(&q.position, pose).ok().map(|b| match cfg.space {
                ThresholdSpace::Normalized => b.0,
                ThresholdSpace::Pixel => k.to_pixel(&b.0),
            })
        })
        .collect();
    let observed: Vec<Vector2<f64>> = keypoints
        .iter()
        .map(|p| match cfg.space {
            ThresholdSpace::Normalized => bearing_from_pixel(&p.pixel, k).0,
            ThresholdSpace::Pixel => p.pixel,
        })
        .collect();

    let mut out = Vec::new();
    for (n, o) in observed.iter().enumerate() {
        for (m, proj) in projected.iter().enumerate() {
            if let Some(pr) = proj {
                let r = (pr - o).norm();
                if r <= cfg.epsilon {
                    out.push(GtCandidate {
                        query: n,
                        point: m,
                        residual: r,
                    });
                }
            }
        }
    }
    out
}

pub fn ground_truth_matches(
    keypoints: &[Keypoint2D],
    points: &[Point3D],
    pose: &Pose,
    k: &CameraIntrinsics,
    cfg: &GtMatchConfig,
) -> Result<MatchSet> {
    if keypoints.is_empty() || points.is_empty() {
        return Err(Error::Input("ground-truth matching needs non-empty inputs".into()));
    }
    cfg.validate()?;
    Ok(MatchSet::new(
        ground_truth_candidates(keypoints, points, pose, k, cfg)
            .into_iter()
            .map(|c| Match::new(c.query, c.point, 1.0))
            .collect(),
    ))
}

/// Reduces candidates to a one-to-one set, greedily taking the smallest
/// residual first (ties by lower query, then lower point index).
pub fn one_to_one_by_residual(mut cands: Vec<GtCandidate>) -> MatchSet {
    cands.sort_by(|a, b| {
        a.residual
            .total_cmp(&b.residual)
            .then(a.query.cmp(&b.query))
            .then(a.point.cmp(&b.point))
    });
    let mut used_q = std::collections::HashSet::new();
    let mut used_p = std::collections::HashSet::new();
    let mut pairs = Vec::new();
    for c in cands {
        if used_q.contains(&c.query) || used_p.contains(&c.point) {
            continue;
        }
        used_q.insert(c.query);
        used_p.insert(c.point);
        pairs.push(Match::new(c.query, c.point, 1.0));
    }
    MatchSet::new(pairs).sorted()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let aa = Vector3::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        );
        let t = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(4.0..6.0),
        );
        Pose::from_axis_angle(&aa, t)
    }

    fn kp(x: f64, y: f64) -> Keypoint2D {
        Keypoint2D {
            pixel: Vector2::new(x, y),
            color: [0.5; 3],
        }
    }

    fn pt(p: Vector3<f64>) -> Point3D {
        Point3D {
            position: p,
            color: [0.5; 3],
        }
    }

    #[test]
    fn projection_examples() {
        let k = CameraIntrinsics::identity();
        let id = Pose::identity();
        assert_eq!(project(&Vector3::new(0.0, 0.0, 1.0), &id, &k).unwrap(), Vector2::new(0.0, 0.0));
        assert_eq!(project(&Vector3::new(2.0, 4.0, 2.0), &id, &k).unwrap(), Vector2::new(1.0, 2.0));
        assert!(matches!(
            project(&Vector3::new(0.0, 0.0, -1.0), &id, &k),
            Err(Error::BehindCamera { .. })
        ));
    }

    #[test]
    fn bearing_examples() {
        let b = bearing_from_pixel(&Vector2::new(0.3, 0.4), &CameraIntrinsics::identity());
        assert_eq!(b.0, Vector2::new(0.3, 0.4));
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
        assert_eq!(bearing_from_pixel(&Vector2::new(320.0, 240.0), &k).0, Vector2::zeros());
        // K⁻¹ by explicit 3×3 inversion
        let inv = k.matrix().try_inverse().unwrap();
        let h = inv * Vector3::new(600.0, 400.0, 1.0);
        let b = bearing_from_pixel(&Vector2::new(600.0, 400.0), &k);
        assert!((b.0 - Vector2::new(h.x / h.z, h.y / h.z)).norm() < 1e-15);
        assert!((b.0 - Vector2::new(0.56, 0.32)).norm() < 1e-15);

        let id = Pose::identity();
        assert_eq!(bearing_from_point(&Vector3::new(2.0, 4.0, 2.0), &id).unwrap().0, Vector2::new(1.0, 2.0));
        assert_eq!(bearing_from_point(&Vector3::new(0.0, 0.0, 7.0), &id).unwrap().0, Vector2::zeros());
    }

    #[test]
    fn ground_truth_threshold_cases() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
        let pose = Pose::identity();
        let pts: Vec<Point3D> = (0..5)
            .map(|i| pt(Vector3::new(i as f64 * 0.3 - 0.6, 0.1 * i as f64 - 0.2, 4.0)))
            .collect();
        let proj: Vec<Vector2<f64>> = pts.iter().map(|q| project(&q.position, &pose, &k).unwrap()).collect();
        let cfg = GtMatchConfig {
            epsilon: 1.0,
            space: ThresholdSpace::Pixel,
        };

        let exact: Vec<_> = proj.iter().map(|p| kp(p.x, p.y)).collect();
        let gt = ground_truth_matches(&exact, &pts, &pose, &k, &cfg).unwrap();
        assert_eq!(gt.index_pairs(), (0..5).map(|i| (i, i)).collect::<Vec<_>>());

        let shifted: Vec<_> = proj.iter().map(|p| kp(p.x + 2.0, p.y)).collect();
        assert!(ground_truth_matches(&shifted, &pts, &pose, &k, &cfg).unwrap().is_empty());

        // mixed displacements, checked against an exhaustive scan
        let offsets = [0.5, 3.0, 0.5, 3.0, 0.5];
        let mixed: Vec<_> = proj
            .iter()
            .zip(offsets)
            .map(|(p, o)| kp(p.x, p.y + o))
            .collect();
        let mut oracle = Vec::new();
        for (n, p) in mixed.iter().enumerate() {
            for (m, q) in proj.iter().enumerate() {
                let d = ((p.pixel.x - q.x).powi(2) + (p.pixel.y - q.y).powi(2)).sqrt();
                if d <= 1.0 {
                    oracle.push((n, m));
                }
            }
        }
        let gt = ground_truth_matches(&mixed, &pts, &pose, &k, &cfg).unwrap();
        assert_eq!(gt.index_pairs(), oracle);
        assert_eq!(oracle, vec![(0, 0), (2, 2), (4, 4)]);
    }

    #[test]
    fn behind_camera_never_matches() {
        let k = CameraIntrinsics::identity();
        let pts = vec![pt(Vector3::new(0.0, 0.0, -1.0))];
        let kps = vec![kp(0.0, 0.0)];
        let cfg = GtMatchConfig {
            epsilon: 10.0,
            space: ThresholdSpace::Pixel,
        };
        assert!(ground_truth_matches(&kps, &pts, &Pose::identity(), &k, &cfg).unwrap().is_empty());
    }

    #[test]
    fn duplicate_reduction_prefers_nearest() {
        let cands = vec![
            GtCandidate { query: 0, point: 0, residual: 0.5 },
            GtCandidate { query: 0, point: 1, residual: 0.1 },
            GtCandidate { query: 1, point: 1, residual: 0.2 },
        ];
        let m = one_to_one_by_residual(cands);
        assert_eq!(m.index_pairs(), vec![(0, 1)]);
        assert!(m.is_one_to_one());
    }

    proptest! {
        #[test]
        fn round_trip_through_pixels(seed in 0u64..10_000, x in -1.0..1.0f64, y in -1.0..1.0f64, z in 0.5..3.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pose = random_pose(&mut rng);
            let k = CameraIntrinsics::new(
                rng.random_range(200.0..800.0), rng.random_range(200.0..800.0),
                rng.random_range(100.0..400.0), rng.random_range(100.0..400.0)).unwrap();
            let q = Vector3::new(x, y, z);
            prop_assume!(pose.transform(&q).z > 0.1);
            let p = project(&q, &pose, &k).unwrap();
            let a = bearing_from_pixel(&p, &k);
            let b = bearing_from_point(&q, &pose).unwrap();
            prop_assert!((a.0 - b.0).norm() < 1e-12);
        }

        #[test]
        fn projection_is_scale_invariant(x in -2.0..2.0f64, y in -2.0..2.0f64, z in 0.1..5.0f64, s in 0.01..100.0f64) {
            let k = CameraIntrinsics::new(500.0, 480.0, 320.0, 240.0).unwrap();
            let a = project(&Vector3::new(x, y, z), &Pose::identity(), &k).unwrap();
            let b = project(&Vector3::new(s * x, s * y, s * z), &Pose::identity(), &k).unwrap();
            prop_assert!((a - b).norm() < 1e-9 * (1.0 + a.norm()));
        }

        #[test]
        fn ground_truth_permutation_consistent(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
            let pose = random_pose(&mut rng);
            let pts: Vec<Point3D> = (0..12).map(|_| pt(Vector3::new(
                rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))).collect();
            let kps: Vec<Keypoint2D> = pts.iter().map(|q| {
                let p = project(&q.position, &pose, &k).unwrap();
                kp(p.x + rng.random_range(-1.5..1.5), p.y)
            }).collect();
            let cfg = GtMatchConfig { epsilon: 1.0, space: ThresholdSpace::Pixel };
            let base = ground_truth_matches(&kps, &pts, &pose, &k, &cfg).unwrap().pair_set();
            let perm_k: Vec<usize> = (0..12).rev().collect();
            let perm_p: Vec<usize> = (0..12).map(|i| (i * 5) % 12).collect();
            let kps2: Vec<_> = perm_k.iter().map(|&i| kps[i]).collect();
            let pts2: Vec<_> = perm_p.iter().map(|&i| pts[i]).collect();
            let permuted = ground_truth_matches(&kps2, &pts2, &pose, &k, &cfg).unwrap();
            let mapped: std::collections::HashSet<_> = permuted.iter().map(|m| (perm_k[m.query], perm_p[m.point])).collect();
            prop_assert_eq!(base, mapped);
        }
    }
}
