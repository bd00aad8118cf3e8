//! Absolute pose from 2D-3D correspondences: P3P, RANSAC, Levenberg–Marquardt.

use log::warn;
use nalgebra::{Matrix3, Matrix6, Rotation3, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::matches::MatchSet;

pub const DEFAULT_RANSAC_THRESHOLD_PX: f64 = 8.0;
pub const DEFAULT_RANSAC_ITERS: usize = 1000;
pub const DEFAULT_RANSAC_CONFIDENCE: f64 = 0.9999;
pub const LM_MAX_ITERS: usize = 100;

/// One 2D-3D correspondence in pixels and world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub pixel: Vector2<f64>,
    pub point: Vector3<f64>,
}

fn unit_ray(pixel: &Vector2<f64>, k: &CameraIntrinsics) -> Vector3<f64> {
    Vector3::new((pixel.x - k.cx) / k.fx, (pixel.y - k.cy) / k.fy, 1.0).normalize()
}

// Polynomials as coefficient lists, lowest degree first.
fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len().max(b.len())];
    for (i, x) in a.iter().enumerate() {
        out[i] += x;
    }
    for (i, y) in b.iter().enumerate() {
        out[i] += y;
    }
    out
}

fn poly_scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

fn poly_eval(a: &[f64], x: f64) -> f64 {
    a.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

fn poly_deriv(a: &[f64]) -> Vec<f64> {
    a.iter().enumerate().skip(1).map(|(i, c)| i as f64 * c).collect()
}

/// Real roots of a polynomial of degree ≤ 4 via companion-matrix eigenvalues,
/// polished with Newton steps.
fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let mut c: Vec<f64> = coeffs.iter().map(|x| x / scale).collect();
    while c.len() > 1 && c.last().is_some_and(|x| x.abs() < 1e-14) {
        c.pop();
    }
    let deg = c.len() - 1;
    let candidates: Vec<f64> = match deg {
        0 => Vec::new(),
        1 => vec![-c[0] / c[1]],
        _ => {
            let lead = c[deg];
            let mut comp = nalgebra::DMatrix::<f64>::zeros(deg, deg);
            for i in 1..deg {
                comp[(i, i - 1)] = 1.0;
            }
            for i in 0..deg {
                comp[(i, deg - 1)] = -c[i] / lead;
            }
            comp.complex_eigenvalues()
                .iter()
                .filter(|z| z.im.abs() <= 1e-4 * (1.0 + z.re.abs()))
                .map(|z| z.re)
                .collect()
        }
    };
    let d = poly_deriv(&c);
    candidates
        .into_iter()
        .map(|mut x| {
            for _ in 0..20 {
                let f = poly_eval(&c, x);
                let g = poly_eval(&d, x);
                if g == 0.0 {
                    break;
                }
                let step = f / g;
                x -= step;
                if step.abs() <= 1e-16 * (1.0 + x.abs()) {
                    break;
                }
            }
            x
        })
        .filter(|x| x.is_finite())
        .collect()
}

/// Rigid transform mapping three world points onto three camera-frame points,
/// built from the orthonormal frames of both triangles.
fn align_triangles(world: &[Vector3<f64>; 3], cam: &[Vector3<f64>; 3]) -> Option<Pose> {
    let frame = |p: &[Vector3<f64>; 3]| -> Option<Matrix3<f64>> {
        let e1 = (p[1] - p[0]).try_normalize(1e-15)?;
        let e3 = e1.cross(&(p[2] - p[0])).try_normalize(1e-15)?;
        let e2 = e3.cross(&e1);
        Some(Matrix3::from_columns(&[e1, e2, e3]))
    };
    let fw = frame(world)?;
    let fc = frame(cam)?;
    let rotation = fc * fw.transpose();
    Some(Pose {
        rotation,
        translation: cam[0] - rotation * world[0],
    })
}

/// All real solutions of the three-point resection problem.
pub fn p3p_solve(corr: &[Correspondence; 3], k: &CameraIntrinsics) -> Result<Vec<Pose>> {
    let [p1, p2, p3] = [corr[0].point, corr[1].point, corr[2].point];
    let scale = (p2 - p1).norm().max((p3 - p1).norm()).max(1e-300);
    if (p2 - p1).cross(&(p3 - p1)).norm() <= 1e-10 * scale * scale {
        return Err(Error::Degenerate("the three 3D points are collinear".into()));
    }
    let j: Vec<Vector3<f64>> = corr.iter().map(|c| unit_ray(&c.pixel, k)).collect();
    let a2 = (p2 - p3).norm_squared();
    let b2 = (p1 - p3).norm_squared();
    let c2 = (p1 - p2).norm_squared();
    let cos_a = j[1].dot(&j[2]);
    let cos_b = j[0].dot(&j[2]);
    let cos_g = j[0].dot(&j[1]);

    // distances s1, s2 = u·s1, s3 = v·s1 along the three rays
    let d = [1.0, -2.0 * cos_b, 1.0]; // 1 + v² − 2v·cosβ
    let kk = (a2 - c2) / b2;
    let num = poly_add(&[1.0, 0.0, -1.0], &poly_scale(&d, kk)); // 1 − v² + K·D
    let den = [2.0 * cos_g, -2.0 * cos_a]; // 2(cosγ − v·cosα)
    let quartic = poly_add(
        &poly_add(
            &poly_mul(&num, &num),
            &poly_scale(&poly_mul(&num, &den), -2.0 * cos_g),
        ),
        &poly_mul(&poly_add(&[1.0], &poly_scale(&d, -c2 / b2)), &poly_mul(&den, &den)),
    );

    // Newton polish of the ray distances on the three law-of-cosines equations.
    let polish = |mut sv: Vector3<f64>| -> Vector3<f64> {
        for _ in 0..15 {
            let [s1, s2, s3] = [sv.x, sv.y, sv.z];
            let f = Vector3::new(
                s2 * s2 + s3 * s3 - 2.0 * s2 * s3 * cos_a - a2,
                s1 * s1 + s3 * s3 - 2.0 * s1 * s3 * cos_b - b2,
                s1 * s1 + s2 * s2 - 2.0 * s1 * s2 * cos_g - c2,
            );
            let jac = Matrix3::new(
                0.0, 2.0 * (s2 - s3 * cos_a), 2.0 * (s3 - s2 * cos_a),
                2.0 * (s1 - s3 * cos_b), 0.0, 2.0 * (s3 - s1 * cos_b),
                2.0 * (s1 - s2 * cos_g), 2.0 * (s2 - s1 * cos_g), 0.0,
            );
            let Some(step) = jac.lu().solve(&f) else {
                break;
            };
            sv -= step;
            if step.amax() <= 1e-15 * sv.amax() {
                break;
            }
        }
        sv
    };

    let mut poses = Vec::new();
    for v in real_roots(&quartic) {
        let dv = poly_eval(&d, v);
        if v <= 0.0 || dv <= 0.0 {
            continue;
        }
        // u from the linear elimination, plus both roots of the c-equation,
        // which stay valid where the elimination degenerates
        let denv = poly_eval(&den, v);
        let mut us = Vec::new();
        if denv.abs() > 1e-12 {
            us.push(poly_eval(&num, v) / denv);
        }
        let q = 1.0 - c2 / b2 * dv;
        let disc = cos_g * cos_g - q;
        if disc >= -1e-9 {
            let r = disc.max(0.0).sqrt();
            us.extend([cos_g - r, cos_g + r]);
        }
        let s1 = (b2 / dv).sqrt();
        for u in us {
            if u <= 0.0 {
                continue;
            }
            let sv = polish(Vector3::new(s1, u * s1, v * s1));
            if sv.iter().any(|x| !(*x > 0.0)) {
                continue;
            }
            let cam = [j[0] * sv.x, j[1] * sv.y, j[2] * sv.z];
            let Some(pose) = align_triangles(&[p1, p2, p3], &cam) else {
                continue;
            };
            let fits = corr
                .iter()
                .all(|c| reprojection_error(&pose, c, k).is_some_and(|e| e < 1e-6));
            let dup = poses.iter().any(|q: &Pose| {
                (q.rotation - pose.rotation).abs().max() < 1e-7
                    && (q.translation - pose.translation).norm() < 1e-7 * (1.0 + pose.translation.norm())
            });
            if fits && !dup {
                poses.push(pose);
            }
        }
    }
    Ok(poses)
}

/// Pixel reprojection error, or `None` when the point is not in front of the camera.
pub fn reprojection_error(pose: &Pose, c: &Correspondence, k: &CameraIntrinsics) -> Option<f64> {
    let x = pose.transform(&c.point);
    if !(x.z > 0.0) {
        return None;
    }
    let p = k.to_pixel(&Vector2::new(x.x / x.z, x.y / x.z));
    Some((p - c.pixel).norm())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub threshold_px: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold_px: DEFAULT_RANSAC_THRESHOLD_PX,
            max_iterations: DEFAULT_RANSAC_ITERS,
            confidence: DEFAULT_RANSAC_CONFIDENCE,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_px > 0.0) || self.max_iterations == 0 || !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::Config(format!("invalid RANSAC settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    /// Inlier `(query, point)` pairs, in canonical order.
    pub inliers: Vec<(usize, usize)>,
    pub rms_px: f64,
    pub iterations: usize,
}

fn score(pose: &Pose, corr: &[Correspondence], k: &CameraIntrinsics, thr: f64) -> (Vec<usize>, f64) {
    let mut idx = Vec::new();
    let mut sq = 0.0;
    for (i, c) in corr.iter().enumerate() {
        if let Some(e) = reprojection_error(pose, c, k) {
            if e <= thr {
                idx.push(i);
                sq += e * e;
            }
        }
    }
    let rms = if idx.is_empty() { f64::INFINITY } else { (sq / idx.len() as f64).sqrt() };
    (idx, rms)
}

/// Seeded P3P-RANSAC over `matches` into `keypoints` (pixels) and `points` (world).
/// Returns `Ok(None)` when no hypothesis reaches 4 inliers.
pub fn ransac_pnp(
    keypoints: &[Vector2<f64>],
    points: &[Vector3<f64>],
    matches: &MatchSet,
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<Option<PoseEstimate>> {
    cfg.validate()?;
    if matches.len() < 4 {
        return Err(Error::InsufficientData {
            needed: 4,
            got: matches.len(),
        });
    }
    let mut pairs = matches.index_pairs();
    pairs.sort_unstable();
    pairs.dedup();
    for &(q, p) in &pairs {
        if q >= keypoints.len() || p >= points.len() {
            return Err(Error::Input(format!("match ({q}, {p}) out of range")));
        }
    }
    let corr: Vec<Correspondence> = pairs
        .iter()
        .map(|&(q, p)| Correspondence {
            pixel: keypoints[q],
            point: points[p],
        })
        .collect();
    let n = corr.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Pose, Vec<usize>, f64)> = None;
    let mut needed = cfg.max_iterations;
    let mut it = 0;
    while it < needed.min(cfg.max_iterations) {
        it += 1;
        let i0 = rng.random_range(0..n);
        let mut i1 = rng.random_range(0..n - 1);
        if i1 >= i0 {
            i1 += 1;
        }
        let (lo, hi) = (i0.min(i1), i0.max(i1));
        let mut i2 = rng.random_range(0..n - 2);
        if i2 >= lo {
            i2 += 1;
        }
        if i2 >= hi {
            i2 += 1;
        }
        let Ok(cands) = p3p_solve(&[corr[i0], corr[i1], corr[i2]], k) else {
            continue;
        };
        for pose in cands {
            let (idx, rms) = score(&pose, &corr, k, cfg.threshold_px);
            let better = match &best {
                None => true,
                Some((_, bi, br)) => idx.len() > bi.len() || (idx.len() == bi.len() && rms < *br),
            };
            if better {
                let w = idx.len() as f64 / n as f64;
                best = Some((pose, idx, rms));
                let miss = 1.0 - w.powi(3);
                needed = if miss <= 0.0 {
                    0
                } else {
                    ((1.0 - cfg.confidence).ln() / miss.ln()).ceil().max(0.0) as usize
                };
            }
        }
    }
    Ok(best.filter(|(_, idx, _)| idx.len() >= 4).map(|(pose, idx, rms)| PoseEstimate {
        pose,
        inliers: idx.iter().map(|&i| pairs[i]).collect(),
        rms_px: rms,
        iterations: it,
    }))
}

/// Total squared reprojection error, infinite if any point is behind the camera.
pub fn reprojection_cost(pose: &Pose, corr: &[Correspondence], k: &CameraIntrinsics) -> f64 {
    corr.iter()
        .map(|c| reprojection_error(pose, c, k).map_or(f64::INFINITY, |e| e * e))
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmResult {
    pub pose: Pose,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Damped Gauss–Newton on `(δω, δt)` with `R ← exp(δω)·R`, `t ← t + δt`.
pub fn refine_lm(initial: &Pose, corr: &[Correspondence], k: &CameraIntrinsics) -> Result<LmResult> {
    if corr.len() < 4 {
        return Err(Error::InsufficientData {
            needed: 4,
            got: corr.len(),
        });
    }
    let mut pose = *initial;
    let initial_cost = reprojection_cost(&pose, corr, k);
    let mut cost = initial_cost;
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    if cost == 0.0 {
        converged = true;
    }
    while !converged && iterations < LM_MAX_ITERS {
        iterations += 1;
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for c in corr {
            let rp = pose.rotation * c.point;
            let x = rp + pose.translation;
            let (iz, iz2) = (1.0 / x.z, 1.0 / (x.z * x.z));
            let r = Vector2::new(k.fx * x.x * iz + k.cx - c.pixel.x, k.fy * x.y * iz + k.cy - c.pixel.y);
            let dproj = nalgebra::Matrix2x3::new(
                k.fx * iz, 0.0, -k.fx * x.x * iz2,
                0.0, k.fy * iz, -k.fy * x.y * iz2,
            );
            // ∂x/∂δω = −[R·q]×, ∂x/∂δt = I
            let skew = Matrix3::new(0.0, -rp.z, rp.y, rp.z, 0.0, -rp.x, -rp.y, rp.x, 0.0);
            let jw = dproj * (-skew);
            let mut j = nalgebra::Matrix2x6::<f64>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&jw);
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&dproj);
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        if jtr.amax() <= 1e-14 * (1.0 + cost) {
            converged = true;
            break;
        }
        let mut accepted = false;
        while lambda < 1e12 {
            let mut a = jtj;
            for i in 0..6 {
                a[(i, i)] += lambda * (1.0 + jtj[(i, i)]);
            }
            let Some(delta) = a.cholesky().map(|ch| ch.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let rot = Rotation3::new(Vector3::new(delta[0], delta[1], delta[2]));
            let cand = Pose {
                rotation: rot.matrix() * pose.rotation,
                translation: pose.translation + Vector3::new(delta[3], delta[4], delta[5]),
            };
            let new_cost = reprojection_cost(&cand, corr, k);
            if new_cost <= cost {
                let small = cost - new_cost <= 1e-15 * cost.max(1e-300) || delta.amax() <= 1e-15;
                pose = cand;
                cost = new_cost;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if small {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            converged = true;
        }
    }
    if !converged {
        warn!("Levenberg-Marquardt stopped after {LM_MAX_ITERS} iterations without converging");
    }
    Ok(LmResult {
        pose,
        initial_cost,
        final_cost: cost,
        iterations,
        converged,
    })
}

/// Rotation error in degrees (angle of `R_est·R_gtᵀ`) and translation error.
pub fn pose_error(est: &Pose, gt: &Pose) -> (f64, f64) {
    let r = est.rotation * gt.rotation.transpose();
    let axis = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let angle = (0.5 * axis.norm()).atan2(0.5 * (r.trace() - 1.0));
    (angle.to_degrees(), (est.translation - gt.translation).norm())
}
