//! Supervision labels, losses, the Adam optimizer, synthetic scene pairs and
//! the training loop.

use std::collections::HashSet;
use std::fmt::Write as _;

use log::info;
use nalgebra::{Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{bearing_from_pixel, bearing_from_point, project, CameraIntrinsics, Color, GtMatchConfig, Keypoint2D, Point3D, Pose};
use crate::matches::{Match, MatchSet};
use crate::model::{ForwardPlan, Matcher};
use crate::nn::Bound;
use crate::scene::ScenePair;

/// Probability floor and ceiling inside the rejection loss.
pub const PROB_CLAMP: f64 = 1e-7;
pub const DEFAULT_LR: f64 = 1e-3;
pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingLabels {
    pub gt: MatchSet,
    /// 2D indices without a ground-truth partner.
    pub unmatched_2d: Vec<usize>,
    /// 3D indices without a ground-truth partner.
    pub unmatched_3d: Vec<usize>,
    /// 1 for each `m_init` pair in the ground truth, else 0.
    pub y: Vec<f64>,
    pub w: Vec<f64>,
}

/// Inverse class frequency, scaled so the weights average 1. A batch with a
/// single class gets unit weights.
pub fn class_weights(y: &[f64]) -> Vec<f64> {
    let n = y.len() as f64;
    let pos = y.iter().filter(|&&v| v > 0.5).count() as f64;
    let neg = n - pos;
    if pos == 0.0 || neg == 0.0 {
        return vec![1.0; y.len()];
    }
    y.iter()
        .map(|&v| if v > 0.5 { n / (2.0 * pos) } else { n / (2.0 * neg) })
        .collect()
}

pub fn labels_from_gt(m_init: &MatchSet, gt: MatchSet, n: usize, m: usize) -> Result<TrainingLabels> {
    for g in &gt {
        if g.query >= n || g.point >= m {
            return Err(Error::Input(format!("ground-truth pair ({}, {}) out of range", g.query, g.point)));
        }
    }
    if !gt.is_one_to_one() {
        return Err(Error::Input("ground-truth matches must be one-to-one".into()));
    }
    let q: HashSet<usize> = gt.iter().map(|g| g.query).collect();
    let p: HashSet<usize> = gt.iter().map(|g| g.point).collect();
    let pairs = gt.pair_set();
    let y: Vec<f64> = m_init
        .iter()
        .map(|x| if pairs.contains(&x.pair()) { 1.0 } else { 0.0 })
        .collect();
    Ok(TrainingLabels {
        unmatched_2d: (0..n).filter(|i| !q.contains(i)).collect(),
        unmatched_3d: (0..m).filter(|j| !p.contains(j)).collect(),
        w: class_weights(&y),
        y,
        gt,
    })
}

/// Labels from the pair's ground truth (stored, or recomputed one-to-one from geometry).
pub fn build_labels(m_init: &MatchSet, pair: &ScenePair, cfg: &GtMatchConfig) -> Result<TrainingLabels> {
    let gt = pair.ground_truth(cfg)?;
    labels_from_gt(m_init, gt, pair.keypoints.len(), pair.points.len())
}

/// Mean negative log-score over ground-truth pairs and dustbin entries of
/// unmatched points, read directly from `log S̄`.
pub fn matching_loss(tape: &mut Tape, log_plan: Var, labels: &TrainingLabels) -> Result<Var> {
    let (r, c) = tape.value(log_plan).dims();
    let (n, m) = (r - 1, c - 1);
    let mut idx: Vec<(usize, usize)> = labels.gt.iter().map(|g| g.pair()).collect();
    idx.extend(labels.unmatched_2d.iter().map(|&i| (i, m)));
    idx.extend(labels.unmatched_3d.iter().map(|&j| (n, j)));
    if idx.is_empty() {
        return Err(Error::DegenerateBatch("no ground-truth or unmatched points to supervise".into()));
    }
    let picked = tape.gather_elements(log_plan, &idx)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / idx.len() as f64))
}

/// Weighted binary cross-entropy averaged over the initial matches; zero
/// when there are none.
pub fn rejection_loss(tape: &mut Tape, probabilities: Option<Var>, labels: &TrainingLabels) -> Result<Var> {
    let Some(p) = probabilities else {
        return Ok(tape.leaf(Tensor::scalar(0.0)));
    };
    let k = tape.value(p).rows();
    if k != labels.y.len() || k != labels.w.len() {
        return Err(Error::dim("rejection_loss", &[k], &[labels.y.len()]));
    }
    let p = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let lp = tape.ln(p);
    let q = tape.scale(p, -1.0);
    let q = tape.add_scalar(q, 1.0);
    let lq = tape.ln(q);
    let y = tape.leaf(Tensor::column(labels.y.clone()));
    let not_y = tape.leaf(Tensor::column(labels.y.iter().map(|v| 1.0 - v).collect()));
    let w = tape.leaf(Tensor::column(labels.w.clone()));
    let a = tape.mul(y, lp)?;
    let b = tape.mul(not_y, lq)?;
    let ll = tape.add(a, b)?;
    let ll = tape.mul(w, ll)?;
    let total = tape.sum(ll);
    Ok(tape.scale(total, -1.0 / k as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ot: f64,
    pub l_or: f64,
    pub total: f64,
}

pub struct LossVars {
    pub l_ot: Var,
    pub l_or: Var,
    pub total: Var,
}

/// Forward pass plus both losses. Labels are derived from the pass's own
/// initial matches unless given.
pub fn total_loss(
    tape: &mut Tape,
    p: &Bound,
    matcher: &Matcher,
    pair: &ScenePair,
    gt_cfg: &GtMatchConfig,
    plan: Option<&ForwardPlan>,
) -> Result<(LossVars, TrainingLabels)> {
    let out = matcher.forward(tape, p, pair, plan)?;
    let labels = build_labels(&out.m_init, pair, gt_cfg)?;
    let l_ot = matching_loss(tape, out.log_plan, &labels)?;
    let l_or = rejection_loss(tape, out.probabilities, &labels)?;
    let total = tape.add(l_ot, l_or)?;
    Ok((LossVars { l_ot, l_or, total }, labels))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            lr,
            m: params.iter().map(Tensor::zeros_like).collect(),
            v: params.iter().map(Tensor::zeros_like).collect(),
            t: 0,
        }
    }

    /// One bias-corrected Adam update of every tensor in `params`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "adam expects {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::Contract(format!(
                    "adam shape mismatch at tensor {i}: {:?} vs {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.t += 1;
        let (b1, b2) = ADAM_BETAS;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (j, &gj) in g.data().iter().enumerate() {
                md[j] = b1 * md[j] + (1.0 - b1) * gj;
                vd[j] = b2 * vd[j] + (1.0 - b2) * gj * gj;
                let mh = md[j] / c1;
                let vh = vd[j] / c2;
                pd[j] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Synthetic scene-pair generator settings. The outlier ratio is the number
/// of 2D keypoints without a partner divided by `max(N, M)`; both sides hold
/// `num_points` entries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_points: usize,
    pub intrinsics: CameraIntrinsics,
    pub image_width: f64,
    pub image_height: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub max_rotation_deg: f64,
    pub max_translation: f64,
    /// Rotation between the query and the reference camera.
    pub reference_rotation_deg: f64,
    pub reference_translation: f64,
    /// Keypoint position noise (pixels).
    pub keypoint_noise_px: f64,
    pub color_noise: f64,
    /// Number of base colors; 0 draws colors uniformly.
    pub palette_size: usize,
    /// Minimum pixel distance between unrelated projections.
    pub min_separation_px: f64,
    pub outlier_ratio: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_points: 64,
            intrinsics: CameraIntrinsics {
                fx: 500.0,
                fy: 500.0,
                cx: 320.0,
                cy: 240.0,
            },
            image_width: 640.0,
            image_height: 480.0,
            depth_min: 4.0,
            depth_max: 8.0,
            max_rotation_deg: 20.0,
            max_translation: 1.0,
            reference_rotation_deg: 20.0,
            reference_translation: 1.0,
            keypoint_noise_px: 0.5,
            color_noise: 0.02,
            palette_size: 8,
            min_separation_px: 8.0,
            outlier_ratio: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.intrinsics.validate()?;
        if !(0.0..=1.0).contains(&self.outlier_ratio) {
            return bad(format!("outlier ratio must lie in [0,1], got {}", self.outlier_ratio));
        }
        if self.num_points == 0 {
            return bad("num_points must be positive".into());
        }
        let u = self.outlier_ratio * self.num_points as f64;
        if (u - u.round()).abs() > 1e-9 {
            return bad(format!(
                "outlier ratio {} is not reachable with {} points per side",
                self.outlier_ratio, self.num_points
            ));
        }
        if !(self.depth_min > 0.0 && self.depth_max > self.depth_min) {
            return bad(format!("invalid depth range [{}, {}]", self.depth_min, self.depth_max));
        }
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return bad("image size must be positive".into());
        }
        for (name, v) in [
            ("keypoint_noise_px", self.keypoint_noise_px),
            ("color_noise", self.color_noise),
            ("min_separation_px", self.min_separation_px),
            ("max_rotation_deg", self.max_rotation_deg),
            ("max_translation", self.max_translation),
            ("reference_rotation_deg", self.reference_rotation_deg),
            ("reference_translation", self.reference_translation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }

    /// Unmatched 2D keypoints (and, symmetrically, unmatched 3D points).
    pub fn unmatched_count(&self) -> usize {
        (self.outlier_ratio * self.num_points as f64).round() as usize
    }
}

fn random_rotation(rng: &mut ChaCha8Rng, max_deg: f64) -> Vector3<f64> {
    let axis = loop {
        let a = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = a.norm();
        if n > 1e-3 && n <= 1.0 {
            break a / n;
        }
    };
    axis * rng.random_range(0.0..=max_deg).to_radians()
}

fn random_offset(rng: &mut ChaCha8Rng, max: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)) * max
}

struct Sampler<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    palette: Vec<Color>,
}

impl Sampler<'_> {
    fn pixel(&mut self) -> Vector2<f64> {
        let m = self.cfg.min_separation_px.min(0.25 * self.cfg.image_width.min(self.cfg.image_height));
        Vector2::new(
            self.rng.random_range(m..self.cfg.image_width - m),
            self.rng.random_range(m..self.cfg.image_height - m),
        )
    }

    fn color(&mut self) -> Color {
        if self.palette.is_empty() {
            return [self.rng.random(), self.rng.random(), self.rng.random()];
        }
        let base = self.palette[self.rng.random_range(0..self.palette.len())];
        self.jitter(base)
    }

    fn jitter(&mut self, c: Color) -> Color {
        if self.cfg.color_noise == 0.0 {
            return c;
        }
        let noise = Normal::new(0.0, self.cfg.color_noise).expect("finite noise");
        c.map(|v| (v + noise.sample(&mut self.rng)).clamp(0.0, 1.0))
    }

    /// World point seen by `pose` at `pixel` and a random depth.
    fn point(&mut self, pose: &Pose, pixel: &Vector2<f64>) -> Vector3<f64> {
        let depth = self.rng.random_range(self.cfg.depth_min..self.cfg.depth_max);
        let b = bearing_from_pixel(pixel, &self.cfg.intrinsics);
        let x = Vector3::new(b.x(), b.y(), 1.0) * depth;
        pose.rotation.transpose() * (x - pose.translation)
    }
}

fn far_from(p: &Vector2<f64>, others: &[Vector2<f64>], sep: f64) -> bool {
    others.iter().all(|o| (o - p).norm() > sep)
}

/// Samples one query/reference scene pair with stored ground-truth matches.
/// At ratio 1 the distractors are drawn without the separation filter.
pub fn synth_scene_pair(cfg: &SynthConfig) -> Result<ScenePair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let palette = (0..cfg.palette_size)
        .map(|_| [rng.random(), rng.random(), rng.random()])
        .collect();
    let mut s = Sampler {
        cfg,
        rng,
        palette,
    };
    let k = cfg.intrinsics;
    let query_pose = Pose::from_axis_angle(&random_rotation(&mut s.rng, cfg.max_rotation_deg), random_offset(&mut s.rng, cfg.max_translation));
    let delta = Pose::from_axis_angle(
        &random_rotation(&mut s.rng, cfg.reference_rotation_deg),
        random_offset(&mut s.rng, cfg.reference_translation),
    );
    let reference_pose = delta.compose(&query_pose);

    let n = cfg.num_points;
    let unmatched = cfg.unmatched_count();
    let matched = n - unmatched;
    let filter = cfg.outlier_ratio < 1.0;
    let sep = cfg.min_separation_px;
    let noise = Normal::new(0.0, cfg.keypoint_noise_px.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let max_tries = 10_000 * n.max(1);
    let mut tries = 0;
    let mut budget = || {
        tries += 1;
        if tries > max_tries {
            Err(Error::Config(format!(
                "could not place {n} points with {sep}px separation in a {}x{} image",
                cfg.image_width, cfg.image_height
            )))
        } else {
            Ok(())
        }
    };
    let visible_from_reference = |q: &Vector3<f64>| bearing_from_point(q, &reference_pose).is_ok();

    // matched points: mutually separated projections
    let mut proj: Vec<Vector2<f64>> = Vec::with_capacity(2 * n);
    let mut points: Vec<Point3D> = Vec::with_capacity(n);
    let mut keypoints: Vec<Keypoint2D> = Vec::with_capacity(n);
    while points.len() < matched {
        budget()?;
        let px = s.pixel();
        if !far_from(&px, &proj, sep) {
            continue;
        }
        let q = s.point(&query_pose, &px);
        if !visible_from_reference(&q) {
            continue;
        }
        let color = s.color();
        let shown = project(&q, &query_pose, &k)?;
        let observed = shown + Vector2::new(noise.sample(&mut s.rng), noise.sample(&mut s.rng));
        proj.push(shown);
        points.push(Point3D { position: q, color });
        let kc = s.jitter(color);
        keypoints.push(Keypoint2D {
            pixel: observed,
            color: kc,
        });
    }
    let observed: Vec<Vector2<f64>> = keypoints.iter().map(|kp| kp.pixel).collect();
    // 3D distractors: project away from every keypoint and every other projection
    while points.len() < n {
        budget()?;
        let px = s.pixel();
        if filter && !(far_from(&px, &observed, sep) && far_from(&px, &proj, sep)) {
            continue;
        }
        let q = s.point(&query_pose, &px);
        if !visible_from_reference(&q) {
            continue;
        }
        proj.push(project(&q, &query_pose, &k)?);
        let color = s.color();
        points.push(Point3D { position: q, color });
    }
    // 2D distractors: away from every projection and keypoint
    let mut taken = observed;
    while keypoints.len() < n {
        budget()?;
        let px = s.pixel();
        if filter && !(far_from(&px, &proj, sep) && far_from(&px, &taken, sep)) {
            continue;
        }
        taken.push(px);
        let color = s.color();
        keypoints.push(Keypoint2D { pixel: px, color });
    }

    let mut kp_order: Vec<usize> = (0..n).collect();
    let mut pt_order: Vec<usize> = (0..n).collect();
    kp_order.shuffle(&mut s.rng);
    pt_order.shuffle(&mut s.rng);
    // new position of each original index
    let mut kp_pos = vec![0; n];
    let mut pt_pos = vec![0; n];
    for (new, &old) in kp_order.iter().enumerate() {
        kp_pos[old] = new;
    }
    for (new, &old) in pt_order.iter().enumerate() {
        pt_pos[old] = new;
    }
    let gt = MatchSet::new((0..matched).map(|i| Match::new(kp_pos[i], pt_pos[i], 1.0)).collect()).sorted();
    Ok(ScenePair {
        intrinsics: k,
        query_pose,
        reference_pose,
        keypoints: kp_order.iter().map(|&i| keypoints[i]).collect(),
        points: pt_order.iter().map(|&i| points[i]).collect(),
        gt_matches: Some(gt),
    })
}

/// `count` pairs with seeds `cfg.seed, cfg.seed + 1, …`.
pub fn synth_scene_pairs(cfg: &SynthConfig, count: usize) -> Result<Vec<ScenePair>> {
    (0..count)
        .map(|i| {
            synth_scene_pair(&SynthConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..*cfg
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: DEFAULT_LR,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid training settings {self:?}")));
        }
        Ok(())
    }
}

/// One scene pair per step; returns per-epoch mean losses.
pub fn train(
    matcher: &mut Matcher,
    scenes: &[ScenePair],
    cfg: &TrainConfig,
    gt_cfg: &GtMatchConfig,
) -> Result<Vec<LossBreakdown>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Input("training needs at least one scene pair".into()));
    }
    let mut adam = Adam::new(matcher.store.tensors(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        // per-scene losses, summed in scene order so the mean is order-free
        let mut losses = vec![[0.0; 3]; scenes.len()];
        for &i in &order {
            let mut tape = Tape::new();
            let p = matcher.store.bind(&mut tape);
            let (loss, _) = total_loss(&mut tape, &p, matcher, &scenes[i], gt_cfg, None).map_err(|e| match e {
                Error::Numeric { stage, detail } => Error::Training {
                    epoch,
                    detail: format!("{stage}: {detail}"),
                },
                other => other,
            })?;
            let (l_ot, l_or, total) = (
                tape.value(loss.l_ot).item(),
                tape.value(loss.l_or).item(),
                tape.value(loss.total).item(),
            );
            if !total.is_finite() {
                return Err(Error::Training {
                    epoch,
                    detail: format!("non-finite loss on scene {i} (l_ot={l_ot}, l_or={l_or})"),
                });
            }
            let grads = tape.backward(loss.total)?;
            let g: Vec<Tensor> = p.vars().iter().map(|&v| grads.get(v)).collect();
            if g.iter().any(|t| !t.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    detail: format!("non-finite gradient on scene {i}"),
                });
            }
            adam.step(matcher.store.tensors_mut(), &g)?;
            losses[i] = [l_ot, l_or, total];
        }
        let k = scenes.len() as f64;
        let mean_of = |c: usize| losses.iter().map(|l| l[c]).sum::<f64>() / k;
        let mean = LossBreakdown {
            l_ot: mean_of(0),
            l_or: mean_of(1),
            total: mean_of(2),
        };
        info!("epoch {epoch}: l_ot={:.6} l_or={:.6} total={:.6}", mean.l_ot, mean.l_or, mean.total);
        curve.push(mean);
    }
    Ok(curve)
}

pub fn loss_curve_csv(curve: &[LossBreakdown]) -> String {
    let mut s = String::from("epoch,l_ot,l_or,total\n");
    for (i, l) in curve.iter().enumerate() {
        let _ = writeln!(s, "{},{},{},{}", i + 1, l.l_ot, l.l_or, l.total);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{gradient_check_many, CoordSelection};
    use crate::geometry::{ground_truth_matches, ThresholdSpace};
    use crate::model::MatcherConfig;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn log_plan_leaf(tape: &mut Tape, rng: &mut ChaCha8Rng, n: usize, m: usize) -> (Var, Tensor) {
        let t = Tensor::matrix(n + 1, m + 1, (0..(n + 1) * (m + 1)).map(|_| -rng.random_range(0.01..5.0)).collect());
        (tape.leaf(t.clone()), t)
    }

    fn random_labels(rng: &mut ChaCha8Rng, n: usize, m: usize) -> TrainingLabels {
        let mut pts: Vec<usize> = (0..m).collect();
        pts.shuffle(rng);
        let gt = MatchSet::from_pairs((0..n).filter(|_| rng.random_bool(0.6)).map(|i| (i, pts[i])));
        let m_init = MatchSet::from_pairs((0..n).map(|i| (i, rng.random_range(0..m))));
        labels_from_gt(&m_init, gt, n, m).unwrap()
    }

    #[test]
    fn matching_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels = random_labels(&mut rng, 5, 7);
        let mut tape = Tape::new();
        let zero = tape.leaf(Tensor::zeros(6, 8));
        let l = matching_loss(&mut tape, zero, &labels).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let half = tape.leaf(Tensor::full(6, 8, 0.5f64.ln()));
        let l = matching_loss(&mut tape, half, &labels).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);

        let (v, t) = log_plan_leaf(&mut tape, &mut rng, 5, 7);
        let l = matching_loss(&mut tape, v, &labels).unwrap();
        let l = tape.value(l).item();
        let mut sum = 0.0;
        let mut count = 0.0;
        for g in &labels.gt {
            sum += t.get(g.query, g.point);
            count += 1.0;
        }
        for &i in &labels.unmatched_2d {
            sum += t.get(i, 7);
            count += 1.0;
        }
        for &j in &labels.unmatched_3d {
            sum += t.get(5, j);
            count += 1.0;
        }
        assert!((l + sum / count).abs() < 1e-12);
    }

    #[test]
    fn matching_loss_rejects_empty_batch() {
        let labels = TrainingLabels {
            gt: MatchSet::default(),
            unmatched_2d: vec![],
            unmatched_3d: vec![],
            y: vec![],
            w: vec![],
        };
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros(1, 1));
        assert!(matches!(matching_loss(&mut tape, v, &labels), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn rejection_loss_examples() {
        let mut tape = Tape::new();
        let y = vec![1.0, 0.0, 1.0, 0.0, 0.0];
        let labels = TrainingLabels {
            gt: MatchSet::default(),
            unmatched_2d: vec![],
            unmatched_3d: vec![],
            w: class_weights(&y),
            y: y.clone(),
        };
        let exact = tape.leaf(Tensor::column(y.clone()));
        let l = rejection_loss(&mut tape, Some(exact), &labels).unwrap();
        assert!(tape.value(l).item() < 1e-6);
        let half = tape.leaf(Tensor::full(5, 1, 0.5));
        let l = rejection_loss(&mut tape, Some(half), &labels).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-12);
        let l = rejection_loss(&mut tape, None, &labels).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probs: Vec<f64> = (0..5).map(|_| rng.random_range(0.01..0.99)).collect();
        let pv = tape.leaf(Tensor::column(probs.clone()));
        let l = rejection_loss(&mut tape, Some(pv), &labels).unwrap();
        let l = tape.value(l).item();
        let oracle: f64 = -(0..5)
            .map(|i| labels.w[i] * (y[i] * probs[i].ln() + (1.0 - y[i]) * (1.0 - probs[i]).ln()))
            .sum::<f64>()
            / 5.0;
        assert!((l - oracle).abs() < 1e-12);
    }

    #[test]
    fn class_weights_average_one() {
        let w = class_weights(&[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(w, vec![2.0, 2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]);
        assert_eq!(class_weights(&[1.0, 1.0]), vec![1.0, 1.0]);
        assert!(class_weights(&[]).is_empty());
    }

    #[test]
    fn labels_examples() {
        let gt = MatchSet::from_pairs([(0, 2), (1, 0), (3, 1)]);
        let l = labels_from_gt(&gt, gt.clone(), 4, 3).unwrap();
        assert!(l.y.iter().all(|&v| v == 1.0));
        assert_eq!(l.unmatched_2d, vec![2]);
        assert!(l.unmatched_3d.is_empty());
        let wrong = MatchSet::from_pairs([(0, 0), (1, 1)]);
        let l = labels_from_gt(&wrong, gt.clone(), 4, 3).unwrap();
        assert!(l.y.iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let l = random_labels(&mut rng, 9, 11);
            let matched_q: HashSet<usize> = l.gt.iter().map(|g| g.query).collect();
            let matched_p: HashSet<usize> = l.gt.iter().map(|g| g.point).collect();
            let all_q: HashSet<usize> = matched_q.union(&l.unmatched_2d.iter().copied().collect()).copied().collect();
            assert_eq!(all_q.len(), 9);
            assert_eq!(matched_q.len() + l.unmatched_2d.len(), 9);
            assert_eq!(matched_p.len() + l.unmatched_3d.len(), 11);
        }
    }

    #[test]
    fn adam_examples() {
        let mut p = vec![Tensor::row(vec![1.0, -2.0])];
        let mut adam = Adam::new(&p, 0.1);
        adam.step(&mut p, &[Tensor::zeros(1, 2)]).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert!(adam.m[0].data().iter().chain(adam.v[0].data()).all(|&v| v == 0.0));

        // first step: m̂ = g, v̂ = g², so the update is −lr·g/(|g|+ε)
        let g = [0.3, -4.0];
        let mut adam = Adam::new(&p, 0.1);
        adam.step(&mut p, &[Tensor::row(g.to_vec())]).unwrap();
        for (j, (&x, x0)) in p[0].data().iter().zip([1.0, -2.0]).enumerate() {
            let expect = x0 - 0.1 * g[j] / (g[j].abs() + ADAM_EPS);
            assert!((x - expect).abs() < 1e-12 * expect.abs().max(1.0));
        }

        // constant gradient: step size tends to lr
        let mut q = vec![Tensor::scalar(0.0)];
        let mut adam = Adam::new(&q, 0.01);
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = q[0].item();
            adam.step(&mut q, &[Tensor::scalar(2.5)]).unwrap();
            last = before - q[0].item();
        }
        assert!((last - 0.01).abs() < 1e-6, "{last}");

        let r = adam.step(&mut q, &[Tensor::zeros(1, 2)]);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    fn recount_unmatched(pair: &ScenePair) -> (usize, usize) {
        let gt = pair.gt_matches.as_ref().unwrap();
        (pair.keypoints.len() - gt.len(), pair.points.len() - gt.len())
    }

    #[test]
    fn synth_outlier_ratio_examples() {
        let base = SynthConfig {
            num_points: 100,
            ..SynthConfig::default()
        };
        let p = synth_scene_pair(&SynthConfig { outlier_ratio: 0.5, ..base }).unwrap();
        assert_eq!((p.keypoints.len(), p.points.len()), (100, 100));
        assert_eq!(recount_unmatched(&p), (50, 50));

        // ratio 0: geometry alone recovers a partner for every point
        let p = synth_scene_pair(&base).unwrap();
        let cfg = GtMatchConfig {
            epsilon: 3.0,
            space: ThresholdSpace::Pixel,
        };
        let gt = ground_truth_matches(&p.keypoints, &p.points, &p.query_pose, &p.intrinsics, &cfg).unwrap();
        assert_eq!(gt.sorted(), p.gt_matches.clone().unwrap());
        assert_eq!(p.gt_matches.unwrap().len(), 100);

        let p = synth_scene_pair(&SynthConfig { outlier_ratio: 1.0, ..base }).unwrap();
        assert_eq!(recount_unmatched(&p), (100, 100));

        assert!(matches!(
            synth_scene_pair(&SynthConfig { outlier_ratio: 1.2, ..base }),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            synth_scene_pair(&SynthConfig { outlier_ratio: 0.333, ..base }),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn synth_is_deterministic_and_visible() {
        let cfg = SynthConfig {
            outlier_ratio: 0.25,
            seed: 11,
            ..SynthConfig::default()
        };
        let a = synth_scene_pair(&cfg).unwrap();
        assert_eq!(a, synth_scene_pair(&cfg).unwrap());
        assert!(a.point_bearings().is_ok());
        assert!(a.points.iter().all(|q| crate::geometry::color_in_range(&q.color)));
        assert_ne!(a, synth_scene_pair(&SynthConfig { seed: 12, ..cfg }).unwrap());
    }

    fn tiny_matcher() -> Matcher {
        Matcher::new(MatcherConfig {
            width: 8,
            encoder_blocks: 1,
            clusters: 3,
            graph_k: 2,
            k_local: 3,
            coarse_groups: 2,
            ..MatcherConfig::default()
        })
        .unwrap()
    }

    fn tiny_scenes(count: usize) -> Vec<ScenePair> {
        let cfg = SynthConfig {
            num_points: 8,
            outlier_ratio: 0.25,
            ..SynthConfig::default()
        };
        synth_scene_pairs(&cfg, count).unwrap()
    }

    #[test]
    fn total_loss_gradients_match_finite_differences() {
        let matcher = tiny_matcher();
        let pair = &tiny_scenes(1)[0];
        let gt_cfg = GtMatchConfig::default();
        let mut tape = Tape::new();
        let p = matcher.store.bind(&mut tape);
        let out = matcher.forward(&mut tape, &p, pair, None).unwrap();
        let plan = out.plan;
        let err = gradient_check_many(
            |t, vars| {
                let p = Bound::from_vars(vars.to_vec());
                Ok(total_loss(t, &p, &matcher, pair, &gt_cfg, Some(&plan))?.0.total)
            },
            matcher.store.tensors(),
            1e-6,
            CoordSelection::Strided(6),
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn frozen_training_is_flat_and_runs_are_repeatable() {
        let scenes = tiny_scenes(3);
        let gt = GtMatchConfig::default();
        let mut m = tiny_matcher();
        let before = m.store.tensors().to_vec();
        let cfg = TrainConfig { epochs: 3, lr: 0.0, seed: 1 };
        let curve = train(&mut m, &scenes, &cfg, &gt).unwrap();
        assert_eq!(m.store.tensors(), &before[..]);
        assert!(curve.windows(2).all(|w| w[0] == w[1]));

        let cfg = TrainConfig { epochs: 2, lr: 1e-3, seed: 1 };
        let (mut a, mut b) = (tiny_matcher(), tiny_matcher());
        let ca = train(&mut a, &scenes, &cfg, &gt).unwrap();
        let cb = train(&mut b, &scenes, &cfg, &gt).unwrap();
        assert_eq!(loss_curve_csv(&ca), loss_curve_csv(&cb));
        assert_eq!(a.store.tensors(), b.store.tensors());
        assert!(loss_curve_csv(&ca).starts_with("epoch,l_ot,l_or,total\n1,"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn matching_loss_nonnegative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels = random_labels(&mut rng, 5, 6);
            let mut tape = Tape::new();
            let (v, _) = log_plan_leaf(&mut tape, &mut rng, 5, 6);
            let l = matching_loss(&mut tape, v, &labels).unwrap();
            prop_assert!(tape.value(l).item() > 0.0);
        }
    }
}
