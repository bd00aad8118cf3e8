//! The full matcher: encoders, global graph, local matching, optimal
//! transport and outlier rejection wired into one forward pass.

use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::encoder::{encode_points, PointEncoderParams, DEFAULT_BLOCKS};
use crate::error::{Error, Result};
use crate::geometry::{BearingVector, Color};
use crate::global_graph::{
    angular_attention, angular_embedding, attach_global, build_global_graph, cluster_points, gnn_update,
    pool_cluster_features, AttentionParams, GnnParams, DEFAULT_CLUSTERS, DEFAULT_GRAPH_K, DEFAULT_SIGMA_A_DEG,
};
use crate::local_matching::{
    cluster_attention, cost_matrix, linear_cross_attention, local_graph_init, mutual_top1, scores_from_log_plan,
    sinkhorn_with_dustbins, ClusterAttentionConfig, ClusterPlan, LocalGraphConfig, LocalMatchingParams,
    DEFAULT_ATTENTION_ROUNDS, DEFAULT_COARSE_GROUPS, DEFAULT_FINE_GROUPS, DEFAULT_K_LOCAL, DEFAULT_REG,
    DEFAULT_SINKHORN_ITERS,
};
use crate::matches::MatchSet;
use crate::nn::{Bound, Init, ParamStore, Projection};
use crate::outlier_rejection::{classify_matches, RejectionConfig, RejectionParams, DEFAULT_THETA};
use crate::scene::ScenePair;

pub const DEFAULT_WIDTH: usize = 128;
/// Per-match transport cues fed to the rejection head.
pub const MATCH_CUES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatcherConfig {
    /// Per-point feature width `d`; matching runs at `2d`.
    pub width: usize,
    pub encoder_blocks: usize,
    /// Global clusters `X`.
    pub clusters: usize,
    /// Neighbors per global node.
    pub graph_k: usize,
    pub k_local: usize,
    pub coarse_groups: usize,
    pub fine_groups: usize,
    pub attention_rounds: usize,
    pub sigma_a_deg: f64,
    pub reg: f64,
    pub sinkhorn_iters: usize,
    pub theta: f64,
    pub use_color: bool,
    pub use_global: bool,
    pub use_angular: bool,
    pub use_cluster_attn: bool,
    pub seed: u64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            width: DEFAULT_WIDTH,
            encoder_blocks: DEFAULT_BLOCKS,
            clusters: DEFAULT_CLUSTERS,
            graph_k: DEFAULT_GRAPH_K,
            k_local: DEFAULT_K_LOCAL,
            coarse_groups: DEFAULT_COARSE_GROUPS,
            fine_groups: DEFAULT_FINE_GROUPS,
            attention_rounds: DEFAULT_ATTENTION_ROUNDS,
            sigma_a_deg: DEFAULT_SIGMA_A_DEG,
            reg: DEFAULT_REG,
            sinkhorn_iters: DEFAULT_SINKHORN_ITERS,
            theta: DEFAULT_THETA,
            use_color: true,
            use_global: true,
            use_angular: true,
            use_cluster_attn: true,
            seed: 0,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.width < 2 {
            return bad(format!("width must be at least 2, got {}", self.width));
        }
        if self.clusters == 0 || self.k_local == 0 || self.coarse_groups == 0 || self.fine_groups == 0 {
            return bad("cluster, neighbor and group counts must be positive".into());
        }
        if self.sinkhorn_iters == 0 {
            return bad("sinkhorn needs at least one iteration".into());
        }
        if !(self.reg > 0.0 && self.reg.is_finite()) {
            return bad(format!("reg must be positive, got {}", self.reg));
        }
        if !(self.sigma_a_deg > 0.0 && self.sigma_a_deg.is_finite()) {
            return bad(format!("sigma_a must be positive, got {}", self.sigma_a_deg));
        }
        RejectionConfig { theta: self.theta }.validate()
    }

    pub fn cluster_attention(&self) -> ClusterAttentionConfig {
        ClusterAttentionConfig {
            coarse_groups: self.coarse_groups,
            fine_groups: self.fine_groups,
            rounds: self.attention_rounds,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MatcherParams {
    pub encoder: PointEncoderParams,
    pub gnn: GnnParams,
    pub attention: AttentionParams,
    pub local: LocalMatchingParams,
    /// Linear map applied to both sides before the cost matrix.
    pub head: Projection,
    pub reject: RejectionParams,
}

impl MatcherParams {
    pub fn new(store: &mut ParamStore, cfg: &MatcherConfig) -> Self {
        let mut init = Init::new(cfg.seed);
        let d = cfg.width;
        Self {
            encoder: PointEncoderParams::new(store, &mut init, d, cfg.encoder_blocks),
            gnn: GnnParams::new(store, &mut init, "global.gnn", d),
            attention: AttentionParams::new(store, &mut init, "global.attention", d),
            local: LocalMatchingParams::new(store, &mut init, 2 * d, cfg.attention_rounds),
            head: Projection::new(store, &mut init, "match.head", 2 * d, 2 * d),
            reject: RejectionParams::new(store, &mut init, 2 * d, MATCH_CUES),
        }
    }
}

/// Piecewise-constant choices made during a forward pass. Replaying them
/// makes the pass a smooth function of the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardPlan {
    pub cluster_plan: Option<ClusterPlan>,
    pub m_init: Option<MatchSet>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// `log S̄`, `(N+1)×(M+1)`.
    pub log_plan: Var,
    /// `S` without dustbins.
    pub scores: Tensor,
    pub m_init: MatchSet,
    pub m_final: MatchSet,
    /// `|M_init|×1` inlier probabilities.
    pub probabilities: Option<Var>,
    pub plan: ForwardPlan,
}

/// Geometry and color inputs of one side.
pub struct SideInput<'a> {
    pub bearings: &'a [BearingVector],
    pub colors: &'a [Color],
}

#[derive(Clone, Debug)]
pub struct Matcher {
    pub config: MatcherConfig,
    pub store: ParamStore,
    pub params: MatcherParams,
}

impl Matcher {
    pub fn new(config: MatcherConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let params = MatcherParams::new(&mut store, &config);
        Ok(Self { config, store, params })
    }

    /// Per-point features widened with the cluster-level embedding (`N×2d`).
    /// Without the global branch the second half is zero.
    fn side_features(&self, tape: &mut Tape, p: &Bound, side: &SideInput, seed: u64) -> Result<Var> {
        let cfg = &self.config;
        let f = encode_points(tape, p, &self.params.encoder, side.bearings, side.colors, cfg.use_color)?;
        let n = side.bearings.len();
        if !cfg.use_global {
            let zeros = tape.leaf(Tensor::zeros(n, cfg.width));
            return tape.concat_cols(&[f, zeros]);
        }
        let assignment = cluster_points(side.bearings, cfg.clusters.min(n), seed)?;
        let x_eff = assignment.clusters();
        let graph = build_global_graph(&assignment.centers, cfg.graph_k.min(x_eff - 1))?;
        let pooled = pool_cluster_features(tape, f, &assignment)?;
        let fg = gnn_update(tape, p, &graph, &self.params.gnn, pooled)?;
        let angular = if cfg.use_angular && graph.k >= 2 {
            Some(angular_embedding(&graph, cfg.sigma_a_deg.to_radians(), cfg.width)?)
        } else {
            None
        };
        let fgg = angular_attention(tape, p, &graph, angular.as_ref(), &self.params.attention, fg)?;
        attach_global(tape, f, fgg, &assignment)
    }

    fn local_init(&self, tape: &mut Tape, p: &Bound, bearings: &[BearingVector], f: Var) -> Result<Var> {
        let k = self.config.k_local.min(bearings.len() - 1);
        if k == 0 {
            return Ok(f);
        }
        local_graph_init(tape, p, bearings, f, &LocalGraphConfig { k_local: k }, &self.params.local.init)
    }

    /// Full differentiable pass on raw side inputs.
    pub fn forward_sides(
        &self,
        tape: &mut Tape,
        p: &Bound,
        query: &SideInput,
        reference: &SideInput,
        plan: Option<&ForwardPlan>,
    ) -> Result<Forward> {
        let cfg = &self.config;
        if query.bearings.is_empty() || reference.bearings.is_empty() {
            return Err(Error::Input("both sides need at least one point".into()));
        }
        let fp = self.side_features(tape, p, query, cfg.seed)?;
        let fq = self.side_features(tape, p, reference, cfg.seed.wrapping_add(1))?;
        let fp = self.local_init(tape, p, query.bearings, fp)?;
        let fq = self.local_init(tape, p, reference.bearings, fq)?;
        let (mut fp, mut fq) = linear_cross_attention(tape, p, &self.params.local.cross, fp, fq)?;
        let mut cluster_plan = None;
        if cfg.use_cluster_attn && cfg.attention_rounds > 0 {
            let fixed = plan.and_then(|pl| pl.cluster_plan.as_ref());
            let (a, b, used) = cluster_attention(
                tape,
                p,
                &self.params.local.cluster,
                fp,
                fq,
                &cfg.cluster_attention(),
                cfg.seed.wrapping_add(2),
                fixed,
            )?;
            (fp, fq, cluster_plan) = (a, b, Some(used));
        }
        let fp = self.params.head.forward(tape, p, fp)?;
        let fq = self.params.head.forward(tape, p, fq)?;
        let cost = cost_matrix(tape, fp, fq)?;
        let dustbin = p.var(self.params.local.dustbin);
        let log_plan = sinkhorn_with_dustbins(tape, cost, dustbin, cfg.sinkhorn_iters, cfg.reg)?;
        let scores = scores_from_log_plan(tape.value(log_plan));
        let m_init = match plan.and_then(|pl| pl.m_init.clone()) {
            Some(m) => m,
            None => mutual_top1(&scores),
        };
        let cues = match_cues(tape, log_plan, &m_init)?;
        let classified = classify_matches(
            tape,
            p,
            &self.params.reject,
            &m_init,
            fp,
            fq,
            cues,
            &RejectionConfig { theta: cfg.theta },
        )?;
        Ok(Forward {
            log_plan,
            scores,
            m_final: classified.m_final,
            probabilities: classified.probabilities,
            plan: ForwardPlan {
                cluster_plan,
                m_init: Some(m_init.clone()),
            },
            m_init,
        })
    }

    /// Query bearings come from the query intrinsics, point bearings from the reference pose.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, pair: &ScenePair, plan: Option<&ForwardPlan>) -> Result<Forward> {
        let qb = pair.query_bearings();
        let pb = pair.point_bearings()?;
        let (qc, pc) = (pair.keypoint_colors(), pair.point_colors());
        self.forward_sides(
            tape,
            p,
            &SideInput {
                bearings: &qb,
                colors: &qc,
            },
            &SideInput {
                bearings: &pb,
                colors: &pc,
            },
            plan,
        )
    }

    /// Inference-only pass returning the match sets and the score matrix.
    pub fn match_pair(&self, pair: &ScenePair) -> Result<MatchOutput> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let out = self.forward(&mut tape, &p, pair, None)?;
        let probabilities = out
            .probabilities
            .map(|v| tape.value(v).data().to_vec())
            .unwrap_or_default();
        Ok(MatchOutput {
            m_init: out.m_init,
            m_final: out.m_final,
            probabilities,
            scores: out.scores,
        })
    }
}

/// `log S̄` at each match and at its row and column dustbins, `|M|×3`.
fn match_cues(tape: &mut Tape, log_plan: Var, m: &MatchSet) -> Result<Option<Var>> {
    if m.is_empty() {
        return Ok(None);
    }
    let (r, c) = tape.value(log_plan).dims();
    let pick = |f: &dyn Fn(&crate::matches::Match) -> (usize, usize)| m.iter().map(f).collect::<Vec<_>>();
    let at = tape.gather_elements(log_plan, &pick(&|x| x.pair()))?;
    let row = tape.gather_elements(log_plan, &pick(&|x| (x.query, c - 1)))?;
    let col = tape.gather_elements(log_plan, &pick(&|x| (r - 1, x.point)))?;
    Ok(Some(tape.concat_cols(&[at, row, col])?))
}

#[derive(Clone, Debug)]
pub struct MatchOutput {
    pub m_init: MatchSet,
    pub m_final: MatchSet,
    /// Inlier probability per entry of `m_init`.
    pub probabilities: Vec<f64>,
    pub scores: Tensor,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, CameraIntrinsics, Keypoint2D, Point3D, Pose};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> MatcherConfig {
        MatcherConfig {
            width: 8,
            encoder_blocks: 1,
            clusters: 3,
            graph_k: 2,
            k_local: 3,
            coarse_groups: 2,
            ..MatcherConfig::default()
        }
    }

    fn pair(seed: u64, n: usize) -> ScenePair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
        let pose = Pose::from_axis_angle(&Vector3::new(0.0, 0.1, 0.0), Vector3::new(0.0, 0.0, 1.0));
        let mut points = Vec::new();
        let mut keypoints = Vec::new();
        for _ in 0..n {
            let q = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), rng.random_range(4.0..7.0));
            let color = [rng.random(), rng.random(), rng.random()];
            keypoints.push(Keypoint2D { pixel: project(&q, &pose, &k).unwrap(), color });
            points.push(Point3D { position: q, color });
        }
        ScenePair {
            intrinsics: k,
            query_pose: pose,
            reference_pose: pose,
            keypoints,
            points,
            gt_matches: None,
        }
    }

    #[test]
    fn forward_shapes_and_invariants() {
        let m = Matcher::new(tiny_config()).unwrap();
        let pr = pair(1, 10);
        let mut tape = Tape::new();
        let p = m.store.bind(&mut tape);
        let out = m.forward(&mut tape, &p, &pr, None).unwrap();
        assert_eq!(tape.value(out.log_plan).dims(), (11, 11));
        assert_eq!(out.scores.dims(), (10, 10));
        assert!(out.m_init.is_one_to_one());
        assert!(out.m_final.pair_set().is_subset(&out.m_init.pair_set()));
        let probs = out.probabilities.map(|v| tape.value(v).rows()).unwrap_or(0);
        assert_eq!(probs, out.m_init.len());
    }

    #[test]
    fn ablations_run_and_are_deterministic() {
        let pr = pair(2, 9);
        for (color, global, angular, cluster) in [
            (true, true, true, true),
            (false, true, true, true),
            (false, false, true, true),
            (true, true, false, true),
            (true, true, true, false),
        ] {
            let cfg = MatcherConfig {
                use_color: color,
                use_global: global,
                use_angular: angular,
                use_cluster_attn: cluster,
                ..tiny_config()
            };
            let a = Matcher::new(cfg).unwrap().match_pair(&pr).unwrap();
            let b = Matcher::new(cfg).unwrap().match_pair(&pr).unwrap();
            assert_eq!(a.scores, b.scores);
            assert_eq!(a.m_final, b.m_final);
        }
    }

    #[test]
    fn tiny_sides_fall_back_gracefully() {
        let m = Matcher::new(tiny_config()).unwrap();
        let out = m.match_pair(&pair(3, 2)).unwrap();
        assert_eq!(out.scores.dims(), (2, 2));
        let bad = MatcherConfig { theta: 1.5, ..tiny_config() };
        assert!(matches!(Matcher::new(bad), Err(Error::Config(_))));
    }
}
