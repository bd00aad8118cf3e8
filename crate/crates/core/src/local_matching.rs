//! Local graph initialization, cross- and cluster-restricted attention,
//! optimal-transport scoring with dustbins, and mutual top-1 extraction.

use nalgebra::Vector2;

use crate::cluster::{kmeans, KMEANS_MAX_ITERS};
use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::BearingVector;
use crate::global_graph::{build_global_graph, gnn_update, GnnParams};
use crate::matches::{Match, MatchSet};
use crate::nn::{Bound, Init, ParamId, ParamStore, Projection};

pub const DEFAULT_K_LOCAL: usize = 10;
pub const DEFAULT_COARSE_GROUPS: usize = 8;
pub const DEFAULT_FINE_GROUPS: usize = 2;
pub const DEFAULT_ATTENTION_ROUNDS: usize = 2;
pub const DEFAULT_SINKHORN_ITERS: usize = 20;
pub const DEFAULT_REG: f64 = 0.1;
pub const DEFAULT_DUSTBIN: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalGraphConfig {
    pub k_local: usize,
}

impl Default for LocalGraphConfig {
    fn default() -> Self {
        Self {
            k_local: DEFAULT_K_LOCAL,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterAttentionConfig {
    pub coarse_groups: usize,
    pub fine_groups: usize,
    pub rounds: usize,
}

impl Default for ClusterAttentionConfig {
    fn default() -> Self {
        Self {
            coarse_groups: DEFAULT_COARSE_GROUPS,
            fine_groups: DEFAULT_FINE_GROUPS,
            rounds: DEFAULT_ATTENTION_ROUNDS,
        }
    }
}

/// Query, key and value projections of one attention layer.
#[derive(Clone, Debug)]
pub struct QkvParams {
    pub wq: Projection,
    pub wk: Projection,
    pub wv: Projection,
    pub dim: usize,
}

impl QkvParams {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, width: usize) -> Self {
        Self {
            wq: Projection::new(store, init, &format!("{name}.wq"), width, width),
            wk: Projection::new(store, init, &format!("{name}.wk"), width, width),
            wv: Projection::new(store, init, &format!("{name}.wv"), width, width),
            dim: width,
        }
    }
}

/// Per-point k-NN graph update in bearing space: `f + H_fuse(f ⊕ f¹ ⊕ f²)`.
pub fn local_graph_init(
    tape: &mut Tape,
    p: &Bound,
    bearings: &[BearingVector],
    features: Var,
    cfg: &LocalGraphConfig,
    params: &GnnParams,
) -> Result<Var> {
    let n = bearings.len();
    if tape.value(features).rows() != n {
        return Err(Error::dim("local_graph_init", &[n], tape.value(features).shape()));
    }
    if cfg.k_local == 0 || n <= cfg.k_local {
        return Err(Error::Config(format!(
            "local graph with {n} points cannot have {} neighbors per point",
            cfg.k_local
        )));
    }
    let centers: Vec<Vector2<f64>> = bearings.iter().map(|b| b.0).collect();
    let graph = build_global_graph(&centers, cfg.k_local)?;
    let delta = gnn_update(tape, p, &graph, params, features)?;
    tape.add(features, delta)
}

/// `φ(x) = elu(x) + 1`-kernel attention of `queries` over `sources`, computed
/// as `φ(Q)(φ(K)ᵀV) / φ(Q)(φ(K)ᵀ1)` in time linear in the row counts.
pub fn linear_attention_message(
    tape: &mut Tape,
    p: &Bound,
    params: &QkvParams,
    queries: Var,
    sources: Var,
) -> Result<Var> {
    let q = params.wq.forward(tape, p, queries)?;
    let k = params.wk.forward(tape, p, sources)?;
    let v = params.wv.forward(tape, p, sources)?;
    let q = tape.elu_plus_one(q);
    let k = tape.elu_plus_one(k);
    let kt = tape.transpose(k);
    let kv = tape.matmul(kt, v)?;
    let num = tape.matmul(q, kv)?;
    let ksum = tape.sum_cols(k);
    let qk = tape.mul_row(q, ksum)?;
    let den = tape.sum_rows(qk);
    tape.div_col(num, den)
}

/// Simultaneous residual cross-attention update of both sides.
pub fn linear_cross_attention(
    tape: &mut Tape,
    p: &Bound,
    params: &QkvParams,
    fp: Var,
    fq: Var,
) -> Result<(Var, Var)> {
    if tape.value(fp).cols() != tape.value(fq).cols() {
        return Err(Error::dim(
            "linear_cross_attention",
            tape.value(fp).shape(),
            tape.value(fq).shape(),
        ));
    }
    let mp = linear_attention_message(tape, p, params, fp, fq)?;
    let mq = linear_attention_message(tape, p, params, fq, fp)?;
    Ok((tape.add(fp, mp)?, tape.add(fq, mq)?))
}

/// Finest-level row groups of every cluster-attention round.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClusterPlan {
    pub rounds: Vec<Vec<Vec<usize>>>,
}

/// Two-level k-means grouping of the rows of `features`.
pub fn hierarchical_groups(features: &Tensor, cfg: &ClusterAttentionConfig, seed: u64) -> Vec<Vec<usize>> {
    let (n, w) = features.dims();
    let coarse = kmeans(features.data(), w, cfg.coarse_groups.clamp(1, n), seed, KMEANS_MAX_ITERS);
    let mut groups = Vec::new();
    for (c, members) in coarse.members().into_iter().enumerate() {
        let fine = cfg.fine_groups.clamp(1, members.len());
        if fine == 1 {
            groups.push(members);
            continue;
        }
        let sub: Vec<f64> = members.iter().flat_map(|&r| features.row_slice(r).to_vec()).collect();
        let km = kmeans(&sub, w, fine, seed.wrapping_add(1 + c as u64), KMEANS_MAX_ITERS);
        for local in km.members() {
            groups.push(local.into_iter().map(|i| members[i]).collect());
        }
    }
    groups
}

/// Softmax self-attention restricted to each row group, with a residual add.
pub fn grouped_self_attention(
    tape: &mut Tape,
    p: &Bound,
    params: &QkvParams,
    f: Var,
    groups: &[Vec<usize>],
) -> Result<Var> {
    let rows = tape.value(f).rows();
    let q = params.wq.forward(tape, p, f)?;
    let k = params.wk.forward(tape, p, f)?;
    let v = params.wv.forward(tape, p, f)?;
    let scale = 1.0 / (params.dim as f64).sqrt();
    let mut parts = Vec::with_capacity(groups.len());
    for g in groups {
        let qg = tape.gather_rows(q, g)?;
        let kg = tape.gather_rows(k, g)?;
        let vg = tape.gather_rows(v, g)?;
        let kt = tape.transpose(kg);
        let s = tape.matmul(qg, kt)?;
        let s = tape.scale(s, scale);
        let a = tape.row_softmax(s);
        parts.push((tape.matmul(a, vg)?, g.clone()));
    }
    let msg = tape.scatter_rows(&parts, rows)?;
    tape.add(f, msg)
}

/// Joint attention over both sides, restricted to feature clusters.
/// Groups are recomputed from the current features each round unless a
/// recorded `plan` is supplied. Returns the updated sides and the plan used.
pub fn cluster_attention(
    tape: &mut Tape,
    p: &Bound,
    layers: &[QkvParams],
    fp: Var,
    fq: Var,
    cfg: &ClusterAttentionConfig,
    seed: u64,
    plan: Option<&ClusterPlan>,
) -> Result<(Var, Var, ClusterPlan)> {
    let n = tape.value(fp).rows();
    let m = tape.value(fq).rows();
    if cfg.coarse_groups == 0 || cfg.fine_groups == 0 {
        return Err(Error::Config("cluster attention needs at least one group per level".into()));
    }
    if let Some(plan) = plan {
        if plan.rounds.len() != cfg.rounds {
            return Err(Error::Contract("cluster plan does not match the round count".into()));
        }
    }
    let mut f = tape.concat_rows(&[fp, fq])?;
    let mut used = ClusterPlan::default();
    for r in 0..cfg.rounds {
        let groups = match plan {
            Some(plan) => plan.rounds[r].clone(),
            None => hierarchical_groups(tape.value(f), cfg, seed.wrapping_add(1000 * r as u64)),
        };
        f = grouped_self_attention(tape, p, &layers[r % layers.len()], f, &groups)?;
        used.rounds.push(groups);
    }
    let p_idx: Vec<usize> = (0..n).collect();
    let q_idx: Vec<usize> = (n..n + m).collect();
    let out_p = tape.gather_rows(f, &p_idx)?;
    let out_q = tape.gather_rows(f, &q_idx)?;
    Ok((out_p, out_q, used))
}

/// `M(n,m) = ‖fP_n − fQ_m‖₂`.
pub fn cost_matrix(tape: &mut Tape, fp: Var, fq: Var) -> Result<Var> {
    tape.pairwise_distance(fp, fq)
}

/// Log-domain Sinkhorn on the dustbin-extended affinity `−M/reg`.
/// Real rows and columns carry mass 1; the dustbin row carries `M` and the
/// dustbin column `N`. Returns `log S̄` of shape `(N+1)×(M+1)`.
pub fn sinkhorn_with_dustbins(
    tape: &mut Tape,
    cost: Var,
    dustbin: Var,
    iterations: usize,
    reg: f64,
) -> Result<Var> {
    if iterations == 0 {
        return Err(Error::Config("sinkhorn needs at least one iteration".into()));
    }
    if !(reg > 0.0) {
        return Err(Error::Config(format!("sinkhorn regularization must be positive, got {reg}")));
    }
    let (n, m) = tape.value(cost).dims();
    let z = tape.scale(cost, -1.0 / reg);
    let z = tape.append_border(z, dustbin)?;
    let mut log_mu = vec![0.0; n + 1];
    log_mu[n] = (m as f64).ln();
    let mut log_nu = vec![0.0; m + 1];
    log_nu[m] = (n as f64).ln();
    let log_mu = tape.leaf(Tensor::column(log_mu));
    let log_nu = tape.leaf(Tensor::row(log_nu));

    let mut v = tape.leaf(Tensor::zeros(1, m + 1));
    let mut u = tape.leaf(Tensor::zeros(n + 1, 1));
    for it in 0..iterations {
        let zv = tape.add_row(z, v)?;
        let lse = tape.logsumexp_rows(zv);
        u = tape.sub(log_mu, lse)?;
        let zu = tape.add_col(z, u)?;
        let lse = tape.logsumexp_cols(zu);
        v = tape.sub(log_nu, lse)?;
        if !tape.value(u).is_finite() || !tape.value(v).is_finite() {
            return Err(Error::Numeric {
                stage: "sinkhorn",
                detail: format!("non-finite potentials at iteration {}", it + 1),
            });
        }
    }
    let zu = tape.add_col(z, u)?;
    tape.add_row(zu, v)
}

/// Exponentiates `log S̄` and removes the dustbin row and column.
pub fn scores_from_log_plan(log_plan: &Tensor) -> Tensor {
    let (r, c) = log_plan.dims();
    let mut out = Tensor::zeros(r - 1, c - 1);
    for i in 0..r - 1 {
        for j in 0..c - 1 {
            out.set(i, j, log_plan.get(i, j).exp());
        }
    }
    out
}

/// Pairs that are each other's row and column argmax, lower index winning ties.
pub fn mutual_top1(s: &Tensor) -> MatchSet {
    let (n, m) = s.dims();
    if n == 0 || m == 0 {
        return MatchSet::default();
    }
    let row_best: Vec<usize> = (0..n)
        .map(|i| {
            (0..m).fold(0, |best, j| if s.get(i, j) > s.get(i, best) { j } else { best })
        })
        .collect();
    let col_best: Vec<usize> = (0..m)
        .map(|j| {
            (0..n).fold(0, |best, i| if s.get(i, j) > s.get(best, j) { i } else { best })
        })
        .collect();
    MatchSet::new(
        (0..n)
            .filter(|&i| col_best[row_best[i]] == i)
            .map(|i| Match::new(i, row_best[i], s.get(i, row_best[i])))
            .collect(),
    )
}

/// Learnable parameters of the local matching stage.
#[derive(Clone, Debug)]
pub struct LocalMatchingParams {
    pub init: GnnParams,
    pub cross: QkvParams,
    pub cluster: Vec<QkvParams>,
    pub dustbin: ParamId,
}

impl LocalMatchingParams {
    pub fn new(store: &mut ParamStore, init: &mut Init, width: usize, rounds: usize) -> Self {
        Self {
            init: GnnParams::new(store, init, "local.init", width),
            cross: QkvParams::new(store, init, "local.cross", width),
            cluster: (0..rounds.max(1))
                .map(|r| QkvParams::new(store, init, &format!("local.cluster{r}"), width))
                .collect(),
            dustbin: store.add("local.dustbin", Tensor::scalar(DEFAULT_DUSTBIN)),
        }
    }
}
