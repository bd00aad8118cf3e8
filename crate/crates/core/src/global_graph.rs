//! Clustered global graph: pooled cluster nodes, distance-based edge updates,
//! angular-aware attention, and the join back onto per-point features.

use nalgebra::Vector2;

use crate::cluster::{kmeans, knn, KMEANS_MAX_ITERS};
use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::BearingVector;
use crate::nn::{Bound, Init, LayerNorm, LinearNormAct, ParamStore, Projection};

pub const DEFAULT_CLUSTERS: usize = 10;
pub const DEFAULT_GRAPH_K: usize = 4;
pub const DEFAULT_SIGMA_A_DEG: f64 = 15.0;
pub const GNN_ROUNDS: usize = 2;
/// Seeded k-means runs per clustering; the lowest-inertia run is kept.
pub const KMEANS_RESTARTS: u64 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centers: Vec<Vector2<f64>>,
}

impl ClusterAssignment {
    pub fn clusters(&self) -> usize {
        self.centers.len()
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.clusters()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

/// Seeded k-means over bearing vectors. Empty clusters are dropped, so the
/// result may hold fewer than `x` clusters.
pub fn cluster_points(bearings: &[BearingVector], x: usize, seed: u64) -> Result<ClusterAssignment> {
    if x == 0 || bearings.len() < x {
        return Err(Error::Config(format!(
            "cannot form {x} clusters from {} points",
            bearings.len()
        )));
    }
    let data: Vec<f64> = bearings.iter().flat_map(|b| [b.x(), b.y()]).collect();
    let inertia = |km: &crate::cluster::KMeans| -> f64 {
        data.chunks(2)
            .zip(&km.labels)
            .map(|(p, &l)| (p[0] - km.center(l)[0]).powi(2) + (p[1] - km.center(l)[1]).powi(2))
            .sum()
    };
    let mut km = kmeans(&data, 2, x, seed, KMEANS_MAX_ITERS);
    let mut best = inertia(&km);
    for r in 1..KMEANS_RESTARTS {
        let cand = kmeans(&data, 2, x, seed.wrapping_add(r), KMEANS_MAX_ITERS);
        let e = inertia(&cand);
        if e < best {
            (km, best) = (cand, e);
        }
    }
    let centers = (0..km.clusters())
        .map(|c| Vector2::new(km.center(c)[0], km.center(c)[1]))
        .collect();
    Ok(ClusterAssignment {
        labels: km.labels,
        centers,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalNode {
    pub center: Vector2<f64>,
    pub feature: Vec<f64>,
}

/// Per-cluster mean of the rows of `features`, as an `X×d` tape node.
pub fn pool_cluster_features(tape: &mut Tape, features: Var, assignment: &ClusterAssignment) -> Result<Var> {
    let n = tape.value(features).rows();
    if assignment.labels.len() != n {
        return Err(Error::dim("pool_cluster_features", &[n], &[assignment.labels.len()]));
    }
    let x = assignment.clusters();
    let mut pool = Tensor::zeros(x, n);
    for members in assignment.members().iter().enumerate() {
        let (c, rows) = members;
        let w = 1.0 / rows.len() as f64;
        for &r in rows {
            pool.set(c, r, w);
        }
    }
    let pool = tape.leaf(pool);
    tape.matmul(pool, features)
}

/// Reads pooled node features back as plain values.
pub fn global_nodes(tape: &Tape, pooled: Var, assignment: &ClusterAssignment) -> Vec<GlobalNode> {
    let v = tape.value(pooled);
    assignment
        .centers
        .iter()
        .enumerate()
        .map(|(c, &center)| GlobalNode {
            center,
            feature: v.row_slice(c).to_vec(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalGraph {
    pub centers: Vec<Vector2<f64>>,
    /// `neighbors[x]` lists the k nearest other nodes, nearest first.
    pub neighbors: Vec<Vec<usize>>,
    pub k: usize,
}

impl GlobalGraph {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    fn sources(&self) -> Vec<usize> {
        (0..self.len()).flat_map(|x| std::iter::repeat_n(x, self.k)).collect()
    }

    fn targets(&self) -> Vec<usize> {
        self.neighbors.iter().flatten().copied().collect()
    }
}

pub fn build_global_graph(centers: &[Vector2<f64>], k: usize) -> Result<GlobalGraph> {
    if centers.len() <= k {
        return Err(Error::Config(format!(
            "global graph with {} nodes cannot have {k} neighbors per node",
            centers.len()
        )));
    }
    let data: Vec<f64> = centers.iter().flat_map(|c| [c.x, c.y]).collect();
    Ok(GlobalGraph {
        centers: centers.to_vec(),
        neighbors: knn(&data, 2, k),
        k,
    })
}

/// Edge-update rounds followed by the fusion layer.
#[derive(Clone, Debug)]
pub struct GnnParams {
    pub rounds: Vec<LinearNormAct>,
    pub fuse: LinearNormAct,
}

impl GnnParams {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, width: usize) -> Self {
        Self {
            rounds: (0..GNN_ROUNDS)
                .map(|t| LinearNormAct::new(store, init, &format!("{name}.edge{t}"), 2 * width, width))
                .collect(),
            fuse: LinearNormAct::new(store, init, &format!("{name}.fuse"), (GNN_ROUNDS + 1) * width, width),
        }
    }
}

/// One edge-convolution round: `max_y H(f_x ⊕ (f_x − f_y))` over the given edges.
/// `sources` and `targets` list the `k` edges of each node consecutively.
pub(crate) fn edge_conv(
    tape: &mut Tape,
    p: &Bound,
    layer: &LinearNormAct,
    f: Var,
    sources: &[usize],
    targets: &[usize],
    k: usize,
) -> Result<Var> {
    let fx = tape.gather_rows(f, sources)?;
    let fy = tape.gather_rows(f, targets)?;
    let diff = tape.sub(fx, fy)?;
    let edge = tape.concat_cols(&[fx, diff])?;
    let h = layer.forward(tape, p, edge)?;
    tape.group_max(h, k)
}

/// Two edge-update rounds over the graph, then fusion of the three stages.
/// A graph without edges uses self-loops.
pub fn gnn_update(tape: &mut Tape, p: &Bound, graph: &GlobalGraph, params: &GnnParams, f: Var) -> Result<Var> {
    let (sources, targets, k) = if graph.k == 0 {
        let all: Vec<usize> = (0..graph.len()).collect();
        (all.clone(), all, 1)
    } else {
        (graph.sources(), graph.targets(), graph.k)
    };
    let mut stages = vec![f];
    let mut h = f;
    for layer in &params.rounds {
        h = edge_conv(tape, p, layer, h, &sources, &targets, k)?;
        stages.push(h);
    }
    let cat = tape.concat_cols(&stages)?;
    params.fuse.forward(tape, p, cat)
}

/// Embedded triplet angles: row `(x·k + y)·k + z` holds the encoding of the
/// angle at node x between its neighbors y and z.
#[derive(Clone, Debug, PartialEq)]
pub struct AngularEmbedding {
    pub values: Tensor,
    pub nodes: usize,
    pub k: usize,
    pub sigma_a: f64,
}

/// Unsigned angle between two vectors in `[0, π]`; zero when either is zero-length.
pub fn angle_between(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    if a.norm() == 0.0 || b.norm() == 0.0 {
        return 0.0;
    }
    let cross = a.x * b.y - a.y * b.x;
    cross.abs().atan2(a.dot(b))
}

/// Interleaved sine/cosine frequency encoding of a scalar into `width` values.
pub fn sinusoidal(value: f64, width: usize) -> Vec<f64> {
    (0..width)
        .map(|j| {
            let i = (j / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * i / width as f64);
            if j % 2 == 0 {
                (value * freq).sin()
            } else {
                (value * freq).cos()
            }
        })
        .collect()
}

pub fn angular_embedding(graph: &GlobalGraph, sigma_a: f64, width: usize) -> Result<AngularEmbedding> {
    if graph.k < 2 {
        return Err(Error::Config(format!(
            "angular embedding needs at least 2 neighbors per node, got {}",
            graph.k
        )));
    }
    if !(sigma_a > 0.0 && sigma_a.is_finite()) {
        return Err(Error::Config(format!("sigma_a must be positive, got {sigma_a}")));
    }
    let k = graph.k;
    let mut data = Vec::with_capacity(graph.len() * k * k * width);
    for (x, nbrs) in graph.neighbors.iter().enumerate() {
        let cx = graph.centers[x];
        for &y in nbrs {
            for &z in nbrs {
                let a = angle_between(&(graph.centers[z] - cx), &(graph.centers[y] - cx));
                data.extend(sinusoidal(a / sigma_a, width));
            }
        }
    }
    Ok(AngularEmbedding {
        values: Tensor::matrix(graph.len() * k * k, width, data),
        nodes: graph.len(),
        k,
        sigma_a,
    })
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wa: Projection,
    pub wq: Projection,
    pub wk: Projection,
    pub wv: Projection,
    pub norm: LayerNorm,
    pub dim: usize,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, width: usize) -> Self {
        Self {
            wa: Projection::new(store, init, &format!("{name}.wa"), width, width),
            wq: Projection::new(store, init, &format!("{name}.wq"), width, width),
            wk: Projection::new(store, init, &format!("{name}.wk"), width, width),
            wv: Projection::new(store, init, &format!("{name}.wv"), width, width),
            norm: LayerNorm::new(store, &format!("{name}.norm"), width),
            dim: width,
        }
    }
}

/// `LayerNorm(f + Σ_y softmax_y(s_xy)·(f_y W^V))` with
/// `s_xy = (f_x W^Q)·(f_y W^K + max_z A_xyz W^A) / √dim` over graph edges.
/// Without an angular embedding the bias term is dropped; a graph without
/// edges attends to itself.
pub fn angular_attention(
    tape: &mut Tape,
    p: &Bound,
    graph: &GlobalGraph,
    angular: Option<&AngularEmbedding>,
    params: &AttentionParams,
    f: Var,
) -> Result<Var> {
    let (sources, targets, k) = if graph.k == 0 {
        let all: Vec<usize> = (0..graph.len()).collect();
        (all.clone(), all, 1)
    } else {
        (graph.sources(), graph.targets(), graph.k)
    };
    let x = graph.len();
    let q = params.wq.forward(tape, p, f)?;
    let key = params.wk.forward(tape, p, f)?;
    let value = params.wv.forward(tape, p, f)?;

    let qx = tape.gather_rows(q, &sources)?;
    let mut ky = tape.gather_rows(key, &targets)?;
    if let Some(a) = angular {
        if a.nodes != x || a.k != k {
            return Err(Error::dim("angular_attention", &[a.nodes, a.k], &[x, k]));
        }
        let av = tape.leaf(a.values.clone());
        let aw = params.wa.forward(tape, p, av)?;
        let bias = tape.group_max(aw, k)?;
        ky = tape.add(ky, bias)?;
    }
    let prod = tape.mul(qx, ky)?;
    let scores = tape.sum_rows(prod);
    let scores = tape.scale(scores, 1.0 / (params.dim as f64).sqrt());
    let scores = tape.reshape(scores, x, k)?;
    let weights = tape.row_softmax(scores);
    let weights = tape.reshape(weights, x * k, 1)?;
    let vy = tape.gather_rows(value, &targets)?;
    let weighted = tape.mul_col(vy, weights)?;
    let att = tape.group_sum(weighted, k)?;
    let res = tape.add(f, att)?;
    params.norm.forward(tape, p, res)
}

/// Row n becomes `local_n ⊕ fgg_{label(n)}`.
pub fn attach_global(tape: &mut Tape, local: Var, fgg: Var, assignment: &ClusterAssignment) -> Result<Var> {
    let n = tape.value(local).rows();
    if assignment.labels.len() != n {
        return Err(Error::dim("attach_global", &[n], &[assignment.labels.len()]));
    }
    let g = tape.gather_rows(fgg, &assignment.labels)?;
    tape.concat_cols(&[local, g])
}
