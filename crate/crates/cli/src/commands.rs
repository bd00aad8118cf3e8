//! Argument parsing and the four subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gmatch_core::dataio::{load_scene, load_weights, save_scene, save_weights, write_atomic, WeightsFile};
use gmatch_core::evaluation::{localize_and_score, EvalReport, QueryResult};
use gmatch_core::matches::MatchSet;
use gmatch_core::model::{Matcher, MatchOutput};
use gmatch_core::scene::{Scene, ScenePair};
use gmatch_core::training::{loss_curve_csv, synth_scene_pair, train, SynthConfig};
use gmatch_core::{Error, Result};
use log::info;
use serde::Serialize;

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "gmatch", version, about = "Descriptor-free 2D-3D matching and camera localization")]
pub struct Cli {
    /// TOML run configuration; defaults are used for missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-scene work.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic scene files.
    Synth(SynthArgs),
    /// Train a matcher and write its weights and loss curve.
    Train(TrainArgs),
    /// Match one query image against its scene points.
    Match(MatchArgs),
    /// Match, estimate poses and write evaluation reports.
    Localize(LocalizeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub outlier_ratio: Option<f64>,
    #[arg(long)]
    pub num_points: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct ModelFlags {
    /// Inlier probability threshold of the rejection head.
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub no_color: bool,
    #[arg(long)]
    pub no_global: bool,
    #[arg(long)]
    pub no_angular: bool,
    #[arg(long)]
    pub no_cluster_attn: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Scene directory; synthetic scenes from the config are used when omitted.
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    /// Output weights file.
    #[arg(long)]
    pub weights: PathBuf,
    /// Loss curve CSV; defaults to the weights path with a `.loss.csv` extension.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Scene file.
    #[arg(long)]
    pub scene: PathBuf,
    /// Query image index within the scene.
    #[arg(long, default_value_t = 0)]
    pub image: usize,
    /// Output JSON; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    /// Trained weights; required unless ground-truth matches are used.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Scene file or directory of scene files.
    #[arg(long)]
    pub scene: PathBuf,
    /// Output directory for poses and reports.
    #[arg(long)]
    pub out: PathBuf,
    /// Localize from ground-truth matches (oracle bound).
    #[arg(long)]
    pub use_gt_matches: bool,
    #[arg(long)]
    pub ransac_threshold_px: Option<f64>,
    #[arg(long)]
    pub ransac_iters: Option<usize>,
    #[command(flatten)]
    pub model: ModelFlags,
}

impl ModelFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let m = &mut cfg.model;
        if let Some(t) = self.theta {
            m.theta = t;
        }
        m.use_color &= !self.no_color;
        m.use_global &= !self.no_global;
        m.use_angular &= !self.no_angular;
        m.use_cluster_attn &= !self.no_cluster_attn;
    }
}

impl Cli {
    /// Loads the configuration file and applies command-line overrides.
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.model.seed = s;
            cfg.synth.seed = s;
            cfg.train.seed = s;
            cfg.eval.ransac.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        match &self.command {
            Command::Synth(a) => {
                if let Some(c) = a.count {
                    cfg.num_scenes = c;
                }
                if let Some(r) = a.outlier_ratio {
                    cfg.synth.outlier_ratio = r;
                }
                if let Some(n) = a.num_points {
                    cfg.synth.num_points = n;
                }
            }
            Command::Train(a) => {
                if let Some(e) = a.epochs {
                    cfg.train.epochs = e;
                }
                if let Some(lr) = a.lr {
                    cfg.train.lr = lr;
                }
                a.model.apply(&mut cfg);
            }
            Command::Match(a) => a.model.apply(&mut cfg),
            Command::Localize(a) => {
                if let Some(t) = a.ransac_threshold_px {
                    cfg.eval.ransac.threshold_px = t;
                }
                if let Some(i) = a.ransac_iters {
                    cfg.eval.ransac.max_iterations = i;
                }
                a.model.apply(&mut cfg);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.resolve_config()?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(&cfg, &a.out).map(|_| ()),
        Command::Train(a) => {
            let loss_csv = a.loss_csv.clone().unwrap_or_else(|| a.weights.with_extension("loss.csv"));
            cmd_train(&cfg, a.scenes.as_deref(), &a.weights, &loss_csv)
        }
        Command::Match(a) => {
            let json = cmd_match(&cfg, &a.weights, &a.scene, a.image)?;
            match &a.out {
                Some(p) => write_atomic(p, json.as_bytes()),
                None => {
                    print!("{json}");
                    Ok(())
                }
            }
        }
        Command::Localize(a) => {
            cmd_localize(&cfg, a.weights.as_deref(), &a.scene, &a.out, a.use_gt_matches).map(|_| ())
        }
    }
}

/// Writes `scene_XXXX.json` files, one query/reference pair each. Returns the paths.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let seeds: Vec<u64> = (0..cfg.num_scenes as u64).map(|i| cfg.synth.seed.wrapping_add(i)).collect();
    let pairs = parallel_map(&seeds, cfg.workers, |&seed| {
        synth_scene_pair(&SynthConfig { seed, ..cfg.synth })
    })?;
    let mut paths = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let path = out.join(format!("scene_{i:04}.json"));
        save_scene(&Scene::from_pair(pair), &path)?;
        paths.push(path);
    }
    info!("wrote {} scenes to {}", paths.len(), out.display());
    Ok(paths)
}

/// A query image drawn from a scene file.
#[derive(Clone, Debug)]
pub struct NamedPair {
    pub id: String,
    pub pair: ScenePair,
}

fn scene_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Input(format!("no scene files in {}", path.display())));
    }
    Ok(files)
}

/// Loads every query image of every scene under `path`, sorted by id.
pub fn load_pairs(path: &Path, max_keypoints: usize) -> Result<Vec<NamedPair>> {
    let mut out = Vec::new();
    for file in scene_files(path)? {
        let scene = load_scene(&file)?;
        let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for i in 0..scene.images.len() {
            let pair = scene.pair(i)?;
            check_size(&pair, max_keypoints, &file)?;
            let id = if scene.images.len() == 1 {
                stem.clone()
            } else {
                format!("{stem}:{i}")
            };
            out.push(NamedPair { id, pair });
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

fn check_size(pair: &ScenePair, max: usize, file: &Path) -> Result<()> {
    let (n, m) = (pair.keypoints.len(), pair.points.len());
    if n > max || m > max {
        return Err(Error::Input(format!(
            "{}: {n} keypoints / {m} points exceed max_keypoints = {max}",
            file.display()
        )));
    }
    Ok(())
}

fn check_parent(path: &Path) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("output directory {} does not exist", parent.display()),
        )));
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, scenes: Option<&Path>, weights: &Path, loss_csv: &Path) -> Result<()> {
    check_parent(weights)?;
    check_parent(loss_csv)?;
    let pairs: Vec<ScenePair> = match scenes {
        Some(dir) => load_pairs(dir, cfg.max_keypoints)?.into_iter().map(|p| p.pair).collect(),
        None => {
            let seeds: Vec<u64> = (0..cfg.num_scenes as u64).map(|i| cfg.synth.seed.wrapping_add(i)).collect();
            parallel_map(&seeds, cfg.workers, |&seed| {
                synth_scene_pair(&SynthConfig { seed, ..cfg.synth })
            })?
        }
    };
    let mut matcher = Matcher::new(cfg.model)?;
    let curve = train(&mut matcher, &pairs, &cfg.train, &cfg.eval.gt)?;
    save_weights(&WeightsFile::from_store(&matcher.store, &cfg.model), weights)?;
    write_atomic(loss_csv, loss_curve_csv(&curve).as_bytes())?;
    Ok(())
}

/// Builds a matcher from the runtime config and loads `weights` into it.
pub fn load_matcher(cfg: &RunConfig, weights: &Path) -> Result<Matcher> {
    let file = load_weights(weights)?;
    let mut matcher = Matcher::new(cfg.model)?;
    file.apply(&mut matcher.store, &cfg.model)?;
    Ok(matcher)
}

#[derive(Serialize)]
struct ScoreSummary {
    rows: usize,
    cols: usize,
    min: f64,
    max: f64,
    mean: f64,
}

#[derive(Serialize)]
struct MatchReport<'a> {
    scene: String,
    num_keypoints: usize,
    num_points: usize,
    m_init: &'a MatchSet,
    m_final: &'a MatchSet,
    probabilities: &'a [f64],
    scores: ScoreSummary,
}

fn match_json(id: String, pair: &ScenePair, out: &MatchOutput) -> Result<String> {
    let s = out.scores.data();
    let summary = ScoreSummary {
        rows: out.scores.rows(),
        cols: out.scores.cols(),
        min: s.iter().copied().fold(f64::INFINITY, f64::min),
        max: s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean: s.iter().sum::<f64>() / s.len().max(1) as f64,
    };
    let report = MatchReport {
        scene: id,
        num_keypoints: pair.keypoints.len(),
        num_points: pair.points.len(),
        m_init: &out.m_init,
        m_final: &out.m_final,
        probabilities: &out.probabilities,
        scores: summary,
    };
    let mut text = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

/// Returns the match report for one query image as JSON text.
pub fn cmd_match(cfg: &RunConfig, weights: &Path, scene: &Path, image: usize) -> Result<String> {
    let matcher = load_matcher(cfg, weights)?;
    let pair = load_scene(scene)?.pair(image)?;
    check_size(&pair, cfg.max_keypoints, scene)?;
    let out = matcher.match_pair(&pair)?;
    let stem = scene.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match_json(format!("{stem}:{image}"), &pair, &out)
}

#[derive(Debug, Clone, Serialize)]
pub struct PoseRecord {
    pub scene: String,
    pub success: bool,
    /// Row-major world-to-camera rotation.
    pub rotation: Option<[f64; 9]>,
    pub translation: Option<[f64; 3]>,
    pub rms_px: Option<f64>,
    pub inliers: Vec<(usize, usize)>,
}

/// Localizes every query under `scene` and writes `poses.json`, `report.json`,
/// `report.csv` and `queries.csv` into `out`.
pub fn cmd_localize(
    cfg: &RunConfig,
    weights: Option<&Path>,
    scene: &Path,
    out: &Path,
    use_gt: bool,
) -> Result<EvalReport> {
    let matcher = match (use_gt, weights) {
        (true, _) => None,
        (false, Some(w)) => Some(load_matcher(cfg, w)?),
        (false, None) => return Err(Error::Config("localize needs --weights or --use-gt-matches".into())),
    };
    let pairs = load_pairs(scene, cfg.max_keypoints)?;
    fs::create_dir_all(out)?;
    let results = parallel_map(&pairs, cfg.workers, |np| -> Result<(QueryResult, PoseRecord)> {
        let matches = match &matcher {
            None => np.pair.ground_truth(&cfg.eval.gt)?,
            Some(m) => m.match_pair(&np.pair)?.m_final,
        };
        let (q, est) = localize_and_score(&np.id, &np.pair, &matches, &cfg.eval.ransac)?;
        let record = PoseRecord {
            scene: np.id.clone(),
            success: q.success,
            rotation: est.as_ref().map(|e| {
                let r = e.pose.rotation;
                [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]]
            }),
            translation: est.as_ref().map(|e| e.pose.translation.into()),
            rms_px: est.as_ref().map(|e| e.rms_px).filter(|v| v.is_finite()),
            inliers: est.map(|e| e.inliers).unwrap_or_default(),
        };
        Ok((q, record))
    })?;
    let (queries, poses): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let report = EvalReport::from_queries(queries)?;
    let method = if use_gt { "oracle" } else { "predicted" };
    let mut poses_json = serde_json::to_string_pretty(&poses).map_err(|e| Error::Format(e.to_string()))?;
    poses_json.push('\n');
    let mut report_json = report.to_json()?;
    report_json.push('\n');
    write_atomic(&out.join("poses.json"), poses_json.as_bytes())?;
    write_atomic(&out.join("report.json"), report_json.as_bytes())?;
    write_atomic(&out.join("report.csv"), report.to_csv(method).as_bytes())?;
    write_atomic(&out.join("queries.csv"), report.queries_csv().as_bytes())?;
    info!(
        "localized {} queries: auc@1/5/10 = {:.2}/{:.2}/{:.2}",
        report.queries.len(),
        report.auc[0],
        report.auc[1],
        report.auc[2]
    );
    Ok(report)
}

/// Maps `f` over `items` on at most `workers` threads, keeping input order.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let mut slots: Vec<Option<Result<R>>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                s.spawn(move || {
                    (w..items.len())
                        .step_by(workers)
                        .map(|i| (i, f(&items[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker thread panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every slot is filled")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order_and_errors() {
        let items: Vec<u32> = (0..37).collect();
        for w in [1, 2, 5, 64] {
            let out = parallel_map(&items, w, |&x| Ok(x * 2)).unwrap();
            assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        }
        let err = parallel_map(&items, 3, |&x| if x == 20 { Err(Error::Input("x".into())) } else { Ok(x) });
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn flags_override_config() {
        let cli = Cli::try_parse_from([
            "gmatch", "--seed", "9", "localize", "--scene", "s", "--out", "o", "--no-color", "--theta", "0.7",
            "--ransac-threshold-px", "3",
        ])
        .unwrap();
        let cfg = cli.resolve_config().unwrap();
        assert!(!cfg.model.use_color && cfg.model.use_global);
        assert_eq!((cfg.model.theta, cfg.eval.ransac.threshold_px), (0.7, 3.0));
        assert_eq!((cfg.model.seed, cfg.synth.seed, cfg.eval.ransac.seed), (9, 9, 9));
    }

    #[test]
    fn invalid_overrides_are_config_errors() {
        let cli = Cli::try_parse_from(["gmatch", "synth", "--out", "x", "--outlier-ratio", "1.2"]).unwrap();
        assert!(matches!(cli.resolve_config(), Err(Error::Config(_))));
        let cli = Cli::try_parse_from(["gmatch", "match", "--weights", "w", "--scene", "s", "--theta", "2"]).unwrap();
        assert!(matches!(cli.resolve_config(), Err(Error::Config(_))));
    }
}
