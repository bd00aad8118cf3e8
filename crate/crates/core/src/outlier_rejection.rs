//! Pairwise inlier classifier applied to the initial matches.

use crate::diff::{Tape, Var, DEFAULT_LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::matches::{Match, MatchSet};
use crate::nn::{Bound, Init, Linear, ParamStore};

pub const DEFAULT_THETA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RejectionConfig {
    pub theta: f64,
}

impl Default for RejectionConfig {
    fn default() -> Self {
        Self {
            theta: DEFAULT_THETA,
        }
    }
}

impl RejectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::Config(format!("theta must lie in (0,1), got {}", self.theta)));
        }
        Ok(())
    }
}

/// MLP `pair (2w + extra) → w → w/2 → 1` on concatenated pair features and
/// `extra` per-match cue columns.
#[derive(Clone, Debug)]
pub struct RejectionParams {
    pub layers: [Linear; 3],
    pub extra: usize,
}

impl RejectionParams {
    /// `side_width` is the width of one side's feature rows.
    pub fn new(store: &mut ParamStore, init: &mut Init, side_width: usize, extra: usize) -> Self {
        let w = side_width;
        Self {
            extra,
            layers: [
                Linear::new(store, init, "reject.fc0", 2 * w + extra, w),
                Linear::new(store, init, "reject.fc1", w, (w / 2).max(1)),
                Linear::new(store, init, "reject.fc2", (w / 2).max(1), 1),
            ],
        }
    }

    pub fn logits(&self, tape: &mut Tape, p: &Bound, pair: Var) -> Result<Var> {
        let h = self.layers[0].forward(tape, p, pair)?;
        let h = tape.leaky_relu(h, DEFAULT_LEAKY_SLOPE);
        let h = self.layers[1].forward(tape, p, h)?;
        let h = tape.leaky_relu(h, DEFAULT_LEAKY_SLOPE);
        self.layers[2].forward(tape, p, h)
    }
}

/// Result of [`classify_matches`]; `probabilities` is `|M_init|×1`, absent when
/// there are no initial matches.
#[derive(Clone, Debug)]
pub struct Classified {
    pub m_final: MatchSet,
    pub probabilities: Option<Var>,
}

pub fn pair_features(tape: &mut Tape, m_init: &MatchSet, fp: Var, fq: Var) -> Result<Var> {
    let (n, m) = (tape.value(fp).rows(), tape.value(fq).rows());
    for pair in m_init {
        if pair.query >= n || pair.point >= m {
            return Err(Error::Input(format!(
                "match ({}, {}) out of range for {n} keypoints and {m} points",
                pair.query, pair.point
            )));
        }
    }
    let qi: Vec<usize> = m_init.iter().map(|p| p.query).collect();
    let pi: Vec<usize> = m_init.iter().map(|p| p.point).collect();
    let a = tape.gather_rows(fp, &qi)?;
    let b = tape.gather_rows(fq, &pi)?;
    tape.concat_cols(&[a, b])
}

/// Scores every initial match and keeps those with probability `≥ theta`.
/// `cues` holds `params.extra` columns per match, appended to the pair features.
#[allow(clippy::too_many_arguments)]
pub fn classify_matches(
    tape: &mut Tape,
    p: &Bound,
    params: &RejectionParams,
    m_init: &MatchSet,
    fp: Var,
    fq: Var,
    cues: Option<Var>,
    cfg: &RejectionConfig,
) -> Result<Classified> {
    cfg.validate()?;
    if m_init.is_empty() {
        return Ok(Classified {
            m_final: MatchSet::default(),
            probabilities: None,
        });
    }
    let mut pair = pair_features(tape, m_init, fp, fq)?;
    let cue_dims = cues.map(|c| tape.value(c).dims());
    match (params.extra, cues) {
        (0, None) => {}
        (e, Some(c)) if cue_dims == Some((m_init.len(), e)) => pair = tape.concat_cols(&[pair, c])?,
        (e, _) => {
            return Err(Error::Contract(format!(
                "rejection head expects {e} cue columns for {} matches, got {cue_dims:?}",
                m_init.len()
            )))
        }
    }
    let logits = params.logits(tape, p, pair)?;
    let probs = tape.sigmoid(logits);
    let values = tape.value(probs).data().to_vec();
    Ok(Classified {
        m_final: filter_by_probability(m_init, &values, cfg.theta),
        probabilities: Some(probs),
    })
}

pub fn filter_by_probability(m_init: &MatchSet, probabilities: &[f64], theta: f64) -> MatchSet {
    MatchSet::new(
        m_init
            .iter()
            .zip(probabilities)
            .filter(|(_, &p)| p >= theta)
            .map(|(m, &p)| Match::new(m.query, m.point, p))
            .collect(),
    )
}
