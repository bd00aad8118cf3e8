use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// One 2D-3D correspondence: keypoint `query` in the image, point `point` in the cloud.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub query: usize,
    pub point: usize,
    pub confidence: f64,
}

impl Match {
    pub fn new(query: usize, point: usize, confidence: f64) -> Self {
        Self {
            query,
            point,
            confidence,
        }
    }

    pub fn pair(&self) -> (usize, usize) {
        (self.query, self.point)
    }
}

/// Ordered list of correspondences with confidences.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
}

impl MatchSet {
    pub fn new(pairs: Vec<Match>) -> Self {
        Self { pairs }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        Self {
            pairs: pairs.into_iter().map(|(n, m)| Match::new(n, m, 1.0)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Match> {
        self.pairs.iter()
    }

    pub fn index_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs.iter().map(Match::pair).collect()
    }

    pub fn contains(&self, query: usize, point: usize) -> bool {
        self.pairs.iter().any(|m| m.query == query && m.point == point)
    }

    pub fn pair_set(&self) -> HashSet<(usize, usize)> {
        self.pairs.iter().map(Match::pair).collect()
    }

    /// True when no index repeats on either side.
    pub fn is_one_to_one(&self) -> bool {
        let mut q = HashSet::new();
        let mut p = HashSet::new();
        self.pairs
            .iter()
            .all(|m| q.insert(m.query) && p.insert(m.point))
    }

    /// Canonical order: by query index, then point index.
    pub fn sorted(mut self) -> Self {
        self.pairs
            .sort_by(|a, b| a.query.cmp(&b.query).then(a.point.cmp(&b.point)));
        self
    }
}

impl<'a> IntoIterator for &'a MatchSet {
    type Item = &'a Match;
    type IntoIter = std::slice::Iter<'a, Match>;
    fn into_iter(self) -> Self::IntoIter {
        self.pairs.iter()
    }
}
