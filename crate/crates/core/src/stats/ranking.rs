use serde::{Deserialize, Serialize};

use super::RidgeFit;

/// Entries per sign reported when no `k` is given.
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedFilter {
    pub filter: usize,
    pub coefficient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRanking {
    pub tap_id: String,
    pub k: usize,
    pub top_positive: Vec<RankedFilter>,
    pub top_negative: Vec<RankedFilter>,
}

impl ImportanceRanking {
    /// Rank of `filter` among the positive entries, starting at 1.
    pub fn positive_rank(&self, filter: usize) -> Option<usize> {
        self.top_positive.iter().position(|r| r.filter == filter).map(|i| i + 1)
    }
}

/// The `k` largest positive and `k` most negative coefficients, ties going
/// to the lower filter index. Zero coefficients appear in neither list.
pub fn rank_filters(tap_id: &str, coefficients: &[f64], k: usize) -> ImportanceRanking {
    let mut pos: Vec<RankedFilter> = Vec::new();
    let mut neg: Vec<RankedFilter> = Vec::new();
    for (filter, &coefficient) in coefficients.iter().enumerate() {
        let r = RankedFilter { filter, coefficient };
        if coefficient > 0.0 {
            pos.push(r);
        } else if coefficient < 0.0 {
            neg.push(r);
        }
    }
    pos.sort_by(|a, b| b.coefficient.total_cmp(&a.coefficient).then(a.filter.cmp(&b.filter)));
    neg.sort_by(|a, b| a.coefficient.total_cmp(&b.coefficient).then(a.filter.cmp(&b.filter)));
    pos.truncate(k);
    neg.truncate(k);
    ImportanceRanking {
        tap_id: tap_id.to_string(),
        k,
        top_positive: pos,
        top_negative: neg,
    }
}

pub fn rank_fit(tap_id: &str, fit: &RidgeFit, k: usize) -> ImportanceRanking {
    rank_filters(tap_id, &fit.coefficients, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_extremes() {
        let r = rank_filters("t", &[0.5, -0.2, 0.9], 1);
        assert_eq!(r.top_positive, vec![RankedFilter { filter: 2, coefficient: 0.9 }]);
        assert_eq!(r.top_negative, vec![RankedFilter { filter: 1, coefficient: -0.2 }]);
    }

    #[test]
    fn ties_and_zeros() {
        let r = rank_filters("t", &[0.4; 7], 3);
        assert_eq!(r.top_positive.iter().map(|f| f.filter).collect::<Vec<_>>(), [0, 1, 2]);
        assert!(r.top_negative.is_empty());

        let r = rank_filters("t", &[0.0, -0.0, 1.0, 0.0], 5);
        assert_eq!(r.top_positive.len(), 1);
        assert!(r.top_negative.is_empty());
        assert_eq!(r.positive_rank(2), Some(1));
    }
}
