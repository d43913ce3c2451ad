//! Removal of atypical users by the Shannon entropy of where their
//! activity happens.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::{CellIdx, UserStream};
use crate::stats::nearest_rank;

/// Probability of activity at each visited cell, ordered by cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationDistribution {
    pub cells: Vec<(CellIdx, f64)>,
}

impl LocationDistribution {
    /// Number of distinct locations.
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn probabilities(&self) -> impl Iterator<Item = f64> + '_ {
        self.cells.iter().map(|&(_, p)| p)
    }
}

pub fn location_distribution(stream: &UserStream) -> Result<LocationDistribution> {
    if stream.records.is_empty() {
        return Err(Error::EmptyStream);
    }
    let mut counts: HashMap<CellIdx, usize> = HashMap::new();
    for r in &stream.records {
        *counts.entry(r.cell).or_default() += 1;
    }
    let total = stream.records.len() as f64;
    let mut cells: Vec<(CellIdx, f64)> = counts
        .into_iter()
        .map(|(c, n)| (c, n as f64 / total))
        .collect();
    cells.sort_by_key(|&(c, _)| c);
    Ok(LocationDistribution { cells })
}

/// H = -Σ p log2 p, in bits.
pub fn shannon_entropy(dist: &LocationDistribution) -> f64 {
    // Summing in sorted order makes H depend only on the multiset of probabilities.
    let mut ps: Vec<f64> = dist.probabilities().collect();
    ps.sort_by(f64::total_cmp);
    let h: f64 = ps
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.log2())
        .sum();
    h.max(0.0)
}

/// Which side of the entropy distribution is kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EntropyKeep {
    /// Keep the low-entropy (homogeneous) users.
    #[default]
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyFilterOutcome<K> {
    pub threshold: f64,
    pub retained: Vec<(K, f64)>,
    pub dropped: Vec<(K, f64)>,
}

/// Keeps users at or below the nearest-rank `keep_percentile` of entropy
/// (or at or above the mirrored rank for [`EntropyKeep::Upper`]).
pub fn filter_by_entropy<K>(
    users: Vec<(K, f64)>,
    keep_percentile: f64,
    keep: EntropyKeep,
) -> EntropyFilterOutcome<K> {
    let mut sorted: Vec<f64> = users.iter().map(|&(_, h)| h).collect();
    let threshold = match keep {
        EntropyKeep::Lower => {
            sorted.sort_by(f64::total_cmp);
            nearest_rank(&sorted, keep_percentile)
        }
        EntropyKeep::Upper => {
            sorted.sort_by(|a, b| b.total_cmp(a));
            nearest_rank(&sorted, keep_percentile)
        }
    }
    .unwrap_or(0.0);
    let (retained, dropped) = users.into_iter().partition(|&(_, h)| match keep {
        EntropyKeep::Lower => h <= threshold,
        EntropyKeep::Upper => h >= threshold,
    });
    EntropyFilterOutcome {
        threshold,
        retained,
        dropped,
    }
}

/// Entropy of every stream, in the iteration order of `streams`.
pub fn user_entropies<'a, I>(streams: I) -> Result<Vec<(String, f64)>>
where
    I: IntoIterator<Item = &'a UserStream>,
{
    streams
        .into_iter()
        .map(|s| {
            Ok((
                s.user_id.clone(),
                shannon_entropy(&location_distribution(s)?),
            ))
        })
        .collect()
}
