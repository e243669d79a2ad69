use serde::{Deserialize, Serialize};

use super::Dataset;

const SECONDS_PER_DAY: u64 = 86_400;

/// History window used for pseudo-labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Window {
    Unlimited,
    /// Only records strictly less than this many days older than the current one.
    Days(u32),
}

impl Window {
    fn seconds(self) -> Option<u64> {
        match self {
            Window::Unlimited => None,
            Window::Days(d) => Some(u64::from(d) * SECONDS_PER_DAY),
        }
    }
}

/// Running-mean target for one record.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    /// Per-task mean of the user's earlier in-window labels; zeros when
    /// there is no history.
    pub values: Vec<f64>,
    /// Number of earlier in-window records that were averaged.
    pub history_len: usize,
}

impl PseudoLabel {
    pub fn has_history(&self) -> bool {
        self.history_len > 0
    }
}

/// Pseudo-labels aligned with `ds.records`.
///
/// For record `i` of user `u` the value for task `k` is the mean of `y^k`
/// over `u`'s records that precede `i` in chronological order and fall in
/// the window.
pub fn compute_pseudo_labels(ds: &Dataset, window: Window) -> Vec<PseudoLabel> {
    let k = ds.num_tasks();
    let span = window.seconds();
    let mut out = vec![
        PseudoLabel {
            values: vec![0.0; k],
            history_len: 0,
        };
        ds.len()
    ];

    for indices in ds.user_records().values() {
        // prefix[j][t] = positives of task t among the first j records
        let mut prefix = vec![vec![0u64; k]; indices.len() + 1];
        for (j, &ri) in indices.iter().enumerate() {
            for t in 0..k {
                prefix[j + 1][t] = prefix[j][t] + u64::from(ds.records[ri].labels[t]);
            }
        }
        let mut start = 0usize;
        for (j, &ri) in indices.iter().enumerate() {
            let now = ds.records[ri].timestamp;
            if let Some(span) = span {
                while start < j && now - ds.records[indices[start]].timestamp >= span {
                    start += 1;
                }
            }
            let count = j - start;
            if count == 0 {
                continue;
            }
            let label = &mut out[ri];
            label.history_len = count;
            for t in 0..k {
                label.values[t] = (prefix[j][t] - prefix[start][t]) as f64 / count as f64;
            }
        }
    }
    out
}

/// Per-user overall preference: mean label per task over all records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserAggregate {
    pub user_id: String,
    pub mean_labels: Vec<f64>,
    pub record_count: usize,
}

/// One aggregate per user present in `ds`, ordered by user id.
pub fn compute_user_aggregates(ds: &Dataset) -> Vec<UserAggregate> {
    let k = ds.num_tasks();
    ds.user_records()
        .into_iter()
        .map(|(user, indices)| {
            let mut sums = vec![0u64; k];
            for &i in &indices {
                for (s, &y) in sums.iter_mut().zip(&ds.records[i].labels) {
                    *s += u64::from(y);
                }
            }
            let n = indices.len();
            UserAggregate {
                user_id: user.to_string(),
                mean_labels: sums.iter().map(|&s| s as f64 / n as f64).collect(),
                record_count: n,
            }
        })
        .collect()
}
