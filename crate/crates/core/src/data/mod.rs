//! Interaction logs and the preprocessing that feeds training.
//!
//! A [`Dataset`] keeps its records in nondecreasing timestamp order (stable
//! with respect to input order), so every user's records are also in
//! chronological order and can be scanned front to back.

mod binning;
mod ingest;
mod labels;
mod split;
mod stage;

pub use binning::{equal_frequency_bin, Binning};
pub use ingest::{
    ingest_csv, read_csv, write_aggregates_csv, write_csv, write_pseudo_labels_csv, CsvSchema,
    TaskColumn,
};
pub use labels::{compute_pseudo_labels, compute_user_aggregates, PseudoLabel, UserAggregate, Window};
pub use split::chronological_split;
pub use stage::{assign_rule_stage, assign_stages, fit_rule_stages, median, StageLabel, StageRule, StageTaskOrder};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::DataError;

/// One (user, item, labels, timestamp) training instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    /// Epoch seconds.
    pub timestamp: u64,
    pub user_features: Vec<u32>,
    pub item_features: Vec<u32>,
    /// One entry per task, each 0 or 1.
    pub labels: Vec<u8>,
    /// Raw dwell time in seconds before binning, when the source had one.
    pub raw_staytime: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Unsplit,
    Train,
    Valid,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SplitTag::Unsplit => "unsplit",
            SplitTag::Train => "train",
            SplitTag::Valid => "valid",
            SplitTag::Test => "test",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<InteractionRecord>,
    pub task_names: Vec<String>,
    /// Cardinality of each user feature slot.
    pub user_vocab: Vec<usize>,
    /// Cardinality of each item feature slot.
    pub item_vocab: Vec<usize>,
    pub split: SplitTag,
}

impl Dataset {
    /// Validates every record against the task count and vocabularies, then
    /// sorts records by timestamp (stable).
    pub fn new(
        task_names: Vec<String>,
        user_vocab: Vec<usize>,
        item_vocab: Vec<usize>,
        mut records: Vec<InteractionRecord>,
        split: SplitTag,
    ) -> Result<Self, DataError> {
        records.sort_by_key(|r| r.timestamp);
        let ds = Dataset {
            records,
            task_names,
            user_vocab,
            item_vocab,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let k = self.task_names.len();
        let mut prev = 0u64;
        for (row, r) in self.records.iter().enumerate() {
            if r.labels.len() != k {
                return Err(DataError::Validation {
                    row,
                    msg: format!("expected {k} labels, found {}", r.labels.len()),
                });
            }
            if let Some(bad) = r.labels.iter().find(|&&y| y > 1) {
                return Err(DataError::Validation {
                    row,
                    msg: format!("label {bad} is not binary"),
                });
            }
            check_slots(row, "user", &r.user_features, &self.user_vocab)?;
            check_slots(row, "item", &r.item_features, &self.item_vocab)?;
            if r.timestamp < prev {
                return Err(DataError::Validation {
                    row,
                    msg: "records are not in timestamp order".into(),
                });
            }
            prev = r.timestamp;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_tasks(&self) -> usize {
        self.task_names.len()
    }

    /// Number of distinct users (`m`).
    pub fn num_users(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.user_id.as_str())
            .collect::<BTreeSet<_>>()
            .len()
    }

    /// Record indices per user, each list in chronological order.
    pub fn user_records(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            out.entry(r.user_id.as_str()).or_default().push(i);
        }
        out
    }

    /// A dataset with the same schema holding the records that pass `keep`.
    pub fn filter<F>(&self, mut keep: F) -> Dataset
    where
        F: FnMut(&InteractionRecord) -> bool,
    {
        Dataset {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            task_names: self.task_names.clone(),
            user_vocab: self.user_vocab.clone(),
            item_vocab: self.item_vocab.clone(),
            split: self.split,
        }
    }

    /// Empty copy that keeps the schema.
    pub fn empty_like(&self, split: SplitTag) -> Dataset {
        Dataset {
            records: Vec::new(),
            task_names: self.task_names.clone(),
            user_vocab: self.user_vocab.clone(),
            item_vocab: self.item_vocab.clone(),
            split,
        }
    }
}

fn check_slots(row: usize, kind: &str, ids: &[u32], vocab: &[usize]) -> Result<(), DataError> {
    if ids.len() != vocab.len() {
        return Err(DataError::Validation {
            row,
            msg: format!("expected {} {kind} features, found {}", vocab.len(), ids.len()),
        });
    }
    for (slot, (&id, &v)) in ids.iter().zip(vocab).enumerate() {
        if id as usize >= v {
            return Err(DataError::Validation {
                row,
                msg: format!("{kind} feature slot {slot}: index {id} >= vocab {v}"),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn record(user: &str, ts: u64, labels: &[u8]) -> InteractionRecord {
        InteractionRecord {
            user_id: user.to_string(),
            item_id: format!("i{ts}"),
            timestamp: ts,
            user_features: vec![0],
            item_features: vec![0],
            labels: labels.to_vec(),
            raw_staytime: None,
        }
    }

    pub fn dataset(records: Vec<InteractionRecord>, k: usize) -> Dataset {
        let names = (0..k).map(|i| format!("t{i}")).collect();
        Dataset::new(names, vec![1], vec![1], records, SplitTag::Unsplit).unwrap()
    }
}
