use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{compute_user_aggregates, Dataset, UserAggregate};
use crate::error::DataError;

/// Lifecycle stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageLabel {
    New,
    Wander,
    Stick,
    Loyal,
}

impl StageLabel {
    pub const ALL: [StageLabel; 4] = [
        StageLabel::New,
        StageLabel::Wander,
        StageLabel::Stick,
        StageLabel::Loyal,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            StageLabel::New => "new",
            StageLabel::Wander => "wander",
            StageLabel::Stick => "stick",
            StageLabel::Loyal => "loyal",
        }
    }
}

impl fmt::Display for StageLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageLabel {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| DataError::Invalid(format!("unknown stage `{s}`")))
    }
}

/// Which task index carries CTR, staytime and CVR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTaskOrder {
    pub ctr: usize,
    pub staytime: usize,
    pub cvr: usize,
}

impl StageTaskOrder {
    /// Explicit indices into a `num_tasks`-long label vector.
    pub fn new(num_tasks: usize, ctr: usize, staytime: usize, cvr: usize) -> Result<Self, DataError> {
        if num_tasks < 3 {
            return Err(DataError::Config(format!(
                "rule stages need at least 3 tasks, dataset has {num_tasks}"
            )));
        }
        let idx = [ctr, staytime, cvr];
        if idx.iter().any(|&i| i >= num_tasks) || ctr == staytime || ctr == cvr || staytime == cvr {
            return Err(DataError::Config(format!(
                "invalid stage task order {idx:?} for {num_tasks} tasks"
            )));
        }
        Ok(StageTaskOrder { ctr, staytime, cvr })
    }

    /// Tasks 0, 1, 2 taken as (CTR, staytime, CVR).
    pub fn positional(num_tasks: usize) -> Result<Self, DataError> {
        Self::new(num_tasks, 0, 1, 2)
    }

    /// Looks the three tasks up by name (`ctr`, `staytime`/`stay`, `cvr`).
    pub fn from_task_names<S: AsRef<str>>(names: &[S]) -> Result<Self, DataError> {
        let find = |wanted: &[&str]| {
            names
                .iter()
                .position(|n| wanted.iter().any(|w| n.as_ref().eq_ignore_ascii_case(w)))
        };
        match (find(&["ctr"]), find(&["staytime", "stay"]), find(&["cvr"])) {
            (Some(a), Some(b), Some(c)) => Self::new(names.len(), a, b, c),
            _ => Err(DataError::Config(
                "task ordering unconfigured: need tasks named ctr, staytime and cvr".into(),
            )),
        }
    }

    fn project(&self, means: &[f64]) -> Result<[f64; 3], DataError> {
        let hi = self.ctr.max(self.staytime).max(self.cvr);
        if means.len() <= hi {
            return Err(DataError::Config(format!(
                "aggregate has {} tasks, stage order needs index {hi}",
                means.len()
            )));
        }
        Ok([means[self.ctr], means[self.staytime], means[self.cvr]])
    }
}

/// The CTR → staytime → CVR cascade.
pub fn assign_rule_stage(
    agg: &UserAggregate,
    medians: &[f64; 3],
    order: &StageTaskOrder,
) -> Result<StageLabel, DataError> {
    let [ctr, stay, cvr] = order.project(&agg.mean_labels)?;
    Ok(if ctr < medians[0] {
        StageLabel::New
    } else if stay < medians[1] {
        StageLabel::Wander
    } else if cvr < medians[2] {
        StageLabel::Stick
    } else {
        StageLabel::Loyal
    })
}

/// Median with the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Medians fitted on a set of (training) aggregates, ready to classify users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRule {
    pub order: StageTaskOrder,
    pub medians: [f64; 3],
}

impl StageRule {
    pub fn fit(aggregates: &[UserAggregate], order: StageTaskOrder) -> Result<Self, DataError> {
        if aggregates.is_empty() {
            return Err(DataError::Invalid("cannot fit stage medians on no users".into()));
        }
        let projected = aggregates
            .iter()
            .map(|a| order.project(&a.mean_labels))
            .collect::<Result<Vec<_>, _>>()?;
        let mut medians = [0.0; 3];
        for (j, m) in medians.iter_mut().enumerate() {
            let col: Vec<f64> = projected.iter().map(|p| p[j]).collect();
            *m = median(&col).unwrap_or(0.0);
        }
        Ok(StageRule { order, medians })
    }

    pub fn assign(&self, agg: &UserAggregate) -> Result<StageLabel, DataError> {
        assign_rule_stage(agg, &self.medians, &self.order)
    }
}

/// Stage per user id.
pub fn assign_stages(
    aggregates: &[UserAggregate],
    rule: &StageRule,
) -> Result<BTreeMap<String, StageLabel>, DataError> {
    aggregates
        .iter()
        .map(|a| Ok((a.user_id.clone(), rule.assign(a)?)))
        .collect()
}

/// Fits medians on `train`'s users and labels each of them. Tasks are looked
/// up by name (`ctr`, `staytime`, `cvr`), falling back to positions 0, 1, 2.
pub fn fit_rule_stages(train: &Dataset) -> Result<(StageRule, BTreeMap<String, StageLabel>), DataError> {
    let order = StageTaskOrder::from_task_names(&train.task_names)
        .or_else(|_| StageTaskOrder::positional(train.num_tasks()))?;
    let aggregates = compute_user_aggregates(train);
    let rule = StageRule::fit(&aggregates, order)?;
    let stages = assign_stages(&aggregates, &rule)?;
    Ok((rule, stages))
}
