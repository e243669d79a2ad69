use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::metrics::{auc, mean_ndcg, relaimpr_auc, relaimpr_ndcg, ScoredGroup};
use crate::data::Dataset;
use crate::error::{DataError, MetricError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub arch: String,
    pub dataset: String,
    pub seed: u64,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    /// `None` when the labels are single-class.
    pub auc: Option<f64>,
    /// Mean NDCG@k over user groups with a positive; `None` if there are none.
    pub ndcg: Option<f64>,
    pub ndcg_groups: usize,
    pub ndcg_excluded: usize,
    pub relaimpr_auc: Option<f64>,
    pub relaimpr_ndcg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub meta: ReportMeta,
    pub tasks: Vec<TaskMetrics>,
}

fn undefined_as_none(r: Result<f64, MetricError>) -> Result<Option<f64>, MetricError> {
    match r {
        Ok(v) if v.is_nan() => Ok(None),
        Ok(v) => Ok(Some(v)),
        Err(MetricError::SingleClass | MetricError::Empty | MetricError::UndefinedBaseline(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Per-user groups of one task's scores, keyed and ordered by user id.
pub fn user_groups(ds: &Dataset, preds: &[Vec<f64>], task: usize) -> Vec<ScoredGroup> {
    let mut groups: BTreeMap<&str, ScoredGroup> = BTreeMap::new();
    for (r, p) in ds.records.iter().zip(preds) {
        let g = groups.entry(&r.user_id).or_insert_with(|| ScoredGroup {
            key: r.user_id.clone(),
            scores: Vec::new(),
            labels: Vec::new(),
        });
        g.scores.push(p[task]);
        g.labels.push(r.labels[task]);
    }
    groups.into_values().collect()
}

impl MetricReport {
    /// AUC and user-grouped NDCG@k for every task of `ds`.
    pub fn evaluate(ds: &Dataset, preds: &[Vec<f64>], meta: ReportMeta) -> Result<Self, MetricError> {
        if preds.len() != ds.len() {
            return Err(MetricError::LengthMismatch(preds.len(), ds.len()));
        }
        let tasks = ds
            .task_names
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let scores: Vec<f64> = preds.iter().map(|p| p[k]).collect();
                let labels: Vec<u8> = ds.records.iter().map(|r| r.labels[k]).collect();
                let a = undefined_as_none(auc(&scores, &labels))?;
                let (ndcg, groups, excluded) = if ds.is_empty() {
                    (None, 0, 0)
                } else {
                    let s = mean_ndcg(&user_groups(ds, preds, k), meta.k)?;
                    (Some(s.mean).filter(|v| !v.is_nan()), s.groups, s.excluded)
                };
                Ok(TaskMetrics {
                    task: name.clone(),
                    auc: a,
                    ndcg,
                    ndcg_groups: groups,
                    ndcg_excluded: excluded,
                    relaimpr_auc: None,
                    relaimpr_ndcg: None,
                })
            })
            .collect::<Result<_, MetricError>>()?;
        Ok(MetricReport { meta, tasks })
    }

    pub fn mean_auc(&self) -> Option<f64> {
        let v: Vec<f64> = self.tasks.iter().filter_map(|t| t.auc).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Fills the RelaImpr columns against `base`, matching tasks by name.
    /// Undefined comparisons stay `None`.
    pub fn set_baseline(&mut self, base: &MetricReport) {
        for t in &mut self.tasks {
            let b = base.tasks.iter().find(|b| b.task == t.task);
            t.relaimpr_auc = match (t.auc, b.and_then(|b| b.auc)) {
                (Some(m), Some(b)) => relaimpr_auc(m, b).ok(),
                _ => None,
            };
            t.relaimpr_ndcg = match (t.ndcg, b.and_then(|b| b.ndcg)) {
                (Some(m), Some(b)) => relaimpr_ndcg(m, b).ok(),
                _ => None,
            };
        }
    }

    pub const CSV_HEADER: [&'static str; 11] = [
        "arch",
        "dataset",
        "seed",
        "k",
        "task",
        "auc",
        "ndcg_at_k",
        "ndcg_groups",
        "ndcg_excluded",
        "relaimpr_auc",
        "relaimpr_ndcg",
    ];

    fn csv_rows(&self) -> impl Iterator<Item = [String; 11]> + '_ {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        self.tasks.iter().map(move |t| {
            [
                self.meta.arch.clone(),
                self.meta.dataset.clone(),
                self.meta.seed.to_string(),
                self.meta.k.to_string(),
                t.task.clone(),
                opt(t.auc),
                opt(t.ndcg),
                t.ndcg_groups.to_string(),
                t.ndcg_excluded.to_string(),
                opt(t.relaimpr_auc),
                opt(t.relaimpr_ndcg),
            ]
        })
    }

    /// One row per task; undefined values are empty cells.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        write_reports_csv(std::slice::from_ref(self), writer)
    }
}

pub fn write_reports_csv<W: Write>(reports: &[MetricReport], writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(MetricReport::CSV_HEADER)?;
    for r in reports {
        for row in r.csv_rows() {
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads reports written by [`write_reports_csv`], one per distinct
/// (arch, dataset, seed, k) in order of first appearance.
pub fn read_reports_csv<R: Read>(reader: R) -> Result<Vec<MetricReport>, DataError> {
    let mut r = csv::Reader::from_reader(reader);
    if r.headers()?.iter().ne(MetricReport::CSV_HEADER) {
        return Err(DataError::Invalid("not a metrics CSV".into()));
    }
    let mut out: Vec<MetricReport> = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |msg: String| DataError::Validation { row, msg };
        let num = |i: usize| -> Result<Option<f64>, DataError> {
            match &rec[i] {
                "" => Ok(None),
                s => s.parse().map(Some).map_err(|e| bad(format!("column {i}: {e}"))),
            }
        };
        let int = |i: usize| -> Result<u64, DataError> { rec[i].parse().map_err(|e| bad(format!("column {i}: {e}"))) };
        let meta = ReportMeta {
            arch: rec[0].to_string(),
            dataset: rec[1].to_string(),
            seed: int(2)?,
            k: int(3)? as usize,
        };
        let task = TaskMetrics {
            task: rec[4].to_string(),
            auc: num(5)?,
            ndcg: num(6)?,
            ndcg_groups: int(7)? as usize,
            ndcg_excluded: int(8)? as usize,
            relaimpr_auc: num(9)?,
            relaimpr_ndcg: num(10)?,
        };
        match out.iter_mut().find(|m| m.meta == meta) {
            Some(m) => m.tasks.push(task),
            None => out.push(MetricReport { meta, tasks: vec![task] }),
        }
    }
    Ok(out)
}

type Getter<'a> = &'a dyn Fn(&TaskMetrics) -> Option<f64>;

/// Task × metric × arch grid with RelaImpr against `base_arch`.
///
/// Reports whose arch equals `base_arch` supply the baseline; the RelaImpr
/// rows are recomputed here rather than taken from the inputs.
pub fn render_comparison(reports: &[MetricReport], base_arch: &str) -> Result<String, MetricError> {
    let base = reports
        .iter()
        .find(|r| r.meta.arch == base_arch)
        .ok_or(MetricError::UndefinedBaseline(f64::NAN))?;
    let mut cols: Vec<MetricReport> = reports.to_vec();
    for c in &mut cols {
        c.set_baseline(base);
    }
    let k = base.meta.k;
    let width = cols.iter().map(|c| c.meta.arch.len()).max().unwrap_or(0).max(10) + 2;
    let mut s = String::new();
    let _ = writeln!(s, "dataset: {}  seed: {}  k: {k}  base: {base_arch}", base.meta.dataset, base.meta.seed);
    let fmt = |v: Option<f64>, pct: bool| match (v, pct) {
        (Some(x), true) => format!("{x:.2}%"),
        (Some(x), false) => format!("{x:.4}"),
        (None, _) => "-".to_string(),
    };
    for t in &base.tasks {
        let _ = writeln!(s);
        let _ = write!(s, "{:<16}", t.task);
        for c in &cols {
            let _ = write!(s, "{:>width$}", c.meta.arch);
        }
        let _ = writeln!(s);
        let ndcg_label = format!("NDCG@{k}");
        let rows: [(&str, Getter, bool); 4] = [
            ("AUC", &|m| m.auc, false),
            ("  RelaImpr", &|m| m.relaimpr_auc, true),
            (&ndcg_label, &|m| m.ndcg, false),
            ("  RelaImpr", &|m| m.relaimpr_ndcg, true),
        ];
        for (label, get, pct) in rows {
            let _ = write!(s, "{label:<16}");
            for c in &cols {
                let v = c.tasks.iter().find(|m| m.task == t.task).and_then(get);
                let _ = write!(s, "{:>width$}", fmt(v, pct));
            }
            let _ = writeln!(s);
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::{dataset, record};

    fn meta(arch: &str) -> ReportMeta {
        ReportMeta {
            arch: arch.into(),
            dataset: "toy".into(),
            seed: 3,
            k: 1,
        }
    }

    fn toy() -> (Dataset, Vec<Vec<f64>>) {
        let ds = dataset(
            vec![
                record("a", 1, &[1, 0]),
                record("a", 2, &[0, 0]),
                record("b", 3, &[0, 1]),
                record("b", 4, &[1, 0]),
            ],
            2,
        );
        let preds = vec![vec![0.9, 0.2], vec![0.1, 0.3], vec![0.8, 0.7], vec![0.4, 0.1]];
        (ds, preds)
    }

    #[test]
    fn evaluates_auc_and_grouped_ndcg() {
        let (ds, preds) = toy();
        let r = MetricReport::evaluate(&ds, &preds, meta("stan")).unwrap();
        // task 0: positives 0.9, 0.4 vs negatives 0.1, 0.8 -> 3 of 4 pairs
        assert_eq!(r.tasks[0].auc, Some(0.75));
        // user a ranks its positive first, user b does not
        assert_eq!(r.tasks[0].ndcg, Some(0.5));
        assert_eq!(r.tasks[1].auc, Some(1.0));
        assert_eq!((r.tasks[1].ndcg_groups, r.tasks[1].ndcg_excluded), (1, 1));
    }

    #[test]
    fn single_class_task_has_no_auc() {
        let ds = dataset(vec![record("a", 1, &[1]), record("b", 2, &[1])], 1);
        let r = MetricReport::evaluate(&ds, &[vec![0.2], vec![0.3]], meta("mmoe")).unwrap();
        assert_eq!(r.tasks[0].auc, None);
        assert_eq!(r.tasks[0].ndcg, Some(1.0));
    }

    #[test]
    fn baseline_against_itself_is_zero() {
        let (ds, preds) = toy();
        let mut r = MetricReport::evaluate(&ds, &preds, meta("stan")).unwrap();
        let base = r.clone();
        r.set_baseline(&base);
        assert_eq!(r.tasks[0].relaimpr_auc, Some(0.0));
        assert_eq!(r.tasks[0].relaimpr_ndcg, Some(0.0));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let (ds, preds) = toy();
        let a = MetricReport::evaluate(&ds, &preds, meta("stan")).unwrap();
        let mut b = MetricReport::evaluate(&ds, &[vec![0.3, 0.2], vec![0.1, 0.3], vec![0.8, 0.1], vec![0.4, 0.7]], meta("ple")).unwrap();
        b.set_baseline(&a);
        let mut buf = Vec::new();
        write_reports_csv(&[a.clone(), b.clone()], &mut buf).unwrap();
        assert_eq!(read_reports_csv(buf.as_slice()).unwrap(), vec![a, b]);
    }

    #[test]
    fn comparison_grid_lists_every_arch_and_task() {
        let (ds, preds) = toy();
        let a = MetricReport::evaluate(&ds, &preds, meta("shared_bottom")).unwrap();
        let b = MetricReport::evaluate(&ds, &preds, meta("stan")).unwrap();
        let text = render_comparison(&[a.clone(), b], "shared_bottom").unwrap();
        assert!(text.contains("stan") && text.contains("shared_bottom") && text.contains("NDCG@1"));
        assert!(text.contains("0.00%"));
        assert_eq!(text.matches("RelaImpr").count(), 2 * ds.num_tasks());
        assert!(render_comparison(&[a], "ple").is_err());
    }
}
