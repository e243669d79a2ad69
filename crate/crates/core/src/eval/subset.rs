use std::io::Write;

use super::report::{MetricReport, ReportMeta};
use crate::data::{Dataset, StageLabel};
use crate::error::{DataError, TrainError};
use crate::trainer::{predict_dataset, train, RuleStages, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq)]
pub struct StageSubsetRow {
    pub stage: StageLabel,
    pub train_records: usize,
    pub test_records: usize,
    /// Model trained on this stage's users only.
    pub subset: MetricReport,
    /// Full-data model scored on the same test records.
    pub full: MetricReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSubsetReport {
    pub train_records: usize,
    pub test_records: usize,
    pub full: MetricReport,
    pub stages: Vec<StageSubsetRow>,
    pub skipped: Vec<StageLabel>,
}

fn score(outcome: &TrainOutcome, ds: &Dataset, meta: ReportMeta) -> Result<MetricReport, TrainError> {
    let preds = predict_dataset(&outcome.model, ds, outcome.stages.as_ref())?;
    Ok(MetricReport::evaluate(ds, &preds, meta)?)
}

/// Trains one model per rule stage on that stage's users and compares its
/// in-stage test metrics with a model trained on all users.
///
/// Stages are fitted on the training split; validation and test users
/// without training history count as `New`. Stages with no training or no
/// test records are skipped with a warning.
pub fn stage_subset_eval(
    train_ds: &Dataset,
    valid: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    dataset: &str,
    k: usize,
) -> Result<StageSubsetReport, TrainError> {
    let stages = RuleStages::fit(train_ds)?;
    let meta = ReportMeta {
        arch: cfg.arch.to_string(),
        dataset: dataset.to_string(),
        seed: cfg.seed,
        k,
    };
    let full_model = train(train_ds, valid, cfg.clone())?;
    let full = score(&full_model, test, meta.clone())?;

    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for stage in StageLabel::ALL {
        let of = |ds: &Dataset| ds.filter(|r| stages.stage_of(&r.user_id) == stage);
        let (tr, va, te) = (of(train_ds), of(valid), of(test));
        if tr.is_empty() || te.is_empty() {
            log::warn!(
                "stage {stage}: {} training and {} test records, skipped",
                tr.len(),
                te.len()
            );
            skipped.push(stage);
            continue;
        }
        let model = train(&tr, &va, cfg.clone())?;
        rows.push(StageSubsetRow {
            stage,
            train_records: tr.len(),
            test_records: te.len(),
            subset: score(&model, &te, meta.clone())?,
            full: score(&full_model, &te, meta.clone())?,
        });
    }
    Ok(StageSubsetReport {
        train_records: train_ds.len(),
        test_records: test.len(),
        full,
        stages: rows,
        skipped,
    })
}

impl StageSubsetReport {
    /// Columns `stage,model,train_records,test_records,task,auc,ndcg_at_k`;
    /// the first rows (`stage` = `all`) hold the full model on the whole
    /// test split.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["stage", "model", "train_records", "test_records", "task", "auc", "ndcg_at_k"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut emit = |stage: &str, model: &str, ntr: usize, nte: usize, r: &MetricReport| -> csv::Result<()> {
            for t in &r.tasks {
                w.write_record([
                    stage,
                    model,
                    &ntr.to_string(),
                    &nte.to_string(),
                    &t.task,
                    &opt(t.auc),
                    &opt(t.ndcg),
                ])?;
            }
            Ok(())
        };
        emit("all", "full", self.train_records, self.test_records, &self.full)?;
        for row in &self.stages {
            emit(row.stage.name(), "subset", row.train_records, row.test_records, &row.subset)?;
            emit(row.stage.name(), "full", self.train_records, row.test_records, &row.full)?;
        }
        w.flush()?;
        Ok(())
    }
}
