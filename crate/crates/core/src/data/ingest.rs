//! CSV ingestion and export.
//!
//! Feature columns holding unsigned integers are used as categorical
//! indices directly (vocab = max + 1); any other column is indexed by the
//! sorted set of its distinct strings.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{equal_frequency_bin, Dataset, InteractionRecord, PseudoLabel, SplitTag, UserAggregate};
use crate::error::DataError;

/// How one task label is read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskColumn {
    /// Integer column with values in {0, 1}.
    Binary { name: String, column: String },
    /// Nonnegative real column (e.g. dwell seconds) turned into a label by
    /// equal-frequency binning; the bin index must come out binary.
    Binned {
        name: String,
        column: String,
        bins: usize,
    },
}

impl TaskColumn {
    pub fn name(&self) -> &str {
        match self {
            TaskColumn::Binary { name, .. } | TaskColumn::Binned { name, .. } => name,
        }
    }

    fn column(&self) -> &str {
        match self {
            TaskColumn::Binary { column, .. } | TaskColumn::Binned { column, .. } => column,
        }
    }
}

/// Column mapping for [`ingest_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: String,
    pub tasks: Vec<TaskColumn>,
    pub user_features: Vec<String>,
    pub item_features: Vec<String>,
}

impl CsvSchema {
    /// The layout written by [`write_csv`]: `user_id,item_id,timestamp,uf0..,if0..,<tasks>`.
    pub fn standard<S: AsRef<str>>(task_names: &[S], num_user_slots: usize, num_item_slots: usize) -> Self {
        CsvSchema {
            user_id: "user_id".into(),
            item_id: "item_id".into(),
            timestamp: "timestamp".into(),
            tasks: task_names
                .iter()
                .map(|n| TaskColumn::Binary {
                    name: n.as_ref().to_string(),
                    column: n.as_ref().to_string(),
                })
                .collect(),
            user_features: (0..num_user_slots).map(|i| format!("uf{i}")).collect(),
            item_features: (0..num_item_slots).map(|i| format!("if{i}")).collect(),
        }
    }
}

pub fn ingest_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, schema)
}

enum RawLabel {
    Binary(u8),
    Real(f64),
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let user_col = col(&schema.user_id)?;
    let item_col = col(&schema.item_id)?;
    let ts_col = col(&schema.timestamp)?;
    let task_cols = schema
        .tasks
        .iter()
        .map(|t| col(t.column()))
        .collect::<Result<Vec<_>, _>>()?;
    let uf_cols = schema
        .user_features
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>, _>>()?;
    let if_cols = schema
        .item_features
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>, _>>()?;

    let mut users = Vec::new();
    let mut items = Vec::new();
    let mut stamps = Vec::new();
    let mut raw_labels: Vec<Vec<RawLabel>> = Vec::new();
    let mut uf_raw: Vec<Vec<String>> = vec![Vec::new(); uf_cols.len()];
    let mut if_raw: Vec<Vec<String>> = vec![Vec::new(); if_cols.len()];

    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("").trim();
        users.push(field(user_col).to_string());
        items.push(field(item_col).to_string());
        let ts = field(ts_col).parse::<u64>().map_err(|_| DataError::Validation {
            row,
            msg: format!("timestamp `{}` is not a nonnegative integer", field(ts_col)),
        })?;
        stamps.push(ts);
        let mut labels = Vec::with_capacity(task_cols.len());
        for (task, &c) in schema.tasks.iter().zip(&task_cols) {
            let s = field(c);
            labels.push(match task {
                TaskColumn::Binary { name, .. } => match s.parse::<i64>() {
                    Ok(v @ (0 | 1)) => RawLabel::Binary(v as u8),
                    _ => {
                        return Err(DataError::Validation {
                            row,
                            msg: format!("label `{s}` for task {name} is not 0 or 1"),
                        })
                    }
                },
                TaskColumn::Binned { name, .. } => match s.parse::<f64>() {
                    Ok(v) if v.is_finite() && v >= 0.0 => RawLabel::Real(v),
                    _ => {
                        return Err(DataError::Validation {
                            row,
                            msg: format!("value `{s}` for task {name} is not a nonnegative real"),
                        })
                    }
                },
            });
        }
        raw_labels.push(labels);
        for (dst, &c) in uf_raw.iter_mut().zip(&uf_cols) {
            dst.push(field(c).to_string());
        }
        for (dst, &c) in if_raw.iter_mut().zip(&if_cols) {
            dst.push(field(c).to_string());
        }
    }

    let n = users.len();
    let mut labels = vec![vec![0u8; schema.tasks.len()]; n];
    let mut raw_staytime = vec![None; n];
    let mut first_binned = true;
    for (t, task) in schema.tasks.iter().enumerate() {
        match task {
            TaskColumn::Binary { .. } => {
                for (row, l) in labels.iter_mut().enumerate() {
                    if let RawLabel::Binary(v) = raw_labels[row][t] {
                        l[t] = v;
                    }
                }
            }
            TaskColumn::Binned { name, bins, .. } => {
                if n == 0 {
                    continue;
                }
                let values: Vec<f64> = raw_labels
                    .iter()
                    .map(|r| match r[t] {
                        RawLabel::Real(v) => v,
                        RawLabel::Binary(v) => f64::from(v),
                    })
                    .collect();
                let binning = equal_frequency_bin(&values, *bins)?;
                for (row, &b) in binning.indices.iter().enumerate() {
                    if b > 1 {
                        return Err(DataError::Validation {
                            row,
                            msg: format!("task {name}: bin index {b} is not a binary label"),
                        });
                    }
                    labels[row][t] = b as u8;
                }
                if first_binned {
                    for (dst, v) in raw_staytime.iter_mut().zip(values) {
                        *dst = Some(v);
                    }
                    first_binned = false;
                }
            }
        }
    }

    let (user_ids, user_vocab) = index_columns(uf_raw);
    let (item_ids, item_vocab) = index_columns(if_raw);

    let records = (0..n)
        .map(|i| InteractionRecord {
            user_id: std::mem::take(&mut users[i]),
            item_id: std::mem::take(&mut items[i]),
            timestamp: stamps[i],
            user_features: user_ids.iter().map(|c| c[i]).collect(),
            item_features: item_ids.iter().map(|c| c[i]).collect(),
            labels: std::mem::take(&mut labels[i]),
            raw_staytime: raw_staytime[i],
        })
        .collect();
    let task_names = schema.tasks.iter().map(|t| t.name().to_string()).collect();
    Dataset::new(task_names, user_vocab, item_vocab, records, SplitTag::Unsplit)
}

/// Converts each raw column to categorical indices plus its vocab size.
fn index_columns(columns: Vec<Vec<String>>) -> (Vec<Vec<u32>>, Vec<usize>) {
    let mut ids = Vec::with_capacity(columns.len());
    let mut vocab = Vec::with_capacity(columns.len());
    for column in columns {
        let numeric: Option<Vec<u32>> = column.iter().map(|s| s.parse::<u32>().ok()).collect();
        match numeric {
            Some(v) => {
                vocab.push(v.iter().max().map_or(0, |&m| m as usize + 1));
                ids.push(v);
            }
            None => {
                let mut index: BTreeMap<&str, u32> = column.iter().map(|s| (s.as_str(), 0)).collect();
                for (i, slot) in index.values_mut().enumerate() {
                    *slot = i as u32;
                }
                vocab.push(index.len());
                ids.push(column.iter().map(|s| index[s.as_str()]).collect());
            }
        }
    }
    (ids, vocab)
}

/// Writes `ds` in the [`CsvSchema::standard`] layout.
pub fn write_csv<W: Write>(ds: &Dataset, writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["user_id".to_string(), "item_id".into(), "timestamp".into()];
    header.extend((0..ds.user_vocab.len()).map(|i| format!("uf{i}")));
    header.extend((0..ds.item_vocab.len()).map(|i| format!("if{i}")));
    header.extend(ds.task_names.iter().cloned());
    w.write_record(&header)?;
    for r in &ds.records {
        let mut row = vec![r.user_id.clone(), r.item_id.clone(), r.timestamp.to_string()];
        row.extend(r.user_features.iter().map(u32::to_string));
        row.extend(r.item_features.iter().map(u32::to_string));
        row.extend(r.labels.iter().map(u8::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `user_id,timestamp,task,value` for every record that has history.
pub fn write_pseudo_labels_csv<W: Write>(
    ds: &Dataset,
    labels: &[PseudoLabel],
    writer: W,
) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["user_id", "timestamp", "task", "value"])?;
    for (r, l) in ds.records.iter().zip(labels) {
        if !l.has_history() {
            continue;
        }
        for (task, v) in ds.task_names.iter().zip(&l.values) {
            w.write_record([&r.user_id, &r.timestamp.to_string(), task, &v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `user_id,task,value` per user and task.
pub fn write_aggregates_csv<W: Write>(
    task_names: &[String],
    aggregates: &[UserAggregate],
    writer: W,
) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["user_id", "task", "value"])?;
    for a in aggregates {
        for (task, v) in task_names.iter().zip(&a.mean_labels) {
            w.write_record([&a.user_id, task, &v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> CsvSchema {
        CsvSchema::standard(&["click"], 1, 1)
    }

    #[test]
    fn empty_file_with_header() {
        let ds = read_csv("user_id,item_id,timestamp,uf0,if0,click\n".as_bytes(), &schema()).unwrap();
        assert_eq!(ds.len(), 0);
        assert_eq!(ds.num_users(), 0);
    }

    #[test]
    fn rows_sorted_per_user() {
        let text = "user_id,item_id,timestamp,uf0,if0,click\n\
                    b,x,30,1,0,1\n\
                    a,y,20,0,2,0\n\
                    b,z,10,1,1,0\n";
        let ds = read_csv(text.as_bytes(), &schema()).unwrap();
        assert_eq!(ds.num_users(), 2);
        let b: Vec<u64> = ds.user_records()["b"].iter().map(|&i| ds.records[i].timestamp).collect();
        assert_eq!(b, vec![10, 30]);
        assert_eq!(ds.user_vocab, vec![2]);
        assert_eq!(ds.item_vocab, vec![3]);
    }

    #[test]
    fn non_binary_label_rejected() {
        let text = "user_id,item_id,timestamp,uf0,if0,click\na,x,1,0,0,2\n";
        let err = read_csv(text.as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, DataError::Validation { row: 0, .. }));
    }

    #[test]
    fn missing_column_is_schema_error() {
        let text = "user_id,item_id,uf0,if0,click\n";
        let err = read_csv(text.as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, DataError::MissingColumn(c) if c == "timestamp"));
    }

    #[test]
    fn string_features_indexed_by_sorted_value() {
        let text = "user_id,item_id,timestamp,uf0,if0,click\n\
                    a,x,1,male,red,1\n\
                    a,y,2,female,blue,0\n";
        let ds = read_csv(text.as_bytes(), &schema()).unwrap();
        assert_eq!(ds.records[0].user_features, vec![1]);
        assert_eq!(ds.records[1].user_features, vec![0]);
        assert_eq!(ds.user_vocab, vec![2]);
    }

    #[test]
    fn staytime_binned_to_binary() {
        let mut s = schema();
        s.tasks.push(TaskColumn::Binned {
            name: "staytime".into(),
            column: "stay_secs".into(),
            bins: 2,
        });
        let text = "user_id,item_id,timestamp,uf0,if0,click,stay_secs\n\
                    a,x,1,0,0,1,5.0\n\
                    a,y,2,0,0,0,1.0\n\
                    b,y,3,0,0,0,3.0\n\
                    b,x,4,0,0,1,9.0\n";
        let ds = read_csv(text.as_bytes(), &s).unwrap();
        let stay: Vec<u8> = ds.records.iter().map(|r| r.labels[1]).collect();
        assert_eq!(stay, vec![1, 0, 0, 1]);
        assert_eq!(ds.records[3].raw_staytime, Some(9.0));

        s.tasks[1] = TaskColumn::Binned {
            name: "staytime".into(),
            column: "stay_secs".into(),
            bins: 3,
        };
        assert!(matches!(read_csv(text.as_bytes(), &s), Err(DataError::Validation { .. })));
    }

    #[test]
    fn write_then_read_preserves_records() {
        let text = "user_id,item_id,timestamp,uf0,if0,click\n\
                    b,x,30,1,0,1\n\
                    a,y,20,0,2,0\n";
        let ds = read_csv(text.as_bytes(), &schema()).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &schema()).unwrap();
        assert_eq!(back, ds);
    }
}
