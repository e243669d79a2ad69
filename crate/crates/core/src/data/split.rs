use super::{Dataset, SplitTag};
use crate::error::DataError;

/// Splits by global timestamp order into train/valid/test.
///
/// Cut points are `round(n * train)` and `round(n * (train + valid))`;
/// records sharing a timestamp with the last record before a cut are pulled
/// into the earlier split, so `max(train) < min(valid)` and likewise for
/// valid/test.
pub fn chronological_split(
    ds: &Dataset,
    fractions: (f64, f64, f64),
) -> Result<(Dataset, Dataset, Dataset), DataError> {
    let (ft, fv, fs) = fractions;
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(DataError::Config(format!(
            "split fractions must be positive and sum to 1, got ({ft}, {fv}, {fs})"
        )));
    }
    let n = ds.records.len();
    let ts: Vec<u64> = ds.records.iter().map(|r| r.timestamp).collect();
    debug_assert!(ts.windows(2).all(|w| w[0] <= w[1]));

    let extend_ties = |mut cut: usize| {
        while cut > 0 && cut < n && ts[cut] == ts[cut - 1] {
            cut += 1;
        }
        cut
    };
    let c1 = extend_ties(((n as f64) * ft).round() as usize).min(n);
    let c2 = extend_ties((((n as f64) * (ft + fv)).round() as usize).max(c1)).min(n);

    for (name, len) in [("train", c1), ("valid", c2 - c1), ("test", n - c2)] {
        if len == 0 {
            return Err(DataError::Config(format!(
                "chronological split leaves the {name} split empty ({n} records)"
            )));
        }
    }

    let part = |range: std::ops::Range<usize>, tag: SplitTag| Dataset {
        records: ds.records[range].to_vec(),
        task_names: ds.task_names.clone(),
        user_vocab: ds.user_vocab.clone(),
        item_vocab: ds.item_vocab.clone(),
        split: tag,
    };
    Ok((
        part(0..c1, SplitTag::Train),
        part(c1..c2, SplitTag::Valid),
        part(c2..n, SplitTag::Test),
    ))
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    fn stamps(ds: &Dataset) -> Vec<u64> {
        ds.records.iter().map(|r| r.timestamp).collect()
    }

    #[test]
    fn exact_division() {
        let ds = dataset((0..10).map(|t| record("u", t, &[0])).collect(), 1);
        let (a, b, c) = chronological_split(&ds, (0.6, 0.2, 0.2)).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (6, 2, 2));
        assert_eq!(a.split, SplitTag::Train);
        assert_eq!(c.split, SplitTag::Test);
    }

    #[test]
    fn five_records_enumerated() {
        let ds = dataset((1..=5).map(|t| record("u", t, &[0])).collect(), 1);
        let (a, b, c) = chronological_split(&ds, (0.4, 0.2, 0.4)).unwrap();
        assert_eq!(stamps(&a), vec![1, 2]);
        assert_eq!(stamps(&b), vec![3]);
        assert_eq!(stamps(&c), vec![4, 5]);
    }

    #[test]
    fn identical_timestamps_leave_valid_empty() {
        let ds = dataset((0..10).map(|_| record("u", 7, &[0])).collect(), 1);
        let err = chronological_split(&ds, (0.6, 0.2, 0.2)).unwrap_err();
        assert!(matches!(err, DataError::Config(msg) if msg.contains("valid")));
    }

    #[test]
    fn boundary_ties_go_to_earlier_split() {
        let ts = [1, 2, 3, 3, 3, 4, 5, 6, 7, 8];
        let ds = dataset(ts.iter().map(|&t| record("u", t, &[0])).collect(), 1);
        let (a, b, _) = chronological_split(&ds, (0.3, 0.3, 0.4)).unwrap();
        assert_eq!(stamps(&a), vec![1, 2, 3, 3, 3]);
        assert_eq!(stamps(&b), vec![4]);
    }

    #[test]
    fn rejects_bad_fractions() {
        let ds = dataset((0..10).map(|t| record("u", t, &[0])).collect(), 1);
        assert!(chronological_split(&ds, (0.5, 0.2, 0.2)).is_err());
        assert!(chronological_split(&ds, (0.8, 0.0, 0.2)).is_err());
    }

    proptest! {
        #[test]
        fn partition_and_order(ts in proptest::collection::vec(0u64..40, 3..120)) {
            let ds = dataset(
                ts.iter().enumerate().map(|(i, &t)| record(&format!("u{}", i % 5), t, &[0])).collect(),
                1,
            );
            if let Ok((a, b, c)) = chronological_split(&ds, (0.7, 0.15, 0.15)) {
                prop_assert_eq!(a.len() + b.len() + c.len(), ds.len());
                let mut joined: Vec<_> = a.records.clone();
                joined.extend(b.records.clone());
                joined.extend(c.records.clone());
                prop_assert_eq!(&joined, &ds.records);
                prop_assert!(a.records.last().unwrap().timestamp < b.records[0].timestamp);
                prop_assert!(b.records.last().unwrap().timestamp < c.records[0].timestamp);
            }
        }
    }
}
