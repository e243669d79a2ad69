use crate::error::MetricError;

fn check(scores: &[f64], labels: &[u8]) -> Result<(), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

/// Area under the ROC curve: the share of (positive, negative) pairs ordered
/// correctly, a tie counting one half.
///
/// Pairs are counted in integer half-units, so the result is the exact
/// ratio `(2 * correct + ties) / (2 * P * N)` rounded once.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut neg_below, mut half_units) = (0u128, 0u128);
    let (mut pos_total, mut neg_total) = (0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] > 0 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        half_units += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        pos_total += pos;
        neg_total += neg;
        i = j;
    }
    if pos_total == 0 || neg_total == 0 {
        return Err(MetricError::SingleClass);
    }
    Ok(half_units as f64 / (2 * pos_total * neg_total) as f64)
}

/// Scores and binary relevance of one ranking unit (a user's test records).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredGroup {
    pub key: String,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

fn dcg(labels: impl Iterator<Item = u8>, k: usize) -> f64 {
    labels
        .take(k)
        .enumerate()
        .map(|(i, rel)| f64::from(rel.min(1)) / ((i + 2) as f64).log2())
        .sum()
}

/// NDCG@k with binary gain and `1/log2(rank + 1)` discount. Equal scores
/// keep their input order.
pub fn ndcg_at_k(scores: &[f64], labels: &[u8], k: usize) -> Result<f64, MetricError> {
    check(scores, labels)?;
    if k == 0 {
        return Err(MetricError::Empty);
    }
    if labels.iter().all(|&l| l == 0) {
        return Err(MetricError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let actual = dcg(order.iter().map(|&i| labels[i]), k);
    let mut ideal: Vec<u8> = labels.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    Ok(actual / dcg(ideal.into_iter(), k))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NdcgSummary {
    /// Mean over groups with at least one positive; NaN if there are none.
    pub mean: f64,
    pub groups: usize,
    pub excluded: usize,
}

pub fn mean_ndcg(groups: &[ScoredGroup], k: usize) -> Result<NdcgSummary, MetricError> {
    let (mut sum, mut used, mut excluded) = (0.0, 0usize, 0usize);
    for g in groups {
        match ndcg_at_k(&g.scores, &g.labels, k) {
            Ok(v) => {
                sum += v;
                used += 1;
            }
            Err(MetricError::NoPositives) => excluded += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(NdcgSummary {
        mean: if used > 0 { sum / used as f64 } else { f64::NAN },
        groups: used,
        excluded,
    })
}

/// Relative AUC improvement over `base`, in percent, measured above 0.5.
pub fn relaimpr_auc(measured: f64, base: f64) -> Result<f64, MetricError> {
    if base.is_nan() || base <= 0.5 {
        return Err(MetricError::UndefinedBaseline(base));
    }
    Ok(((measured - 0.5) / (base - 0.5) - 1.0) * 100.0)
}

/// Relative NDCG improvement over `base`, in percent.
pub fn relaimpr_ndcg(measured: f64, base: f64) -> Result<f64, MetricError> {
    if base.is_nan() || base <= 0.0 {
        return Err(MetricError::UndefinedBaseline(base));
    }
    Ok((measured / base - 1.0) * 100.0)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &o in &order[i..j] {
            ranks[o] = r;
        }
        i = j;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(s: &[f64], l: &[u8]) -> f64 {
        let (mut half, mut pairs) = (0u128, 0u128);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] == 1 && l[j] == 0 {
                    pairs += 1;
                    half += if s[i] > s[j] {
                        2
                    } else if s[i] == s[j] {
                        1
                    } else {
                        0
                    };
                }
            }
        }
        half as f64 / (2 * pairs) as f64
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auc(&[0.1, 0.2, 0.9], &[0, 0, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 5], &[0, 1, 0, 1, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.2], &[1, 1]), Err(MetricError::SingleClass));
        assert_eq!(auc(&[f64::NAN, 0.2], &[0, 1]), Err(MetricError::NonFinite));
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[0.9, 0.1], &[1, 0], 1).unwrap(), 1.0);
        let v = ndcg_at_k(&[0.9, 0.5, 0.1], &[0, 1, 1], 5).unwrap();
        let want = (1.0 / 3f64.log2() + 0.5) / (1.0 + 1.0 / 3f64.log2());
        assert!((v - want).abs() < 1e-12);
        assert!((v - 0.6934).abs() < 1e-4);
        assert_eq!(ndcg_at_k(&[0.3, 0.1, 0.7], &[1, 1, 1], 2).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&[0.3], &[0], 1), Err(MetricError::NoPositives));
    }

    #[test]
    fn equal_scores_keep_input_order() {
        assert_eq!(ndcg_at_k(&[0.5, 0.5], &[1, 0], 1).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&[0.5, 0.5], &[0, 1], 1).unwrap(), 0.0);
    }

    #[test]
    fn mean_ndcg_reports_exclusions() {
        let g = |s: Vec<f64>, l: Vec<u8>| ScoredGroup {
            key: "u".into(),
            scores: s,
            labels: l,
        };
        let sum = mean_ndcg(&[g(vec![0.9, 0.1], vec![1, 0]), g(vec![0.2], vec![0])], 1).unwrap();
        assert_eq!(sum.mean, 1.0);
        assert_eq!((sum.groups, sum.excluded), (1, 1));
    }

    #[test]
    fn relaimpr_values() {
        assert!((relaimpr_auc(0.8141, 0.7891).unwrap() - 8.648).abs() < 1e-3);
        assert!((relaimpr_auc(0.6937, 0.6635).unwrap() - 18.471).abs() < 1e-3);
        assert_eq!(relaimpr_auc(0.7, 0.7).unwrap(), 0.0);
        assert!(relaimpr_auc(0.7, 0.5).is_err());
        assert!((relaimpr_ndcg(0.66, 0.60).unwrap() - 10.0).abs() < 1e-9);
        assert_eq!(relaimpr_ndcg(0.5, 1.0).unwrap(), -50.0);
        assert_eq!(relaimpr_ndcg(0.4, 0.4).unwrap(), 0.0);
        assert!(relaimpr_ndcg(0.4, 0.0).is_err());
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 100.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        let r = spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!((r + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
    }

    proptest! {
        #[test]
        fn auc_equals_pair_count(
            data in prop::collection::vec((0u8..6, 0u8..2), 2..200)
        ) {
            let s: Vec<f64> = data.iter().map(|d| f64::from(d.0) / 5.0).collect();
            let l: Vec<u8> = data.iter().map(|d| d.1).collect();
            match auc(&s, &l) {
                Ok(v) => prop_assert_eq!(v, brute_auc(&s, &l)),
                Err(e) => prop_assert_eq!(e, MetricError::SingleClass),
            }
        }

        #[test]
        fn auc_invariant_under_monotone_transform(
            data in prop::collection::vec((-5.0f64..5.0, 0u8..2), 2..100)
        ) {
            let s: Vec<f64> = data.iter().map(|d| d.0).collect();
            let t: Vec<f64> = s.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
            let l: Vec<u8> = data.iter().map(|d| d.1).collect();
            prop_assert_eq!(auc(&s, &l).ok(), auc(&t, &l).ok());
        }

        #[test]
        fn ndcg_bounded_and_dcg_monotone_in_k(
            data in prop::collection::vec((0u8..4, 0u8..2), 1..20)
        ) {
            let s: Vec<f64> = data.iter().map(|d| f64::from(d.0)).collect();
            let l: Vec<u8> = data.iter().map(|d| d.1).collect();
            prop_assume!(l.contains(&1));
            let mut order: Vec<usize> = (0..s.len()).collect();
            order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
            let mut last = 0.0;
            for k in 1..=s.len() + 1 {
                let v = ndcg_at_k(&s, &l, k).unwrap();
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
                let d = dcg(order.iter().map(|&i| l[i]), k);
                prop_assert!(d >= last);
                last = d;
            }
        }

        #[test]
        fn ndcg_is_one_for_ideal_order(
            pos in 1usize..10, neg in 0usize..10, k in 1usize..25
        ) {
            let l: Vec<u8> = std::iter::repeat_n(1, pos).chain(std::iter::repeat_n(0, neg)).collect();
            let s: Vec<f64> = (0..l.len()).map(|i| -(i as f64)).collect();
            prop_assert_eq!(ndcg_at_k(&s, &l, k).unwrap(), 1.0);
        }
    }
}
