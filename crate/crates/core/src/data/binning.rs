use crate::error::DataError;

/// Result of [`equal_frequency_bin`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Binning {
    /// Bin index per input value, in input order.
    pub indices: Vec<usize>,
    /// Set when there were fewer distinct values than requested bins and
    /// each distinct value got its own bin instead.
    pub collapsed: bool,
}

/// Equal-frequency (quantile) binning.
///
/// The value at sorted position `r` lands in bin `floor(r * num_bins / n)`.
/// Equal values all take the bin of their first sorted occurrence, so ties
/// never straddle a boundary.
pub fn equal_frequency_bin(values: &[f64], num_bins: usize) -> Result<Binning, DataError> {
    if values.is_empty() {
        return Err(DataError::Invalid("cannot bin an empty list".into()));
    }
    if num_bins < 2 {
        return Err(DataError::Invalid(format!("num_bins must be >= 2, got {num_bins}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(DataError::Invalid("cannot bin non-finite values".into()));
    }

    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));

    let distinct = 1 + order
        .windows(2)
        .filter(|w| values[w[0]] != values[w[1]])
        .count();
    let collapsed = num_bins > distinct;
    if collapsed {
        log::warn!(
            "degenerate binning: {num_bins} bins requested but only {distinct} distinct values; \
             using one bin per distinct value"
        );
    }

    let mut indices = vec![0usize; n];
    let mut bin = 0usize;
    let mut distinct_rank = 0usize;
    for (pos, &i) in order.iter().enumerate() {
        let new_value = pos == 0 || values[order[pos - 1]] != values[i];
        if new_value {
            if pos > 0 {
                distinct_rank += 1;
            }
            bin = if collapsed {
                distinct_rank
            } else {
                pos * num_bins / n
            };
        }
        indices[i] = bin;
    }
    Ok(Binning { indices, collapsed })
}
