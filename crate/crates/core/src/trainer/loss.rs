use crate::error::TrainError;

/// Lower clamp applied to predictions before taking logs.
pub const PRED_CLAMP: f64 = 1e-7;

/// Binary cross-entropy of one prediction.
pub fn bce(pred: f64, label: u8) -> f64 {
    let p = pred.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
    if label > 0 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// `-Σ_i [y_i ln ŷ_i + (1 - y_i) ln(1 - ŷ_i)]` over a batch.
pub fn task_loss(preds: &[f64], labels: &[u8]) -> Result<f64, TrainError> {
    if preds.len() != labels.len() {
        return Err(TrainError::Config(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(preds.iter().zip(labels).map(|(&p, &y)| bce(p, y)).sum())
}

/// `Σ_k (γ^k L_t^k + L_s^k)`.
pub fn total_loss(task: &[f64], preference: &[f64], gamma: &[f64]) -> Result<f64, TrainError> {
    if task.len() != preference.len() || task.len() != gamma.len() {
        return Err(TrainError::Config(format!(
            "loss terms of lengths {}, {}, {}",
            task.len(),
            preference.len(),
            gamma.len()
        )));
    }
    Ok(task
        .iter()
        .zip(preference)
        .zip(gamma)
        .map(|((lt, ls), g)| g * lt + ls)
        .sum())
}
