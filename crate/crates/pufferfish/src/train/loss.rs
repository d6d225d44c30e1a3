use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Mean softmax cross-entropy over a batch of logits, with optional label
/// smoothing: the target distribution is `(1 - eps) one_hot + eps / K`.
/// Returns the mean loss and the gradient w.r.t. the logits (already
/// divided by the batch size).
pub fn cross_entropy(
    logits: &Tensor,
    targets: &[usize],
    label_smoothing: Option<f64>,
) -> Result<(f64, Tensor)> {
    if logits.ndim() != 2 || logits.rows() != targets.len() {
        return Err(Error::Dimension(format!(
            "cross_entropy: logits {:?} vs {} targets",
            logits.shape(),
            targets.len()
        )));
    }
    let (b, k) = (logits.rows(), logits.cols());
    let eps = label_smoothing.unwrap_or(0.0);
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Argument(format!(
            "label smoothing {eps} outside [0, 1)"
        )));
    }
    let mut grad = Tensor::zeros(&[b, k]);
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(Error::Argument(format!(
                "target class {t} >= {k} at row {i}"
            )));
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        let mut loss_i = 0.0;
        for j in 0..k {
            let log_p = row[j] - log_sum;
            let q = (if j == t { 1.0 - eps } else { 0.0 }) + eps / k as f64;
            loss_i -= q * log_p;
            grad.set2(i, j, (log_p.exp() - q) / b as f64);
        }
        total += loss_i;
    }
    Ok((total / b as f64, grad))
}

pub fn accuracy(logits: &Tensor, targets: &[usize]) -> f64 {
    let mut hits = 0usize;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(j, _)| j)
            .unwrap();
        if argmax == t {
            hits += 1;
        }
    }
    hits as f64 / targets.len() as f64
}

/// exp(mean per-token cross-entropy).
pub fn perplexity(mean_token_loss: f64) -> f64 {
    mean_token_loss.exp()
}
