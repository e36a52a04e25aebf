use super::TrainError;
use crate::tensor::Tensor;

pub const LOG_FLOOR: f64 = 1e-12;

/// Mean over the batch of `−Σ y·log(max(softmax(z), 1e-12))`.
///
/// `labels` holds one distribution per row; each must lie on the simplex
/// within 1e-6.
pub fn cross_entropy(logits: &Tensor, labels: &[Vec<f64>]) -> Result<Tensor, TrainError> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(TrainError::Argument(format!(
            "logits {:?} for {} label rows",
            logits.shape(),
            labels.len()
        )));
    }
    let c = logits.shape()[1];
    for (i, y) in labels.iter().enumerate() {
        let sum: f64 = y.iter().sum();
        if y.len() != c || y.iter().any(|&v| v < -1e-6 || !v.is_finite()) || (sum - 1.0).abs() > 1e-6 {
            return Err(TrainError::Argument(format!("label row {i} is not a distribution over {c} classes: {y:?}")));
        }
    }
    let y = Tensor::new(logits.shape(), labels.concat())?;
    let logp = logits.softmax(1)?.clamp(LOG_FLOOR, f64::INFINITY).log();
    Ok(logp.mul(&y)?.sum_all().scale(-1.0 / labels.len() as f64))
}

pub fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[class] = 1.0;
    v
}
