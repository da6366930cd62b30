use crate::error::{invalid, Result};

/// Area under the ROC curve in percent: the fraction of (normal, anomalous)
/// pairs where the anomalous score is higher, ties counting one half.
pub fn auc(normal: &[f64], anomalous: &[f64]) -> Result<f64> {
    if normal.is_empty() || anomalous.is_empty() {
        return invalid(format!(
            "auc needs both classes: {} normal, {} anomalous",
            normal.len(),
            anomalous.len()
        ));
    }
    if normal.iter().chain(anomalous).any(|v| v.is_nan()) {
        return invalid("auc scores contain NaN");
    }
    let mut sorted = normal.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Twice the Mann-Whitney count keeps ties integral.
    let twice: u64 = anomalous
        .iter()
        .map(|&a| {
            let below = sorted.partition_point(|&n| n < a);
            let not_above = sorted.partition_point(|&n| n <= a);
            (2 * below + (not_above - below)) as u64
        })
        .sum();
    let pairs = 2 * normal.len() as u64 * anomalous.len() as u64;
    Ok(twice as f64 / pairs as f64 * 100.0)
}
