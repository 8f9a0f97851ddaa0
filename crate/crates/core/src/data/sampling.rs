use crate::error::{Error, Result};

/// Sampling distribution over language pairs with `p_k ∝ size_k^(1/T)`.
///
/// `T = 1` keeps the natural proportions; larger temperatures flatten the
/// distribution towards uniform, over-sampling low-resource pairs.
pub fn temperature_sample(sizes: &[usize], temperature: f64) -> Result<Vec<f64>> {
    if temperature.is_nan() || temperature < 1.0 {
        return Err(Error::config(format!(
            "sampling temperature must be >= 1, got {temperature}"
        )));
    }
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::config("pair sizes must be non-empty and positive"));
    }
    let weights: Vec<f64> = sizes.iter().map(|&s| (s as f64).powf(1.0 / temperature)).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}
