//! Reversible instance normalization.

/// Per-channel statistics of one input window.
#[derive(Debug, Clone, PartialEq)]
pub struct RevinState {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub eps: f64,
}

pub const REVIN_EPS: f64 = 1e-5;

/// Standardises each channel (row) to zero mean and unit variance. The
/// standard deviation is floored at `eps`, so a constant channel maps to zeros.
pub fn revin_normalize(x: &[Vec<f64>]) -> (Vec<Vec<f64>>, RevinState) {
    let eps = REVIN_EPS;
    let mut mean = Vec::with_capacity(x.len());
    let mut std = Vec::with_capacity(x.len());
    let y = x
        .iter()
        .map(|row| {
            let n = row.len().max(1) as f64;
            let constant = row.windows(2).all(|w| w[0] == w[1]);
            // a summed mean can miss a constant value by an ulp
            let m = match (constant, row.first()) {
                (true, Some(&v)) => v,
                _ => row.iter().sum::<f64>() / n,
            };
            let s = (row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n)
                .sqrt()
                .max(eps);
            mean.push(m);
            std.push(s);
            row.iter().map(|v| (v - m) / s).collect()
        })
        .collect();
    (y, RevinState { mean, std, eps })
}

pub fn revin_denormalize(y: &[Vec<f64>], state: &RevinState) -> Vec<Vec<f64>> {
    y.iter()
        .zip(state.mean.iter().zip(&state.std))
        .map(|(row, (m, s))| row.iter().map(|v| v * s + m).collect())
        .collect()
}
