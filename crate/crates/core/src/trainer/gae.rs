use super::TrainerError;

/// Generalized advantage estimates for one episode. `values` carries one
/// extra trailing entry: the bootstrap value of the state after the last
/// reward (0 for a terminal state).
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), TrainerError> {
    if values.len() != rewards.len() + 1 {
        return Err(TrainerError::LengthMismatch {
            what: "values",
            expected: rewards.len() + 1,
            got: values.len(),
        });
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}

/// One-step TD residuals `r_t + gamma * v_{t+1} - v_t`.
pub fn td_residuals(rewards: &[f64], values: &[f64], gamma: f64) -> Result<Vec<f64>, TrainerError> {
    if values.len() != rewards.len() + 1 {
        return Err(TrainerError::LengthMismatch {
            what: "values",
            expected: rewards.len() + 1,
            got: values.len(),
        });
    }
    Ok((0..rewards.len())
        .map(|t| rewards[t] + gamma * values[t + 1] - values[t])
        .collect())
}
