use serde::{Deserialize, Serialize};

/// `lambda_f * dT_f + lambda_w * dT_w`.
pub fn compute_reward(delta_t_f: f64, delta_t_w: f64, lambda_f: f64, lambda_w: f64) -> f64 {
    lambda_f * delta_t_f + lambda_w * delta_t_w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletedVehicle {
    pub id: u64,
    pub spawn_time: u64,
    pub finish_time: u64,
    /// Seconds spent at or below the stopped threshold.
    pub wait_time: f64,
    pub ideal_travel_time: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub avg_travel_time: f64,
    pub throughput: f64,
    pub avg_wait_time: f64,
    pub avg_delay: f64,
    pub episode_return: f64,
    /// No vehicle completed its route; the averages are reported as 0.
    pub degenerate: bool,
}

impl EpisodeMetrics {
    pub fn from_completed(done: &[CompletedVehicle], dt: f64, episode_return: f64) -> Self {
        if done.is_empty() {
            return Self {
                episode_return,
                degenerate: true,
                ..Self::default()
            };
        }
        let n = done.len() as f64;
        let travel = |c: &CompletedVehicle| (c.finish_time - c.spawn_time) as f64 * dt;
        Self {
            avg_travel_time: done.iter().map(travel).sum::<f64>() / n,
            throughput: n,
            avg_wait_time: done.iter().map(|c| c.wait_time).sum::<f64>() / n,
            avg_delay: done
                .iter()
                .map(|c| travel(c) - c.ideal_travel_time)
                .sum::<f64>()
                / n,
            episode_return,
            degenerate: false,
        }
    }
}
