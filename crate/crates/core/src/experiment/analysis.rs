//! Curriculum feature trajectories, their correlations, and seed aggregation.

use std::io::Write;

use crate::context_space::{Context, ContextError, ContextSpace};
use crate::curriculum::PerfMetrics;

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumAnalysis {
    pub names: Vec<String>,
    /// One row per curriculum step, normalized to `[0, 1]` per parameter.
    pub trajectory: Vec<Vec<f64>>,
    /// Pearson correlation between feature columns.
    pub correlation: Vec<Vec<f64>>,
    /// Features that never changed; their rows and columns are all 0.
    pub constant: Vec<bool>,
}

/// Pearson correlation; `None` when either series is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let is_constant = |s: &[f64]| s.iter().all(|v| *v == s[0]);
    if x.is_empty() || is_constant(x) || is_constant(y) {
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
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn export_curriculum_analysis(
    space: &ContextSpace,
    contexts: &[Context],
) -> Result<CurriculumAnalysis, ContextError> {
    let trajectory = contexts
        .iter()
        .map(|c| space.normalize(c))
        .collect::<Result<Vec<_>, _>>()?;
    let d = space.dim();
    let column = |j: usize| trajectory.iter().map(|r| r[j]).collect::<Vec<f64>>();
    let columns: Vec<Vec<f64>> = (0..d).map(column).collect();
    let constant: Vec<bool> = columns
        .iter()
        .map(|c| c.is_empty() || c.iter().all(|v| *v == c[0]))
        .collect();
    let mut correlation = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            correlation[i][j] = if constant[i] || constant[j] {
                0.0
            } else if i == j {
                1.0
            } else {
                pearson(&columns[i], &columns[j]).unwrap_or(0.0)
            };
        }
    }
    Ok(CurriculumAnalysis {
        names: space.params().iter().map(|p| p.name.clone()).collect(),
        trajectory,
        correlation,
        constant,
    })
}

impl CurriculumAnalysis {
    /// `step,<feature...>`
    pub fn write_trajectory<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for (t, row) in self.trajectory.iter().enumerate() {
            let mut rec = vec![t.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `feature,constant,<feature...>`
    pub fn write_correlation<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["feature".to_string(), "constant".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for (i, row) in self.correlation.iter().enumerate() {
            let mut rec = vec![self.names[i].clone(), self.constant[i].to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub scope: String,
    pub metric: &'static str,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n_seeds: usize,
    pub single_seed: bool,
}

impl SummaryRow {
    pub fn formatted(&self) -> String {
        format!("{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// Mean and population std of each metric of each scope across seeds. Values
/// are summed in sorted order so the result ignores seed order.
pub fn aggregate_seeds(per_seed: &[Vec<(String, PerfMetrics)>]) -> Vec<SummaryRow> {
    let mut scopes: Vec<String> = Vec::new();
    for rows in per_seed {
        for (scope, _) in rows {
            if !scopes.contains(scope) {
                scopes.push(scope.clone());
            }
        }
    }
    let mut out = Vec::new();
    for scope in scopes {
        let samples: Vec<[f64; 5]> = per_seed
            .iter()
            .filter_map(|rows| rows.iter().find(|(s, _)| *s == scope))
            .map(|(_, m)| m.as_array())
            .collect();
        let n = samples.len();
        for (k, metric) in PerfMetrics::FIELDS.iter().enumerate() {
            let mut v: Vec<f64> = samples.iter().map(|s| s[k]).collect();
            v.sort_by(f64::total_cmp);
            let mean = v.iter().sum::<f64>() / n as f64;
            let mut dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
            dev.sort_by(f64::total_cmp);
            let std = (dev.iter().sum::<f64>() / n as f64).sqrt();
            out.push(SummaryRow {
                scope: scope.clone(),
                metric,
                mean,
                std,
                n_seeds: n,
                single_seed: n == 1,
            });
        }
    }
    out
}

/// `scope,metric,mean,std,n_seeds,single_seed,formatted`
pub fn write_summary<W: Write>(rows: &[SummaryRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scope", "metric", "mean", "std", "n_seeds", "single_seed", "formatted"])?;
    for r in rows {
        w.write_record([
            r.scope.clone(),
            r.metric.to_string(),
            r.mean.to_string(),
            r.std.to_string(),
            r.n_seeds.to_string(),
            r.single_seed.to_string(),
            r.formatted(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
