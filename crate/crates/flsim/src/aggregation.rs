//! Aggregation rules mapping n client updates to one global update:
//! FedAvg, Krum, coordinate-wise Trimmed-Mean, and coordinate-wise Median.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationRule {
    #[serde(rename = "fedavg")]
    FedAvg,
    Krum,
    TrimmedMean,
    Median,
}

/// Rule plus its robustness parameter k: Krum's assumed malicious count and
/// Trimmed-Mean's per-end trim count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregatorConfig {
    pub rule: AggregationRule,
    pub byz_param: usize,
}

impl AggregatorConfig {
    /// Checks the rule's feasibility constraints against the client count.
    pub fn validate(&self, n: usize) -> Result<()> {
        match self.rule {
            AggregationRule::Krum => {
                if n < self.byz_param + 3 {
                    return Err(Error::InvalidParameter(format!(
                        "krum requires n - byz_param - 2 >= 1 (n={n}, byz_param={})",
                        self.byz_param
                    )));
                }
            }
            AggregationRule::TrimmedMean => {
                if n < 2 * self.byz_param + 1 {
                    return Err(Error::InvalidParameter(format!(
                        "trimmed-mean requires n - 2*byz_param >= 1 (n={n}, byz_param={})",
                        self.byz_param
                    )));
                }
            }
            AggregationRule::FedAvg | AggregationRule::Median => {}
        }
        Ok(())
    }
}

fn check_updates(updates: &[ParamVector]) -> Result<usize> {
    let first = updates.first().ok_or(Error::EmptyInput("updates"))?;
    let dim = first.dim();
    for u in updates {
        if u.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: u.dim() });
        }
    }
    Ok(dim)
}

/// Coordinate-wise arithmetic mean (unweighted; every client holds an equal
/// data share by construction).
pub fn fedavg(updates: &[ParamVector]) -> Result<ParamVector> {
    let dim = check_updates(updates)?;
    let mut acc = vec![0.0; dim];
    for u in updates {
        for (a, v) in acc.iter_mut().zip(u.as_slice()) {
            *a += v;
        }
    }
    let n = updates.len() as f64;
    Ok(ParamVector::from_raw(acc.into_iter().map(|v| v / n).collect()))
}

/// Krum selection: returns the update whose summed squared distances to its
/// n - k - 2 nearest other updates is minimal, plus its index. Ties break to
/// the lowest index.
pub fn krum(updates: &[ParamVector], k: usize) -> Result<(ParamVector, usize)> {
    check_updates(updates)?;
    let n = updates.len();
    if n < k + 3 {
        return Err(Error::InvalidParameter(format!(
            "krum requires n - k - 2 >= 1 (n={n}, k={k})"
        )));
    }
    let closest = n - k - 2;
    let mut sq = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = updates[i].sub(&updates[j])?.l2();
            sq[i][j] = d * d;
            sq[j][i] = d * d;
        }
    }
    let mut best: Option<(f64, usize)> = None;
    for i in 0..n {
        let mut dists: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sq[i][j]).collect();
        dists.sort_by(|a, b| a.total_cmp(b));
        let score: f64 = dists[..closest].iter().sum();
        match best {
            Some((s, _)) if score >= s => {}
            _ => best = Some((score, i)),
        }
    }
    let (_, idx) = best.expect("nonempty updates");
    Ok((updates[idx].clone(), idx))
}

/// Coordinate-wise trimmed mean: per coordinate, drops the k smallest and k
/// largest values and averages the remaining n - 2k.
pub fn trimmed_mean(updates: &[ParamVector], k: usize) -> Result<ParamVector> {
    let dim = check_updates(updates)?;
    let n = updates.len();
    if n < 2 * k + 1 {
        return Err(Error::InvalidParameter(format!(
            "trimmed-mean requires n - 2k >= 1 (n={n}, k={k})"
        )));
    }
    let mut out = vec![0.0; dim];
    let mut column = vec![0.0; n];
    for (c, slot) in out.iter_mut().enumerate() {
        for (i, u) in updates.iter().enumerate() {
            column[i] = u.as_slice()[c];
        }
        column.sort_by(|a, b| a.total_cmp(b));
        let kept = &column[k..n - k];
        *slot = kept.iter().sum::<f64>() / kept.len() as f64;
    }
    Ok(ParamVector::from_raw(out))
}

/// Coordinate-wise median; even client counts average the two central values.
pub fn median(updates: &[ParamVector]) -> Result<ParamVector> {
    let dim = check_updates(updates)?;
    let n = updates.len();
    let mut out = vec![0.0; dim];
    let mut column = vec![0.0; n];
    for (c, slot) in out.iter_mut().enumerate() {
        for (i, u) in updates.iter().enumerate() {
            column[i] = u.as_slice()[c];
        }
        column.sort_by(|a, b| a.total_cmp(b));
        *slot = if n % 2 == 1 {
            column[n / 2]
        } else {
            0.5 * (column[n / 2 - 1] + column[n / 2])
        };
    }
    Ok(ParamVector::from_raw(out))
}

/// Applies the configured rule.
pub fn aggregate(cfg: &AggregatorConfig, updates: &[ParamVector]) -> Result<ParamVector> {
    match cfg.rule {
        AggregationRule::FedAvg => fedavg(updates),
        AggregationRule::Krum => krum(updates, cfg.byz_param).map(|(u, _)| u),
        AggregationRule::TrimmedMean => trimmed_mean(updates, cfg.byz_param),
        AggregationRule::Median => median(updates),
    }
}
