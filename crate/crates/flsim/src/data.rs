//! Synthetic classification data, label-skewed client partitioning, and CSV
//! dataset ingestion.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Pairwise distance between class means in the synthetic mixture.
const CLASS_SEPARATION: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, num_classes: usize, feature_dim: usize) -> Result<Self> {
        for ex in &examples {
            if ex.label >= num_classes {
                return Err(Error::InvalidParameter(format!(
                    "label {} out of range (num_classes={num_classes})",
                    ex.label
                )));
            }
            if ex.features.len() != feature_dim {
                return Err(Error::DimensionMismatch { expected: feature_dim, got: ex.features.len() });
            }
            if ex.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("dataset feature"));
            }
        }
        Ok(Self { examples, num_classes, feature_dim })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Gaussian-mixture classification task: class c is drawn from N(mu_c, I)
/// with the class means pairwise [`CLASS_SEPARATION`] apart along random
/// orthonormal directions. Deterministic under the seed.
pub fn generate_synthetic(
    num_classes: usize,
    feature_dim: usize,
    per_class: usize,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 classes, got {num_classes}")));
    }
    if feature_dim < num_classes {
        return Err(Error::InvalidParameter(format!(
            "feature_dim ({feature_dim}) must be >= num_classes ({num_classes})"
        )));
    }
    if per_class == 0 {
        return Err(Error::InvalidParameter("per_class must be positive".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let directions = random_orthonormal(&mut rng, feature_dim, num_classes);
    // |mu_a - mu_b| = r * sqrt(2) for orthonormal directions scaled by r.
    let radius = CLASS_SEPARATION / 2.0f64.sqrt();
    let mut examples = Vec::with_capacity(num_classes * per_class);
    for (label, dir) in directions.iter().enumerate() {
        for _ in 0..per_class {
            let features: Vec<f64> = dir
                .iter()
                .map(|d| radius * d + rng.sample::<f64, _>(StandardNormal))
                .collect();
            examples.push(Example { features, label });
        }
    }
    Dataset::new(examples, num_classes, feature_dim)
}

/// Gram-Schmidt over Gaussian draws; requires dim >= count.
fn random_orthonormal(rng: &mut impl Rng, dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (x, c) in v.iter_mut().zip(b) {
                *x -= proj * c;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // retry on near-degenerate draw
        }
        for x in &mut v {
            *x /= norm;
        }
        basis.push(v);
    }
    basis
}

/// Label-skewed partition controlled by the degree of non-iid q in [1/C, 1]:
/// clients are grouped into C groups; an example with label l lands in group
/// l with probability q and in each other group with probability
/// (1-q)/(C-1), then uniformly on a client within the group. q = 1/C is iid.
pub fn split_noniid(
    data: &Dataset,
    n_clients: usize,
    degree: f64,
    seed: u64,
) -> Result<Vec<Dataset>> {
    let c = data.num_classes;
    if n_clients < c {
        return Err(Error::InvalidParameter(format!(
            "need at least one client per class group (n={n_clients}, classes={c})"
        )));
    }
    let lo = 1.0 / c as f64;
    if !(lo - 1e-12..=1.0 + 1e-12).contains(&degree) {
        return Err(Error::InvalidParameter(format!(
            "degree of non-iid must lie in [1/C, 1] = [{lo:.4}, 1], got {degree}"
        )));
    }
    let group_size = n_clients.div_ceil(c);
    let group_members = |g: usize| -> std::ops::Range<usize> {
        let start = g * group_size;
        start..((g + 1) * group_size).min(n_clients)
    };
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut shards: Vec<Vec<Example>> = vec![Vec::new(); n_clients];
    for ex in &data.examples {
        let group = if rng.gen::<f64>() < degree {
            ex.label
        } else {
            // uniform over the other C-1 groups
            let mut g = rng.gen_range(0..c - 1);
            if g >= ex.label {
                g += 1;
            }
            g
        };
        let members = group_members(group);
        let client = rng.gen_range(members.start..members.end);
        shards[client].push(ex.clone());
    }
    shards
        .into_iter()
        .map(|examples| Dataset::new(examples, c, data.feature_dim))
        .collect()
}

/// Reads a `label,feature,...,feature` CSV. A header row is detected by a
/// non-numeric first cell; ragged rows are rejected with their line number.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut examples = Vec::new();
    let mut feature_dim = None;
    let mut max_label = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let first = cells[0];
        if lineno == 0 && first.parse::<f64>().is_err() {
            continue; // header row
        }
        let label: usize = first.parse().map_err(|_| {
            Error::Config(format!("line {}: label '{first}' is not a non-negative integer", lineno + 1))
        })?;
        let features: Vec<f64> = cells[1..]
            .iter()
            .map(|c| {
                c.parse::<f64>().map_err(|_| {
                    Error::Config(format!("line {}: feature '{c}' is not a number", lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("line {}: non-finite feature", lineno + 1)));
        }
        match feature_dim {
            None => feature_dim = Some(features.len()),
            Some(d) if d != features.len() => {
                return Err(Error::Config(format!(
                    "line {}: ragged row ({} features, expected {d})",
                    lineno + 1,
                    features.len()
                )));
            }
            _ => {}
        }
        max_label = max_label.max(label);
        examples.push(Example { features, label });
    }
    if examples.is_empty() {
        return Err(Error::EmptyInput("csv dataset"));
    }
    let dim = feature_dim.unwrap();
    if dim == 0 {
        return Err(Error::Config("csv rows carry no features".into()));
    }
    Dataset::new(examples, max_label + 1, dim)
}
