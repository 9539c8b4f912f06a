//! Delta sparsification: random drop-and-rescale, magnitude top-k trimming and
//! plain threshold pruning.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::delta::DeltaSet;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::{stream_key, uniform_at};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Rank elements within each tensor.
    #[default]
    PerTensor,
    /// Rank elements across the whole flattened delta.
    Global,
}

/// A sparsification step, as it appears in recipe and config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum SparsifySpec {
    Dare {
        p: f64,
        #[serde(default)]
        seed: u64,
    },
    TrimTopk {
        k: f64,
        #[serde(default)]
        granularity: Granularity,
    },
    Threshold {
        tau: f64,
    },
}

impl SparsifySpec {
    pub fn apply(&self, delta: &DeltaSet) -> Result<DeltaSet> {
        match *self {
            SparsifySpec::Dare { p, seed } => dare(delta, p, seed),
            SparsifySpec::TrimTopk { k, granularity } => trim_topk(delta, k, granularity),
            SparsifySpec::Threshold { tau } => threshold_prune(delta, tau),
        }
    }
}

pub(crate) fn check_probability(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidProbability(p))
    }
}

pub(crate) fn check_density(k: f64) -> Result<()> {
    if k > 0.0 && k <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidDensity(k))
    }
}

/// Drop each element with probability `p` and rescale survivors by `1/(1-p)`.
///
/// Whether element `i` of tensor `name` survives depends only on
/// `(seed, name, i)`, so the result is independent of iteration order and
/// thread count.
pub fn dare(delta: &DeltaSet, p: f64, seed: u64) -> Result<DeltaSet> {
    check_probability(p)?;
    if p == 0.0 {
        return Ok(delta.clone());
    }
    let scale = 1.0 / (1.0 - p);
    delta.try_map(|name, t| {
        let key = stream_key(seed, name);
        let data: Vec<f64> = t
            .data()
            .par_iter()
            .enumerate()
            .map(|(i, &v)| if uniform_at(key, i as u64) < p { 0.0 } else { v * scale })
            .collect();
        t.with_data(data)
    })
}

/// Number of elements kept by a top-k trim: `ceil(k * n)`, at least one.
///
/// Products within `1e-9` (relative) of an integer are snapped to it first so
/// that, e.g., `k = 0.7, n = 10` keeps 7 rather than 8.
pub fn survivor_count(k: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let x = k * n as f64;
    let nearest = x.round();
    let c = if (x - nearest).abs() <= 1e-9 * x.max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    (c as usize).clamp(1, n)
}

/// Indices of the `keep` largest magnitudes, ties broken by lower index.
fn top_indices(values: &[f64], keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if keep < idx.len() {
        let order = |&a: &usize, &b: &usize| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b));
        idx.select_nth_unstable_by(keep, order);
        idx.truncate(keep);
    }
    idx
}

fn keep_only(values: &[f64], keep: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for i in top_indices(values, keep) {
        out[i] = values[i];
    }
    out
}

/// Keep the `ceil(k * n)` largest-magnitude elements and zero the rest.
pub fn trim_topk(delta: &DeltaSet, k: f64, granularity: Granularity) -> Result<DeltaSet> {
    check_density(k)?;
    if k == 1.0 {
        return Ok(delta.clone());
    }
    match granularity {
        Granularity::PerTensor => delta.try_map(|_, t| {
            let keep = survivor_count(k, t.len());
            t.with_data(keep_only(t.data(), keep))
        }),
        Granularity::Global => {
            if delta.params.is_empty() {
                return Ok(delta.clone());
            }
            let flat = delta.params.flatten_concat()?;
            let keep = survivor_count(k, flat.len());
            let trimmed = keep_only(flat.data(), keep);
            let mut params = ParamSet::unflatten(&delta.params.schema(), &trimmed)?;
            *params.metadata_mut() = delta.params.metadata().clone();
            Ok(DeltaSet {
                params,
                source: delta.source.clone(),
                base: delta.base.clone(),
            })
        }
    }
}

/// Zero every element with `|value| < tau`; survivors are untouched.
pub fn threshold_prune(delta: &DeltaSet, tau: f64) -> Result<DeltaSet> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidThreshold(tau));
    }
    delta.try_map(|_, t| t.map(|v| if v.abs() < tau { 0.0 } else { v }))
}
