use crate::delta::DeltaSet;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::sparsify::{check_density, dare, trim_topk, Granularity};

use super::{check_compatible, per_tensor};

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sign election and disjoint mean for one element.
///
/// The elected sign is `sgn(sum sgn(v_i))`; a zero sign sum falls back to
/// `sgn(sum v_i)`, and if that is also zero the element gets no update.
/// Returns the mean of the nonzero values carrying the elected sign.
pub fn elect_and_merge(values: &[f64]) -> f64 {
    let sign_sum: f64 = values.iter().map(|&v| sign(v)).sum();
    let mut elected = sign(sign_sum);
    if elected == 0.0 {
        elected = sign(values.iter().sum());
    }
    if elected == 0.0 {
        return 0.0;
    }
    let (sum, count) = values
        .iter()
        .filter(|&&v| sign(v) == elected)
        .fold((0.0, 0usize), |(s, c), &v| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// TIES: trim each weighted delta to its top-`k` magnitudes, elect a sign per
/// element and add the mean of the agreeing values to the base.
pub fn merge_ties(
    base: &ParamSet,
    deltas: &[&DeltaSet],
    weights: &[f64],
    k: f64,
    granularity: Granularity,
) -> Result<ParamSet> {
    check_density(k)?;
    if weights.len() != deltas.len() {
        return Err(Error::InvalidRecipe(format!(
            "{} weights given for {} deltas",
            weights.len(),
            deltas.len()
        )));
    }
    check_compatible(base, deltas)?;
    let trimmed: Vec<DeltaSet> = deltas
        .iter()
        .zip(weights)
        .map(|(d, &w)| {
            let weighted = d.try_map(|_, t| t.mul_scalar(w))?;
            trim_topk(&weighted, k, granularity)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&DeltaSet> = trimmed.iter().collect();

    per_tensor(base, &refs, |_, b, slices| {
        let present: Vec<&[f64]> = slices.iter().flatten().map(|t| t.data()).collect();
        if present.is_empty() {
            return Ok(b.clone());
        }
        let mut column = vec![0.0; present.len()];
        let data = b
            .data()
            .iter()
            .enumerate()
            .map(|(i, &bv)| {
                for (c, d) in column.iter_mut().zip(&present) {
                    *c = d[i];
                }
                bv + elect_and_merge(&column)
            })
            .collect();
        b.with_data(data)
    })
}

/// Drop-and-rescale each delta (delta `i` uses seed `seed ^ i`), then TIES.
#[allow(clippy::too_many_arguments)]
pub fn merge_dare_ties(
    base: &ParamSet,
    deltas: &[&DeltaSet],
    weights: &[f64],
    p: f64,
    k: f64,
    seed: u64,
    granularity: Granularity,
) -> Result<ParamSet> {
    let dropped: Vec<DeltaSet> = deltas
        .iter()
        .enumerate()
        .map(|(i, d)| dare(d, p, seed ^ i as u64))
        .collect::<Result<_>>()?;
    let refs: Vec<&DeltaSet> = dropped.iter().collect();
    merge_ties(base, &refs, weights, k, granularity)
}
