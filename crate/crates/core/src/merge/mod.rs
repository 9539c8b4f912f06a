//! Merging deltas into a base checkpoint.
//!
//! Every method computes `theta_merge = f(theta_base, delta_1, ..., delta_n)`
//! and returns a parameter set with exactly the base's names and shapes.
//! Deltas may cover a subset of the base; uncovered tensors pass through.
//!
//! | method             | merged delta                                                  |
//! |--------------------|---------------------------------------------------------------|
//! | `linear`           | `sum_i w_i d_i`, weights divided by `sum_i w_i` by default     |
//! | `task_arithmetic`  | `sum_i w_i d_i`, weights used as given                         |
//! | `ties`             | trim each `w_i d_i` to its top-k, elect signs, disjoint mean   |
//! | `dare_ties`        | drop-and-rescale each `d_i` (seed `seed ^ i`), then `ties`     |
//! | `slerp`            | spherical interpolation between two (weighted) deltas          |

mod recipe;
mod slerp;
mod ties;

pub use recipe::{MergeInput, MergeMethod, MergeRecipe, SlerpMode, DEFAULT_DENSITY, DEFAULT_DROP, DEFAULT_T};
pub use slerp::{merge_slerp, SlerpRegime, SLERP_MIN_NORM, SLERP_MIN_SIN};
pub use ties::{elect_and_merge, merge_dare_ties, merge_ties};

use rayon::prelude::*;

use crate::delta::DeltaSet;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Result of [`merge`].
#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutput {
    pub params: ParamSet,
    /// Interpolation regime per SLERP unit (one entry in global mode,
    /// one per tensor in per-tensor mode); empty for other methods.
    pub slerp_regimes: Vec<(String, SlerpRegime)>,
}

impl MergeOutput {
    fn plain(params: ParamSet) -> Self {
        Self {
            params,
            slerp_regimes: Vec::new(),
        }
    }
}

/// Every delta tensor must exist in the base with the same shape.
pub(crate) fn check_compatible(base: &ParamSet, deltas: &[&DeltaSet]) -> Result<()> {
    for d in deltas {
        for (name, t) in &d.params {
            let b = base.get(name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if b.shape() != t.shape() {
                return Err(Error::shape(name.clone(), b.shape(), t.shape()));
            }
        }
    }
    Ok(())
}

fn check_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::InvalidRecipe(format!(
            "{} weights given for {n} deltas",
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
        return Err(Error::InvalidRecipe(format!("weight {w} is not finite")));
    }
    Ok(())
}

/// Run a per-tensor combiner over the base, in parallel across tensors.
///
/// `combine` receives the base tensor and, for each delta, its tensor of the
/// same name if present.
pub(crate) fn per_tensor<F>(base: &ParamSet, deltas: &[&DeltaSet], combine: F) -> Result<ParamSet>
where
    F: Fn(&str, &Tensor, &[Option<&Tensor>]) -> Result<Tensor> + Sync,
{
    let entries: Vec<(&String, &Tensor)> = base.iter().collect();
    let merged: Vec<Result<(String, Tensor)>> = entries
        .par_iter()
        .map(|(name, b)| {
            let slices: Vec<Option<&Tensor>> = deltas.iter().map(|d| d.params.get(name)).collect();
            combine(name, b, &slices).map(|t| ((*name).clone(), t))
        })
        .collect();
    let mut out = ParamSet::new();
    for r in merged {
        let (name, t) = r?;
        out.insert(name, t)?;
    }
    *out.metadata_mut() = base.metadata().clone();
    Ok(out)
}

/// `base + sum_i w_i d_i`.
pub fn merge_task_arithmetic(base: &ParamSet, deltas: &[&DeltaSet], weights: &[f64]) -> Result<ParamSet> {
    check_weights(weights, deltas.len())?;
    check_compatible(base, deltas)?;
    per_tensor(base, deltas, |_, b, slices| {
        let mut acc = b.clone();
        for (slice, &w) in slices.iter().zip(weights) {
            if let Some(d) = slice {
                acc = acc.axpy(w, d)?;
            }
        }
        Ok(acc)
    })
}

/// Task arithmetic with weights optionally divided by their sum.
pub fn merge_linear(base: &ParamSet, deltas: &[&DeltaSet], weights: &[f64], normalize: bool) -> Result<ParamSet> {
    check_weights(weights, deltas.len())?;
    if !normalize {
        return merge_task_arithmetic(base, deltas, weights);
    }
    let sum: f64 = weights.iter().sum();
    if sum == 0.0 {
        return Err(Error::ZeroWeightSum);
    }
    let normalized: Vec<f64> = weights.iter().map(|w| w / sum).collect();
    merge_task_arithmetic(base, deltas, &normalized)
}

/// Dispatch a validated recipe. `deltas[i]` corresponds to `recipe.inputs[i]`.
pub fn merge(recipe: &MergeRecipe, base: &ParamSet, deltas: &[&DeltaSet]) -> Result<MergeOutput> {
    let recipe = recipe.normalized()?;
    if deltas.len() != recipe.inputs.len() {
        return Err(Error::InvalidRecipe(format!(
            "recipe lists {} inputs but {} deltas were supplied",
            recipe.inputs.len(),
            deltas.len()
        )));
    }
    let weights: Vec<f64> = recipe.inputs.iter().map(|i| i.weight).collect();
    match recipe.method {
        MergeMethod::Linear => Ok(MergeOutput::plain(merge_linear(
            base,
            deltas,
            &weights,
            recipe.normalize_weights.unwrap_or(true),
        )?)),
        MergeMethod::TaskArithmetic => {
            let w: Vec<f64> = if recipe.normalize_weights == Some(true) {
                let sum: f64 = weights.iter().sum();
                if sum == 0.0 {
                    return Err(Error::ZeroWeightSum);
                }
                weights.iter().map(|w| w / sum).collect()
            } else {
                weights
            };
            Ok(MergeOutput::plain(merge_task_arithmetic(base, deltas, &w)?))
        }
        MergeMethod::Ties => Ok(MergeOutput::plain(merge_ties(
            base,
            deltas,
            &weights,
            recipe.density.unwrap_or(DEFAULT_DENSITY),
            recipe.granularity.unwrap_or_default(),
        )?)),
        MergeMethod::DareTies => Ok(MergeOutput::plain(merge_dare_ties(
            base,
            deltas,
            &weights,
            recipe.drop.unwrap_or(DEFAULT_DROP),
            recipe.density.unwrap_or(DEFAULT_DENSITY),
            recipe.seed.unwrap_or(0),
            recipe.granularity.unwrap_or_default(),
        )?)),
        MergeMethod::Slerp => {
            let (params, regimes) = merge_slerp(
                base,
                deltas[0],
                deltas[1],
                weights[0],
                weights[1],
                recipe.t.unwrap_or(DEFAULT_T),
                recipe.slerp_mode.unwrap_or_default(),
            )?;
            Ok(MergeOutput {
                params,
                slerp_regimes: regimes,
            })
        }
    }
}
