//! Training paradigms on the synthetic benchmark and the experiment matrix.
//!
//! * Sequential: SFT delta first, then preference training on top of it.
//! * Parallel: SFT and preference deltas trained independently from the same
//!   base, then merged.
//! * Individual: one delta alone, or the base itself.

pub mod experiment;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::delta::{apply_delta, DeltaSet};
use crate::error::{Error, Result};
use crate::merge::{merge, MergeInput, MergeRecipe};
use crate::params::ParamSet;
use crate::toy::loss::{Example, PreferencePair};
use crate::toy::net::ToyNet;

pub use experiment::{run_experiment, Arm, ExperimentConfig, ExperimentReport, MergeKnobs, ReportRow};
pub use train::{
    train_adapter, train_on_top, L1Step, Objective, Optimizer, PreferenceMethod, TrainConfig, TrainData, Trained,
};

/// Per-stage settings for the two adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfigs {
    /// SFT stage; `lambda > 0` selects the sparse objective.
    pub sft: TrainConfig,
    /// Preference stage; `preference` selects DPO or ORPO.
    pub pref: TrainConfig,
}

impl Default for StageConfigs {
    fn default() -> Self {
        Self {
            sft: TrainConfig {
                steps: 500,
                lr: 4.0,
                ..TrainConfig::default()
            },
            pref: TrainConfig {
                steps: 1000,
                lr: 0.1,
                beta: 0.1,
                ..TrainConfig::default()
            },
        }
    }
}

impl StageConfigs {
    fn sft_objective(&self) -> Objective {
        if self.sft.lambda > 0.0 {
            Objective::SftSparse
        } else {
            Objective::Sft
        }
    }
}

/// SFT delta, or zero when there is no data or no steps.
pub fn train_sft(net: &ToyNet, data: &[Example], stages: &StageConfigs) -> Result<DeltaSet> {
    if data.is_empty() || stages.sft.steps == 0 {
        return Ok(DeltaSet::new(net.zero_delta()));
    }
    Ok(train_adapter(net, stages.sft_objective(), TrainData::Sft(data), &stages.sft)?.delta)
}

/// Preference delta trained from the base, or zero when there is no data or no steps.
pub fn train_pref(net: &ToyNet, data: &[PreferencePair], stages: &StageConfigs) -> Result<DeltaSet> {
    if data.is_empty() || stages.pref.steps == 0 {
        return Ok(DeltaSet::new(net.zero_delta()));
    }
    Ok(train_adapter(net, stages.pref.preference.into(), TrainData::Pref(data), &stages.pref)?.delta)
}

/// SFT, then preference training on top of the SFT model.
///
/// DPO uses `base + delta_sft` as its reference. A stage with zero steps or
/// no data is skipped.
pub fn run_sequential(
    net: &ToyNet,
    sft_data: &[Example],
    pref_data: &[PreferencePair],
    stages: &StageConfigs,
) -> Result<DeltaSet> {
    let sft = train_sft(net, sft_data, stages)?;
    sequential_from(net, &sft, pref_data, stages)
}

/// Second stage of [`run_sequential`] given an already trained SFT delta.
pub fn sequential_from(
    net: &ToyNet,
    sft: &DeltaSet,
    pref_data: &[PreferencePair],
    stages: &StageConfigs,
) -> Result<DeltaSet> {
    if pref_data.is_empty() || stages.pref.steps == 0 {
        return Ok(sft.clone());
    }
    let objective = stages.pref.preference.into();
    Ok(train_on_top(
        net,
        objective,
        TrainData::Pref(pref_data),
        &stages.pref,
        Some(&sft.params),
    )?
    .delta)
}

/// Two-input recipe: SFT delta first, preference delta second.
pub fn parallel_recipe(template: &MergeRecipe) -> MergeRecipe {
    let mut r = template.clone();
    let w = |i: usize| template.inputs.get(i).map_or(1.0, |x| x.weight);
    r.inputs = vec![MergeInput::new("sft", w(0)), MergeInput::new("pref", w(1))];
    r
}

/// Merge two trained deltas into full parameters.
pub fn merge_pair(net: &ToyNet, sft: &DeltaSet, pref: &DeltaSet, recipe: &MergeRecipe) -> Result<ParamSet> {
    Ok(merge(&parallel_recipe(recipe), net.params(), &[sft, pref])?.params)
}

/// Train both adapters independently from the base and merge them.
///
/// `recipe` supplies the method and knobs; its inputs are replaced by the
/// SFT and preference deltas (weights kept when given, 1.0 otherwise).
pub fn run_parallel(
    net: &ToyNet,
    sft_data: &[Example],
    pref_data: &[PreferencePair],
    stages: &StageConfigs,
    recipe: &MergeRecipe,
) -> Result<ParamSet> {
    let (sft, pref) = rayon::join(
        || train_sft(net, sft_data, stages),
        || train_pref(net, pref_data, stages),
    );
    merge_pair(net, &sft?, &pref?, recipe)
}

/// Full parameters of `net` with a delta applied.
pub fn with_delta(net: &ToyNet, delta: &DeltaSet) -> Result<ParamSet> {
    apply_delta(net.params(), delta, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalSuite {
    /// Held-out classification accuracy.
    Accuracy { name: String, examples: Vec<Example> },
    /// Fraction of pairs with `p(winner) > p(loser)`.
    WinRate { name: String, pairs: Vec<PreferencePair> },
}

impl EvalSuite {
    pub fn name(&self) -> &str {
        match self {
            EvalSuite::Accuracy { name, .. } | EvalSuite::WinRate { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_suite: Vec<(String, f64)>,
    pub average: f64,
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

/// Score a model (full parameters with the net's layout) on every suite.
pub fn evaluate(net: &ToyNet, params: &ParamSet, suites: &[EvalSuite]) -> Result<Evaluation> {
    if suites.is_empty() {
        return Err(Error::EmptySuite);
    }
    let model = ToyNet::new(net.sizes().to_vec(), params.clone())?;
    let mut per_suite = Vec::with_capacity(suites.len());
    for suite in suites {
        let score = match suite {
            EvalSuite::Accuracy { examples, .. } => {
                if examples.is_empty() {
                    return Err(Error::EmptySuite);
                }
                let probs = model.forward_batch(None, examples.iter().map(|e| e.x.as_slice()))?;
                let hits = probs.iter().zip(examples).filter(|(p, e)| argmax(p) == e.label).count();
                hits as f64 / examples.len() as f64
            }
            EvalSuite::WinRate { pairs, .. } => {
                if pairs.is_empty() {
                    return Err(Error::EmptySuite);
                }
                let probs = model.forward_batch(None, pairs.iter().map(|p| p.x.as_slice()))?;
                let wins = probs
                    .iter()
                    .zip(pairs)
                    .filter(|(p, q)| p[q.winner] > p[q.loser])
                    .count();
                wins as f64 / pairs.len() as f64
            }
        };
        per_suite.push((suite.name().to_string(), score));
    }
    let average = per_suite.iter().map(|(_, s)| s).sum::<f64>() / per_suite.len() as f64;
    Ok(Evaluation { per_suite, average })
}
