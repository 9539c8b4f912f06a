use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparsify::{check_density, check_probability, Granularity};

/// Fraction of each weighted delta kept by TIES trimming.
pub const DEFAULT_DENSITY: f64 = 0.5;
/// DARE drop probability.
pub const DEFAULT_DROP: f64 = 0.5;
/// SLERP interpolation factor.
pub const DEFAULT_T: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Linear,
    TaskArithmetic,
    Ties,
    DareTies,
    Slerp,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 5] = [
        MergeMethod::Slerp,
        MergeMethod::TaskArithmetic,
        MergeMethod::Ties,
        MergeMethod::DareTies,
        MergeMethod::Linear,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MergeMethod::Linear => "linear",
            MergeMethod::TaskArithmetic => "task_arithmetic",
            MergeMethod::Ties => "ties",
            MergeMethod::DareTies => "dare_ties",
            MergeMethod::Slerp => "slerp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        MergeMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::UnsupportedMethod(s.to_string()))
    }
}

impl std::fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlerpMode {
    /// One angle between the fully flattened deltas.
    #[default]
    Global,
    /// An independent angle per tensor.
    PerTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeInput {
    /// Reference to the delta (a checkpoint path in recipe files).
    pub delta: String,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

impl MergeInput {
    pub fn new(delta: impl Into<String>, weight: f64) -> Self {
        Self {
            delta: delta.into(),
            weight,
        }
    }
}

/// Declarative description of one merge.
///
/// Knobs that do not apply to `method` are dropped by
/// [`normalized`](Self::normalized); those that apply but are absent get
/// their documented defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    /// Reference to the base checkpoint.
    #[serde(default)]
    pub base: String,
    pub inputs: Vec<MergeInput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalize_weights: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub granularity: Option<Granularity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slerp_mode: Option<SlerpMode>,
}

impl MergeRecipe {
    pub fn new(method: MergeMethod, inputs: Vec<MergeInput>) -> Self {
        Self {
            method,
            base: String::new(),
            inputs,
            density: None,
            drop: None,
            seed: None,
            t: None,
            normalize_weights: None,
            granularity: None,
            slerp_mode: None,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::InvalidRecipe(e.to_string()))
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Check invariants, fill defaults for applicable knobs and clear the rest.
    pub fn normalized(&self) -> Result<Self> {
        let mut r = self.clone();
        let m = r.method;
        match m {
            MergeMethod::Slerp if r.inputs.len() != 2 => {
                return Err(Error::InvalidRecipe(format!(
                    "slerp requires exactly 2 deltas, got {}",
                    r.inputs.len()
                )))
            }
            _ if r.inputs.is_empty() => return Err(Error::InvalidRecipe(format!("{m} requires at least one delta"))),
            _ => {}
        }
        if let Some(input) = r.inputs.iter().find(|i| !i.weight.is_finite()) {
            return Err(Error::InvalidRecipe(format!(
                "weight of {:?} is not finite",
                input.delta
            )));
        }

        let uses_density = matches!(m, MergeMethod::Ties | MergeMethod::DareTies);
        let uses_drop = m == MergeMethod::DareTies;
        let uses_t = m == MergeMethod::Slerp;
        let uses_normalize = matches!(m, MergeMethod::Linear | MergeMethod::TaskArithmetic);

        r.density = uses_density.then(|| r.density.unwrap_or(DEFAULT_DENSITY));
        r.granularity = uses_density.then(|| r.granularity.unwrap_or_default());
        r.drop = uses_drop.then(|| r.drop.unwrap_or(DEFAULT_DROP));
        r.seed = uses_drop.then(|| r.seed.unwrap_or(0));
        r.t = uses_t.then(|| r.t.unwrap_or(DEFAULT_T));
        r.slerp_mode = uses_t.then(|| r.slerp_mode.unwrap_or_default());
        r.normalize_weights = uses_normalize.then(|| r.normalize_weights.unwrap_or(m == MergeMethod::Linear));

        if let Some(k) = r.density {
            check_density(k)?;
        }
        if let Some(p) = r.drop {
            check_probability(p)?;
        }
        if let Some(t) = r.t {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidInterpolation(t));
            }
        }
        if r.normalize_weights == Some(true) && r.inputs.iter().map(|i| i.weight).sum::<f64>() == 0.0 {
            return Err(Error::ZeroWeightSum);
        }
        Ok(r)
    }
}
