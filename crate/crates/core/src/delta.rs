//! Delta parameters: extraction from fine-tuned checkpoints, application to a
//! base, and the near-zero sparsity statistic.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Threshold below which a delta element counts as zero.
pub const DEFAULT_SPARSITY_THRESHOLD: f64 = 1e-5;

pub const META_SOURCE: &str = "delta.source";
pub const META_BASE: &str = "delta.base";

/// A parameter set holding `theta_ft - theta_pre`, tagged with where it came from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DeltaSet {
    pub params: ParamSet,
    pub source: String,
    pub base: String,
}

impl DeltaSet {
    pub fn new(params: ParamSet) -> Self {
        let source = params.metadata().get(META_SOURCE).cloned().unwrap_or_default();
        let base = params.metadata().get(META_BASE).cloned().unwrap_or_default();
        Self { params, source, base }
    }

    pub fn labeled(mut self, source: impl Into<String>, base: impl Into<String>) -> Self {
        self.source = source.into();
        self.base = base.into();
        self
    }

    /// An all-zero delta over the given schema.
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self::new(params.zeros_like())
    }

    /// Parameter set with the source/base tags stored as metadata.
    pub fn to_param_set(&self) -> ParamSet {
        let mut p = self.params.clone();
        if !self.source.is_empty() {
            p.set_metadata(META_SOURCE, self.source.clone());
        }
        if !self.base.is_empty() {
            p.set_metadata(META_BASE, self.base.clone());
        }
        p
    }

    pub fn is_zero(&self) -> bool {
        self.params.is_zero()
    }

    /// Transform every tensor, keeping the tags.
    pub fn try_map(&self, f: impl FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<Self> {
        Ok(Self {
            params: self.params.try_map(f)?,
            source: self.source.clone(),
            base: self.base.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractMode {
    /// Every fine-tuned tensor must exist in the base with the same shape.
    #[default]
    Strict,
    /// Names present on only one side are skipped and reported.
    Lenient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub delta: DeltaSet,
    /// Fine-tuned names with no counterpart in the base.
    pub missing_in_base: Vec<String>,
    /// Base names with no counterpart in the fine-tuned set.
    pub missing_in_ft: Vec<String>,
}

/// `theta_ft - theta_pre`, per name.
pub fn extract_delta(theta_ft: &ParamSet, theta_pre: &ParamSet, mode: ExtractMode) -> Result<Extraction> {
    let mut delta = ParamSet::new();
    let mut missing_in_base = Vec::new();
    for (name, ft) in theta_ft {
        let Some(pre) = theta_pre.get(name) else {
            match mode {
                ExtractMode::Strict => return Err(Error::MissingParameter(name.clone())),
                ExtractMode::Lenient => {
                    missing_in_base.push(name.clone());
                    continue;
                }
            }
        };
        if ft.shape() != pre.shape() {
            return Err(Error::shape(name.clone(), pre.shape(), ft.shape()));
        }
        delta.insert(name.clone(), ft.sub(pre)?)?;
    }
    let missing_in_ft = theta_pre
        .names()
        .filter(|n| !theta_ft.contains(n))
        .map(str::to_string)
        .collect();
    let label = |p: &ParamSet| p.metadata().get("name").cloned().unwrap_or_default();
    Ok(Extraction {
        delta: DeltaSet::new(delta).labeled(label(theta_ft), label(theta_pre)),
        missing_in_base,
        missing_in_ft,
    })
}

/// `theta + weight * delta`; names absent from the delta pass through.
pub fn apply_delta(theta: &ParamSet, delta: &DeltaSet, weight: f64) -> Result<ParamSet> {
    for (name, d) in &delta.params {
        let t = theta.get(name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
        if t.shape() != d.shape() {
            return Err(Error::shape(name.clone(), t.shape(), d.shape()));
        }
    }
    theta.try_map(|name, t| match delta.params.get(name) {
        Some(d) => t.axpy(weight, d),
        None => Ok(t.clone()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerAveraging {
    /// Every layer counts equally.
    #[default]
    Uniform,
    /// Layers weighted by element count.
    ElementWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub threshold: f64,
    pub per_layer: BTreeMap<String, f64>,
    pub average: f64,
}

impl SparsityReport {
    /// One `name fraction` line per layer, then `AVERAGE fraction`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, frac) in &self.per_layer {
            let _ = writeln!(out, "{name} {frac:.4}");
        }
        let _ = writeln!(out, "AVERAGE {:.4}", self.average);
        out
    }
}

/// Fraction of elements with `|value| < threshold`, per layer and averaged.
///
/// Zero-element tensors have no defined fraction and are left out.
pub fn sparsity(delta: &ParamSet, threshold: f64, averaging: LayerAveraging) -> Result<SparsityReport> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::InvalidThreshold(threshold));
    }
    let mut per_layer = BTreeMap::new();
    let mut weighted = 0.0;
    let mut total = 0usize;
    for (name, t) in delta {
        if t.is_empty() {
            continue;
        }
        let below = t.data().iter().filter(|v| v.abs() < threshold).count();
        per_layer.insert(name.clone(), below as f64 / t.len() as f64);
        weighted += below as f64;
        total += t.len();
    }
    if per_layer.is_empty() {
        return Err(Error::EmptyParamSet);
    }
    let average = match averaging {
        LayerAveraging::Uniform => per_layer.values().sum::<f64>() / per_layer.len() as f64,
        LayerAveraging::ElementWeighted => weighted / total as f64,
    };
    Ok(SparsityReport {
        threshold,
        per_layer,
        average,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec()).unwrap()
    }

    fn one(name: &str, data: &[f64]) -> ParamSet {
        ParamSet::new().with(name, v(data)).unwrap()
    }

    fn random_set(seed: u64) -> ParamSet {
        let mut rng = SeededRng::new(seed);
        let mut p = ParamSet::new();
        for (name, shape) in [("a", vec![3]), ("b", vec![2, 4]), ("c", vec![])] {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.normal()).collect();
            p.insert(name, Tensor::new(shape, data).unwrap()).unwrap();
        }
        p
    }

    #[test]
    fn extract_examples() {
        let d = extract_delta(&one("w", &[1.5, 0.0]), &one("w", &[1.0, 0.5]), ExtractMode::Strict).unwrap();
        assert_eq!(d.delta.params.get("w").unwrap().data(), &[0.5, -0.5]);

        let p = random_set(1);
        assert!(extract_delta(&p, &p, ExtractMode::Strict).unwrap().delta.is_zero());
    }

    /// Random dyadic values: differences and sums are exact in f64.
    fn dyadic_set(seed: u64) -> ParamSet {
        let mut rng = SeededRng::new(seed);
        random_set(seed)
            .try_map(|_, t| t.map(|_| (rng.below(4097) as f64 - 2048.0) / 256.0))
            .unwrap()
    }

    #[test]
    fn extract_then_apply_recovers_exactly() {
        for seed in 0..20 {
            let pre = dyadic_set(seed);
            let ft = dyadic_set(seed + 100);
            let d = extract_delta(&ft, &pre, ExtractMode::Strict).unwrap().delta;
            assert_eq!(apply_delta(&pre, &d, 1.0).unwrap(), ft);
            assert_eq!(apply_delta(&ft, &d, -1.0).unwrap(), pre);
        }
    }

    #[test]
    fn strict_and_lenient_modes() {
        let pre = one("w", &[1.0]).with("only_pre", v(&[0.0])).unwrap();
        let ft = one("w", &[2.0]).with("only_ft", v(&[0.0])).unwrap();
        assert!(matches!(
            extract_delta(&ft, &pre, ExtractMode::Strict),
            Err(Error::MissingParameter(n)) if n == "only_ft"
        ));
        let e = extract_delta(&ft, &pre, ExtractMode::Lenient).unwrap();
        assert_eq!(e.missing_in_base, vec!["only_ft"]);
        assert_eq!(e.missing_in_ft, vec!["only_pre"]);
        assert_eq!(e.delta.params.names().collect::<Vec<_>>(), vec!["w"]);

        let bad = one("w", &[1.0, 2.0]);
        assert!(matches!(
            extract_delta(&bad, &pre, ExtractMode::Lenient),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn apply_errors_and_passthrough() {
        let theta = one("w", &[1.0]).with("x", v(&[4.0])).unwrap();
        let d = DeltaSet::new(one("w", &[2.0]));
        let out = apply_delta(&theta, &d, 0.5).unwrap();
        assert_eq!(out.get("w").unwrap().data(), &[2.0]);
        assert_eq!(out.get("x").unwrap().data(), &[4.0]);
        assert_eq!(apply_delta(&theta, &d, 0.0).unwrap(), theta);
        assert!(matches!(
            apply_delta(&theta, &DeltaSet::new(one("nope", &[1.0])), 1.0),
            Err(Error::UnknownParameter(_))
        ));
        assert!(matches!(
            apply_delta(&theta, &DeltaSet::new(one("w", &[1.0, 1.0])), 1.0),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn sparsity_examples() {
        let r = sparsity(&one("w", &[0.0, 1e-6, 0.1, -2e-6]), 1e-5, LayerAveraging::Uniform).unwrap();
        assert_eq!(r.per_layer["w"], 0.75);
        assert_eq!(r.average, 0.75);

        let zeros = ParamSet::new().with("a", Tensor::zeros(&[3, 3])).unwrap();
        assert_eq!(sparsity(&zeros, 1e-5, LayerAveraging::Uniform).unwrap().average, 1.0);

        let two = one("small", &[0.0]).with("big", v(&vec![1.0; 1000])).unwrap();
        assert_eq!(sparsity(&two, 1e-5, LayerAveraging::Uniform).unwrap().average, 0.5);
        let w = sparsity(&two, 1e-5, LayerAveraging::ElementWeighted).unwrap().average;
        assert!((w - 1.0 / 1001.0).abs() < 1e-15);

        assert!(matches!(
            sparsity(&ParamSet::new(), 1e-5, LayerAveraging::Uniform),
            Err(Error::EmptyParamSet)
        ));
        assert!(matches!(
            sparsity(&zeros, 0.0, LayerAveraging::Uniform),
            Err(Error::InvalidThreshold(_))
        ));
    }

    #[test]
    fn sparsity_text_report() {
        let r = sparsity(
            &one("b", &[0.0, 1.0]).with("a", Tensor::zeros(&[2])).unwrap(),
            1e-5,
            LayerAveraging::Uniform,
        )
        .unwrap();
        assert_eq!(r.to_text(), "a 1.0000\nb 0.5000\nAVERAGE 0.7500\n");
    }

    proptest! {
        #[test]
        fn sparsity_monotone_in_threshold(
            data in proptest::collection::vec(-1e-3f64..1e-3, 1..64),
            t1 in 1e-7f64..1e-3,
            t2 in 1e-7f64..1e-3,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let p = one("w", &data);
            let a = sparsity(&p, lo, LayerAveraging::Uniform).unwrap().average;
            let b = sparsity(&p, hi, LayerAveraging::Uniform).unwrap().average;
            prop_assert!(a <= b);
        }

        #[test]
        fn sparsity_permutation_invariant(data in proptest::collection::vec(-1e-4f64..1e-4, 1..64), seed in any::<u64>()) {
            let mut shuffled = data.clone();
            SeededRng::new(seed).shuffle(&mut shuffled);
            let a = sparsity(&one("w", &data), 1e-5, LayerAveraging::Uniform).unwrap();
            let b = sparsity(&one("w", &shuffled), 1e-5, LayerAveraging::Uniform).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
