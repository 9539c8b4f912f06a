//! Low-rank adapters and their composition into dense deltas.

use std::collections::BTreeMap;

use crate::delta::DeltaSet;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Tensor-name suffixes used when an adapter is stored as a `ParamSet`.
pub const SUFFIX_A: &str = ".lora_a";
pub const SUFFIX_B: &str = ".lora_b";
pub const META_SCALING: &str = "lora.scaling";

/// One adapted layer: `delta = scaling * (B x A)` with `A: r x n`, `B: m x r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub a: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    layers: BTreeMap<String, LoraLayer>,
    rank: usize,
    scaling: f64,
}

impl LoraAdapter {
    pub fn new(layers: BTreeMap<String, LoraLayer>, rank: usize, scaling: f64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidConfig("adapter rank must be positive".into()));
        }
        if !(scaling >= 0.0 && scaling.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "adapter scaling must be a non-negative real, got {scaling}"
            )));
        }
        for (name, layer) in &layers {
            crate::params::validate_name(name)?;
            let (a, b) = (layer.a.shape(), layer.b.shape());
            if a.len() != 2 || b.len() != 2 || a[0] != rank || b[1] != rank {
                return Err(Error::shape(format!("{name} (A: r x n, B: m x r, r = {rank})"), a, b));
            }
        }
        Ok(Self { layers, rank, scaling })
    }

    pub fn layers(&self) -> &BTreeMap<String, LoraLayer> {
        &self.layers
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scaling(&self) -> f64 {
        self.scaling
    }

    /// Store factors as `<layer>.lora_a` / `<layer>.lora_b`.
    pub fn to_param_set(&self) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        for (name, layer) in &self.layers {
            p.insert(format!("{name}{SUFFIX_A}"), layer.a.clone())?;
            p.insert(format!("{name}{SUFFIX_B}"), layer.b.clone())?;
        }
        p.set_metadata(META_SCALING, format!("{:?}", self.scaling));
        Ok(p)
    }

    /// Inverse of [`to_param_set`](Self::to_param_set). Rank is read from the
    /// factor shapes; scaling from metadata, else `default_scaling`.
    pub fn from_param_set(p: &ParamSet, default_scaling: f64) -> Result<Self> {
        let mut a_factors = BTreeMap::new();
        let mut b_factors = BTreeMap::new();
        for (name, t) in p {
            if let Some(layer) = name.strip_suffix(SUFFIX_A) {
                a_factors.insert(layer.to_string(), t.clone());
            } else if let Some(layer) = name.strip_suffix(SUFFIX_B) {
                b_factors.insert(layer.to_string(), t.clone());
            } else {
                return Err(Error::InvalidName(format!(
                    "{name} (adapter tensors must end in {SUFFIX_A} or {SUFFIX_B})"
                )));
            }
        }
        let mut layers = BTreeMap::new();
        for (layer, a) in a_factors {
            let b = b_factors
                .remove(&layer)
                .ok_or_else(|| Error::MissingParameter(format!("{layer}{SUFFIX_B}")))?;
            layers.insert(layer, LoraLayer { a, b });
        }
        if let Some(layer) = b_factors.into_keys().next() {
            return Err(Error::MissingParameter(format!("{layer}{SUFFIX_A}")));
        }
        let rank = layers
            .values()
            .next()
            .and_then(|l| l.a.shape().first().copied())
            .ok_or(Error::EmptyParamSet)?;
        let scaling = match p.metadata().get(META_SCALING) {
            Some(s) => s
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad {META_SCALING} metadata {s:?}")))?,
            None => default_scaling,
        };
        Self::new(layers, rank, scaling)
    }
}

/// Dense per-layer delta `scaling * (B x A)`.
pub fn compose_lora(adapter: &LoraAdapter) -> Result<DeltaSet> {
    let mut out = ParamSet::new();
    for (name, layer) in &adapter.layers {
        let product = layer.b.matmul(&layer.a)?;
        let delta = if adapter.scaling == 1.0 {
            product
        } else {
            product.mul_scalar(adapter.scaling)?
        };
        out.insert(name.clone(), delta)?;
    }
    Ok(DeltaSet::new(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn random(rng: &mut SeededRng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    fn single(a: Tensor, b: Tensor, rank: usize, scaling: f64) -> LoraAdapter {
        LoraAdapter::new(BTreeMap::from([("w".to_string(), LoraLayer { a, b })]), rank, scaling).unwrap()
    }

    #[test]
    fn compose_examples() {
        let b = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let a = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let d = compose_lora(&single(a.clone(), b.clone(), 1, 1.0)).unwrap();
        assert_eq!(d.params.get("w").unwrap().data(), &[3.0, 4.0, 6.0, 8.0]);
        assert!(compose_lora(&single(a, b, 1, 0.0)).unwrap().is_zero());
    }

    #[test]
    fn rank_two_equals_sum_of_outer_products() {
        let mut rng = SeededRng::new(11);
        let b = random(&mut rng, 4, 2);
        let a = random(&mut rng, 2, 3);
        let d = compose_lora(&single(a.clone(), b.clone(), 2, 1.0)).unwrap();
        let got = d.params.get("w").unwrap();
        assert_eq!(got.shape(), &[4, 3]);
        for i in 0..4 {
            for j in 0..3 {
                let outer0 = b.data()[i * 2] * a.data()[j];
                let outer1 = b.data()[i * 2 + 1] * a.data()[3 + j];
                let want = outer0 + outer1;
                assert!((got.data()[i * 3 + j] - want).abs() <= 1e-14 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn invariants_are_checked() {
        let mut rng = SeededRng::new(1);
        let a = random(&mut rng, 2, 3);
        let b = random(&mut rng, 4, 3);
        let layers = BTreeMap::from([("w".to_string(), LoraLayer { a, b })]);
        assert!(matches!(
            LoraAdapter::new(layers.clone(), 2, 1.0),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(LoraAdapter::new(layers, 2, -1.0).is_err());
    }

    #[test]
    fn param_set_round_trip() {
        let mut rng = SeededRng::new(5);
        let adapter = single(random(&mut rng, 2, 5), random(&mut rng, 3, 2), 2, 0.25);
        let p = adapter.to_param_set().unwrap();
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["w.lora_a", "w.lora_b"]);
        assert_eq!(LoraAdapter::from_param_set(&p, 1.0).unwrap(), adapter);
    }

    #[test]
    fn numerical_rank_bounded_by_adapter_rank() {
        let mut rng = SeededRng::new(99);
        for trial in 0..40 {
            let r = 1 + trial % 4;
            let (m, n) = (4 + rng.below(4), 4 + rng.below(4));
            let adapter = single(random(&mut rng, r, n), random(&mut rng, m, r), r, 1.0 + rng.next_f64());
            let d = compose_lora(&adapter).unwrap();
            let t = d.params.get("w").unwrap();
            let mat = nalgebra::DMatrix::from_row_slice(m, n, t.data());
            assert!(mat.rank(1e-9) <= r, "trial {trial}: rank {} > {r}", mat.rank(1e-9));
        }
    }
}
