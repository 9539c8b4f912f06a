//! Shared fixtures for the benchmarks.

use deltamerge_core::{DeltaSet, ParamSet, SeededRng, Tensor};

/// Layer shapes of a small transformer-like block stack.
pub const LAYERS: [(&str, [usize; 2]); 4] = [
    ("attn.qkv", [192, 64]),
    ("attn.out", [64, 64]),
    ("mlp.up", [256, 64]),
    ("mlp.down", [64, 256]),
];

fn random_set(rng: &mut SeededRng, blocks: usize, scale: f64) -> ParamSet {
    let mut p = ParamSet::new();
    for b in 0..blocks {
        for (name, shape) in LAYERS {
            let len = shape[0] * shape[1];
            let data = (0..len).map(|_| scale * rng.normal()).collect();
            p.insert(format!("block{b}.{name}"), Tensor::new(shape.to_vec(), data).unwrap())
                .unwrap();
        }
    }
    p
}

/// A base checkpoint and `n` deltas over `blocks` blocks, fixed by `seed`.
pub fn fixture(blocks: usize, n: usize, seed: u64) -> (ParamSet, Vec<DeltaSet>) {
    let mut rng = SeededRng::new(seed);
    let base = random_set(&mut rng, blocks, 1.0);
    let deltas = (0..n)
        .map(|_| DeltaSet::new(random_set(&mut rng, blocks, 0.01)))
        .collect();
    (base, deltas)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_is_deterministic_and_shaped() {
        let (b1, d1) = fixture(2, 3, 5);
        let (b2, d2) = fixture(2, 3, 5);
        assert_eq!(b1, b2);
        assert_eq!(d1, d2);
        assert_eq!(b1.len(), 8);
        assert_eq!(d1.len(), 3);
        assert_eq!(d1[0].params.schema(), b1.schema());
    }
}
