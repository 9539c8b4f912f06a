use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::SeededRng;

use super::loss::LossValue;

/// Deltas with more elements than this are checked on a random subsample.
pub const FULL_SWEEP_LIMIT: usize = 2000;
/// Subsample size for large deltas.
pub const SUBSAMPLE: usize = 200;
/// Floor on the relative-error denominator.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Skip elements with `|delta_i| <= kink_margin`; use `10 * epsilon` when
    /// the loss has an L1 term, 0 otherwise.
    pub kink_margin: f64,
    /// Seed for the subsample of large deltas.
    pub seed: u64,
}

impl GradCheckOptions {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            kink_margin: 0.0,
            seed: 0,
        }
    }

    pub fn skip_kinks(mut self) -> Self {
        self.kink_margin = 10.0 * self.epsilon;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Compare the analytic gradient of `loss` at `delta` against central
/// differences `(f(d + e) - f(d - e)) / 2e`.
///
/// The relative error of an element is `|g - fd| / max(|g|, 1e-8)`.
pub fn check_gradients<F>(loss: F, delta: &ParamSet, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<LossValue>,
{
    let eps = opts.epsilon;
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidConfig(format!(
            "epsilon must lie in [1e-7, 1e-3], got {eps}"
        )));
    }
    let analytic = loss(delta)?.gradients;
    let schema = delta.schema();
    let flat = delta.flatten_concat()?.into_data();
    let g_flat = analytic_flat(&analytic, &schema)?;

    let mut indices: Vec<usize> = (0..flat.len()).collect();
    if flat.len() > FULL_SWEEP_LIMIT {
        SeededRng::new(opts.seed).shuffle(&mut indices);
        indices.truncate(SUBSAMPLE);
        indices.sort_unstable();
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut probe = flat.clone();
    for i in indices {
        if flat[i].abs() <= opts.kink_margin {
            report.skipped += 1;
            continue;
        }
        probe[i] = flat[i] + eps;
        let up = loss(&ParamSet::unflatten(&schema, &probe)?)?.value;
        probe[i] = flat[i] - eps;
        let down = loss(&ParamSet::unflatten(&schema, &probe)?)?.value;
        probe[i] = flat[i];
        let fd = (up - down) / (2.0 * eps);
        let g = g_flat[i];
        let rel = (g - fd).abs() / g.abs().max(ABS_FLOOR);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}

fn analytic_flat(grads: &ParamSet, schema: &[(String, Vec<usize>)]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (name, shape) in schema {
        let g = grads.get(name).ok_or_else(|| Error::MissingParameter(name.clone()))?;
        if g.shape() != shape.as_slice() {
            return Err(Error::shape(name.clone(), shape, g.shape()));
        }
        out.extend_from_slice(g.data());
    }
    Ok(out)
}

/// `sum_i c_i x_i^2` as a loss, for exercising the checker itself.
pub fn quadratic(coeffs: &[f64]) -> impl Fn(&ParamSet) -> Result<LossValue> + '_ {
    move |d: &ParamSet| {
        let x = d.flatten_concat()?.into_data();
        let value = x.iter().zip(coeffs).map(|(v, c)| c * v * v).sum();
        let g: Vec<f64> = x.iter().zip(coeffs).map(|(v, c)| 2.0 * c * v).collect();
        Ok(LossValue {
            value,
            gradients: ParamSet::unflatten(&d.schema(), &g)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::toy::loss::{dpo_loss, orpo_loss, sft_loss, Example, PreferencePair};
    use crate::toy::net::{NetSpec, ToyNet};

    fn random_delta(net: &ToyNet, rng: &mut SeededRng, scale: f64) -> ParamSet {
        net.zero_delta()
            .try_map(|_, t| t.map(|_| scale * rng.normal()))
            .unwrap()
    }

    #[test]
    fn quadratic_is_exact() {
        let coeffs = [1.0, -2.0, 0.5, 3.0];
        let d = ParamSet::new()
            .with("v", Tensor::vector(vec![0.3, -1.2, 2.0, 0.7]).unwrap())
            .unwrap();
        let r = check_gradients(quadratic(&coeffs), &d, GradCheckOptions::new(1e-4)).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 4);
        assert!(check_gradients(quadratic(&coeffs), &d, GradCheckOptions::new(1e-2)).is_err());
    }

    #[test]
    fn kinks_are_skipped() {
        let d = ParamSet::new()
            .with("v", Tensor::vector(vec![0.0, 1e-5, 0.5]).unwrap())
            .unwrap();
        let r = check_gradients(quadratic(&[1.0; 3]), &d, GradCheckOptions::new(1e-5).skip_kinks()).unwrap();
        assert_eq!((r.checked, r.skipped), (1, 2));
    }

    #[test]
    fn losses_match_finite_differences() {
        let mut rng = SeededRng::new(17);
        let net = ToyNet::random(&NetSpec::default(), 3).unwrap();
        let examples: Vec<Example> = (0..6)
            .map(|_| Example {
                x: (0..8).map(|_| rng.normal()).collect(),
                label: rng.below(4),
            })
            .collect();
        let pairs: Vec<PreferencePair> = (0..6)
            .map(|_| {
                let w = rng.below(4);
                PreferencePair::new((0..8).map(|_| rng.normal()).collect(), w, (w + 1 + rng.below(3)) % 4).unwrap()
            })
            .collect();
        let d = random_delta(&net, &mut rng, 0.3);
        let r = random_delta(&net, &mut rng, 0.3);
        let opts = GradCheckOptions::new(1e-5);
        let sft = check_gradients(|d| sft_loss(&net, Some(d), &examples, 1e-3), &d, opts.skip_kinks()).unwrap();
        let dpo = check_gradients(|d| dpo_loss(&net, Some(&r), Some(d), &pairs, 0.5), &d, opts).unwrap();
        let orpo = check_gradients(|d| orpo_loss(&net, Some(d), &pairs, 0.5), &d, opts).unwrap();
        for rep in [sft, dpo, orpo] {
            assert!(rep.max_rel_error < 1e-4, "{rep:?}");
        }
    }
}
