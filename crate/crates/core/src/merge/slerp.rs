use serde::{Deserialize, Serialize};

use crate::delta::DeltaSet;
use crate::error::{Error, Result};
use crate::params::ParamSet;

use super::{check_compatible, per_tensor, SlerpMode};

/// Vectors shorter than this have no usable direction.
pub const SLERP_MIN_NORM: f64 = 1e-12;
/// Below this `|sin(angle)|` the inputs count as collinear.
pub const SLERP_MIN_SIN: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlerpRegime {
    Spherical,
    /// One input had (near) zero norm or the inputs were collinear.
    LinearFallback,
    /// Both inputs were zero; the base was returned unchanged.
    BothZero,
}

/// Interpolation coefficients `(c_a, c_b)` for the merged vector `c_a a + c_b b`.
fn coefficients(a: &[f64], b: &[f64], t: f64) -> (f64, f64, SlerpRegime) {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < SLERP_MIN_NORM && nb < SLERP_MIN_NORM {
        return (0.0, 0.0, SlerpRegime::BothZero);
    }
    let linear = (1.0 - t, t, SlerpRegime::LinearFallback);
    if na < SLERP_MIN_NORM || nb < SLERP_MIN_NORM {
        return linear;
    }
    // Angle between the unit vectors as 2 atan2(|u - v|, |u + v|), which
    // stays accurate near 0 and pi where acos of the dot product does not.
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    let omega = 2.0 * diff.sqrt().atan2(sum.sqrt());
    let sin_omega = omega.sin();
    if sin_omega.abs() < SLERP_MIN_SIN {
        return linear;
    }
    if t == 0.0 {
        return (1.0, 0.0, SlerpRegime::Spherical);
    }
    if t == 1.0 {
        return (0.0, 1.0, SlerpRegime::Spherical);
    }
    (
        ((1.0 - t) * omega).sin() / sin_omega,
        (t * omega).sin() / sin_omega,
        SlerpRegime::Spherical,
    )
}

fn combine(base: &[f64], a: &[f64], b: &[f64], ca: f64, cb: f64) -> Vec<f64> {
    base.iter()
        .zip(a.iter().zip(b))
        .map(|(&x, (&u, &v))| x + (ca * u + cb * v))
        .collect()
}

/// Expand a weighted delta to the full base schema, zero-filling gaps.
fn expand(base: &ParamSet, d: &DeltaSet, weight: f64) -> Result<ParamSet> {
    base.try_map(|name, b| match d.params.get(name) {
        Some(t) => t.mul_scalar(weight),
        None => b.with_data(vec![0.0; b.len()]),
    })
}

/// Spherical interpolation between two weighted deltas, added to the base.
///
/// With `t = 0` the result is `base + w_a a`, with `t = 1` it is `base + w_b b`.
/// Near-zero or collinear inputs fall back to `(1 - t) a + t b`; two zero
/// inputs return the base with [`SlerpRegime::BothZero`].
pub fn merge_slerp(
    base: &ParamSet,
    delta_a: &DeltaSet,
    delta_b: &DeltaSet,
    weight_a: f64,
    weight_b: f64,
    t: f64,
    mode: SlerpMode,
) -> Result<(ParamSet, Vec<(String, SlerpRegime)>)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidInterpolation(t));
    }
    check_compatible(base, &[delta_a, delta_b])?;
    let a = expand(base, delta_a, weight_a)?;
    let b = expand(base, delta_b, weight_b)?;

    match mode {
        SlerpMode::Global => {
            if base.is_empty() {
                return Ok((base.clone(), vec![("*".into(), SlerpRegime::BothZero)]));
            }
            let fa = a.flatten_concat()?;
            let fb = b.flatten_concat()?;
            let (ca, cb, regime) = coefficients(fa.data(), fb.data(), t);
            if regime == SlerpRegime::BothZero {
                return Ok((base.clone(), vec![("*".into(), regime)]));
            }
            let out = base.try_map(|name, x| {
                let (u, v) = (a.get(name).expect("expanded"), b.get(name).expect("expanded"));
                x.with_data(combine(x.data(), u.data(), v.data(), ca, cb))
            })?;
            Ok((out, vec![("*".into(), regime)]))
        }
        SlerpMode::PerTensor => {
            let regimes = std::sync::Mutex::new(Vec::new());
            let a_set = DeltaSet::new(a);
            let b_set = DeltaSet::new(b);
            let out = per_tensor(base, &[&a_set, &b_set], |name, x, slices| {
                let (u, v) = (slices[0].expect("expanded"), slices[1].expect("expanded"));
                let (ca, cb, regime) = coefficients(u.data(), v.data(), t);
                regimes.lock().expect("poisoned").push((name.to_string(), regime));
                if regime == SlerpRegime::BothZero {
                    return Ok(x.clone());
                }
                x.with_data(combine(x.data(), u.data(), v.data(), ca, cb))
            })?;
            let mut regimes = regimes.into_inner().expect("poisoned");
            regimes.sort_by(|x, y| x.0.cmp(&y.0));
            Ok((out, regimes))
        }
    }
}
