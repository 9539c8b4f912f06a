//! Training objectives with analytic gradients.
//!
//! Every loss is a batch mean. Probabilities are clamped to
//! `[PROB_EPS, 1 - PROB_EPS]` before any logarithm or odds; gradients are
//! zero through a clamped probability.
//!
//! * SFT: `mean(-log p(y|x)) + lambda * sum |delta_i|`, with L1 subgradient
//!   `sign(delta_i)` and 0 at `delta_i = 0`.
//! * DPO: `mean(-log sigmoid(beta * m))` with
//!   `m = (log p(w) - log p_ref(w)) - (log p(l) - log p_ref(l))`.
//! * ORPO: `mean(-log p(w) - beta * log sigmoid(log odds(w) - log odds(l)))`,
//!   `odds(y) = p(y) / (1 - p(y))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;

use super::net::{log_softmax, ToyNet};

/// Probability clamp applied before logs and odds.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub x: Vec<f64>,
    pub winner: usize,
    pub loser: usize,
}

impl PreferencePair {
    pub fn new(x: Vec<f64>, winner: usize, loser: usize) -> Result<Self> {
        if winner == loser {
            return Err(Error::InvalidConfig(format!(
                "preference pair has winner == loser == {winner}"
            )));
        }
        Ok(Self { x, winner, loser })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Gradient with respect to the delta, over the net's full schema.
    pub gradients: ParamSet,
}

fn check_label(net: &ToyNet, label: usize) -> Result<()> {
    if label >= net.num_classes() {
        return Err(Error::InvalidConfig(format!(
            "label {label} out of range for {} classes",
            net.num_classes()
        )));
    }
    Ok(())
}

/// `log p_y` with the clamp applied, and whether the clamp was inactive.
fn clamped_log_prob(logp: &[f64], y: usize) -> (f64, bool) {
    let lo = PROB_EPS.ln();
    let hi = (-PROB_EPS).ln_1p();
    let v = logp[y];
    if v < lo {
        (lo, false)
    } else if v > hi {
        (hi, false)
    } else {
        (v, true)
    }
}

/// `-log sigmoid(x)`, stable for large `|x|`.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    (-x).max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Run `per_item` on each batch element, which returns its loss and writes
/// `dL/dlogits`, then backpropagate and average.
fn batch_loss<T>(
    net: &ToyNet,
    delta: Option<&ParamSet>,
    batch: &[T],
    input: impl Fn(&T) -> &[f64],
    mut per_item: impl FnMut(&T, &[f64], &mut [f64]) -> Result<f64>,
) -> Result<LossValue> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let eff = net.effective(delta)?;
    let mut grads = net.zero_grads();
    let mut total = 0.0;
    let mut dlogits = vec![0.0; net.num_classes()];
    for item in batch {
        let trace = net.trace(&eff, input(item))?;
        let logits = trace.acts.last().expect("output layer");
        dlogits.iter_mut().for_each(|g| *g = 0.0);
        total += per_item(item, logits, &mut dlogits)?;
        net.backward(&eff, &trace, &dlogits, &mut grads);
    }
    let n = batch.len() as f64;
    let value = total / n;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss value".into()));
    }
    Ok(LossValue {
        value,
        gradients: net.grads_to_params(grads, 1.0 / n)?,
    })
}

/// `lambda * ||delta||_1` and its subgradient, over the net's schema.
pub fn l1_penalty(net: &ToyNet, delta: Option<&ParamSet>, lambda: f64) -> Result<LossValue> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {lambda}")));
    }
    let zero = net.zero_delta();
    let delta = delta.unwrap_or(&zero);
    let mut value = 0.0;
    let gradients = zero.try_map(|name, z| match delta.get(name) {
        Some(d) => {
            value += lambda * d.l1_norm();
            d.map(|v| {
                if v > 0.0 {
                    lambda
                } else if v < 0.0 {
                    -lambda
                } else {
                    0.0
                }
            })
        }
        None => Ok(z.clone()),
    })?;
    Ok(LossValue { value, gradients })
}

fn add_into(a: &mut LossValue, b: LossValue) -> Result<()> {
    a.value += b.value;
    a.gradients = a
        .gradients
        .try_map(|name, t| t.add(b.gradients.get(name).expect("same schema")))?;
    Ok(())
}

/// Mean cross-entropy plus `lambda * ||delta||_1`.
pub fn sft_loss(net: &ToyNet, delta: Option<&ParamSet>, batch: &[Example], lambda: f64) -> Result<LossValue> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {lambda}")));
    }
    let mut out = batch_loss(
        net,
        delta,
        batch,
        |e| &e.x,
        |e, logits, g| {
            check_label(net, e.label)?;
            let logp = log_softmax(logits);
            let (lp, active) = clamped_log_prob(&logp, e.label);
            if active {
                for (k, gk) in g.iter_mut().enumerate() {
                    *gk = logp[k].exp() - f64::from(u8::from(k == e.label));
                }
            }
            Ok(-lp)
        },
    )?;
    if lambda != 0.0 {
        add_into(&mut out, l1_penalty(net, delta, lambda)?)?;
    }
    Ok(out)
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidConfig(format!("beta must be > 0, got {beta}")));
    }
    Ok(())
}

/// DPO loss of `policy` against the frozen `reference` delta.
pub fn dpo_loss(
    net: &ToyNet,
    reference: Option<&ParamSet>,
    policy: Option<&ParamSet>,
    batch: &[PreferencePair],
    beta: f64,
) -> Result<LossValue> {
    check_beta(beta)?;
    let ref_eff = net.effective(reference)?;
    batch_loss(
        net,
        policy,
        batch,
        |p| &p.x,
        |p, logits, g| {
            check_label(net, p.winner)?;
            check_label(net, p.loser)?;
            let ref_trace = net.trace(&ref_eff, &p.x)?;
            let ref_logp = log_softmax(ref_trace.acts.last().expect("output layer"));
            let logp = log_softmax(logits);
            let (pw, aw) = clamped_log_prob(&logp, p.winner);
            let (pl, al) = clamped_log_prob(&logp, p.loser);
            let (rw, _) = clamped_log_prob(&ref_logp, p.winner);
            let (rl, _) = clamped_log_prob(&ref_logp, p.loser);
            let margin = beta * ((pw - rw) - (pl - rl));
            let scale = -sigmoid(-margin) * beta;
            // d log p_y / dz = e_y - p
            for (k, gk) in g.iter_mut().enumerate() {
                let pk = logp[k].exp();
                let mut d = 0.0;
                if aw {
                    d += f64::from(u8::from(k == p.winner)) - pk;
                }
                if al {
                    d -= f64::from(u8::from(k == p.loser)) - pk;
                }
                *gk = scale * d;
            }
            Ok(neg_log_sigmoid(margin))
        },
    )
}

/// ORPO loss: winner NLL plus `beta` times the odds-ratio term.
pub fn orpo_loss(net: &ToyNet, delta: Option<&ParamSet>, batch: &[PreferencePair], beta: f64) -> Result<LossValue> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidConfig(format!("beta must be >= 0, got {beta}")));
    }
    batch_loss(
        net,
        delta,
        batch,
        |p| &p.x,
        |p, logits, g| {
            check_label(net, p.winner)?;
            check_label(net, p.loser)?;
            let logp = log_softmax(logits);
            let (lw, aw) = clamped_log_prob(&logp, p.winner);
            let (ll, al) = clamped_log_prob(&logp, p.loser);
            let (pw, pl) = (lw.exp(), ll.exp());
            // log odds = log p - log(1 - p)
            let gap = (lw - (-pw).ln_1p()) - (ll - (-pl).ln_1p());
            let ratio_term = neg_log_sigmoid(gap);
            let dgap = -beta * sigmoid(-gap);
            // d log odds_y / dz = (e_y - p) / (1 - p_y)
            for (k, gk) in g.iter_mut().enumerate() {
                let pk = logp[k].exp();
                let (ew, el) = (f64::from(u8::from(k == p.winner)), f64::from(u8::from(k == p.loser)));
                let mut d = 0.0;
                if aw {
                    d += (pk - ew) + dgap * (ew - pk) / (1.0 - pw);
                }
                if al {
                    d -= dgap * (el - pk) / (1.0 - pl);
                }
                *gk = d;
            }
            Ok(-lw + beta * ratio_term)
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::toy::net::{bias_name, NetSpec};

    /// Two-class net with no hidden layer whose logits equal the output bias.
    fn bias_net(b: [f64; 2]) -> ToyNet {
        let mut net = ToyNet::zeros(vec![1, 2]).unwrap();
        let mut p = net.params().clone();
        p.insert(bias_name(0), Tensor::vector(b.to_vec()).unwrap()).unwrap();
        net = ToyNet::new(vec![1, 2], p).unwrap();
        net
    }

    #[test]
    fn uniform_cross_entropy_is_ln2() {
        let net = ToyNet::zeros(vec![3, 4, 2]).unwrap();
        let batch = vec![Example {
            x: vec![1.0, 2.0, 3.0],
            label: 1,
        }];
        let l = sft_loss(&net, None, &batch, 0.0).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(sft_loss(&net, None, &[], 0.0), Err(Error::EmptyBatch)));
    }

    #[test]
    fn l1_term_and_subgradient() {
        let net = ToyNet::zeros(vec![1, 2]).unwrap();
        let mut delta = net.zero_delta();
        delta
            .insert(bias_name(0), Tensor::vector(vec![0.5, -0.5]).unwrap())
            .unwrap();
        let l = l1_penalty(&net, Some(&delta), 0.001).unwrap();
        assert!((l.value - 0.001).abs() < 1e-18);
        assert_eq!(l.gradients.get(&bias_name(0)).unwrap().data(), &[0.001, -0.001]);
        assert!(l.gradients.get("layer0.weight").unwrap().is_zero());
    }

    #[test]
    fn dpo_identical_policy_and_reference() {
        let net = ToyNet::random(&NetSpec::default(), 2).unwrap();
        let d = net.zero_delta().try_map(|_, t| t.map(|_| 0.1)).unwrap();
        let pairs: Vec<_> = (0..5)
            .map(|i| PreferencePair::new(vec![i as f64 * 0.3; 8], i % 4, (i + 1) % 4).unwrap())
            .collect();
        let l = dpo_loss(&net, Some(&d), Some(&d), &pairs, 0.7).unwrap();
        assert_eq!(l.value, std::f64::consts::LN_2);
    }

    #[test]
    fn dpo_margin_one() {
        // Reference logits equal; policy logits (1, 0) give margin 1.
        let net = bias_net([0.0, 0.0]);
        let mut policy = net.zero_delta();
        policy
            .insert(bias_name(0), Tensor::vector(vec![1.0, 0.0]).unwrap())
            .unwrap();
        let pair = [PreferencePair::new(vec![0.0], 0, 1).unwrap()];
        let l = dpo_loss(&net, None, Some(&policy), &pair, 1.0).unwrap();
        assert!((l.value - 0.313_261_687_518_222_8).abs() < 1e-12, "{}", l.value);
        let l2 = dpo_loss(&net, None, Some(&policy), &pair, 2.0).unwrap();
        assert!((l2.value - neg_log_sigmoid(2.0)).abs() < 1e-12);
    }

    #[test]
    fn orpo_reference_value() {
        // p_w = 0.8, p_l = 0.2 from logits (ln 4, 0).
        let net = bias_net([4f64.ln(), 0.0]);
        let pair = [PreferencePair::new(vec![0.0], 0, 1).unwrap()];
        let l = orpo_loss(&net, None, &pair, 1.0).unwrap();
        let want = -(0.8f64).ln() + neg_log_sigmoid(16f64.ln());
        assert!((l.value - want).abs() < 1e-12);
        assert!((l.value - 0.2838).abs() < 5e-5, "{}", l.value);

        let nll = orpo_loss(&net, None, &pair, 0.0).unwrap();
        assert!((nll.value + (0.8f64).ln()).abs() < 1e-12);

        let even = bias_net([0.0, 0.0]);
        let l = orpo_loss(&even, None, &pair, 1.0).unwrap();
        assert!((l.value - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let net = bias_net([800.0, -800.0]);
        let pair = [PreferencePair::new(vec![0.0], 1, 0).unwrap()];
        assert!(orpo_loss(&net, None, &pair, 1.0).unwrap().value.is_finite());
        assert!(dpo_loss(&net, None, None, &pair, 1.0).unwrap().value.is_finite());
        let ex = [Example { x: vec![0.0], label: 1 }];
        let l = sft_loss(&net, None, &ex, 0.0).unwrap();
        assert!((l.value + PROB_EPS.ln()).abs() < 1e-9);
        assert!(PreferencePair::new(vec![], 1, 1).is_err());
    }
}
