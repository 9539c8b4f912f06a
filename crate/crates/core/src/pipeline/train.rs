use serde::{Deserialize, Serialize};

use crate::delta::DeltaSet;
use crate::error::{Error, Result};
use crate::lora::{compose_lora, LoraAdapter, LoraLayer};
use crate::params::ParamSet;
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Tensor;
use crate::toy::loss::{dpo_loss, orpo_loss, sft_loss, Example, LossValue, PreferencePair};
use crate::toy::net::ToyNet;

/// Steps above `DIVERGENCE_FACTOR x` the initial loss before training aborts.
pub const DIVERGENCE_PATIENCE: usize = 50;
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Momentum coefficient of [`Optimizer::SgdMomentum`].
pub const MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Sgd,
    SgdMomentum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferenceMethod {
    #[default]
    Dpo,
    Orpo,
}

impl PreferenceMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            PreferenceMethod::Dpo => "dpo",
            PreferenceMethod::Orpo => "orpo",
        }
    }
}

/// How the L1 term of the sparse SFT objective enters the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L1Step {
    /// Gradient step on the data term, then soft-thresholding by `lr * lambda`.
    #[default]
    Proximal,
    /// Plain subgradient step on the full objective.
    Subgradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Sft,
    SftSparse,
    Dpo,
    Orpo,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Sft => "sft",
            Objective::SftSparse => "sft_sparse",
            Objective::Dpo => "dpo",
            Objective::Orpo => "orpo",
        }
    }
}

impl From<PreferenceMethod> for Objective {
    fn from(m: PreferenceMethod) -> Self {
        match m {
            PreferenceMethod::Dpo => Objective::Dpo,
            PreferenceMethod::Orpo => Objective::Orpo,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// L1 weight of the sparse SFT objective.
    pub lambda: f64,
    /// Preference loss temperature (DPO) or odds-ratio weight (ORPO).
    pub beta: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub preference: PreferenceMethod,
    pub l1_step: L1Step,
    /// Minibatch size; `None` trains on the full batch every step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// Train low-rank factors for the weight matrices instead of a dense delta.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lora_rank: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.5,
            lambda: 0.0,
            beta: 1.0,
            seed: 0,
            optimizer: Optimizer::Sgd,
            preference: PreferenceMethod::Dpo,
            l1_step: L1Step::Proximal,
            batch_size: None,
            lora_rank: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be > 0, got {}", self.beta));
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be >= 1".into());
        }
        if self.lora_rank == Some(0) {
            return bad("lora_rank must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum TrainData<'a> {
    Sft(&'a [Example]),
    Pref(&'a [PreferencePair]),
}

impl TrainData<'_> {
    pub fn len(&self) -> usize {
        match self {
            TrainData::Sft(d) => d.len(),
            TrainData::Pref(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub delta: DeltaSet,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Train a delta on top of `net` from zero.
pub fn train_adapter(net: &ToyNet, objective: Objective, data: TrainData<'_>, config: &TrainConfig) -> Result<Trained> {
    train_on_top(net, objective, data, config, None)
}

/// Train a fresh delta on top of `net + offset` and return `offset + delta`.
///
/// The offset is frozen; DPO uses `net + offset` as its reference.
pub fn train_on_top(
    net: &ToyNet,
    objective: Objective,
    data: TrainData<'_>,
    config: &TrainConfig,
    offset: Option<&ParamSet>,
) -> Result<Trained> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    match (objective, data) {
        (Objective::Sft | Objective::SftSparse, TrainData::Sft(_))
        | (Objective::Dpo | Objective::Orpo, TrainData::Pref(_)) => {}
        _ => {
            return Err(Error::InvalidConfig(format!(
                "objective {} does not match the supplied data",
                objective.as_str()
            )))
        }
    }
    let zero = net.zero_delta();
    let offset = offset.unwrap_or(&zero);
    let mut trainer = Trainer::new(net, objective, data, config, offset)?;
    let trained = match config.lora_rank {
        None => trainer.run_dense()?,
        Some(rank) => trainer.run_lora(rank)?,
    };
    let mut delta = DeltaSet::new(add(offset, &trained.0)?);
    delta.source = objective.as_str().to_string();
    Ok(Trained {
        delta,
        initial_loss: trained.1,
        final_loss: trained.2,
    })
}

fn add(a: &ParamSet, b: &ParamSet) -> Result<ParamSet> {
    a.try_map(|name, t| match b.get(name) {
        Some(u) => t.add(u),
        None => Ok(t.clone()),
    })
}

struct Trainer<'a> {
    net: &'a ToyNet,
    objective: Objective,
    data: TrainData<'a>,
    config: &'a TrainConfig,
    offset: &'a ParamSet,
    rng: SeededRng,
    initial: Option<f64>,
    above: usize,
}

impl<'a> Trainer<'a> {
    fn new(
        net: &'a ToyNet,
        objective: Objective,
        data: TrainData<'a>,
        config: &'a TrainConfig,
        offset: &'a ParamSet,
    ) -> Result<Self> {
        Ok(Self {
            net,
            objective,
            data,
            config,
            offset,
            rng: SeededRng::new(derive_seed(config.seed, "minibatch")),
            initial: None,
            above: 0,
        })
    }

    fn proximal(&self) -> bool {
        self.objective == Objective::SftSparse
            && self.config.l1_step == L1Step::Proximal
            && self.config.lora_rank.is_none()
            && self.config.lambda > 0.0
    }

    fn lambda(&self) -> f64 {
        if self.objective == Objective::SftSparse {
            self.config.lambda
        } else {
            0.0
        }
    }

    fn batch_indices(&mut self) -> Option<Vec<usize>> {
        let n = self.data.len();
        let b = self.config.batch_size?;
        if b >= n {
            return None;
        }
        let mut idx: Vec<usize> = (0..n).collect();
        // Partial Fisher-Yates: the first `b` slots form the minibatch.
        for i in 0..b {
            let j = i + self.rng.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(b);
        idx.sort_unstable();
        Some(idx)
    }

    /// Loss of `offset + trainable`, where `trainable` is the delta being
    /// learned. With `data_only` the L1 term is left out of value and gradient.
    fn loss(&self, trainable: &ParamSet, idx: Option<&[usize]>, data_only: bool) -> Result<LossValue> {
        let delta = add(self.offset, trainable)?;
        let lambda = if data_only { 0.0 } else { self.lambda() };
        match self.data {
            TrainData::Sft(all) => {
                let picked: Vec<Example>;
                let batch = match idx {
                    Some(idx) => {
                        picked = idx.iter().map(|&i| all[i].clone()).collect();
                        &picked[..]
                    }
                    None => all,
                };
                let mut l = sft_loss(self.net, Some(&delta), batch, 0.0)?;
                if lambda > 0.0 {
                    // The penalty applies to the trainable part only.
                    let p = crate::toy::loss::l1_penalty(self.net, Some(trainable), lambda)?;
                    l.value += p.value;
                    l.gradients = l.gradients.try_map(|n, g| g.add(p.gradients.get(n).expect("schema")))?;
                }
                Ok(l)
            }
            TrainData::Pref(all) => {
                let picked: Vec<PreferencePair>;
                let batch = match idx {
                    Some(idx) => {
                        picked = idx.iter().map(|&i| all[i].clone()).collect();
                        &picked[..]
                    }
                    None => all,
                };
                match self.objective {
                    Objective::Dpo => dpo_loss(self.net, Some(self.offset), Some(&delta), batch, self.config.beta),
                    _ => orpo_loss(self.net, Some(&delta), batch, self.config.beta),
                }
            }
        }
    }

    /// Divergence bookkeeping on the full-objective loss at one step.
    fn observe(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let initial = *self.initial.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * initial {
            self.above += 1;
            if self.above >= DIVERGENCE_PATIENCE {
                return Err(Error::Divergence { step, loss });
            }
        } else {
            self.above = 0;
        }
        Ok(())
    }

    fn step_loss(&mut self, step: usize, trainable: &ParamSet) -> Result<LossValue> {
        let idx = self.batch_indices();
        let data_only = self.proximal();
        let l = match self.loss(trainable, idx.as_deref(), data_only) {
            Err(Error::NonFinite(_)) => return Err(Error::Divergence { step, loss: f64::NAN }),
            other => other?,
        };
        let mut full = l.value;
        if data_only {
            full += self.lambda() * trainable.l1_norm();
        }
        self.observe(step, full)?;
        Ok(l)
    }

    fn final_loss(&self, trainable: &ParamSet) -> Result<f64> {
        Ok(self.loss(trainable, None, false)?.value)
    }

    fn run_dense(&mut self) -> Result<(ParamSet, f64, f64)> {
        let cfg = self.config;
        let mut w = self.net.zero_delta();
        let mut velocity = self.net.zero_delta();
        let initial = self.final_loss(&w)?;
        let shrink = cfg.lr * self.lambda();
        for step in 0..cfg.steps {
            let g = self.step_loss(step, &w)?.gradients;
            let dir = match cfg.optimizer {
                Optimizer::Sgd => g,
                Optimizer::SgdMomentum => {
                    velocity = velocity.try_map(|n, v| v.mul_scalar(MOMENTUM)?.add(g.get(n).expect("schema")))?;
                    velocity.clone()
                }
            };
            let prox = self.proximal();
            w = w
                .try_map(|n, t| {
                    let d = dir.get(n).expect("schema").data();
                    t.with_data(
                        t.data()
                            .iter()
                            .zip(d)
                            .map(|(&x, &g)| {
                                let y = x - cfg.lr * g;
                                if prox {
                                    soft_threshold(y, shrink)
                                } else {
                                    y
                                }
                            })
                            .collect(),
                    )
                })
                .map_err(|_| Error::Divergence { step, loss: f64::NAN })?;
        }
        let last = self.final_loss(&w)?;
        Ok((w, initial, last))
    }

    fn run_lora(&mut self, rank: usize) -> Result<(ParamSet, f64, f64)> {
        let cfg = self.config;
        let mut init = SeededRng::new(derive_seed(cfg.seed, "lora_init"));
        let mut layers = std::collections::BTreeMap::new();
        for (name, shape) in self.net.schema() {
            if shape.len() != 2 {
                continue;
            }
            let (m, n) = (shape[0], shape[1]);
            let std = 1.0 / (n as f64).sqrt();
            let a = Tensor::new(vec![rank, n], (0..rank * n).map(|_| std * init.normal()).collect())?;
            layers.insert(
                name,
                LoraLayer {
                    a,
                    b: Tensor::zeros(&[m, rank]),
                },
            );
        }
        let mut adapter = LoraAdapter::new(layers, rank, 1.0)?;
        let mut vel: Option<Vec<(Tensor, Tensor)>> = None;
        let dense = |adapter: &LoraAdapter, net: &ToyNet| -> Result<ParamSet> {
            let composed = compose_lora(adapter)?;
            add(&net.zero_delta(), &composed.params)
        };
        let initial = self.final_loss(&dense(&adapter, self.net)?)?;
        for step in 0..cfg.steps {
            let g = self.step_loss(step, &dense(&adapter, self.net)?)?.gradients;
            let s = adapter.scaling();
            let mut grads = Vec::new();
            for (name, layer) in adapter.layers() {
                let gw = g.get(name).expect("schema");
                // d/dA = s B^T G, d/dB = s G A^T
                let ga = transpose(&layer.b)?.matmul(gw)?.mul_scalar(s)?;
                let gb = gw.matmul(&transpose(&layer.a)?)?.mul_scalar(s)?;
                grads.push((ga, gb));
            }
            if cfg.optimizer == Optimizer::SgdMomentum {
                let v = vel.get_or_insert_with(|| {
                    grads
                        .iter()
                        .map(|(a, b)| (a.mul_scalar(0.0).expect("finite"), b.mul_scalar(0.0).expect("finite")))
                        .collect()
                });
                for ((va, vb), (ga, gb)) in v.iter_mut().zip(&grads) {
                    *va = va.mul_scalar(MOMENTUM)?.add(ga)?;
                    *vb = vb.mul_scalar(MOMENTUM)?.add(gb)?;
                }
                grads = v.clone();
            }
            let mut next = std::collections::BTreeMap::new();
            for ((name, layer), (ga, gb)) in adapter.layers().iter().zip(&grads) {
                let a = layer
                    .a
                    .axpy(-cfg.lr, ga)
                    .map_err(|_| Error::Divergence { step, loss: f64::NAN })?;
                let b = layer
                    .b
                    .axpy(-cfg.lr, gb)
                    .map_err(|_| Error::Divergence { step, loss: f64::NAN })?;
                next.insert(name.clone(), LoraLayer { a, b });
            }
            adapter = LoraAdapter::new(next, rank, 1.0)?;
        }
        let w = dense(&adapter, self.net)?;
        let last = self.final_loss(&w)?;
        Ok((w, initial, last))
    }
}

fn transpose(t: &Tensor) -> Result<Tensor> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let d = t.data();
    Tensor::new(vec![c, r], (0..c * r).map(|i| d[(i % r) * c + i / r]).collect())
}

pub fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}
