use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Default layer sizes: 8 inputs, one hidden layer of 16, 4 classes.
pub const DEFAULT_LAYERS: [usize; 3] = [8, 16, 4];

pub fn weight_name(layer: usize) -> String {
    format!("layer{layer}.weight")
}

pub fn bias_name(layer: usize) -> String {
    format!("layer{layer}.bias")
}

/// Fully connected network: `tanh` hidden layers, softmax output.
///
/// Layer `i` holds `layer{i}.weight` (`out x in`, row-major) and
/// `layer{i}.bias` (`out`). The parameters are the frozen base; every
/// evaluation adds a delta on top.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    sizes: Vec<usize>,
    params: ParamSet,
}

/// Layer-major dense parameters with the delta already added.
#[derive(Debug, Clone)]
pub(crate) struct Effective {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Activations kept for backpropagation. `acts[0]` is the input; the last
/// entry holds the output logits.
pub(crate) struct Trace {
    pub acts: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetSpec {
    pub layers: Vec<usize>,
    /// Standard deviation multiplier on `1/sqrt(fan_in)` for weights.
    pub init_scale: f64,
}

impl Default for NetSpec {
    fn default() -> Self {
        Self {
            layers: DEFAULT_LAYERS.to_vec(),
            init_scale: 0.75,
        }
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::InvalidConfig(format!(
            "layer sizes must list at least two positive extents, got {sizes:?}"
        )));
    }
    Ok(())
}

impl ToyNet {
    /// Wrap existing parameters, checking them against `sizes`.
    pub fn new(sizes: Vec<usize>, params: ParamSet) -> Result<Self> {
        check_sizes(&sizes)?;
        let net = Self { sizes, params };
        for (name, shape) in net.schema() {
            let t = net
                .params
                .get(&name)
                .ok_or_else(|| Error::MissingParameter(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(name, &shape, t.shape()));
            }
        }
        if net.params.len() != 2 * (net.sizes.len() - 1) {
            let extra = net
                .params
                .names()
                .find(|n| !net.schema().iter().any(|(s, _)| s == n))
                .unwrap_or_default()
                .to_string();
            return Err(Error::UnknownParameter(extra));
        }
        Ok(net)
    }

    /// Wrap parameters saved from a network, reading the layer sizes off the
    /// `layer{i}.weight` shapes.
    pub fn from_params(params: ParamSet) -> Result<Self> {
        let mut sizes = Vec::new();
        for l in 0.. {
            let Some(w) = params.get(&weight_name(l)) else { break };
            let &[out, inp] = w.shape() else {
                return Err(Error::shape(weight_name(l), &[0, 0], w.shape()));
            };
            if l == 0 {
                sizes.push(inp);
            }
            sizes.push(out);
        }
        Self::new(sizes, params)
    }

    /// All-zero parameters.
    pub fn zeros(sizes: Vec<usize>) -> Result<Self> {
        check_sizes(&sizes)?;
        let mut params = ParamSet::new();
        for (name, shape) in schema_for(&sizes) {
            params.insert(name, Tensor::zeros(&shape))?;
        }
        Ok(Self { sizes, params })
    }

    /// Gaussian weights with std `init_scale / sqrt(fan_in)`, zero biases.
    pub fn random(spec: &NetSpec, seed: u64) -> Result<Self> {
        check_sizes(&spec.layers)?;
        let mut rng = SeededRng::new(seed);
        let mut params = ParamSet::new();
        for l in 0..spec.layers.len() - 1 {
            let (fan_in, fan_out) = (spec.layers[l], spec.layers[l + 1]);
            let std = spec.init_scale / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| std * rng.normal()).collect();
            params.insert(weight_name(l), Tensor::new(vec![fan_out, fan_in], w)?)?;
            params.insert(bias_name(l), Tensor::zeros(&[fan_out]))?;
        }
        Ok(Self {
            sizes: spec.layers.clone(),
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.sizes.last().expect("at least two layers")
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Names and shapes of the trainable delta.
    pub fn schema(&self) -> Vec<(String, Vec<usize>)> {
        schema_for(&self.sizes)
    }

    pub fn zero_delta(&self) -> ParamSet {
        self.params.zeros_like()
    }

    /// Base parameters plus `delta`; names missing from `delta` count as zero.
    pub(crate) fn effective(&self, delta: Option<&ParamSet>) -> Result<Effective> {
        if let Some(d) = delta {
            for (name, t) in d {
                let b = self
                    .params
                    .get(name)
                    .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
                if b.shape() != t.shape() {
                    return Err(Error::shape(name.clone(), b.shape(), t.shape()));
                }
            }
        }
        let layers = self.sizes.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        let add = |name: &str| -> Vec<f64> {
            let base = self.params.get(name).expect("validated schema").data();
            match delta.and_then(|d| d.get(name)) {
                Some(d) => base.iter().zip(d.data()).map(|(b, x)| b + x).collect(),
                None => base.to_vec(),
            }
        };
        for l in 0..layers {
            weights.push(add(&weight_name(l)));
            biases.push(add(&bias_name(l)));
        }
        Ok(Effective { weights, biases })
    }

    pub(crate) fn trace(&self, eff: &Effective, x: &[f64]) -> Result<Trace> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("network input", &[self.input_dim()], &[x.len()]));
        }
        let layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(x.to_vec());
        for l in 0..layers {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let input = &acts[l];
            let w = &eff.weights[l];
            let mut z: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    eff.biases[l][o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            if l + 1 < layers {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        Ok(Trace { acts })
    }

    /// Accumulate parameter gradients given `dlogits = dL/dlogits` for one
    /// example. `grads` is laid out like [`Effective`].
    pub(crate) fn backward(&self, eff: &Effective, trace: &Trace, dlogits: &[f64], grads: &mut Effective) {
        let layers = self.sizes.len() - 1;
        let mut upstream = dlogits.to_vec();
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let input = &trace.acts[l];
            for (o, &g) in upstream.iter().enumerate().take(fan_out) {
                if g == 0.0 {
                    continue;
                }
                grads.biases[l][o] += g;
                let row = &mut grads.weights[l][o * fan_in..(o + 1) * fan_in];
                for (r, a) in row.iter_mut().zip(input) {
                    *r += g * a;
                }
            }
            if l > 0 {
                let w = &eff.weights[l];
                let mut down = vec![0.0; fan_in];
                for (o, &g) in upstream.iter().enumerate().take(fan_out) {
                    if g == 0.0 {
                        continue;
                    }
                    for (d, wv) in down.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *d += g * wv;
                    }
                }
                // tanh' = 1 - tanh^2, and acts[l] holds tanh outputs.
                for (d, a) in down.iter_mut().zip(input) {
                    *d *= 1.0 - a * a;
                }
                upstream = down;
            }
        }
    }

    pub(crate) fn zero_grads(&self) -> Effective {
        let layers = self.sizes.len() - 1;
        Effective {
            weights: (0..layers)
                .map(|l| vec![0.0; self.sizes[l] * self.sizes[l + 1]])
                .collect(),
            biases: (0..layers).map(|l| vec![0.0; self.sizes[l + 1]]).collect(),
        }
    }

    /// Convert layer-major gradients into a `ParamSet` over the trainable schema.
    pub(crate) fn grads_to_params(&self, grads: Effective, scale: f64) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (l, (w, b)) in grads.weights.into_iter().zip(grads.biases).enumerate() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            out.insert(
                weight_name(l),
                Tensor::new(vec![fan_out, fan_in], w.into_iter().map(|v| v * scale).collect())?,
            )?;
            out.insert(
                bias_name(l),
                Tensor::new(vec![fan_out], b.into_iter().map(|v| v * scale).collect())?,
            )?;
        }
        Ok(out)
    }

    /// Output logits for `x` under `base + delta`.
    pub fn logits(&self, delta: Option<&ParamSet>, x: &[f64]) -> Result<Vec<f64>> {
        let eff = self.effective(delta)?;
        Ok(self.trace(&eff, x)?.acts.pop().expect("output layer"))
    }

    /// Class probabilities for `x` under `base + delta`.
    pub fn forward(&self, delta: Option<&ParamSet>, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(delta, x)?))
    }

    /// Batched forward reusing one effective parameter set.
    pub fn forward_batch<'a, I>(&self, delta: Option<&ParamSet>, xs: I) -> Result<Vec<Vec<f64>>>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let eff = self.effective(delta)?;
        xs.into_iter()
            .map(|x| Ok(softmax(self.trace(&eff, x)?.acts.last().expect("output"))))
            .collect()
    }
}

fn schema_for(sizes: &[usize]) -> Vec<(String, Vec<usize>)> {
    let mut schema = Vec::new();
    for l in 0..sizes.len() - 1 {
        schema.push((weight_name(l), vec![sizes[l + 1], sizes[l]]));
        schema.push((bias_name(l), vec![sizes[l + 1]]));
    }
    schema.sort_by(|a, b| a.0.cmp(&b.0));
    schema
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
