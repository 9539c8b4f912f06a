//! Deterministic synthetic tasks and their text file format.
//!
//! Two teachers are drawn from the seed: an SFT teacher `W_s` and a
//! preference teacher `W_p`, both `classes x input_dim` Gaussian matrices.
//! `W_s` reads only the first `sft_features` inputs and `W_p` only the last
//! `pref_features`; the other columns are zero. Inputs are standard normal.
//!
//! * SFT example: `(x, argmax W_s x)`.
//! * Preference pair: winner `argmax W_p x`. When the SFT label differs from
//!   the winner, the loser is the SFT label with probability `conflict` and
//!   otherwise a uniform class other than both. When they agree, the loser
//!   is a uniform other class. `conflict` is the knob that makes preference
//!   training penalize answers the SFT task rewards; at 0 a single model can
//!   satisfy both tasks.
//!
//! # File grammar
//!
//! ```text
//! file    := line*
//! line    := blank | comment | sft | pref
//! comment := '#' any* '\n'
//! sft     := features ';' label '\n'
//! pref    := features ';' winner '>' loser '\n'
//! features:= float (ws float)*
//! ```
//!
//! Floats are written in shortest round-trip form, so a write/read cycle is
//! exact. Class indices are decimal integers.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeededRng};

use super::loss::{Example, PreferencePair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub input_dim: usize,
    pub classes: usize,
    pub sft_train: usize,
    pub sft_eval: usize,
    pub pref_train: usize,
    pub pref_eval: usize,
    /// Probability that a preference pair's loser is the SFT label.
    pub conflict: f64,
    /// Leading inputs the SFT teacher reads.
    pub sft_features: usize,
    /// Trailing inputs the preference teacher reads.
    pub pref_features: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            input_dim: 8,
            classes: 4,
            sft_train: 112,
            sft_eval: 1024,
            pref_train: 256,
            pref_eval: 1024,
            conflict: 0.25,
            sft_features: 8,
            pref_features: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub sft_train: Vec<Example>,
    pub sft_eval: Vec<Example>,
    pub pref_train: Vec<PreferencePair>,
    pub pref_eval: Vec<PreferencePair>,
}

struct Teacher {
    w: Vec<f64>,
    classes: usize,
}

impl Teacher {
    /// Gaussian weights on input columns `cols`, zero elsewhere.
    fn draw(rng: &mut SeededRng, classes: usize, dim: usize, cols: std::ops::Range<usize>) -> Self {
        let w = (0..classes * dim)
            .map(|i| {
                let v = rng.normal();
                if cols.contains(&(i % dim)) {
                    v
                } else {
                    0.0
                }
            })
            .collect();
        Self { w, classes }
    }

    fn label(&self, x: &[f64]) -> usize {
        let d = x.len();
        (0..self.classes)
            .map(|c| {
                self.w[c * d..(c + 1) * d]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |best, (c, s)| if s > best.1 { (c, s) } else { best },
            )
            .0
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "benchmark needs input_dim >= 1 and classes >= 2, got {} and {}",
                self.input_dim, self.classes
            )));
        }
        for (name, k) in [
            ("sft_features", self.sft_features),
            ("pref_features", self.pref_features),
        ] {
            if k == 0 || k > self.input_dim {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in [1, input_dim = {}], got {k}",
                    self.input_dim
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.conflict) {
            return Err(Error::InvalidConfig(format!(
                "conflict must lie in [0, 1], got {}",
                self.conflict
            )));
        }
        Ok(())
    }

    /// Generate all four splits from `seed`.
    pub fn generate(&self, seed: u64) -> Result<Benchmark> {
        self.validate()?;
        let (k, d) = (self.classes, self.input_dim);
        let mut trng = SeededRng::new(derive_seed(seed, "teachers"));
        let sft_teacher = Teacher::draw(&mut trng, k, d, 0..self.sft_features);
        let pref_teacher = Teacher::draw(&mut trng, k, d, d - self.pref_features..d);

        let sft = |n: usize, stream: &str| {
            let mut rng = SeededRng::new(derive_seed(seed, stream));
            (0..n)
                .map(|_| {
                    let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                    Example {
                        label: sft_teacher.label(&x),
                        x,
                    }
                })
                .collect::<Vec<_>>()
        };
        let pref = |n: usize, stream: &str| -> Result<Vec<PreferencePair>> {
            let mut rng = SeededRng::new(derive_seed(seed, stream));
            (0..n)
                .map(|_| {
                    let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                    let winner = pref_teacher.label(&x);
                    let sft_label = sft_teacher.label(&x);
                    let conflicted = rng.next_f64() < self.conflict;
                    let loser = if sft_label == winner {
                        (winner + 1 + rng.below(k - 1)) % k
                    } else if conflicted || k == 2 {
                        sft_label
                    } else {
                        // Uniform over classes other than the winner and the SFT label.
                        let mut c = rng.below(k - 2);
                        for skip in [winner.min(sft_label), winner.max(sft_label)] {
                            if c >= skip {
                                c += 1;
                            }
                        }
                        c
                    };
                    PreferencePair::new(x, winner, loser)
                })
                .collect()
        };
        Ok(Benchmark {
            sft_train: sft(self.sft_train, "sft_train"),
            sft_eval: sft(self.sft_eval, "sft_eval"),
            pref_train: pref(self.pref_train, "pref_train")?,
            pref_eval: pref(self.pref_eval, "pref_eval")?,
        })
    }
}

fn features(out: &mut String, x: &[f64]) {
    for (i, v) in x.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{v:?}").expect("write to string");
    }
}

pub fn sft_to_text(examples: &[Example]) -> String {
    let mut out = String::new();
    for e in examples {
        features(&mut out, &e.x);
        writeln!(out, " ; {}", e.label).expect("write to string");
    }
    out
}

pub fn pref_to_text(pairs: &[PreferencePair]) -> String {
    let mut out = String::new();
    for p in pairs {
        features(&mut out, &p.x);
        writeln!(out, " ; {} > {}", p.winner, p.loser).expect("write to string");
    }
    out
}

/// Non-comment lines with their byte offsets.
fn records(text: &str) -> impl Iterator<Item = (u64, &str)> {
    let mut offset = 0u64;
    text.split_inclusive('\n').filter_map(move |raw| {
        let start = offset;
        offset += raw.len() as u64;
        let line = raw.trim();
        (!line.is_empty() && !line.starts_with('#')).then_some((start, line))
    })
}

fn parse_features(offset: u64, s: &str) -> Result<Vec<f64>> {
    let x: Vec<f64> = s
        .split_whitespace()
        .map(|f| match f.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(Error::format(offset, format!("invalid feature value {f:?}"))),
        })
        .collect::<Result<_>>()?;
    if x.is_empty() {
        return Err(Error::format(offset, "record has no features"));
    }
    Ok(x)
}

fn parse_class(offset: u64, s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::format(offset, format!("invalid class index {:?}", s.trim())))
}

fn split_record(offset: u64, line: &str) -> Result<(Vec<f64>, &str)> {
    let (f, rest) = line
        .split_once(';')
        .ok_or_else(|| Error::format(offset, "missing ';' between features and labels"))?;
    Ok((parse_features(offset, f)?, rest))
}

fn check_width(offset: u64, width: &mut Option<usize>, len: usize) -> Result<()> {
    match *width {
        Some(w) if w != len => Err(Error::format(offset, format!("expected {w} features, found {len}"))),
        _ => {
            *width = Some(len);
            Ok(())
        }
    }
}

pub fn sft_from_text(text: &str) -> Result<Vec<Example>> {
    let mut width = None;
    records(text)
        .map(|(offset, line)| {
            let (x, rest) = split_record(offset, line)?;
            check_width(offset, &mut width, x.len())?;
            Ok(Example {
                x,
                label: parse_class(offset, rest)?,
            })
        })
        .collect()
}

pub fn pref_from_text(text: &str) -> Result<Vec<PreferencePair>> {
    let mut width = None;
    records(text)
        .map(|(offset, line)| {
            let (x, rest) = split_record(offset, line)?;
            check_width(offset, &mut width, x.len())?;
            let (w, l) = rest
                .split_once('>')
                .ok_or_else(|| Error::format(offset, "expected 'winner > loser'"))?;
            let (w, l) = (parse_class(offset, w)?, parse_class(offset, l)?);
            PreferencePair::new(x, w, l).map_err(|e| Error::format(offset, e.to_string()))
        })
        .collect()
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_sft(path: &Path) -> Result<Vec<Example>> {
    sft_from_text(&read(path)?)
}

pub fn load_pref(path: &Path) -> Result<Vec<PreferencePair>> {
    pref_from_text(&read(path)?)
}

pub fn save_sft(path: &Path, examples: &[Example]) -> Result<()> {
    write_atomic(path, sft_to_text(examples).as_bytes())
}

pub fn save_pref(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    write_atomic(path, pref_to_text(pairs).as_bytes())
}
