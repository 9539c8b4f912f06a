use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::delta::{extract_delta, sparsity, DeltaSet, ExtractMode, LayerAveraging, DEFAULT_SPARSITY_THRESHOLD};
use crate::error::{Error, Result};
use crate::merge::{MergeInput, MergeMethod, MergeRecipe, DEFAULT_DENSITY, DEFAULT_DROP, DEFAULT_T};
use crate::params::ParamSet;
use crate::rng::derive_seed;
use crate::sparsify::Granularity;
use crate::toy::data::{Benchmark, BenchmarkSpec};
use crate::toy::net::{NetSpec, ToyNet};

use super::{evaluate, merge_pair, sequential_from, train_pref, train_sft, with_delta, EvalSuite, StageConfigs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Sparse SFT and preference deltas trained in parallel, then merged.
    ParallelSparse,
    /// Dense SFT and preference deltas trained in parallel, then merged.
    ParallelDense,
    Sequential,
    /// Each delta alone, and the base model.
    Individual,
}

impl Arm {
    pub const ALL: [Arm; 4] = [
        Arm::ParallelSparse,
        Arm::ParallelDense,
        Arm::Sequential,
        Arm::Individual,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::ParallelSparse => "parallel_sparse",
            Arm::ParallelDense => "parallel_dense",
            Arm::Sequential => "sequential",
            Arm::Individual => "individual",
        }
    }

    fn merges(self) -> bool {
        matches!(self, Arm::ParallelSparse | Arm::ParallelDense)
    }
}

/// Merge settings shared by every parallel cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeKnobs {
    pub density: f64,
    pub drop: f64,
    pub t: f64,
    /// Weights of the SFT and preference deltas.
    pub weights: [f64; 2],
    pub granularity: Granularity,
}

impl Default for MergeKnobs {
    fn default() -> Self {
        Self {
            density: DEFAULT_DENSITY,
            drop: DEFAULT_DROP,
            t: DEFAULT_T,
            weights: [1.0, 1.0],
            granularity: Granularity::PerTensor,
        }
    }
}

impl MergeKnobs {
    pub fn recipe(&self, method: MergeMethod, seed: u64) -> MergeRecipe {
        let mut r = MergeRecipe::new(
            method,
            vec![
                MergeInput::new("sft", self.weights[0]),
                MergeInput::new("pref", self.weights[1]),
            ],
        );
        r.density = Some(self.density);
        r.drop = Some(self.drop);
        r.t = Some(self.t);
        r.seed = Some(seed);
        r.granularity = Some(self.granularity);
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arms: Vec<Arm>,
    pub methods: Vec<MergeMethod>,
    pub seeds: Vec<u64>,
    /// L1 weight of the sparse SFT arms.
    pub sparse_lambda: f64,
    /// Lambdas for the SFT sparsity sweep reported alongside the table.
    pub lambda_grid: Vec<f64>,
    pub benchmark: BenchmarkSpec,
    pub net: NetSpec,
    /// Training settings; `sft.lambda` is overridden per arm.
    pub stages: StageConfigs,
    pub merge: MergeKnobs,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            arms: Arm::ALL.to_vec(),
            methods: MergeMethod::ALL.to_vec(),
            seeds: (0..10).collect(),
            sparse_lambda: 1e-3,
            lambda_grid: vec![0.0, 1e-4, 1e-3],
            benchmark: BenchmarkSpec::default(),
            net: NetSpec::default(),
            stages: StageConfigs::default(),
            merge: MergeKnobs::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.arms.is_empty() {
            return bad("at least one arm is required");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.arms.iter().any(|a| a.merges()) && self.methods.is_empty() {
            return bad("parallel arms need at least one merge method");
        }
        if !(self.sparse_lambda > 0.0 && self.sparse_lambda.is_finite()) {
            return bad("sparse_lambda must be > 0");
        }
        if self.lambda_grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return bad("lambda_grid entries must be >= 0");
        }
        self.benchmark.validate()?;
        for stage in [&self.stages.sft, &self.stages.pref] {
            // Zero steps are allowed and skip the stage.
            let mut s = stage.clone();
            s.steps = s.steps.max(1);
            s.validate()?;
        }
        Ok(())
    }

    fn pref_name(&self) -> &'static str {
        self.stages.pref.preference.as_str()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub arm: Arm,
    pub variant: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<MergeMethod>,
    pub seed: u64,
    pub sft_accuracy: Option<f64>,
    pub pref_win_rate: Option<f64>,
    pub average: Option<f64>,
    /// Sparsity of the model's total delta from the base.
    pub sparsity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ReportRow {
    fn key(&self) -> (Arm, &str, Option<MergeMethod>, u64) {
        (self.arm, &self.variant, self.method, self.seed)
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub arm: Arm,
    pub variant: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<MergeMethod>,
    pub runs: usize,
    pub failed: usize,
    pub sft_accuracy: Option<Stat>,
    pub pref_win_rate: Option<Stat>,
    pub average: Option<Stat>,
    pub sparsity: Option<Stat>,
}

/// Seeds on which `left` scored a strictly higher average than `right`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub left: String,
    pub right: String,
    pub wins: usize,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityPoint {
    pub lambda: f64,
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<Aggregate>,
    pub comparisons: Vec<Comparison>,
    pub sparsity_by_lambda: Vec<SparsityPoint>,
}

fn delta_sparsity(net: &ToyNet, params: &ParamSet) -> Result<f64> {
    let d = extract_delta(params, net.params(), ExtractMode::Strict)?.delta;
    Ok(sparsity(&d.params, DEFAULT_SPARSITY_THRESHOLD, LayerAveraging::Uniform)?.average)
}

struct SeedRun<'a> {
    config: &'a ExperimentConfig,
    seed: u64,
    net: ToyNet,
    bench: Benchmark,
    suites: Vec<EvalSuite>,
}

impl<'a> SeedRun<'a> {
    fn new(config: &'a ExperimentConfig, seed: u64) -> Result<Self> {
        let net = ToyNet::random(&config.net, derive_seed(seed, "net"))?;
        if net.input_dim() != config.benchmark.input_dim || net.num_classes() != config.benchmark.classes {
            return Err(Error::InvalidConfig(format!(
                "net layers {:?} do not fit benchmark input_dim {} and classes {}",
                config.net.layers, config.benchmark.input_dim, config.benchmark.classes
            )));
        }
        let bench = config.benchmark.generate(derive_seed(seed, "data"))?;
        let suites = vec![
            EvalSuite::Accuracy {
                name: "sft_accuracy".into(),
                examples: bench.sft_eval.clone(),
            },
            EvalSuite::WinRate {
                name: "pref_win_rate".into(),
                pairs: bench.pref_eval.clone(),
            },
        ];
        Ok(Self {
            config,
            seed,
            net,
            bench,
            suites,
        })
    }

    fn stages(&self, lambda: f64) -> StageConfigs {
        let mut s = self.config.stages.clone();
        s.sft.lambda = lambda;
        s.sft.seed = derive_seed(self.seed, "sft");
        s.pref.seed = derive_seed(self.seed, "pref");
        s
    }

    fn row(&self, arm: Arm, variant: String, method: Option<MergeMethod>, model: Result<ParamSet>) -> ReportRow {
        let mut row = ReportRow {
            arm,
            variant,
            method,
            seed: self.seed,
            sft_accuracy: None,
            pref_win_rate: None,
            average: None,
            sparsity: None,
            error: None,
        };
        let scored = model.and_then(|m| Ok((evaluate(&self.net, &m, &self.suites)?, delta_sparsity(&self.net, &m)?)));
        match scored {
            Ok((eval, sp)) => {
                row.sft_accuracy = Some(eval.per_suite[0].1);
                row.pref_win_rate = Some(eval.per_suite[1].1);
                row.average = Some(eval.average);
                row.sparsity = Some(sp);
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        row
    }

    fn rows(&self) -> SeedOutput {
        let cfg = self.config;
        let pref = cfg.pref_name();
        let b = &self.bench;
        let sparse_stages = self.stages(cfg.sparse_lambda);
        let dense_stages = self.stages(0.0);
        let sft_sparse = train_sft(&self.net, &b.sft_train, &sparse_stages);
        let sft_dense = train_sft(&self.net, &b.sft_train, &dense_stages);
        let pref_delta = train_pref(&self.net, &b.pref_train, &dense_stages);
        let err = |e: &Error| Error::InvalidConfig(format!("training failed: {e}"));
        let pair = |sft: &Result<DeltaSet>| -> Result<(DeltaSet, DeltaSet)> {
            let s = sft.as_ref().map_err(err)?.clone();
            let p = pref_delta.as_ref().map_err(err)?.clone();
            Ok((s, p))
        };

        let mut rows = Vec::new();
        for &arm in &cfg.arms {
            match arm {
                Arm::ParallelSparse | Arm::ParallelDense => {
                    let (sft, tag) = if arm == Arm::ParallelSparse {
                        (&sft_sparse, "sft_sparse")
                    } else {
                        (&sft_dense, "sft")
                    };
                    for &m in &cfg.methods {
                        let recipe = cfg.merge.recipe(m, derive_seed(self.seed, "dare"));
                        let model = pair(sft).and_then(|(s, p)| merge_pair(&self.net, &s, &p, &recipe));
                        rows.push(self.row(arm, format!("{tag}+{pref}"), Some(m), model));
                    }
                }
                Arm::Sequential => {
                    for (sft, tag, stages) in [
                        (&sft_sparse, "sft_sparse", &sparse_stages),
                        (&sft_dense, "sft", &dense_stages),
                    ] {
                        let model = sft
                            .as_ref()
                            .map_err(err)
                            .and_then(|s| sequential_from(&self.net, s, &b.pref_train, stages))
                            .and_then(|d| with_delta(&self.net, &d));
                        rows.push(self.row(arm, format!("{tag}+{pref}"), None, model));
                    }
                }
                Arm::Individual => {
                    for (d, tag) in [
                        (&sft_sparse, "sft_sparse".to_string()),
                        (&sft_dense, "sft".to_string()),
                        (&pref_delta, pref.to_string()),
                    ] {
                        let model = d.as_ref().map_err(err).and_then(|d| with_delta(&self.net, d));
                        rows.push(self.row(arm, format!("{tag}_alone"), None, model));
                    }
                    rows.push(self.row(arm, "base".into(), None, Ok(self.net.params().clone())));
                }
            }
        }

        let sweep = cfg
            .lambda_grid
            .iter()
            .map(|&lambda| {
                let sp = if lambda == cfg.sparse_lambda {
                    sft_sparse.as_ref().ok().cloned()
                } else if lambda == 0.0 {
                    sft_dense.as_ref().ok().cloned()
                } else {
                    train_sft(&self.net, &b.sft_train, &self.stages(lambda)).ok()
                };
                let value = sp.and_then(|d| {
                    sparsity(&d.params, DEFAULT_SPARSITY_THRESHOLD, LayerAveraging::Uniform)
                        .ok()
                        .map(|r| r.average)
                });
                (lambda, value)
            })
            .collect();
        (rows, sweep)
    }
}

fn failed_rows(config: &ExperimentConfig, seed: u64, e: &Error) -> Vec<ReportRow> {
    let pref = config.pref_name();
    let mut out = Vec::new();
    let mut push = |arm, variant: String, method| {
        out.push(ReportRow {
            arm,
            variant,
            method,
            seed,
            sft_accuracy: None,
            pref_win_rate: None,
            average: None,
            sparsity: None,
            error: Some(e.to_string()),
        })
    };
    for &arm in &config.arms {
        match arm {
            Arm::ParallelSparse | Arm::ParallelDense => {
                let tag = if arm == Arm::ParallelSparse {
                    "sft_sparse"
                } else {
                    "sft"
                };
                for &m in &config.methods {
                    push(arm, format!("{tag}+{pref}"), Some(m));
                }
            }
            Arm::Sequential => {
                push(arm, format!("sft_sparse+{pref}"), None);
                push(arm, format!("sft+{pref}"), None);
            }
            Arm::Individual => {
                for v in [
                    "sft_sparse_alone".to_string(),
                    "sft_alone".into(),
                    format!("{pref}_alone"),
                    "base".into(),
                ] {
                    push(arm, v, None);
                }
            }
        }
    }
    out
}

/// Aggregate rows per (arm, variant, method), skipping failed rows.
pub fn aggregate(rows: &[ReportRow]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(Arm, String, Option<MergeMethod>), Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.arm, r.variant.clone(), r.method)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((arm, variant, method), rs)| {
            let ok: Vec<&&ReportRow> = rs.iter().filter(|r| !r.failed()).collect();
            let stat = |f: fn(&ReportRow) -> Option<f64>| Stat::of(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            Aggregate {
                arm,
                variant,
                method,
                runs: ok.len(),
                failed: rs.len() - ok.len(),
                sft_accuracy: stat(|r| r.sft_accuracy),
                pref_win_rate: stat(|r| r.pref_win_rate),
                average: stat(|r| r.average),
                sparsity: stat(|r| r.sparsity),
            }
        })
        .collect()
}

fn label(arm: Arm, variant: &str, method: Option<MergeMethod>) -> String {
    match method {
        Some(m) => format!("{}/{variant}/{m}", arm.as_str()),
        None => format!("{}/{variant}", arm.as_str()),
    }
}

/// Per-seed wins of `left` over `right`, counting only seeds where both ran.
pub fn compare(
    rows: &[ReportRow],
    left: (Arm, &str, Option<MergeMethod>),
    right: (Arm, &str, Option<MergeMethod>),
) -> Comparison {
    let scores = |k: (Arm, &str, Option<MergeMethod>)| -> BTreeMap<u64, f64> {
        rows.iter()
            .filter(|r| (r.arm, r.variant.as_str(), r.method) == k)
            .filter_map(|r| r.average.map(|a| (r.seed, a)))
            .collect()
    };
    let (l, r) = (scores(left), scores(right));
    let both: Vec<(f64, f64)> = l.iter().filter_map(|(s, a)| r.get(s).map(|b| (*a, *b))).collect();
    Comparison {
        left: label(left.0, left.1, left.2),
        right: label(right.0, right.1, right.2),
        wins: both.iter().filter(|(a, b)| a > b).count(),
        seeds: both.len(),
    }
}

fn comparisons(config: &ExperimentConfig, rows: &[ReportRow]) -> Vec<Comparison> {
    let pref = config.pref_name();
    let sparse = format!("sft_sparse+{pref}");
    let dense = format!("sft+{pref}");
    let mut out = Vec::new();
    let has = |a: Arm| config.arms.contains(&a);
    for &m in &config.methods {
        if has(Arm::ParallelSparse) && has(Arm::Sequential) {
            out.push(compare(
                rows,
                (Arm::ParallelSparse, &sparse, Some(m)),
                (Arm::Sequential, &sparse, None),
            ));
        }
        if has(Arm::ParallelSparse) && has(Arm::ParallelDense) {
            out.push(compare(
                rows,
                (Arm::ParallelSparse, &sparse, Some(m)),
                (Arm::ParallelDense, &dense, Some(m)),
            ));
        }
    }
    out
}

/// Rows of one seed plus its `(lambda, sparsity)` sweep points.
type SeedOutput = (Vec<ReportRow>, Vec<(f64, Option<f64>)>);

/// Run every (arm, method, seed) cell. Seeds run in parallel; each seed
/// trains its adapters once and reuses them across methods. A seed whose
/// setup fails yields flagged rows instead of aborting the matrix.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let per_seed: Vec<SeedOutput> = config
        .seeds
        .par_iter()
        .map(|&seed| match SeedRun::new(config, seed) {
            Ok(run) => run.rows(),
            Err(e) => (
                failed_rows(config, seed, &e),
                config.lambda_grid.iter().map(|&l| (l, None)).collect(),
            ),
        })
        .collect();

    let mut rows: Vec<ReportRow> = per_seed.iter().flat_map(|(r, _)| r.iter().cloned()).collect();
    rows.sort_by(|a, b| a.key().cmp(&b.key()));

    let sparsity_by_lambda = config
        .lambda_grid
        .iter()
        .enumerate()
        .map(|(i, &lambda)| {
            let per_seed: Vec<f64> = per_seed.iter().filter_map(|(_, s)| s[i].1).collect();
            let mean = Stat::of(&per_seed).map_or(f64::NAN, |s| s.mean);
            SparsityPoint { lambda, per_seed, mean }
        })
        .collect();

    Ok(ExperimentReport {
        config: config.clone(),
        aggregates: aggregate(&rows),
        comparisons: comparisons(config, &rows),
        rows,
        sparsity_by_lambda,
    })
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Largest difference between stored aggregates and ones recomputed from rows.
    pub fn aggregate_discrepancy(&self) -> f64 {
        let fresh = aggregate(&self.rows);
        if fresh.len() != self.aggregates.len() {
            return f64::INFINITY;
        }
        let diff = |a: Option<Stat>, b: Option<Stat>| match (a, b) {
            (Some(a), Some(b)) => (a.mean - b.mean).abs().max((a.std - b.std).abs()),
            (None, None) => 0.0,
            _ => f64::INFINITY,
        };
        fresh
            .iter()
            .zip(&self.aggregates)
            .map(|(f, s)| {
                if (f.arm, &f.variant, f.method, f.runs, f.failed) != (s.arm, &s.variant, s.method, s.runs, s.failed) {
                    return f64::INFINITY;
                }
                diff(f.sft_accuracy, s.sft_accuracy)
                    .max(diff(f.pref_win_rate, s.pref_win_rate))
                    .max(diff(f.average, s.average))
                    .max(diff(f.sparsity, s.sparsity))
            })
            .fold(0.0, f64::max)
    }

    /// Aligned text table: one section per arm/variant, one line per method.
    pub fn to_table(&self) -> String {
        let cols = ["SFT_ACC", "PREF_WIN", "AVERAGE", "SPARSITY"];
        let cell = |s: Option<Stat>| s.map_or_else(|| "-".to_string(), |s| format!("{:.4} ± {:.4}", s.mean, s.std));
        let mut out = String::new();
        let width = 22;
        let _ = write!(out, "{:<width$}", "METHOD");
        for c in cols {
            let _ = write!(out, " {c:>17}");
        }
        let _ = writeln!(out, " {:>5}", "RUNS");
        let rule = "-".repeat(width + cols.len() * 18 + 6);
        let mut section: Option<String> = None;
        for a in &self.aggregates {
            let title = match a.arm {
                Arm::ParallelSparse | Arm::ParallelDense => format!("{} ({})", a.arm.as_str(), a.variant),
                _ => a.arm.as_str().to_string(),
            };
            if section.as_deref() != Some(title.as_str()) {
                let _ = writeln!(out, "{rule}\n{title}");
                section = Some(title);
            }
            let name = a.method.map_or_else(|| a.variant.clone(), |m| m.as_str().to_string());
            let _ = write!(out, "  {name:<w$}", w = width - 2);
            for s in [a.sft_accuracy, a.pref_win_rate, a.average, a.sparsity] {
                let _ = write!(out, " {:>17}", cell(s));
            }
            let runs = if a.failed > 0 {
                format!("{}!{}", a.runs, a.failed)
            } else {
                a.runs.to_string()
            };
            let _ = writeln!(out, " {runs:>5}");
        }
        let _ = writeln!(out, "{rule}");
        for c in &self.comparisons {
            let _ = writeln!(out, "{} > {}: {}/{} seeds", c.left, c.right, c.wins, c.seeds);
        }
        for p in &self.sparsity_by_lambda {
            let _ = writeln!(out, "sft sparsity at lambda={}: {:.4}", p.lambda, p.mean);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig {
            seeds: vec![3],
            ..ExperimentConfig::default()
        };
        c.benchmark.sft_train = 32;
        c.benchmark.pref_train = 32;
        c.benchmark.sft_eval = 32;
        c.benchmark.pref_eval = 32;
        c.stages.sft.steps = 20;
        c.stages.pref.steps = 20;
        c.lambda_grid = vec![0.0, 1e-3];
        c
    }

    #[test]
    fn single_cell_report() {
        let mut c = tiny();
        c.arms = vec![Arm::ParallelSparse];
        c.methods = vec![MergeMethod::Ties];
        let r = run_experiment(&c).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.rows[0].seed, 3);
        assert_eq!(r.aggregates.len(), 1);
        assert!(r.aggregate_discrepancy() <= 1e-12);
    }

    #[test]
    fn report_is_deterministic_and_sorted() {
        let c = tiny();
        let a = run_experiment(&c).unwrap();
        let b = run_experiment(&c).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a.rows.len(), 2 * 5 + 2 + 4);
        assert!(a.rows.windows(2).all(|w| w[0].key() <= w[1].key()));
        assert_eq!(ExperimentReport::from_json(&a.to_json().unwrap()).unwrap(), a);
        let table = a.to_table();
        assert!(
            table.contains("parallel_sparse (sft_sparse+dpo)") && table.contains("sft_sparse_alone"),
            "{table}"
        );
    }

    #[test]
    fn failed_seed_is_flagged_not_fatal() {
        let mut c = tiny();
        c.net.layers = vec![5, 4, 4];
        let r = run_experiment(&c).unwrap();
        assert!(r.rows.iter().all(|row| row.failed()));
        assert!(r.aggregates.iter().all(|a| a.failed == 1 && a.average.is_none()));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = tiny();
        c.seeds.clear();
        assert!(run_experiment(&c).is_err());
        assert!(ExperimentConfig::from_json(r#"{"arms":["parallel_sparse"],"bogus":1}"#).is_err());
        let parsed = ExperimentConfig::from_json(r#"{"seeds":[1,2]}"#).unwrap();
        assert_eq!(parsed.arms, Arm::ALL.to_vec());
    }

    #[test]
    fn stats() {
        let s = Stat::of(&[0.6, 0.8]).unwrap();
        assert!((s.mean - 0.7).abs() < 1e-15);
        assert!((s.std - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(Stat::of(&[1.0]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
    }
}
