use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use deltamerge_core::checkpoint::{load_checkpoint, read_header, save_checkpoint, write_atomic, MAGIC};
use deltamerge_core::delta::{sparsity as sparsity_report, DEFAULT_SPARSITY_THRESHOLD};
use deltamerge_core::merge::merge as merge_params;
use deltamerge_core::pipeline::{run_experiment, train_adapter, ExperimentConfig, Objective, TrainConfig, TrainData};
use deltamerge_core::toy::data::{load_pref, load_sft};
use deltamerge_core::toy::{BenchmarkSpec, NetSpec, ToyNet};
use deltamerge_core::{
    compose_lora, extract_delta, DeltaSet, Error, ExtractMode, LayerAveraging, LoraAdapter, MergeInput, MergeMethod,
    MergeRecipe, ParamSet, SparsifySpec,
};

use crate::{CliError, DeltaArgs, ExperimentArgs, InspectArgs, MergeArgs, SparsifyArgs, SparsityArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parse a snake_case enum value the same way config files do.
fn parse_enum<T: DeserializeOwned>(flag: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| usage(format!("--{flag}: unknown value {value:?}")))
}

fn average_sparsity(delta: &ParamSet) -> Result<f64> {
    Ok(sparsity_report(delta, DEFAULT_SPARSITY_THRESHOLD, LayerAveraging::Uniform)?.average)
}

fn load_delta(path: &Path) -> Result<DeltaSet> {
    Ok(DeltaSet::new(load_checkpoint(path)?))
}

/// `FILE` or `FILE:W`. A suffix that does not parse as a number stays part
/// of the path.
fn parse_delta_flag(s: &str) -> Result<MergeInput> {
    if let Some((path, w)) = s.rsplit_once(':') {
        if let Ok(weight) = w.parse::<f64>() {
            if path.is_empty() {
                return Err(usage(format!("--delta {s:?}: missing file")));
            }
            return Ok(MergeInput::new(path, weight));
        }
    }
    Ok(MergeInput::new(s, 1.0))
}

fn inline_flags(a: &MergeArgs) -> Vec<&'static str> {
    let set = [
        ("--method", a.method.is_some()),
        ("--base", a.base.is_some()),
        ("--delta", !a.deltas.is_empty()),
        ("--density", a.density.is_some()),
        ("--drop", a.drop.is_some()),
        ("--seed", a.seed.is_some()),
        ("--t", a.t.is_some()),
        ("--granularity", a.granularity.is_some()),
        ("--slerp-mode", a.slerp_mode.is_some()),
        ("--normalize-weights", a.normalize_weights.is_some()),
    ];
    set.into_iter().filter(|(_, on)| *on).map(|(f, _)| f).collect()
}

/// Build the recipe and resolve its paths. Recipe-file paths are relative to
/// the recipe's directory.
fn recipe_from_args(a: &MergeArgs) -> Result<(MergeRecipe, PathBuf, Vec<PathBuf>)> {
    if let Some(path) = &a.recipe {
        if let Some(flag) = inline_flags(a).first() {
            return Err(usage(format!("--recipe conflicts with inline flag {flag}")));
        }
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        let recipe = MergeRecipe::from_json(&text)?;
        if recipe.base.is_empty() {
            return Err(usage("recipe field \"base\" is required"));
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        let base = dir.join(&recipe.base);
        let deltas = recipe.inputs.iter().map(|i| dir.join(&i.delta)).collect();
        return Ok((recipe, base, deltas));
    }
    let method = a
        .method
        .as_deref()
        .ok_or_else(|| usage("either --recipe or --method is required"))?;
    let method = MergeMethod::parse(method).map_err(|_| usage(format!("--method: unknown merge method {method:?}")))?;
    let base = a.base.clone().ok_or_else(|| usage("--base is required"))?;
    let inputs = a
        .deltas
        .iter()
        .map(|d| parse_delta_flag(d))
        .collect::<Result<Vec<_>>>()?;
    let mut recipe = MergeRecipe::new(method, inputs);
    recipe.base = base.display().to_string();
    recipe.density = a.density;
    recipe.drop = a.drop;
    recipe.seed = a.seed;
    recipe.t = a.t;
    recipe.normalize_weights = a.normalize_weights;
    recipe.granularity = a
        .granularity
        .as_deref()
        .map(|g| parse_enum("granularity", g))
        .transpose()?;
    recipe.slerp_mode = a
        .slerp_mode
        .as_deref()
        .map(|m| parse_enum("slerp-mode", m))
        .transpose()?;
    let deltas = recipe.inputs.iter().map(|i| PathBuf::from(&i.delta)).collect();
    Ok((recipe, base, deltas))
}

/// `name=value`, marked when the value was filled in as a default.
fn knob<T: std::fmt::Display>(out: &mut String, name: &str, given: Option<T>, used: Option<T>) {
    if let Some(v) = used {
        let _ = write!(out, " {name}={v}");
        if given.is_none() {
            out.push_str(" (default)");
        }
    }
}

pub fn merge(a: MergeArgs) -> Result<()> {
    let (recipe, base_path, delta_paths) = recipe_from_args(&a)?;
    let normalized = recipe.normalized()?;
    let base = load_checkpoint(&base_path)?;
    let deltas = delta_paths.iter().map(|p| load_delta(p)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&DeltaSet> = deltas.iter().collect();
    let out = merge_params(&normalized, &base, &refs)?;
    let applied = extract_delta(&out.params, &base, ExtractMode::Strict)?.delta;
    let sparsity = average_sparsity(&applied.params)?;
    save_checkpoint(&out.params, &a.out)?;

    let mut line = format!("merge method={} inputs={}", normalized.method, normalized.inputs.len());
    knob(&mut line, "density", recipe.density, normalized.density);
    knob(&mut line, "drop", recipe.drop, normalized.drop);
    knob(&mut line, "seed", recipe.seed, normalized.seed);
    knob(&mut line, "t", recipe.t, normalized.t);
    knob(
        &mut line,
        "normalize_weights",
        recipe.normalize_weights,
        normalized.normalize_weights,
    );
    let _ = write!(line, " sparsity={sparsity:.4} out={}", a.out.display());
    println!("{line}");
    Ok(())
}

pub fn delta(a: DeltaArgs) -> Result<()> {
    let delta = match (&a.ft, &a.pre, &a.lora) {
        (Some(ft), Some(pre), None) => {
            let mode = if a.lenient {
                ExtractMode::Lenient
            } else {
                ExtractMode::Strict
            };
            let ex = extract_delta(&load_checkpoint(ft)?, &load_checkpoint(pre)?, mode)?;
            for name in ex.missing_in_base.iter().chain(&ex.missing_in_ft) {
                eprintln!("skipped {name}");
            }
            ex.delta.labeled(ft.display().to_string(), pre.display().to_string())
        }
        (None, None, Some(lora)) => {
            let adapter = LoraAdapter::from_param_set(&load_checkpoint(lora)?, a.scaling)?;
            compose_lora(&adapter)?.labeled(lora.display().to_string(), "")
        }
        _ => return Err(usage("give either --ft with --pre, or --lora")),
    };
    let params = delta.to_param_set();
    let sparsity = average_sparsity(&params)?;
    save_checkpoint(&params, &a.out)?;
    println!(
        "delta tensors={} sparsity={sparsity:.4} out={}",
        params.len(),
        a.out.display()
    );
    Ok(())
}

pub fn sparsity(a: SparsityArgs) -> Result<()> {
    if !(a.threshold > 0.0 && a.threshold.is_finite()) {
        return Err(Error::InvalidThreshold(a.threshold).into());
    }
    let params = load_checkpoint(&a.delta)?;
    let averaging = if a.element_weighted {
        LayerAveraging::ElementWeighted
    } else {
        LayerAveraging::Uniform
    };
    print!("{}", sparsity_report(&params, a.threshold, averaging)?.to_text());
    Ok(())
}

pub fn sparsify(a: SparsifyArgs) -> Result<()> {
    let need = |v: Option<f64>, flag: &str| v.ok_or_else(|| usage(format!("--method {} requires --{flag}", a.method)));
    let spec = match a.method.as_str() {
        "dare" => SparsifySpec::Dare {
            p: need(a.p, "p")?,
            seed: a.seed,
        },
        "trim_topk" => SparsifySpec::TrimTopk {
            k: need(a.k, "k")?,
            granularity: parse_enum("granularity", &a.granularity)?,
        },
        "threshold" => SparsifySpec::Threshold {
            tau: need(a.tau, "tau")?,
        },
        other => return Err(usage(format!("--method: unknown sparsifier {other:?}"))),
    };
    let input = load_checkpoint(&a.delta)?;
    let before = average_sparsity(&input)?;
    let out = spec.apply(&DeltaSet::new(input))?.to_param_set();
    let after = average_sparsity(&out)?;
    save_checkpoint(&out, &a.out)?;
    println!(
        "sparsify method={} sparsity_before={before:.4} sparsity_after={after:.4} out={}",
        a.method,
        a.out.display()
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let objective: Objective = parse_enum("objective", &a.objective)?;
    let net = match &a.base {
        Some(path) => ToyNet::from_params(load_checkpoint(path)?)?,
        None => ToyNet::random(
            &NetSpec {
                layers: a.layers.clone(),
                init_scale: a.init_scale,
            },
            a.net_seed,
        )?,
    };
    if let Some(path) = &a.save_base {
        save_checkpoint(net.params(), path)?;
    }
    let config = TrainConfig {
        steps: a.steps,
        lr: a.lr,
        lambda: if objective == Objective::SftSparse {
            a.lambda
        } else {
            0.0
        },
        beta: a.beta,
        seed: a.seed,
        optimizer: parse_enum("optimizer", &a.optimizer)?,
        l1_step: parse_enum("l1-step", &a.l1_step)?,
        batch_size: a.batch_size,
        lora_rank: a.lora_rank,
        ..TrainConfig::default()
    };
    let generated = match &a.data {
        Some(_) => None,
        None => Some(
            BenchmarkSpec {
                input_dim: net.input_dim(),
                classes: net.num_classes(),
                sft_features: net.input_dim(),
                pref_features: net.input_dim(),
                ..BenchmarkSpec::default()
            }
            .generate(a.data_seed)?,
        ),
    };
    let sft;
    let pref;
    let data = match (objective, &a.data, &generated) {
        (Objective::Sft | Objective::SftSparse, Some(path), _) => {
            sft = load_sft(path)?;
            TrainData::Sft(&sft)
        }
        (Objective::Dpo | Objective::Orpo, Some(path), _) => {
            pref = load_pref(path)?;
            TrainData::Pref(&pref)
        }
        (Objective::Sft | Objective::SftSparse, None, Some(b)) => TrainData::Sft(&b.sft_train),
        (_, None, Some(b)) => TrainData::Pref(&b.pref_train),
        (_, None, None) => unreachable!("benchmark generated when no data file is given"),
    };
    let trained = train_adapter(&net, objective, data, &config)?;
    let mut params = trained.delta.to_param_set();
    params.set_metadata("objective", objective.as_str());
    let sparsity = average_sparsity(&params)?;
    save_checkpoint(&params, &a.out)?;
    println!(
        "train objective={} steps={} initial_loss={:.6} final_loss={:.6} sparsity={sparsity:.4} out={}",
        objective.as_str(),
        config.steps,
        trained.initial_loss,
        trained.final_loss,
        a.out.display()
    );
    Ok(())
}

pub fn experiment(a: ExperimentArgs) -> Result<()> {
    if a.print_default {
        println!(
            "{}",
            serde_json::to_string_pretty(&ExperimentConfig::default()).map_err(Error::from)?
        );
        return Ok(());
    }
    let mut config = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
                path: path.clone(),
                source,
            })?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(n) = a.seeds {
        if n == 0 {
            return Err(usage("--seeds must be at least 1"));
        }
        config.seeds = (0..n).collect();
    }
    let report = run_experiment(&config)?;
    let table = report.to_table();
    write_atomic(&a.json, report.to_json()?.as_bytes())?;
    write_atomic(&a.table, table.as_bytes())?;
    print!("{table}");
    let failed = report.rows.iter().filter(|r| r.failed()).count();
    if failed > 0 {
        eprintln!("{failed} rows failed; see the error field in {}", a.json.display());
    }
    Ok(())
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    let header = read_header(&a.file)?;
    let mut out = String::new();
    let _ = writeln!(out, "magic {}", String::from_utf8_lossy(MAGIC));
    let _ = writeln!(out, "header_bytes {}", header.header_len);
    let _ = writeln!(out, "payload_bytes {}", header.payload_len());
    for (k, v) in &header.metadata {
        let _ = writeln!(out, "meta {k} = {v}");
    }
    let _ = writeln!(out, "tensors {}", header.tensors.len());
    for (name, entry) in &header.tensors {
        let _ = writeln!(
            out,
            "{name} shape={:?} offsets=[{}, {}]",
            entry.shape, entry.offsets[0], entry.offsets[1]
        );
    }
    print!("{out}");
    Ok(())
}
