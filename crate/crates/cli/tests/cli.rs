use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use deltamerge_core::checkpoint::{load_checkpoint, save_checkpoint};
use deltamerge_core::pipeline::ExperimentConfig;
use deltamerge_core::{ParamSet, Tensor};
use tempfile::TempDir;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deltamerge"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn params(values: &[(&str, Vec<f64>)]) -> ParamSet {
    let mut p = ParamSet::new();
    for (name, data) in values {
        p.insert(*name, Tensor::vector(data.clone()).unwrap()).unwrap();
    }
    p
}

/// Base, two deltas and a zero delta on disk.
fn fixture() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    save_checkpoint(
        &params(&[("a", vec![1.0, 2.0, 3.0]), ("b", vec![-1.0])]),
        d.join("base.ckpt"),
    )
    .unwrap();
    save_checkpoint(
        &params(&[("a", vec![0.5, -0.25, 0.0]), ("b", vec![2.0])]),
        d.join("d1.ckpt"),
    )
    .unwrap();
    save_checkpoint(
        &params(&[("a", vec![-0.5, 0.75, 0.125]), ("b", vec![1.0])]),
        d.join("d2.ckpt"),
    )
    .unwrap();
    save_checkpoint(&params(&[("a", vec![0.0; 3]), ("b", vec![0.0])]), d.join("zero.ckpt")).unwrap();
    dir
}

fn repo_default_json() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../default.json")
}

#[test]
fn task_arithmetic_with_zero_delta_reproduces_base_bytes() {
    let dir = fixture();
    let o = run(
        dir.path(),
        &[
            "merge",
            "--method",
            "task_arithmetic",
            "--base",
            "base.ckpt",
            "--delta",
            "zero.ckpt:1.0",
            "--out",
            "m.ckpt",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let base = std::fs::read(dir.path().join("base.ckpt")).unwrap();
    let merged = std::fs::read(dir.path().join("m.ckpt")).unwrap();
    assert_eq!(base, merged);
    assert!(stdout(&o).contains("method=task_arithmetic"));
}

#[test]
fn ties_surfaces_default_density() {
    let dir = fixture();
    let o = run(
        dir.path(),
        &[
            "merge",
            "--method",
            "ties",
            "--base",
            "base.ckpt",
            "--delta",
            "d1.ckpt",
            "--delta",
            "d2.ckpt:0.5",
            "--out",
            "m.ckpt",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("density=0.5 (default)"), "{}", stdout(&o));
}

#[test]
fn slerp_with_three_deltas_is_a_usage_error() {
    let dir = fixture();
    let o = run(
        dir.path(),
        &[
            "merge",
            "--method",
            "slerp",
            "--base",
            "base.ckpt",
            "--delta",
            "d1.ckpt",
            "--delta",
            "d2.ckpt",
            "--delta",
            "zero.ckpt",
            "--out",
            "m.ckpt",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("slerp requires exactly 2 deltas"));
    assert!(!dir.path().join("m.ckpt").exists());
}

#[test]
fn recipe_file_merge_matches_inline_flags() {
    let dir = fixture();
    let recipe = r#"{"method":"dare_ties","base":"base.ckpt","inputs":[{"delta":"d1.ckpt"},{"delta":"d2.ckpt","weight":0.5}],"density":0.5,"drop":0.3,"seed":9}"#;
    std::fs::write(dir.path().join("r.json"), recipe).unwrap();
    let a = run(dir.path(), &["merge", "--recipe", "r.json", "--out", "a.ckpt"]);
    assert!(a.status.success(), "{}", stderr(&a));
    let b = run(
        dir.path(),
        &[
            "merge",
            "--method",
            "dare_ties",
            "--base",
            "base.ckpt",
            "--delta",
            "d1.ckpt",
            "--delta",
            "d2.ckpt:0.5",
            "--density",
            "0.5",
            "--drop",
            "0.3",
            "--seed",
            "9",
            "--out",
            "b.ckpt",
        ],
    );
    assert!(b.status.success(), "{}", stderr(&b));
    assert_eq!(
        std::fs::read(dir.path().join("a.ckpt")).unwrap(),
        std::fs::read(dir.path().join("b.ckpt")).unwrap()
    );
}

#[test]
fn recipe_conflicting_with_inline_flags_exits_1() {
    let dir = fixture();
    std::fs::write(
        dir.path().join("r.json"),
        r#"{"method":"ties","base":"base.ckpt","inputs":[{"delta":"d1.ckpt"}]}"#,
    )
    .unwrap();
    let o = run(
        dir.path(),
        &["merge", "--recipe", "r.json", "--density", "0.3", "--out", "m.ckpt"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--density"));
}

#[test]
fn invalid_knob_names_the_field() {
    let dir = fixture();
    let o = run(
        dir.path(),
        &[
            "merge",
            "--method",
            "ties",
            "--base",
            "base.ckpt",
            "--delta",
            "d1.ckpt",
            "--density",
            "1.5",
            "--out",
            "m.ckpt",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("density"));
}

#[test]
fn missing_or_malformed_files_exit_2() {
    let dir = fixture();
    let o = run(dir.path(), &["sparsity", "--delta", "nope.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint at all").unwrap();
    let o = run(dir.path(), &["inspect", "junk.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("offset"));
}

#[test]
fn sparsity_of_zero_delta_and_threshold_check() {
    let dir = fixture();
    let o = run(dir.path(), &["sparsity", "--delta", "zero.ckpt"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("AVERAGE 1.0000"), "{}", stdout(&o));
    let o = run(dir.path(), &["sparsity", "--delta", "zero.ckpt", "--threshold", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn delta_of_identical_checkpoints_is_all_zero() {
    let dir = fixture();
    let o = run(
        dir.path(),
        &["delta", "--ft", "base.ckpt", "--pre", "base.ckpt", "--out", "d.ckpt"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("sparsity=1.0000"));
    assert!(load_checkpoint(dir.path().join("d.ckpt")).unwrap().is_zero());
}

#[test]
fn delta_composes_lora_adapters() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = ParamSet::new();
    p.insert("w.lora_a", Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap())
        .unwrap();
    p.insert("w.lora_b", Tensor::new(vec![3, 1], vec![1.0, 0.0, -1.0]).unwrap())
        .unwrap();
    save_checkpoint(&p, dir.path().join("lora.ckpt")).unwrap();
    let o = run(
        dir.path(),
        &["delta", "--lora", "lora.ckpt", "--scaling", "2", "--out", "d.ckpt"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let d = load_checkpoint(dir.path().join("d.ckpt")).unwrap();
    let w = d.get("w").unwrap();
    assert_eq!(w.shape(), &[3, 2]);
    assert_eq!(w.data(), &[2.0, 4.0, 0.0, 0.0, -2.0, -4.0]);
}

#[test]
fn sparsify_methods_and_required_flags() {
    let dir = fixture();
    let o = run(
        dir.path(),
        &[
            "sparsify",
            "--delta",
            "d2.ckpt",
            "--method",
            "trim_topk",
            "--k",
            "0.5",
            "--out",
            "t.ckpt",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let t = load_checkpoint(dir.path().join("t.ckpt")).unwrap();
    assert_eq!(t.get("a").unwrap().data(), &[-0.5, 0.75, 0.0]);
    let o = run(
        dir.path(),
        &["sparsify", "--delta", "d2.ckpt", "--method", "dare", "--out", "x.ckpt"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--p"));
}

#[test]
fn inspect_lists_header() {
    let dir = fixture();
    let o = run(dir.path(), &["inspect", "base.ckpt"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("magic DLTMRG01"));
    assert!(text.contains("a shape=[3] offsets=[0, 24]"), "{text}");
    assert!(text.contains("b shape=[1] offsets=[24, 32]"), "{text}");
}

#[test]
fn training_writes_a_sparse_delta_and_divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let dense = run(
        d,
        &[
            "train",
            "--objective",
            "sft",
            "--lr",
            "4",
            "--save-base",
            "net.ckpt",
            "--out",
            "dense.ckpt",
        ],
    );
    assert!(dense.status.success(), "{}", stderr(&dense));
    let sparse = run(
        d,
        &[
            "train",
            "--objective",
            "sft_sparse",
            "--lr",
            "4",
            "--base",
            "net.ckpt",
            "--out",
            "sparse.ckpt",
        ],
    );
    assert!(sparse.status.success(), "{}", stderr(&sparse));
    let avg = |file: &str| -> f64 {
        let o = run(d, &["sparsity", "--delta", file]);
        let line = stdout(&o).lines().last().unwrap().to_string();
        line.trim_start_matches("AVERAGE ").parse().unwrap()
    };
    assert!(avg("sparse.ckpt") > 0.5);
    assert!(avg("sparse.ckpt") > avg("dense.ckpt"));

    let o = run(d, &["train", "--objective", "sft", "--lr", "1e6", "--out", "bad.ckpt"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(!d.join("bad.ckpt").exists());
}

#[test]
fn training_reads_text_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let data = "# two classes\n1.0 0.0 ; 0\n0.0 1.0 ; 1\n";
    std::fs::write(dir.path().join("sft.txt"), data).unwrap();
    let pairs = "1.0 0.0 ; 0 > 1\n0.0 1.0 ; 1 > 0\n";
    std::fs::write(dir.path().join("pref.txt"), pairs).unwrap();
    let args = ["--layers", "2,3,2", "--steps", "20", "--out", "o.ckpt"];
    let o = run(
        dir.path(),
        &[&["train", "--objective", "sft", "--data", "sft.txt"][..], &args].concat(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(
        dir.path(),
        &[&["train", "--objective", "orpo", "--data", "pref.txt"][..], &args].concat(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    std::fs::write(dir.path().join("bad.txt"), "1.0 ; x\n").unwrap();
    let o = run(
        dir.path(),
        &[&["train", "--objective", "sft", "--data", "bad.txt"][..], &args].concat(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn experiment_with_three_seeds_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = repo_default_json();
    let cfg = config.to_str().unwrap();
    let a = run(
        dir.path(),
        &[
            "experiment",
            "--config",
            cfg,
            "--seeds",
            "3",
            "--json",
            "a.json",
            "--table",
            "a.txt",
        ],
    );
    assert!(a.status.success(), "{}", stderr(&a));
    let b = run(
        dir.path(),
        &[
            "experiment",
            "--config",
            cfg,
            "--seeds",
            "3",
            "--json",
            "b.json",
            "--table",
            "b.txt",
        ],
    );
    assert!(b.status.success());
    let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
    assert_eq!(read("a.json"), read("b.json"));
    assert_eq!(read("a.txt"), read("b.txt"));
    assert_eq!(stdout(&a), String::from_utf8(read("a.txt")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&read("a.json")).unwrap();
    assert_eq!(report["config"]["seeds"], serde_json::json!([0, 1, 2]));
    assert!(report["rows"]
        .as_array()
        .unwrap()
        .iter()
        .all(|r| r["seed"].as_u64().unwrap() < 3));
}

#[test]
fn shipped_default_json_matches_built_in_defaults() {
    let text = std::fs::read_to_string(repo_default_json()).unwrap();
    assert_eq!(ExperimentConfig::from_json(&text).unwrap(), ExperimentConfig::default());
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["experiment", "--print-default"]);
    assert_eq!(stdout(&o), text);
}

#[test]
fn every_subcommand_help_documents_flags_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let expected: &[(&str, &[&str])] = &[
        (
            "merge",
            &[
                "--recipe",
                "--method",
                "--base",
                "--delta",
                "--density",
                "--drop",
                "--seed",
                "--t",
                "--out",
                "[default: 0.5]",
            ],
        ),
        ("delta", &["--ft", "--pre", "--lora", "--scaling", "--lenient", "--out"]),
        (
            "sparsity",
            &["--delta", "--threshold", "[default: 0.00001]", "--element-weighted"],
        ),
        (
            "sparsify",
            &[
                "--delta",
                "--method",
                "--p",
                "--seed",
                "--k",
                "--granularity",
                "--tau",
                "--out",
            ],
        ),
        (
            "train",
            &[
                "--objective",
                "--data",
                "--base",
                "--steps",
                "--lr",
                "--lambda",
                "--beta",
                "--optimizer",
                "--out",
            ],
        ),
        (
            "experiment",
            &["--config", "--seeds", "--json", "--table", "[default: report.json]"],
        ),
        ("inspect", &["<FILE>"]),
    ];
    for (sub, flags) in expected {
        let o = run(dir.path(), &[sub, "--help"]);
        assert!(o.status.success());
        let help = stdout(&o);
        for flag in *flags {
            assert!(help.contains(flag), "{sub} --help lacks {flag}:\n{help}");
        }
        for code in [
            "0  success",
            "1  usage error",
            "2  data or format error",
            "3  numeric failure",
        ] {
            assert!(help.contains(code), "{sub} --help lacks exit code {code}");
        }
    }
}

#[test]
fn unknown_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["merge", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(dir.path(), &["--version"]);
    assert!(o.status.success());
}
