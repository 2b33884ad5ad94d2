use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use biaslab::equivalence::alpha_to_ratio;
use serde_json::Value;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_biaslab");
const SMALL: &str = r#""protocol": {"n_samples": 3000, "overlap_samples": 3000}"#;

fn biaslab(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("BIASLAB_OUT");
    if let Some(dir) = env_out {
        cmd.env("BIASLAB_OUT", dir);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn run(verb: &str, config: &Path, out: &Path) -> Output {
    let out = biaslab(&[verb, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert!(out.status.success(), "{verb} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_valid(def: &str, instance: &Value) {
    let mut schema = read_json(&Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas/biaslab.schema.json"));
    schema["$ref"] = Value::String(format!("#/$defs/{def}"));
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    let errors: Vec<String> = validator.iter_errors(instance).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{def}: {errors:#?}");
}

/// Files of a run directory, keyed by relative path.
fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn check_record(dir: &Path, kind: &str) -> Value {
    let record = read_json(&dir.join("run_record.json"));
    assert_valid("run_record", &record);
    assert_valid("run_meta", &read_json(&dir.join("run_meta.json")));
    assert_valid("experiment_config", &read_json(&dir.join("config.resolved.json")));
    assert_eq!(record["kind"], kind);
    assert_eq!(record["status"], "ok");
    for f in record["results"].as_array().unwrap().iter().chain(record["outputs"].as_array().unwrap()) {
        assert!(dir.join(f.as_str().unwrap()).is_file(), "{f} listed but missing");
    }
    record
}

#[test]
fn train_and_measure_artifacts_match_the_schema() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "train.json",
        &format!(
            r#"{{"kind": "train", "seeds": [1, 2],
                "specs": [{{"spurious": {{"alpha": 0.9}}}}, {{"imbalance": {{"ratio": 19}}}}],
                "method": {{"method": {{"group_dro": {{}}}}, "base": {{"max_epochs": 3}}}}, {SMALL}}}"#
        ),
    );
    let out = tmp.path().join("train");
    run("train", &cfg, &out);
    let record = check_record(&out, "train");
    for f in record["results"].as_array().unwrap() {
        assert_valid("seed_result", &read_json(&out.join(f.as_str().unwrap())));
    }
    let model = out.join("models/spurious-a0.9-pi0.5/group_dro/seed1.json");
    assert_valid("model_params", &read_json(&model));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 4);

    fs::copy(&model, tmp.path().join("model.json")).unwrap();
    let cfg = write_config(
        tmp.path(),
        "measure.json",
        &format!(r#"{{"kind": "measure", "seeds": [7], "model": "model.json", "specs": [{{"spurious": {{"alpha": 0.5}}}}], {SMALL}}}"#),
    );
    let out = tmp.path().join("measure");
    run("measure", &cfg, &out);
    let record = check_record(&out, "measure");
    assert_valid("seed_result", &read_json(&out.join(record["results"][0].as_str().unwrap())));
}

#[test]
fn gen_writes_csv_datasets() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "gen.json",
        r#"{"kind": "generate", "seeds": [3], "specs": [{"custom": {"attribute_table": [0.2, 0.7]}}], "protocol": {"n_samples": 500}}"#,
    );
    let out = tmp.path().join("gen");
    run("gen", &cfg, &out);
    let record = check_record(&out, "generate");
    let data = out.join(record["results"][0].as_str().unwrap());
    assert_eq!(fs::read_to_string(data).unwrap().lines().count(), 501);
    let spec = out.join("data/custom-0.2-0.7-pi0.5/spec.json");
    assert_valid("problem_spec", &read_json(&spec));
}

#[test]
fn validate_and_transfer_artifacts_match_the_schema() {
    let tmp = TempDir::new().unwrap();
    let pair = r#"[{"spurious": {"alpha": 0.9}}, {"imbalance": {"ratio": 19}}]"#;
    let cfg = write_config(
        tmp.path(),
        "validate.json",
        &format!(
            r#"{{"kind": "validate_pair", "seeds": [1, 2], "specs": {pair},
                "c_source": {{"calibrated": {{"fixture": "{}"}}}},
                "method": {{"method": "erm", "base": {{"max_epochs": 3}}}}, {SMALL}}}"#,
            Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/overlap_ablation.json").display()
        ),
    );
    let out = tmp.path().join("validate");
    run("validate", &cfg, &out);
    let record = check_record(&out, "validate_pair");
    for f in record["results"].as_array().unwrap() {
        assert_valid("pair_leg", &read_json(&out.join(f.as_str().unwrap())));
    }
    let report = read_json(&out.join("equivalence.json"));
    assert_valid("equivalence_report", &report);
    assert!((report["c"].as_f64().unwrap() - 0.0536).abs() < 1e-3);

    let cfg = write_config(
        tmp.path(),
        "transfer.json",
        &format!(r#"{{"kind": "transfer", "seeds": [1], "specs": {pair}, "method": {{"method": {{"jtt": {{}}}}, "base": {{"max_epochs": 4}}}}, {SMALL}}}"#),
    );
    let out = tmp.path().join("transfer");
    run("transfer", &cfg, &out);
    let record = check_record(&out, "transfer");
    assert_valid("transfer_leg", &read_json(&out.join(record["results"][0].as_str().unwrap())));
    assert_valid("transfer_report", &read_json(&out.join("transfer.json")));
}

#[test]
fn fixture_matches_the_schema() {
    let fixture = read_json(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/overlap_ablation.json"));
    for row in fixture.as_array().unwrap() {
        assert_valid("delta_observation", row);
    }
}

#[test]
fn sweep_over_alphas_tabulates_every_pair_and_seed() {
    let tmp = TempDir::new().unwrap();
    let alphas = [0.5, 0.6, 0.7, 0.8, 0.9];
    let cfg = write_config(
        tmp.path(),
        "sweep.json",
        &format!(
            r#"{{"kind": "sweep", "seeds": [1, 2, 3], "sweep": {{"alphas": [0.5, 0.6, 0.7, 0.8, 0.9]}},
                "method": {{"method": "erm", "base": {{"max_epochs": 2}}}}, {SMALL}}}"#
        ),
    );
    let out = tmp.path().join("sweep");
    run("sweep", &cfg, &out);
    check_record(&out, "sweep");
    assert_valid("sweep_report", &read_json(&out.join("sweep.json")));

    let mut rows = csv::Reader::from_path(out.join("sweep.csv")).unwrap();
    let headers = rows.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let rows: Vec<csv::StringRecord> = rows.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 15);
    for row in &rows {
        let alpha: f64 = row[col("alpha")].parse().unwrap();
        let ratio: f64 = row[col("corollary_ratio")].parse().unwrap();
        assert!(alphas.contains(&alpha));
        assert_eq!(ratio, alpha_to_ratio(alpha, 0.5).unwrap());
    }

    let plot = biaslab(&["plotdata", "--run", out.to_str().unwrap(), "--kind", "sweep_curve"], None);
    assert!(plot.status.success());
    let curve = fs::read_to_string(out.join("sweep_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 6);
}

#[test]
fn empty_sweep_gives_header_only_plot_data() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "sweep.json", r#"{"kind": "sweep", "sweep": {"alphas": []}}"#);
    let out = tmp.path().join("sweep");
    run("sweep", &cfg, &out);
    for (kind, header) in [
        ("overlap_ablation", "eta,epsilon,pred_delta,obs_delta\n"),
        ("correlation_scatter", "pair_id,epsilon,obs_delta\n"),
    ] {
        let o = biaslab(&["plotdata", "--run", out.to_str().unwrap(), "--kind", kind], None);
        assert!(o.status.success());
        assert_eq!(fs::read_to_string(out.join(format!("{kind}.csv"))).unwrap(), header);
    }
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "validate.json",
        &format!(
            r#"{{"kind": "validate_pair", "seeds": [5, 6],
                "specs": [{{"spurious": {{"alpha": 0.8}}}}, {{"spurious": {{"alpha": 0.6}}}}],
                "method": {{"method": {{"dfr": {{}}}}, "base": {{"max_epochs": 3}}}}, {SMALL}}}"#
        ),
    );
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run("validate", &cfg, &a);
    run("validate", &cfg, &b);
    let (mut ta, mut tb) = (tree(&a), tree(&b));
    assert!(ta.remove("run_meta.json").is_some());
    assert!(tb.remove("run_meta.json").is_some());
    assert_eq!(ta, tb);
}

#[test]
fn default_output_goes_under_biaslab_out() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "gen.json", r#"{"kind": "generate", "specs": [{"spurious": {"alpha": 0.3}}], "protocol": {"n_samples": 10}}"#);
    let root = tmp.path().join("runs");
    let o = biaslab(&["gen", "--config", cfg.to_str().unwrap(), "--seed-override", "9,10"], Some(&root));
    assert!(o.status.success());
    let dirs: Vec<_> = fs::read_dir(&root).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(dirs.len(), 1);
    assert!(dirs[0].starts_with("gen-"));
    let record = read_json(&root.join(&dirs[0]).join("run_record.json"));
    assert_eq!(record["seeds"], serde_json::json!([9, 10]));

    let named = write_config(tmp.path(), "named.json", r#"{"kind": "generate", "output": "mine", "specs": [{"spurious": {"alpha": 0.3}}], "protocol": {"n_samples": 10}}"#);
    assert!(biaslab(&["gen", "--config", named.to_str().unwrap()], Some(&root)).status.success());
    assert!(root.join("mine/run_record.json").is_file());
}

#[test]
fn invalid_configs_exit_with_one_and_name_the_field() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "bad.json", "{\"kind\": \"train\",\n \"specs\": [{\"imbalance\": {\"ratio\": -3}}]}");
    let o = biaslab(&["train", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("x").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("`specs[0].ratio`"), "{err}");
    assert!(err.contains("bad.json:2:"), "{err}");
    assert!(!tmp.path().join("x").exists());

    let missing = biaslab(&["train", "--config", "/nonexistent/cfg.json"], None);
    assert_eq!(missing.status.code(), Some(1));

    let kind = write_config(tmp.path(), "kind.json", r#"{"kind": "generate", "specs": [{"spurious": {"alpha": 0.3}}]}"#);
    assert_eq!(biaslab(&["train", "--config", kind.to_str().unwrap()], None).status.code(), Some(1));

    assert_eq!(biaslab(&["frobnicate"], None).status.code(), Some(1));
    assert_eq!(biaslab(&["train"], None).status.code(), Some(1));
    assert_eq!(biaslab(&["--help"], None).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "gen.json", r#"{"kind": "generate", "specs": [{"spurious": {"alpha": 0.3}}], "protocol": {"n_samples": 10}}"#);
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "").unwrap();
    let o = biaslab(&["gen", "--config", cfg.to_str().unwrap(), "--out", blocker.join("run").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn failed_runs_leave_a_failed_record() {
    // both labels present in one group only: training cannot see every group
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "dro.json",
        &format!(r#"{{"kind": "train", "seeds": [1], "specs": [{{"spurious": {{"alpha": 1.0}}}}], "method": {{"method": {{"group_dro": {{}}}}}}, {SMALL}}}"#),
    );
    let out = tmp.path().join("run");
    let o = biaslab(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    let record = read_json(&out.join("run_record.json"));
    assert_valid("run_record", &record);
    assert_eq!(record["status"], "failed");
    assert!(record["error"].as_str().unwrap().contains("group"));
}

#[test]
fn plot_data_rejects_runs_without_reports() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "gen.json", r#"{"kind": "generate", "specs": [{"spurious": {"alpha": 0.3}}], "protocol": {"n_samples": 10}}"#);
    let out = tmp.path().join("gen");
    run("gen", &cfg, &out);
    let o = biaslab(&["plotdata", "--run", out.to_str().unwrap(), "--kind", "overlap_ablation"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing `outputs`"));
}

#[test]
fn schema_rejects_malformed_records() {
    let mut schema = read_json(&Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas/biaslab.schema.json"));
    schema["$ref"] = Value::String("#/$defs/run_record".into());
    let validator = jsonschema::validator_for(&schema).unwrap();
    let good = serde_json::json!({
        "tool": "biaslab", "tool_version": "0.1.0", "kind": "train", "config_hash": "a".repeat(64),
        "seeds": [1], "status": "ok", "error": null, "results": [], "outputs": [], "summary": {}
    });
    assert!(validator.is_valid(&good));
    let mut bad = good.clone();
    bad["status"] = "done".into();
    assert!(!validator.is_valid(&bad));
    let mut extra = good;
    extra["surprise"] = 1.into();
    assert!(!validator.is_valid(&extra));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let cfg = biaslab_cli::config::load(&path).unwrap_or_else(|e| panic!("{e}"));
            assert_valid("experiment_config", &serde_json::to_value(&cfg).unwrap());
            seen += 1;
        }
    }
    assert!(seen >= 5);
}
