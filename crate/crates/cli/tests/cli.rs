use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_hpotriage");
const TOY: &str = env!("CARGO_BIN_EXE_hpotriage-toy-evaluator");

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("HPOTRIAGE_SEED")
        .env_remove("HPOTRIAGE_SLOTS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"
name = "small"
algorithms = ["RS", "ASHA"]

[task]
kind = "surrogate"
preset = "planted-overfit"
seed = 4

[grid]
preset = "electra"
epochs = 3

[space]
rules = "electra"
reduce = [["warmup_ratio"]]
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn records(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn without_timestamps(mut recs: Vec<Value>) -> Vec<Value> {
    for r in &mut recs {
        r.as_object_mut().unwrap().remove("recorded_at");
    }
    recs
}

#[test]
fn walkthrough_replay_prints_the_action_sequence() {
    let o = run(&["replay", fixture("rte_walkthrough.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("actions: [up-res, down-space, down-space, overfits-task]"));
}

#[test]
fn clean_fixtures_replay_with_exit_zero() {
    for name in [
        "electra_procedure.toml",
        "table2_runtimes.toml",
        "table3_initial.toml",
        "table8_mining.toml",
        "table9_mining.toml",
        "trial_counts.toml",
    ] {
        let o = run(&["replay", fixture(name).to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{name}: {}", stderr(&o));
    }
}

#[test]
fn conflicting_annotation_exits_three_and_names_the_cell() {
    let o = run(&["replay", fixture("roberta_procedure.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("first diverging cell"), "{err}");
    assert!(err.contains("WNLI ASHA terminal"), "{err}");
}

#[test]
fn missing_fixture_is_a_usage_error() {
    let o = run(&["replay", "/nonexistent/fixture.toml"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn hpo_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let mut stores = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("run{i}.jsonl"));
        let o = run(&["hpo", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "11"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        stores.push(without_timestamps(records(&out)));
    }
    assert!(!stores[0].is_empty());
    assert_eq!(stores[0], stores[1]);
}

#[test]
fn seed_flag_overrides_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let o = Command::new(BIN)
        .args(["grid", "--config", &cfg, "--out", a.to_str().unwrap()])
        .env("HPOTRIAGE_SEED", "11")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let o = Command::new(BIN)
        .args(["grid", "--config", &cfg, "--out", b.to_str().unwrap(), "--seed", "11"])
        .env("HPOTRIAGE_SEED", "999")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(without_timestamps(records(&a)), without_timestamps(records(&b)));
}

#[test]
fn bad_environment_value_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let o = Command::new(BIN)
        .args(["grid", "--config", &cfg, "--out", dir.path().join("x.jsonl").to_str().unwrap()])
        .env("HPOTRIAGE_SLOTS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("HPOTRIAGE_SLOTS"));
}

#[test]
fn report_renders_rounds_stably() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("t.jsonl");
    let o = run(&["troubleshoot", "--config", &cfg, "--out", out.to_str().unwrap(), "--algo", "RS"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let first = run(&["report", "--out", out.to_str().unwrap()]);
    let second = run(&["report", "--out", out.to_str().unwrap()]);
    assert_eq!(first.status.code(), Some(0));
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(stdout(&first), stdout(&o));

    let text = stdout(&first);
    let block: Vec<&str> = text
        .split("\n== ")
        .find(|b| b.starts_with("RS round 0"))
        .expect("round 0 block")
        .lines()
        .collect();
    let reps = block.iter().filter(|l| l.starts_with("rep")).count();
    let avgs = block.iter().filter(|l| l.starts_with("avg")).count();
    assert_eq!((reps, avgs), (3, 1), "{block:?}");
    assert!(text.contains("RS terminal:"));

    let recs = records(&out);
    let kinds: Vec<&str> = recs.iter().map(|r| r["kind"].as_str().unwrap()).collect();
    assert!(kinds.contains(&"round") && kinds.contains(&"procedure_terminal"), "{kinds:?}");
    let ids: Vec<u64> = recs.iter().map(|r| r["id"].as_u64().unwrap()).collect();
    assert!(ids.windows(2).all(|w| w[1] == w[0] + 1));
}

#[test]
fn external_evaluator_runs_random_search() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        r#"
name = "toy"
algorithms = ["RS"]
rep_seeds = [5]

[task]
kind = "external"
command = ["{TOY}", "noisy-neutral", "3"]
timeout_seconds = 30

[grid]
preset = "electra"
epochs = 3

[space]
rules = "electra"
"#
    );
    let cfg = write_config(dir.path(), "toy.toml", &text);
    let out = dir.path().join("toy.jsonl");
    let o = run(&[
        "hpo",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--budget-multiplier",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let recs = records(&out);
    let summary = recs
        .iter()
        .find(|r| r["kind"] == "run_summary" && r["payload"]["run"]["label"] == "RS")
        .expect("RS summary");
    let p = &summary["payload"];
    let trials: Vec<&Value> = recs
        .iter()
        .filter(|r| r["kind"] == "trial" && r["payload"]["run"]["label"] == "RS")
        .map(|r| &r["payload"]["trial"])
        .collect();
    assert!(trials.len() >= 5, "only {} trials", trials.len());
    assert_eq!(p["trials_started"].as_u64().unwrap() as usize, trials.len());
    assert!(p["elapsed_seconds"].as_f64().unwrap() <= p["deadline_seconds"].as_f64().unwrap() + 1e-9);
    for t in &trials {
        let steps: Vec<u64> = t["reports"].as_array().unwrap().iter().map(|r| r["step"].as_u64().unwrap()).collect();
        assert!(!steps.is_empty());
        assert!(steps.windows(2).all(|w| w[1] > w[0]), "{steps:?}");
        assert_ne!(t["status"], "pruned", "random search never prunes");
    }
    let best = p["best_trial"].as_u64().unwrap();
    assert!(trials.iter().any(|t| t["trial_id"].as_u64() == Some(best)));
}

#[test]
fn missing_evaluator_program_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace(
        "kind = \"surrogate\"\npreset = \"planted-overfit\"\nseed = 4",
        "kind = \"external\"\ncommand = [\"/nonexistent/evaluator\"]",
    );
    let cfg = write_config(dir.path(), "ext.toml", &text);
    let o = run(&["grid", "--config", &cfg, "--out", dir.path().join("e.jsonl").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(dir.path(), "small.toml", SMALL);
    let bad_algo = write_config(dir.path(), "algo.toml", &SMALL.replace("\"ASHA\"]", "\"Hyperband\"]"));
    let bad_key = write_config(dir.path(), "key.toml", &SMALL.replace("seed = 4", "seed = 4\ncolour = 1"));
    let store = dir.path().join("s.jsonl");
    let store = store.to_str().unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["hpo", "--config", &bad_algo, "--out", store],
        vec!["hpo", "--config", &bad_key, "--out", store],
        vec!["hpo", "--config", &good, "--out", store, "--algo", "Hyperband"],
        vec!["hpo", "--config", &good, "--out", store, "--space", "S_nope"],
        vec!["hpo", "--config", "/nonexistent.toml"],
        vec!["hpo", "--config", &good, "--slots", "lots"],
        vec!["frobnicate"],
        vec!["surrogate-gen", "--preset", "nope"],
    ];
    for args in cases {
        let o = run(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
    }
    let o = run(&["hpo", "--config", &bad_algo, "--out", store]);
    assert!(stderr(&o).contains("algorithms[1]"), "{}", stderr(&o));
    let o = run(&["hpo", "--config", &bad_key, "--out", store]);
    assert!(stderr(&o).contains("task"), "{}", stderr(&o));
}

#[test]
fn help_exits_zero() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn surrogate_gen_emits_a_loadable_spec() {
    let o = run(&["surrogate-gen", "--preset", "aligned", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["seed"], 3);
    let spec: hpotriage_core::surrogate::SurrogateSpec = serde_json::from_value(v).unwrap();
    spec.validate().unwrap();
}

#[test]
fn shipped_configs_load() {
    for name in ["electra-rte.toml", "roberta-mining.toml", "toy-process.toml"] {
        let path = root().join("configs").join(name);
        let cfg = hpotriage::config::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
        cfg.resolve().unwrap();
    }
}

#[test]
fn external_evaluator_honours_stop_under_asha() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        r#"
name = "toy-asha"
algorithms = ["ASHA"]
rep_seeds = [2]

[task]
kind = "external"
command = ["{TOY}", "noisy-neutral", "3"]
timeout_seconds = 30

[grid]
preset = "electra"
epochs = 3

[space]
rules = "electra"
"#
    );
    let cfg = write_config(dir.path(), "toy.toml", &text);
    let out = dir.path().join("toy.jsonl");
    let o = run(&["hpo", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let recs = records(&out);
    let grid_steps = recs
        .iter()
        .find(|r| r["kind"] == "trial" && r["payload"]["run"]["label"] == "grid")
        .map(|r| r["payload"]["trial"]["reports"].as_array().unwrap().len())
        .unwrap();
    let pruned: Vec<&Value> = recs
        .iter()
        .filter(|r| r["kind"] == "trial" && r["payload"]["trial"]["status"] == "pruned")
        .map(|r| &r["payload"]["trial"])
        .collect();
    assert!(!pruned.is_empty());
    for t in pruned {
        assert!(t["reports"].as_array().unwrap().len() < grid_steps);
    }
}
