use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = "\
world.n_items = 300
world.d_img = 16
listener.d_w = 8
listener.hidden = 16
listener.joint = 16
pretrain.steps = 60
pretrain.eval_interval = 30
pretrain.eval_trials = 100
index.k = 10
train.total_steps = 4
train.eval_interval = 2
train.eval_episodes = 20
train.checkpoint_interval = 2
train.ppo.batch_size = 8
train.ppo.minibatch = 4
train.ppo.epochs = 1
train.speaker.d_w = 8
train.speaker.hidden = 16
train.rerank.n_candidates = 3
train.rerank.anneal_steps = 2
train.rerank.sigma_decay_steps = 2
train.game.difficulty = hard
eval.episodes = 20
";

fn refgame(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refgame"))
        .args(args)
        .env("REFGAME_RUN_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> Output {
    let out = refgame(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// Tiny config file in `root`, plus a prepared run `run` up to `until`.
fn setup(root: &Path, run: &str, until: &str) -> String {
    let conf = root.join("tiny.conf");
    fs::write(&conf, TINY).unwrap();
    let conf = conf.to_string_lossy().into_owned();
    for cmd in ["gen-world", "pretrain-listener", "build-index", "train"] {
        ok(root, &[cmd, "-c", &conf, "--run", run]);
        if cmd == until {
            break;
        }
    }
    conf
}

#[test]
fn full_pipeline_writes_artifacts_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let conf = setup(root, "r", "train");
    ok(root, &["evaluate", "-c", &conf, "--run", "r"]);
    let out = ok(root, &["play", "-c", &conf, "--run", "r", "--episodes", "2"]);
    let dir = root.join("r");

    let trace: Value = serde_json::from_slice(&out.stdout).unwrap();
    let eps = trace.as_array().unwrap();
    assert_eq!(eps.len(), 2);
    let pool = eps[0]["pool"].as_array().unwrap();
    assert_eq!(pool.len(), 3);
    for p in pool {
        assert!(p["speaker_score"].is_number() && p["listener_score"].is_number());
        assert!(p["utterance"].is_string());
    }

    let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");
    let eval: Value = serde_json::from_slice(&fs::read(dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["n_episodes"], 20);
    let eval_csv = fs::read_to_string(dir.join("eval.csv")).unwrap();
    assert_eq!(eval_csv.lines().next(), metrics.lines().next());

    let manifest: Value = serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "play");
    assert!(manifest["report"]["acc"].is_number(), "report carried over from evaluate");
    let artifacts = manifest["artifacts"].as_object().unwrap();
    for name in ["world/corpus.jsonl", "listener.rgtm", "index_train.rgix", "checkpoint/speaker.rgtm", "metrics.csv"] {
        let h = artifacts[name].as_str().unwrap();
        assert_eq!(h.len(), 64, "{name}");
    }
    assert!(!dir.join("manifest.json.tmp").exists());
    assert_eq!(manifest["config"]["train"]["total_steps"], 4);

    // the written config re-launches the same run
    let relaunch = dir.join("config.conf").to_string_lossy().into_owned();
    ok(root, &["train", "-c", &relaunch, "--run", "r"]);
    assert_eq!(fs::read_to_string(dir.join("metrics.csv")).unwrap(), metrics);
}

#[test]
fn identical_configs_give_identical_metrics_and_resume_matches() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let conf = setup(root, "a", "train");
    setup(root, "b", "build-index");
    // b is interrupted at step 2, then resumed to 4
    ok(root, &["train", "-c", &conf, "--run", "b", "--set", "train.total_steps=2"]);
    ok(root, &["train", "-c", &conf, "--run", "b"]);
    let a = fs::read(root.join("a/metrics.csv")).unwrap();
    let b = fs::read(root.join("b/metrics.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        fs::read(root.join("a/checkpoint/speaker.rgtm")).unwrap(),
        fs::read(root.join("b/checkpoint/speaker.rgtm")).unwrap()
    );
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    assert_eq!(code(&refgame(root, &["gen-world", "--set", "world.schema.max_objects=0"])), 2);
    assert_eq!(code(&refgame(root, &["gen-world", "--set", "world.nonsense=1"])), 2);
    assert_eq!(code(&refgame(root, &["train", "--run", "empty"])), 2);

    let conf = setup(root, "r", "build-index");
    // index built with K=10 no longer matches
    let out = refgame(root, &["train", "-c", &conf, "--run", "r", "--set", "index.k=12"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    // corpus from a different world seed
    let out = refgame(root, &["train", "-c", &conf, "--run", "r", "--set", "world.seed=99"]);
    assert_eq!(code(&out), 4);
    // listener shape differs from its checkpoint
    let out = refgame(root, &["train", "-c", &conf, "--run", "r", "--set", "listener.joint=8"]);
    assert_eq!(code(&out), 4);
    // evaluating before training
    assert_eq!(code(&refgame(root, &["evaluate", "-c", &conf, "--run", "r"])), 2);
}

#[test]
fn gen_world_is_deterministic_and_pretrain_reuses_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let conf = setup(root, "x", "pretrain-listener");
    ok(root, &["gen-world", "-c", &conf, "--run", "y"]);
    let corpus = |r: &str| fs::read(root.join(r).join("world/corpus.jsonl")).unwrap();
    assert_eq!(corpus("x"), corpus("y"));
    let before = fs::metadata(root.join("x/listener.rgtm")).unwrap().modified().unwrap();
    ok(root, &["pretrain-listener", "-c", &conf, "--run", "x"]);
    let after = fs::metadata(root.join("x/listener.rgtm")).unwrap().modified().unwrap();
    assert_eq!(before, after);
}

#[test]
fn gold_evaluation_and_show_config() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let conf = setup(root, "g", "build-index");
    ok(root, &["evaluate", "-c", &conf, "--run", "g", "--set", "eval.gold=true"]);
    let eval: Value = serde_json::from_slice(&fs::read(root.join("g/eval.json")).unwrap()).unwrap();
    assert!((eval["bleu"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    for (_, f1) in eval["pos_f1"].as_object().unwrap() {
        assert_eq!(f1.as_f64().unwrap(), 1.0);
    }
    let out = ok(root, &["show-config", "-c", &conf]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("train.rerank.n_candidates = 3\n"));
    assert!(text.contains("world.n_items = 300\n"));
}
