use std::path::Path;
use std::process::{Command, Output};

use lngram_core::checkpoint::load_checkpoint;
use lngram_core::{Decoder, RunConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TINY: &str = r#"
seed = 3

[model]
layers = 2
model_dim = 16
heads = 2
ffn_dim = 32
max_seq_len = 32
insert_layers = [1]

[model.lngram]
memory_dim = 4

[train]
batch_size = 2
seq_len = 32
total_tokens = 0

[corpus]
train_len = 20000
val_len = 3000
seq_len = 32
entity_rate = 0.05

[analysis]
samples = 4
bootstrap_trials = 200

[bench]
prompt_len = 8
decode_steps = 8
repetitions = 1
"#;

fn lngram(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lngram")).current_dir(dir).args(args).output().expect("binary runs")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

#[test]
fn gradcheck_with_defaults_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = lngram(dir.path(), &["gradcheck", "--out", "gc"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&dir.path().join("gc/gradcheck.json"));
    assert_eq!(report["pass"], true);
    assert!(report["surrogate"]["max_rel_err"].as_f64().unwrap() < 1e-6);
    assert_eq!(report["surrogate"]["results"].as_array().unwrap().len(), 100);
    assert_eq!(report["config_hash"], RunConfig::default().hash().unwrap());
}

#[test]
fn zero_step_training_saves_the_initialization() {
    let dir = setup(TINY);
    let out = lngram(dir.path(), &["train", "--config", "run.toml", "--out", "t"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = RunConfig::from_toml(TINY).unwrap();
    let saved = load_checkpoint::<f32>(&dir.path().join("t/model.ckpt"), Some(&cfg.model)).unwrap();
    let init = Decoder::<f32>::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    assert_eq!(saved.model, init);
    let manifest = json(&dir.path().join("t/manifest.json"));
    assert_eq!(manifest["config_hash"], cfg.hash().unwrap());
    assert_eq!(manifest["command"], "train");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = lngram(dir.path(), &["train", "--learning-rat", "3"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--learning-rat"));
}

#[test]
fn unknown_config_key_names_the_key() {
    let dir = setup("[train]\nlearning_rat = 0.1\n");
    let out = lngram(dir.path(), &["gradcheck", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn overrides_reach_the_effective_config() {
    let dir = setup(TINY);
    let out = lngram(
        dir.path(),
        &["train", "--config", "run.toml", "--out", "t", "--seed", "9", "--orders", "2", "--bits", "2", "--subtables", "2", "--insert-layers", "2", "--surrogate", "onebit", "--tau-f", "0.5"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = RunConfig::from_toml(&std::fs::read_to_string(dir.path().join("t/config.toml")).unwrap()).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.model.insert_layers, vec![2]);
    let l = &cfg.model.lngram;
    assert_eq!((l.orders.clone(), l.bits, l.subtables, l.fusion_temperature), (vec![2], 2, 2, 0.5));
    assert_eq!(l.surrogate.mode, lngram_core::SurrogateMode::OneBit);
    assert_eq!(l.gate, lngram_core::GateMode::Softmax);
}

#[test]
fn every_command_runs_on_a_tiny_model() {
    let config = TINY.replace("total_tokens = 0", "total_tokens = 256");
    let dir = setup(&config);
    let run = |args: &[&str]| {
        let mut full = args.to_vec();
        full.extend(["--config", "run.toml"]);
        let out = lngram(dir.path(), &full);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["corpus-gen", "--out", "corpus"]);
    assert_eq!(std::fs::read(dir.path().join("corpus/train.bin")).unwrap().len(), 20000);
    run(&["train", "--out", "t"]);
    run(&["eval", "--checkpoint", "t/model.ckpt", "--out", "e"]);
    assert!(json(&dir.path().join("e/eval.json"))["perplexity"].as_f64().unwrap() > 1.0);
    run(&["analyze-logitlens", "--checkpoint", "t/model.ckpt", "--out", "ll"]);
    let kl = json(&dir.path().join("ll/logitlens.json"));
    assert_eq!(kl["kl"].as_array().unwrap().len(), 3);
    run(&["analyze-cka", "--baseline", "t/model.ckpt", "--variant", "t/model.ckpt", "--out", "cka"]);
    let cka = json(&dir.path().join("cka/cka.json"));
    assert!((cka["cka"]["s"][0][0].as_f64().unwrap() - 1.0).abs() < 1e-9);
    run(&["gate-viz", "--checkpoint", "t/model.ckpt", "--out", "g"]);
    assert!(dir.path().join("g/gates.csv").exists());
    assert!(json(&dir.path().join("g/gate_summary.json"))["summary"]["entity_positions"].as_u64().unwrap() > 0);
    run(&["bench", "--checkpoint", "t/model.ckpt", "--out", "b"]);
    assert_eq!(json(&dir.path().join("b/bench.json"))["rows"].as_array().unwrap().len(), 7);
    std::fs::write(dir.path().join("pairs.json"), r#"[{"name": "x", "a": [0, 1, 1, 0], "b": [1, 1, 1, 0]}, {"name": "y", "a": [true, false], "b": [true, false]}]"#).unwrap();
    run(&["analyze-bootstrap", "--input", "pairs.json", "--out", "bs"]);
    let bs = json(&dir.path().join("bs/bootstrap.json"));
    assert_eq!(bs["entries"][1]["p_value"], 1.0);
}
