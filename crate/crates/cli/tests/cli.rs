use clicker_core::data::synth::{SOURCE_LANG, TARGET_LANG};
use clicker_core::data::SynthWorldConfig;
use clicker_core::encoder::EncoderConfig;
use clicker_core::head::Stage;
use clicker_core::pipeline::PipelineConfig;
use clicker_core::trainer::TrainConfig;
use std::path::Path;
use std::process::{Command, Output};

fn clicker(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clicker"))
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

fn json(o: &Output) -> serde_json::Value {
    assert!(o.status.success(), "{}", stderr(o));
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn small_config(dir: &Path) -> String {
    let stage = |stage, total_steps| TrainConfig {
        stage,
        total_steps,
        lr: 3e-3,
        warmup_steps: 2,
        batch_size: 4,
        eval_every: 5,
        seed: 1,
        ..TrainConfig::default()
    };
    let cfg = PipelineConfig {
        world: SynthWorldConfig {
            n_concepts: 30,
            n_filler_tokens: 8,
            relation_density: 0.1,
            choices_per_item: 3,
            n_train: 12,
            n_dev: 6,
            n_test: 6,
            n_parallel: 8,
            seed: 4,
        },
        encoder: EncoderConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_len: 16,
            ..EncoderConfig::default()
        },
        stage1: stage(Stage::Pretrain, 6),
        stage2: stage(Stage::Differentiate, 4),
        stage3: stage(Stage::Transfer, 6),
        ..PipelineConfig::default()
    };
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path.display().to_string()
}

#[test]
fn gen_corpus_writes_the_layout() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out = dir.path().join("data");
    let o = clicker(&["gen-corpus", "--config", &config, "--out", out.to_str().unwrap(), "--json"]);
    let doc = json(&o);
    assert_eq!(doc["schema_version"], 1);
    for split in ["train", "dev", "test", "parallel"] {
        for lang in [SOURCE_LANG, TARGET_LANG] {
            assert!(out.join(format!("{split}.{lang}.jsonl")).exists());
        }
    }
    assert!(out.join("vocab.txt").exists());
}

#[test]
fn same_seed_gives_identical_output() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = clicker(&["gen-corpus", "--config", &config, "--seed", "11", "--out", out.to_str().unwrap(), "--json"]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(out.join(format!("train.{TARGET_LANG}.jsonl"))).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn missing_file_names_the_path() {
    let o = clicker(&["evaluate", "--checkpoint", "/nonexistent/model.ckpt", "--data", "/nonexistent/dev.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/model.ckpt"), "{}", stderr(&o));
}

#[test]
fn unknown_stage_and_preset_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let data = dir.path().join("data");
    assert!(clicker(&["gen-corpus", "--config", &config, "--out", data.to_str().unwrap()]).status.success());
    let ckpt = dir.path().join("x.ckpt");
    let base = ["train", "--config", &config, "--data", data.to_str().unwrap(), "--out", ckpt.to_str().unwrap()];

    let o = clicker(&[&base[..], &["--stage", "4"]].concat());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown stage 4"), "{}", stderr(&o));

    let o = clicker(&[&base[..], &["--stage", "2", "--losses", "everything"]].concat());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("everything"), "{}", stderr(&o));
    assert!(!ckpt.exists());
}

#[test]
fn train_evaluate_heatmap_report_flow() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let data = dir.path().join("data");
    let data_s = data.to_str().unwrap();
    assert!(clicker(&["gen-corpus", "--config", &config, "--out", data_s]).status.success());

    let ckpt = |n: u8| dir.path().join(format!("stage{n}.ckpt")).display().to_string();
    let log = dir.path().join("train_log.csv").display().to_string();
    for n in 1..=3u8 {
        let stage = n.to_string();
        let mut args = vec!["train", "--config", &config, "--stage", &stage, "--data", data_s, "--log", &log, "--json"];
        let out = ckpt(n);
        let prev = ckpt(n - 1);
        args.extend(["--out", out.as_str()]);
        if n > 1 {
            args.extend(["--init", prev.as_str()]);
        }
        let doc = json(&clicker(&args));
        assert_eq!(doc["result"]["stage"], n as u64);
    }
    let text = std::fs::read_to_string(&log).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("step")).count(), 1);
    assert_eq!(text.lines().count(), 1 + 6 + 4 + 6);

    let dev = data.join(format!("dev.{TARGET_LANG}.jsonl"));
    let dev_s = dev.to_str().unwrap();
    let final_ckpt = ckpt(3);
    let doc = json(&clicker(&["evaluate", "--checkpoint", &final_ckpt, "--data", dev_s, "--json"]));
    let reports = doc["result"].as_array().unwrap();
    assert_eq!(reports.len(), 3);
    for r in reports {
        let acc = r["accuracy"].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&acc));
        assert_eq!(r["count"], 6);
    }

    let id = std::fs::read_to_string(&dev).unwrap();
    let first: serde_json::Value = serde_json::from_str(id.lines().next().unwrap()).unwrap();
    let id = first["id"].as_str().unwrap();
    let heat = dir.path().join("heat");
    let doc = json(&clicker(&[
        "heatmap", "--checkpoint", &final_ckpt, "--data", dev_s, "--id", id, "--out", heat.to_str().unwrap(), "--json",
    ]));
    let files = doc["result"].as_array().unwrap();
    assert_eq!(files.len(), 3);
    let csv = std::fs::read_to_string(files[0].as_str().unwrap()).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().next().unwrap().starts_with("[CLS]"));

    let base = format!("base={}", ckpt(1));
    let full = format!("full={final_ckpt}");
    let o = clicker(&["report", "--model", &base, "--model", &full, "--data", dev_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.contains("| base |"), "{table}");
    assert!(table.contains("| full |"), "{table}");

    let o = clicker(&["report", "--model", &base, "--baseline", "nope", "--data", dev_s]);
    assert!(!o.status.success());
}

#[test]
fn rerun_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let data = dir.path().join("data");
    let data_s = data.to_str().unwrap();
    assert!(clicker(&["gen-corpus", "--config", &config, "--out", data_s]).status.success());
    let train = |name: &str| {
        let out = dir.path().join(name);
        let o = clicker(&["train", "--config", &config, "--stage", "1", "--data", data_s, "--out", out.to_str().unwrap(), "--json"]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(out).unwrap()
    };
    assert_eq!(train("a.ckpt"), train("b.ckpt"));
}
