use std::path::Path;
use std::process::{Command, Output};

fn maskgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskgen")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.json");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn tiny(dir: &Path) -> String {
    let run = dir.join("run");
    write_config(
        dir,
        &format!(
            r#"{{
  "seed": 5,
  "world": {{"sigma": 0.0}},
  "quantizers": {{"steps": 1000}},
  "net": {{"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "max_len": 48}},
  "pretrain": {{"steps": 6, "batch_tokens": 64}},
  "finetune": {{"steps": 4, "batch_tokens": 64}},
  "acoustic": {{"steps": 3, "batch_tokens": 64, "net": {{"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "max_len": 48}}}},
  "eval": {{"samples": 4}},
  "corpus_utterances": 10,
  "paths": {{"dir": {:?}}}
}}"#,
            run.to_str().unwrap()
        ),
    )
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert_eq!(o.status.code(), Some(0), "stderr:\n{}", stderr(o));
}

#[test]
fn full_command_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let run = dir.path().join("run");

    assert_ok(&maskgen(&["make-world", "--config", &cfg]));
    assert!(run.join("world.json").exists());

    let o = maskgen(&["train-codebooks", "--config", &cfg]);
    assert_ok(&o);
    assert!(run.join("tokenizers.ckpt").exists() && run.join("corpus.tok").exists() && run.join("corpus.tok.json").exists());

    let o = maskgen(&["pretrain", "--config", &cfg]);
    assert_ok(&o);
    let metric_lines: Vec<String> = stderr(&o).lines().filter(|l| l.starts_with("step ")).map(String::from).collect();
    assert_eq!(metric_lines.len(), 6);
    for (k, l) in metric_lines.iter().enumerate() {
        let f: Vec<&str> = l.split(' ').collect();
        assert_eq!(f.len(), 6, "{l}");
        assert_eq!((f[0], f[2], f[4], f[5]), ("step", "loss", "task", "pretrain"));
        assert_eq!(f[1].parse::<usize>().unwrap(), k + 1);
        assert!(f[3].parse::<f32>().unwrap().is_finite());
    }

    // resuming to a larger step count continues from step 6
    let o = maskgen(&["pretrain", "--config", &cfg, "--resume", "--set", "pretrain.steps=8"]);
    assert_ok(&o);
    assert!(stderr(&o).lines().any(|l| l.starts_with("step 7 ")));
    assert!(!stderr(&o).lines().any(|l| l.starts_with("step 6 ")));

    let o = maskgen(&["inspect-ckpt", run.join("pretrain.ckpt").to_str().unwrap()]);
    assert_ok(&o);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("magic MGMK\nversion 1\nstep 8\n"), "{text}");
    assert!(text.contains("model/param/embed ["));

    assert_ok(&maskgen(&["pretrain", "--config", &cfg, "--stage", "acoustic"]));
    assert_ok(&maskgen(&["finetune", "--config", &cfg]));
    assert_ok(&maskgen(&["generate", "--config", &cfg, "--acoustic"]));
    assert!(run.join("generated.tok").exists() && run.join("generated_acoustic.tok.json").exists());

    let o = maskgen(&["eval", "--config", &cfg, "--task", "tts"]);
    assert_ok(&o);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).expect("stdout is exactly one JSON document");
    assert_eq!(v["task"], "tts");
    assert_eq!(v["n_samples"], 4);
    assert!(v["symbol_error_rate"].as_f64().is_some() && v["speaker_similarity"].as_f64().is_some());

    let o = maskgen(&["eval", "--config", &cfg, "--task", "tts", "--oracle"]);
    assert_ok(&o);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["symbol_error_rate"], 0.0);
}

#[test]
fn missing_config_exits_3_naming_the_path() {
    let o = maskgen(&["pretrain", "--config", "/no/such/dir/run.json"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("/no/such/dir/run.json"));
}

#[test]
fn invalid_config_exits_3_listing_violations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"seed": 1, "tasks": [{"task": "tts", "weight": 0.9}], "eval": {"samples": 0}}"#);
    let o = maskgen(&["finetune", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3));
    let e = stderr(&o);
    assert!(e.contains("0.9") && e.contains("eval.samples"), "{e}");
    let cfg = write_config(dir.path(), r#"{"seed": 1, "bogus": true}"#);
    assert_eq!(maskgen(&["make-world", "--config", &cfg]).status.code(), Some(3));
    let cfg = write_config(dir.path(), r#"{}"#);
    assert_eq!(maskgen(&["train-codebooks", "--config", &cfg]).status.code(), Some(3));
}

#[test]
fn bad_arguments_exit_2() {
    assert_eq!(maskgen(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(maskgen(&["pretrain"]).status.code(), Some(2));
    assert_eq!(maskgen(&["eval", "--config", "x.json", "--task", "asr"]).status.code(), Some(2));
    assert_eq!(maskgen(&["--help"]).status.code(), Some(0));
}

#[test]
fn checkpoint_problems_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"XXXXsomething").unwrap();
    let o = maskgen(&["inspect-ckpt", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("XXXX"));
    let o = maskgen(&["inspect-ckpt", dir.path().join("absent.ckpt").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    let cfg = write_config(dir.path(), &format!(r#"{{"seed": 1, "paths": {{"dir": {:?}}}}}"#, dir.path().to_str().unwrap()));
    assert_eq!(maskgen(&["pretrain", "--config", &cfg]).status.code(), Some(4));
}
