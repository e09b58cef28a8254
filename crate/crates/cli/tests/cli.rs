use std::path::Path;
use std::process::Command;

use vqrefine::numkernel::{init_normal, Rng, Tensor};
use vqrefine_cli::checkpoint;
use vqrefine_cli::config::RunConfig;

const BIN: &str = env!("CARGO_BIN_EXE_vqrefine");

/// Small enough to run every command in a few seconds.
const TINY: [&str; 10] = ["--steps", "4", "--train_pool", "8", "--test_pool", "3", "--d", "16", "--epochs", "1"];

fn vq(out: &Path, args: &[&str]) -> (i32, String) {
    let o = Command::new(BIN).args(args).env("VQREFINE_OUT", out).output().expect("binary runs");
    (o.status.code().unwrap_or(-1), String::from_utf8_lossy(&o.stderr).into_owned())
}

fn tiny(out: &Path, cmd: &str) {
    let mut args = vec![cmd];
    args.extend(TINY);
    let (code, err) = vq(out, &args);
    assert_eq!(code, 0, "{cmd}: {err}");
}

#[test]
fn dependency_errors_name_the_producing_command() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = vq(dir.path(), &["eval"]);
    assert_eq!(code, 1);
    assert!(err.contains("run pretrain first"), "{err}");
    let (code, err) = vq(dir.path(), &["pretrain"]);
    assert_eq!(code, 1);
    assert!(err.contains("run gen-data first"), "{err}");
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = vq(dir.path(), &["gen-data", "--K", "0"]);
    assert_eq!(code, 1);
    assert!(err.contains("K ≥ 1"), "{err}");
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "lr = 1e-4\nlearnig_rate = 2\n").unwrap();
    let (code, err) = vq(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("learnig_rate"), "{err}");
}

#[test]
fn unreadable_config_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = vq(dir.path(), &["gen-data", "--config", "/nonexistent/run.toml"]);
    assert_eq!(code, 2);
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "lr = 1e-4\ntrain_pool = 5\ntest_pool = 2\n").unwrap();
    let out = dir.path().join("o");
    let (code, err) = vq(
        &out,
        &["gen-data", "--config", cfg.to_str().unwrap(), "--test_pool", "3", "--out_dir", out.to_str().unwrap()],
    );
    assert_eq!(code, 0, "{err}");
    let test = std::fs::read_to_string(out.join("data/test.txt")).unwrap();
    let train = std::fs::read_to_string(out.join("data/train.txt")).unwrap();
    assert_eq!(test.lines().count(), 3);
    assert_eq!(train.lines().count(), 5);

    let mut file_cfg = RunConfig::from_file(&cfg).unwrap();
    assert_eq!(file_cfg.lr, 1e-4);
    file_cfg.set("lr", toml::Value::Float(5e-4)).unwrap();
    assert_eq!(file_cfg.lr, 5e-4);
}

#[test]
fn checkpoint_round_trip_and_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(3);
    let tensors: Vec<(String, Tensor)> =
        (0..5).map(|i| (format!("t{i}"), init_normal(&mut rng, &[3 + i, 2], 1.0))).collect();
    let path = dir.path().join("x.ckpt");
    checkpoint::write(&path, &checkpoint::encode(tensors.iter().map(|(n, t)| (n.clone(), t))).unwrap()).unwrap();
    let back = checkpoint::read(&path).unwrap();
    for (name, t) in &tensors {
        let b = &back[name];
        assert_eq!(b.dims(), t.dims());
        assert!(b.data().iter().zip(t.data()).all(|(x, y)| *x == *y as f32 as f64));
    }
    let empty = checkpoint::encode(Vec::<(String, &Tensor)>::new()).unwrap();
    assert_eq!(empty.len(), 12);
    assert!(checkpoint::decode(&empty).unwrap().is_empty());
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for cmd in [
        "gen-data",
        "pretrain",
        "train-refiner",
        "train-lora",
        "eval",
        "exp-error-accum",
        "exp-structured",
        "exp-prefix",
        "exp-context",
        "ablate-loss",
        "ablate-arch",
        "timing",
    ] {
        tiny(out, cmd);
    }
    let eval = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    let methods: Vec<&str> = eval.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["LVM", "+Context Retrieval", "+LoRA", "+Self-Refinement"]);
    assert!(!eval.contains('\r'));

    let curve = std::fs::read_to_string(out.join("error_accum_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 64);
    let svg = std::fs::read_to_string(out.join("error_accum.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);

    let loss = std::fs::read_to_string(out.join("ablate_loss.csv")).unwrap();
    let rows: Vec<&str> = loss.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, ["cosine", "l2"]);

    let arch = std::fs::read_to_string(out.join("ablate_arch.csv")).unwrap();
    let mut variants = Vec::new();
    for line in arch.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        variants.push(cells[0].to_string());
        let ratio: f64 = cells[2].parse().unwrap();
        assert!((0.8..=1.25).contains(&ratio), "{line}");
    }
    assert_eq!(variants, ["attention", "mlp", "conv"]);

    let context = std::fs::read_to_string(out.join("context.csv")).unwrap();
    let ks: Vec<&str> = context.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ks, ["1", "2", "3", "4"]);

    let timing = std::fs::read_to_string(out.join("timing.csv")).unwrap();
    assert!(timing.starts_with("method,generation_s,refinement_s,nn_lookup_s,detokenize_s,total_s\n"));

    // Every checkpoint carries the hash of the configuration that wrote it.
    let mut cfg = RunConfig::default();
    for pair in TINY.chunks(2) {
        let key = pair[0].trim_start_matches("--");
        cfg.set(key, toml::Value::Integer(pair[1].parse().unwrap())).unwrap();
    }
    let (hash, _) = checkpoint::take_hash(checkpoint::read(&out.join("backbone.ckpt")).unwrap()).unwrap();
    assert_eq!(hash, Some(cfg.hash()));
}
