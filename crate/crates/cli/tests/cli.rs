use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tempco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tempco")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tempco(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, videos: usize, frames: usize, phases: usize) -> PathBuf {
    let (v, f, p) = (videos.to_string(), frames.to_string(), phases.to_string());
    ok(&["synth", "--out", s(dir), "--videos", &v, "--frames", &f, "--phases", &p, "--seed", "1"]);
    dir.to_path_buf()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = synth(&tmp.path().join("d"), 20, 300, 7);
    let manifest = fs::read_to_string(dir.join("manifest.txt")).unwrap();
    let entries = manifest.lines().filter(|l| !l.starts_with('@') && !l.starts_with('#') && !l.trim().is_empty());
    assert_eq!(entries.count(), 20);
    let frames = files(&dir).iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "ppm")).count();
    assert_eq!(frames, 6000);
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(&tmp.path().join("a"), 2, 12, 3);
    let b = synth(&tmp.path().join("b"), 2, 12, 3);
    let strip = |v: Vec<(PathBuf, Vec<u8>)>| v.into_iter().filter(|(p, _)| p != Path::new("config.json")).collect::<Vec<_>>();
    assert_eq!(strip(files(&a)), strip(files(&b)));
}

#[test]
fn synth_refuses_non_empty_output() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = synth(&tmp.path().join("d"), 2, 12, 3);
    let out = tempco(&["synth", "--out", s(&dir), "--videos", "2", "--frames", "12"]);
    assert_eq!(code(&out), 2);
    ok(&["synth", "--out", s(&dir), "--videos", "2", "--frames", "12", "--force"]);
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let out = tempco(&["pretrain", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(&tmp.path().join("d"), 2, 10, 3);
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"train": {"epochs": 5, "momentum": 0.5}}"#).unwrap();
    let out = tmp.path().join("run");
    ok(&["pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--arch", "desk", "--epochs", "1", "--static-threshold", "0"]);
    let snap: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(snap["train"]["epochs"], 1);
    assert_eq!(snap["train"]["momentum"], 0.5);
    assert_eq!(snap["train"]["base_lr"], 5e-4);
}

#[test]
fn pretrain_header_log_resume_and_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(&tmp.path().join("d"), 3, 20, 3);
    let base = ["--data", s(&data), "--arch", "desk", "--static-threshold", "0", "--checkpoint-every", "1"];
    let run = |out: &Path, epochs: &str, extra: &[&str]| {
        let mut args = vec!["pretrain", "--out", s(out), "--epochs", epochs];
        args.extend_from_slice(&base);
        args.extend_from_slice(extra);
        ok(&args)
    };

    let full = tmp.path().join("full");
    let stdout = run(&full, "4", &[]);
    assert!(stdout.contains("lr 0.0005 momentum 0.9"), "{stdout}");
    let log = fs::read_to_string(full.join("log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "epoch,lr,loss,accuracy");
    assert_eq!(log.lines().count(), 5);

    let part = tmp.path().join("part");
    run(&part, "2", &[]);
    let ckpt = part.join("checkpoint.tcln");
    run(&part, "4", &["--resume", s(&ckpt)]);
    assert_eq!(fs::read_to_string(part.join("log.csv")).unwrap(), log);
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(full.join("checkpoint.tcln")).unwrap());

    let again = tmp.path().join("again");
    ok(&["pretrain", "--config", s(&full.join("config.json")), "--out", s(&again)]);
    assert_eq!(fs::read(again.join("checkpoint.tcln")).unwrap(), fs::read(full.join("checkpoint.tcln")).unwrap());
}

#[test]
fn finetune_variants_and_pretrained_transfer() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(&tmp.path().join("d"), 2, 12, 3);
    let pre = tmp.path().join("pre");
    ok(&["pretrain", "--data", s(&data), "--out", s(&pre), "--arch", "desk", "--epochs", "1", "--static-threshold", "0"]);
    for (net, has_gru) in [("naive", false), ("tempconet", true)] {
        let out = tmp.path().join(net);
        let pretrained = pre.join("checkpoint.tcln");
        let stdout = ok(&[
            "finetune", "--data", s(&data), "--out", s(&out), "--arch", "desk", "--epochs", "2", "--net", net,
            "--pretrained", s(&pretrained),
        ]);
        assert_eq!(stdout.lines().filter(|l| l.starts_with(char::is_numeric)).count(), 2);
        let ckpt = tempco::netarch::Checkpoint::load(out.join("model.tcln")).unwrap();
        assert_eq!(ckpt.params.iter().any(|p| p.name.starts_with("gru.")), has_gru, "{net}");
        let conv1 = ckpt.params.iter().find(|p| p.name == "conv1.kernel").unwrap();
        assert_eq!(conv1.lr_multiplier, 0.1);
    }
}

#[test]
fn incompatible_checkpoint_names_the_layer() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(&tmp.path().join("d"), 2, 12, 3);
    let pre = tmp.path().join("pre");
    ok(&["pretrain", "--data", s(&data), "--out", s(&pre), "--arch", "desk", "--epochs", "1", "--static-threshold", "0"]);
    let cfg = tmp.path().join("c.json");
    let mut arch = serde_json::to_value(tempco::netarch::ArchConfig::desk(24, 32)).unwrap();
    arch["fc6_units"] = 128.into();
    fs::write(&cfg, serde_json::json!({ "arch": arch }).to_string()).unwrap();
    let out = tempco(&[
        "finetune", "--config", s(&cfg), "--data", s(&data), "--out", s(&tmp.path().join("ft")), "--epochs", "1",
        "--pretrained", s(&pre.join("checkpoint.tcln")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("fc6"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn loso_writes_one_fold_file_per_video() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(&tmp.path().join("d"), 7, 8, 3);
    let out = tmp.path().join("loso");
    let stdout = ok(&["loso", "--data", s(&data), "--out", s(&out), "--arch", "desk", "--epochs", "1", "--net", "naive", "--threads", "2"]);
    assert!(stdout.contains("naive,7,"));
    let names: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(names.iter().filter(|n| n.starts_with("fold_")).count(), 7);
    assert!(names.contains(&"summary.csv".to_string()));
    assert!(names.contains(&"curves.csv".to_string()));
    assert!(names.contains(&"config.json".to_string()));
}

#[test]
fn loso_without_labels_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(&tmp.path().join("d"), 2, 8, 3);
    let manifest = data.join("manifest.txt");
    let text: String = fs::read_to_string(&manifest)
        .unwrap()
        .lines()
        .map(|l| if l.starts_with("video01") { l.split_whitespace().take(2).collect::<Vec<_>>().join(" ") } else { l.to_string() })
        .map(|l| l + "\n")
        .collect();
    fs::write(&manifest, text).unwrap();
    let out = tempco(&["loso", "--data", s(&data), "--out", s(&tmp.path().join("l")), "--arch", "desk", "--epochs", "1"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn divergence_exits_with_four() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(&tmp.path().join("d"), 2, 12, 3);
    let out = tmp.path().join("ft");
    let res = tempco(&["finetune", "--data", s(&data), "--out", s(&out), "--arch", "desk", "--epochs", "20", "--lr", "1e30"]);
    assert_eq!(code(&res), 4, "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("last_good.tcln").exists());
}

#[test]
fn evaluate_stored_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let pred = tmp.path().join("pred.csv");
    let truth = tmp.path().join("v1.csv");
    fs::write(&pred, "index,phase_id\n0,1\n1,2\n2,2\n3,2\n").unwrap();
    fs::write(&truth, "0,1\n1,1\n2,2\n3,2\n").unwrap();
    let report = tmp.path().join("m.csv");
    let stdout = ok(&["evaluate", "--predictions", s(&pred), "--annotations", s(&truth), "--phases", "2", "--out", s(&report)]);
    assert_eq!(stdout.lines().nth(3).unwrap(), "v1,macro,0.8333333333333333,0.75,0.75");
    assert_eq!(fs::read_to_string(&report).unwrap(), stdout);
    fs::write(&pred, "0,1\n").unwrap();
    let out = tempco(&["evaluate", "--predictions", s(&pred), "--annotations", s(&truth), "--phases", "2"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn gradcheck_reports_each_op_once_and_catches_faults() {
    let stdout = ok(&["gradcheck", "--no-networks"]);
    for op in tempco::gradcheck::DIFFERENTIABLE_OPS {
        let n = stdout.lines().filter(|l| l.split_whitespace().next() == Some(op.name())).count();
        assert_eq!(n, 1, "{}", op.name());
    }
    let out = tempco(&["gradcheck", "--no-networks", "--inject-fault", "conv2d"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("conv2d"));
}
