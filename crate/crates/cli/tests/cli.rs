//! End-to-end runs of the `qmamba` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qmamba_core::data::{load_dataset, psnr, synth_reference, DistortionKind};
use qmamba_core::metrics::srcc;
use serde_json::Value;
use tempfile::TempDir;

fn qmamba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qmamba")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = qmamba(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    qmamba(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, count: usize, seed: u64, kinds: Option<&str>) {
    let (c, s) = (count.to_string(), seed.to_string());
    let mut args = vec!["synth-data", "--count", &c, "--seed", &s, "--out", p(dir)];
    if let Some(k) = kinds {
        args.extend(["--kinds", k]);
    }
    ok(&args);
}

#[test]
fn synth_data_is_reproducible_and_calibrated() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, 200, 7, None);
    synth(&b, 200, 7, None);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 201);
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n:?} differs");
    }

    let samples = load_dataset(&a.join("manifest.csv")).unwrap();
    assert_eq!(samples.len(), 200);
    let quality: Vec<f64> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| psnr(&s.image, &synth_reference(7, i, &DistortionKind::ALL)).unwrap())
        .collect();
    let mos: Vec<f64> = samples.iter().map(|s| s.mos).collect();
    let r = srcc(&quality, &mos).unwrap();
    assert!(r >= 0.7, "PSNR/MOS SRCC {r}");
}

#[test]
fn argument_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&["synth-data", "--count", "0", "--out", p(tmp.path())]), 2);
    assert_eq!(code(&["synth-data", "--count", "3", "--kinds", "sepia", "--out", p(tmp.path())]), 2);
    assert_eq!(code(&["scan-info", "--height", "0", "--width", "4"]), 2);
    assert_eq!(code(&["scan-info", "--height", "4", "--width", "4", "--mode", "spiral"]), 2);
    assert_eq!(code(&["bogus"]), 2);
}

#[test]
fn data_errors_exit_3() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    assert_eq!(code(&["train", "--data", p(&tmp.path().join("missing")), "--out", p(&out)]), 3);
    fs::write(tmp.path().join("manifest.csv"), "path,score\nnot-there.png,0.5\n").unwrap();
    assert_eq!(code(&["train", "--data", p(tmp.path()), "--out", p(&out)]), 3);
    let ck = tmp.path().join("bad.qmb");
    fs::write(&ck, b"QMB1garbage").unwrap();
    assert_eq!(code(&["eval", "--checkpoint", p(&ck), "--data", p(tmp.path())]), 3);
}

#[test]
fn diverging_training_exits_4() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    synth(&data, 12, 1, None);
    let out =
        qmamba(&["train", "--data", p(&data), "--out", p(&tmp.path().join("r")), "--epochs", "3", "--lr", "1e300"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("numeric"));
}

#[test]
fn untrained_checkpoint_loads_and_evaluates() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    synth(&data, 16, 2, None);
    let run = tmp.path().join("r");
    ok(&["train", "--data", p(&data), "--out", p(&run), "--epochs", "0"]);
    assert_eq!(fs::read_to_string(run.join("train_log.csv")).unwrap(), "epoch,train_loss,val_srcc\n");
    let ck = run.join("model.qmb");
    let first = ok(&["eval", "--checkpoint", p(&ck), "--data", p(&data)]);
    let second = ok(&["eval", "--checkpoint", p(&ck), "--data", p(&data)]);
    assert_eq!(first, second);
    assert!(first.starts_with("# qmamba "));
    assert!(first.contains("# epochs = 0\n"));
    assert!(first.contains("domain,n,plcc,srcc\nall,16,"));

    let json: Value =
        serde_json::from_str(ok(&["eval", "--checkpoint", p(&ck), "--data", p(&data), "--json"]).trim()).unwrap();
    assert_eq!(json["overall"]["n"], 16);
    assert_eq!(json["config"]["epochs"], "0");
    assert_eq!(json["version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn training_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    synth(&data, 16, 3, None);
    let logs: Vec<String> = ["r1", "r2"]
        .iter()
        .map(|r| {
            let run = tmp.path().join(r);
            let args = ["train", "--data", p(&data), "--out", p(&run), "--epochs", "2", "--set", "patches_per_image=1"];
            ok(&args);
            fs::read_to_string(run.join("train_log.csv")).unwrap()
        })
        .collect();
    assert_eq!(logs[0].lines().count(), 3);
    assert_eq!(logs[0], logs[1]);
    assert_eq!(fs::read(tmp.path().join("r1/model.qmb")).unwrap(), fs::read(tmp.path().join("r2/model.qmb")).unwrap());
}

#[test]
fn config_file_and_flag_precedence() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    synth(&data, 8, 4, None);
    let conf = tmp.path().join("run.conf");
    fs::write(&conf, "epochs = 5\nlr = 0.01\nscan_mode = cross\n").unwrap();
    let run = tmp.path().join("r");
    ok(&["train", "--config", p(&conf), "--data", p(&data), "--out", p(&run), "--epochs", "0"]);
    let written = fs::read_to_string(run.join("run.conf")).unwrap();
    assert!(written.contains("epochs = 0\n"));
    assert!(written.contains("lr = 0.01\n"));
    assert!(written.contains("scan_mode = cross\n"));

    fs::write(&conf, "epochs = 5\nsurprise = 1\n").unwrap();
    assert_eq!(code(&["train", "--config", p(&conf), "--data", p(&data), "--out", p(&run)]), 2);
}

#[test]
fn transfer_modes() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    synth(&data, 16, 5, Some("white-noise"));
    let desk = tmp.path().join("desk");
    ok(&["train", "--data", p(&data), "--out", p(&desk), "--epochs", "0"]);
    let deep = tmp.path().join("deep");
    ok(&["train", "--preset", "desk-deep", "--data", p(&data), "--out", p(&deep), "--epochs", "0"]);

    let json = |args: &[&str]| -> Value { serde_json::from_str(ok(args).trim()).unwrap() };
    let out = tmp.path().join("t");
    let ck = deep.join("model.qmb");

    let none =
        json(&["transfer", "--checkpoint", p(&ck), "--data", p(&data), "--mode", "none", "--out", p(&out), "--json"]);
    assert_eq!(none["mode"], "none");
    assert_eq!(none["tunable_fraction"], 0.0);
    assert_eq!(none["params_sha256_before"], none["params_sha256_after"]);

    let sp = json(&[
        "transfer",
        "--checkpoint",
        p(&ck),
        "--data",
        p(&data),
        "--mode",
        "styleprompt",
        "--out",
        p(&out),
        "--json",
        "--epochs",
        "1",
        "--set",
        "patches_per_image=1",
    ]);
    let frac = sp["tunable_fraction"].as_f64().unwrap();
    assert!(frac > 0.0 && frac <= 0.06, "fraction {frac}");
    assert_ne!(sp["params_sha256_before"], sp["params_sha256_after"]);
    let adapters = out.join("adapters.qmb");
    assert!(adapters.is_file());
    let report =
        ok(&["eval", "--checkpoint", p(&ck), "--adapters", p(&adapters), "--data", p(&data), "--split", "test"]);
    assert!(report.contains("# split = test\n"));

    // A backbone-only preset has no adapters to tune.
    let desk_ck = desk.join("model.qmb");
    assert_eq!(
        code(&["transfer", "--checkpoint", p(&desk_ck), "--data", p(&data), "--mode", "styleprompt", "--out", p(&out)]),
        2
    );
    // An adapter checkpoint cannot stand in for a full model.
    assert_eq!(code(&["eval", "--checkpoint", p(&adapters), "--data", p(&data)]), 2);
}

#[test]
fn scan_info_csv() {
    let out = ok(&["scan-info", "--height", "16", "--width", "16", "--window", "4"]);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("mode,window,direction,pairs,mean_gap,median_gap,max_gap"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r.len() == 7));
    let local: Vec<&Vec<&str>> = rows.iter().filter(|r| r[0] == "local").collect();
    let cross: Vec<&Vec<&str>> = rows.iter().filter(|r| r[0] == "cross").collect();
    assert_eq!((local.len(), cross.len()), (5, 5));
    assert_eq!(local[0][5], "4.0");
    assert_eq!(cross[0][5], "8.5");

    let one = ok(&["scan-info", "--height", "1", "--width", "1", "--mode", "cross"]);
    for row in one.lines().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[3], "0");
        assert_eq!(f[4].parse::<f64>().unwrap(), 0.0);
    }
}
