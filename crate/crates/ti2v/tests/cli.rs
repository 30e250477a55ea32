//! End-to-end checks of the `ti2v` binary: exit codes, determinism of
//! file outputs, and the full mini pipeline (gen-data, train, sample, eval).

use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ti2v"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ti2v_cli_{name}_{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn schedule_export_carries_shift_factor() {
    let dir = tmp("sched");
    let csv = dir.join("curve.csv");
    let out = bin()
        .args(["schedule", "--shape", "16x512x512", "--out"])
        .arg(&csv)
        .output()
        .unwrap();
    ok(&out);
    let text = fs::read_to_string(&csv).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.contains("s=0.125"), "header: {header}");
    assert!(text.lines().nth(1).unwrap().starts_with("t,log_snr"));
    // rescaled by default: terminal row is the -inf sentinel
    assert!(text.trim_end().ends_with("-inf"));
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn gen_data_is_deterministic_across_runs() {
    let dir = tmp("gen");
    for sub in ["a", "b"] {
        let out = bin()
            .args(["gen-data", "--n", "8", "--seed", "7", "--shape", "4x16x16", "--out"])
            .arg(dir.join(sub))
            .output()
            .unwrap();
        ok(&out);
    }
    let ma = fs::read(dir.join("a/manifest.txt")).unwrap();
    let mb = fs::read(dir.join("b/manifest.txt")).unwrap();
    assert_eq!(ma, mb);
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn usage_errors_exit_1_data_errors_exit_2() {
    // malformed shape -> usage
    let out = bin()
        .args(["gen-data", "--n", "1", "--shape", "bogus", "--out", "/tmp/x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // unknown config key -> usage
    let dir = tmp("badcfg");
    fs::write(dir.join("bad.cfg"), "train.learnig_rate = 3\n").unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(dir.join("bad.cfg"))
        .args(["--data", "/nonexistent", "--out"])
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key"));

    // valid config but missing dataset -> data error
    fs::write(dir.join("ok.cfg"), "train.stages = 4x16x16:1\n").unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(dir.join("ok.cfg"))
        .args(["--data", "/nonexistent", "--out"])
        .arg(dir.join("out2"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn mini_pipeline_sample_determinism_and_eval() {
    let dir = tmp("pipe");
    // tiny dataset + tiny model so the whole pipeline runs in seconds
    let out = bin()
        .args(["gen-data", "--n", "6", "--seed", "3", "--shape", "4x16x16", "--out"])
        .arg(dir.join("data/4x16x16"))
        .output()
        .unwrap();
    ok(&out);

    fs::write(
        dir.join("toy.cfg"),
        "arch.width0 = 8\narch.width1 = 16\narch.emb_dim = 8\narch.time_dim = 8\n\
         arch.groups = 4\nschedule.n = 20\nschedule.reference_d = 16\ntrain.batch = 2\n\
         train.stages = 4x16x16:3,4x16x16+flow:2\ntrain.seed = 5\nsample.steps = 4\n",
    )
    .unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(dir.join("toy.cfg"))
        .arg("--data")
        .arg(dir.join("data"))
        .arg("--out")
        .arg(dir.join("run"))
        .output()
        .unwrap();
    ok(&out);
    let ckpt = dir.join("run/final");
    assert!(ckpt.join("arch.txt").is_file());
    assert!(ckpt.join("config.txt").is_file());
    assert!(dir.join("run/config.txt").is_file(), "config echoed to out dir");

    // sampling twice with the same flags gives identical bytes
    for name in ["v1.vtf", "v2.vtf"] {
        let out = bin()
            .args(["sample", "--ckpt"])
            .arg(&ckpt)
            .args([
                "--prompt-spatial",
                "red square large solid",
                "--prompt-motion",
                "moving right slow",
                "--seed",
                "9",
                "--out",
            ])
            .arg(dir.join(name))
            .arg("--dump-pgm")
            .arg(dir.join("pgm"))
            .output()
            .unwrap();
        ok(&out);
    }
    let v1 = fs::read(dir.join("v1.vtf")).unwrap();
    let v2 = fs::read(dir.join("v2.vtf")).unwrap();
    assert_eq!(v1, v2, "same flags must give identical output files");
    assert!(dir.join("pgm/frame_000.pgm").is_file());
    assert!(dir.join("v1.config.txt").is_file());

    // unknown prompt words warn but degrade gracefully
    let out = bin()
        .args(["sample", "--ckpt"])
        .arg(&ckpt)
        .args([
            "--prompt-spatial",
            "crimson hexagon",
            "--prompt-motion",
            "moving left slow",
            "--seed",
            "2",
            "--out",
        ])
        .arg(dir.join("v3.vtf"))
        .output()
        .unwrap();
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown prompt word"));

    // eval writes the CSV report plus the text table
    let out = bin()
        .args(["eval", "--ckpt"])
        .arg(&ckpt)
        .arg("--data")
        .arg(dir.join("data/4x16x16"))
        .args(["--steps", "3", "--out"])
        .arg(dir.join("report.csv"))
        .output()
        .unwrap();
    ok(&out);
    let report = fs::read_to_string(dir.join("report.csv")).unwrap();
    assert!(report.contains("index,file,frame_consistency,motion_match,flow_epe"));
    assert_eq!(report.lines().filter(|l| !l.starts_with('#')).count() - 1, 6);
    assert!(dir.join("report.txt").is_file());
    let _ = fs::remove_dir_all(&dir);
}
