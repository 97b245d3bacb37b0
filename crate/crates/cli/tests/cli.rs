use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn floodgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_floodgen"))
        .args(args)
        .env("FLOODGEN_LOG", "warn")
        .output()
        .expect("run floodgen")
}

fn ok(args: &[&str]) -> String {
    let out = floodgen(args);
    assert!(
        out.status.success(),
        "floodgen {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) {
    ok(&["synth", "--out", s(dir), "--patches", "4", "--seed", "2"]);
}

fn train(data: &Path, out: &Path) {
    ok(&[
        "train",
        "--config",
        s(&data.join("train.toml")),
        "--epochs",
        "1",
        "--out",
        s(out),
    ]);
}

#[test]
fn synth_train_eval_predict_attn() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    let manifest = data.join("manifest.toml");
    assert!(manifest.exists() && data.join("train.toml").exists());

    let run = dir.path().join("run");
    train(&data, &run);
    let checkpoint = run.join("checkpoint.fgck");
    assert!(checkpoint.exists());
    let history = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(history.lines().count(), 2);

    let eval = dir.path().join("eval");
    let summary = ok(&[
        "eval",
        "--checkpoint",
        s(&checkpoint),
        "--manifest",
        s(&manifest),
        "--out",
        s(&eval),
    ]);
    assert!(summary.contains("mean:"));
    let metrics = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert!(lines
        .next()
        .unwrap()
        .starts_with("pattern,mae_mm,r2,csi,area_ratio"));
    assert_eq!(lines.count(), 6);
    assert_eq!(fs::read_dir(eval.join("maps")).unwrap().count(), 18);
    assert!(eval.join("summary.txt").exists());

    let pred = dir.path().join("pred");
    let first_pattern = metrics
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .next()
        .unwrap()
        .to_string();
    ok(&[
        "predict",
        "--checkpoint",
        s(&checkpoint),
        "--manifest",
        s(&manifest),
        "--pattern",
        &first_pattern,
        "--out",
        s(&pred),
    ]);
    let rasters: Vec<_> = fs::read_dir(&pred).unwrap().collect();
    assert_eq!(rasters.len(), 1);

    for mode in ["raw", "grad_cam"] {
        let attn = dir.path().join(format!("attn_{mode}"));
        ok(&[
            "attn",
            "--checkpoint",
            s(&checkpoint),
            "--manifest",
            s(&manifest),
            "--patch",
            "0",
            "--mode",
            mode,
            "--out",
            s(&attn),
        ]);
        for level in 1..=4 {
            assert!(attn.join(format!("attn_{mode}_layer{level}.png")).exists());
        }
    }

    let missing = dir.path().join("missing");
    let out = floodgen(&[
        "attn",
        "--checkpoint",
        s(&checkpoint),
        "--manifest",
        s(&manifest),
        "--patch",
        "99",
        "--out",
        s(&missing),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!missing.exists());
}

#[test]
fn same_seed_gives_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(&data, &a);
    train(&data, &b);
    for file in ["steps.csv", "train_log.csv"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn help_lists_every_flag() {
    let cases: [(&str, &[&str]); 6] = [
        (
            "synth",
            &["--out", "--seed", "--size", "--patches", "--patterns"],
        ),
        ("prepare", &["--manifest", "--seed"]),
        (
            "train",
            &[
                "--config",
                "--manifest",
                "--seed",
                "--epochs",
                "--out",
                "--workers",
                "--checkpoint",
                "--max-steps",
                "--no-hta",
                "--no-mre",
                "--no-gan",
                "--no-reg",
            ],
        ),
        (
            "eval",
            &[
                "--checkpoint",
                "--manifest",
                "--split",
                "--out",
                "--no-maps",
            ],
        ),
        (
            "predict",
            &["--checkpoint", "--manifest", "--pattern", "--out"],
        ),
        (
            "attn",
            &[
                "--checkpoint",
                "--manifest",
                "--patch",
                "--pattern",
                "--mode",
                "--out",
            ],
        ),
    ];
    for (cmd, flags) in cases {
        let help = ok(&[cmd, "--help"]);
        for flag in flags {
            assert!(help.contains(flag), "{cmd} --help lacks {flag}");
        }
    }
    let top = ok(&["--help"]);
    for (cmd, _) in cases {
        assert!(top.contains(cmd));
    }
}

#[test]
fn bad_input_exits_with_one_and_leaves_nothing_behind() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");

    let r = floodgen(&["synth", "--out", s(&out), "--bogus"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!out.exists());

    let r = floodgen(&[
        "train",
        "--manifest",
        s(&dir.path().join("nope.toml")),
        "--out",
        s(&out),
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).starts_with("error:"));

    let r = floodgen(&[
        "eval",
        "--checkpoint",
        s(&dir.path().join("none.fgck")),
        "--manifest",
        s(&dir.path().join("none.toml")),
        "--out",
        s(&out),
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!out.exists());

    let r = floodgen(&["eval", "--split", "validation"]);
    assert_eq!(r.status.code(), Some(1));
    assert_eq!(floodgen(&[]).status.code(), Some(1));
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    let bad = dir.path().join("bad.fgck");
    fs::write(&bad, b"FGCK1\nnot a checkpoint").unwrap();
    let out = dir.path().join("eval");
    let r = floodgen(&[
        "eval",
        "--checkpoint",
        s(&bad),
        "--manifest",
        s(&data.join("manifest.toml")),
        "--out",
        s(&out),
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!out.exists());
}
