use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mrn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn gen_small(dir: &Path) {
    let o = mrn(dir, &["gen", "--examples", "120", "--seed", "3", "--out", "d"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

const FAST: &[&str] = &[
    "--iters",
    "12",
    "--batch",
    "8",
    "--pretrain-iters",
    "4",
    "--eval-interval",
    "6",
    "--dim",
    "8",
    "--blocks",
    "2",
];

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", "d/dataset.bin", "--out", out];
    args.extend_from_slice(FAST);
    args.extend_from_slice(extra);
    mrn(dir, &args)
}

#[test]
fn help_lists_every_flag_with_default() {
    let dir = tempfile::tempdir().unwrap();
    let o = mrn(dir.path(), &["train", "--help"]);
    assert_eq!(code(&o), 0);
    let help = String::from_utf8(o.stdout).unwrap();
    for flag in [
        "--variant",
        "--blocks",
        "--dim",
        "--seed",
        "--iters",
        "--batch",
        "--dropout ",
        "--dropout-mode",
        "--postprocess",
        "--protocol",
        "--freeze-cnn",
        "--out",
        "--config",
    ] {
        let line = help
            .lines()
            .position(|l| l.contains(flag))
            .unwrap_or_else(|| panic!("{flag} missing"));
        let desc = help.lines().nth(line + 1).unwrap();
        assert!(desc.contains("[default: "), "{flag}: {desc}");
    }
}

#[test]
fn train_is_reproducible_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    for out in ["r1", "r2"] {
        let o = train(dir.path(), out, &[]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["checkpoint.json", "metrics.csv", "run.toml"] {
        let a = fs::read(dir.path().join("r1").join(f)).unwrap();
        let b = fs::read(dir.path().join("r2").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let metrics = fs::read_to_string(dir.path().join("r1/metrics.csv")).unwrap();
    assert!(metrics.starts_with("iteration,train_loss,val_overall,val_yn,val_num,val_other\n"));
    assert_eq!(metrics.lines().count(), 3);
}

#[test]
fn eval_and_viz_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    assert_eq!(code(&train(dir.path(), "t", &[])), 0);
    let o = mrn(
        dir.path(),
        &[
            "eval",
            "--data",
            "d/dataset.bin",
            "--checkpoint",
            "t/checkpoint.json",
            "--protocol",
            "mc",
            "--out",
            "e",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(dir.path().join("e/report.csv")).unwrap();
    assert!(report.starts_with("protocol,postprocess,all,yn,num,other\n"));
    assert!(report.lines().nth(1).unwrap().starts_with("Multiple-Choice,false,"));

    let o = mrn(
        dir.path(),
        &[
            "viz",
            "--data",
            "d/dataset.bin",
            "--checkpoint",
            "t/checkpoint.json",
            "--example",
            "5",
            "--out",
            "v",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "example5_block1_saliency.pgm",
        "example5_block2_overlay.ppm",
        "example5_composite.ppm",
        "example5_manifest.json",
    ] {
        assert!(dir.path().join("v").join(f).exists(), "{f}");
    }
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    fs::write(
        dir.path().join("c.toml"),
        "version = 1\niters = 6\nvariant = \"a\"\nseed = 9\n",
    )
    .unwrap();
    let o = train(dir.path(), "t", &["--config", "c.toml", "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = fs::read_to_string(dir.path().join("t/run.toml")).unwrap();
    // --iters on the command line wins over the file, as does --seed.
    assert!(run.contains("iters = 12"), "{run}");
    assert!(run.contains("seed = 4"), "{run}");
    assert!(run.contains("variant = \"a\""), "{run}");

    fs::write(dir.path().join("bad.toml"), "version = 2\n").unwrap();
    assert_eq!(code(&train(dir.path(), "t", &["--config", "bad.toml"])), 1);
    fs::write(dir.path().join("typo.toml"), "version = 1\nitres = 3\n").unwrap();
    assert_eq!(code(&train(dir.path(), "t", &["--config", "typo.toml"])), 1);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    assert_eq!(code(&mrn(dir.path(), &["train", "--data", "missing.bin"])), 3);
    assert_eq!(code(&train(dir.path(), "t", &["--dropout", "1.0"])), 1);
    assert_eq!(code(&train(dir.path(), "t", &["--variant", "z"])), 1);
    assert_eq!(code(&train(dir.path(), "t", &["--lr", "1e300"])), 2);
    fs::write(dir.path().join("junk.bin"), b"not a dataset").unwrap();
    assert_eq!(code(&mrn(dir.path(), &["train", "--data", "junk.bin"])), 1);
}

#[test]
fn ablate_subset_rows_and_repeatability() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    let run = |out: &str| {
        let mut args = vec![
            "ablate",
            "--data",
            "d/dataset.bin",
            "--only",
            "b-L1,mn-L3",
            "--out",
            out,
        ];
        args.extend_from_slice(&FAST[..8]);
        args.extend_from_slice(&["--dim", "8"]);
        mrn(dir.path(), &args)
    };
    let o = run("a1");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&run("a2")), 0);
    let a = fs::read_to_string(dir.path().join("a1/ablation.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(dir.path().join("a2/ablation.csv")).unwrap());
    let labels: Vec<&str> = a.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["b-L1", "mn-L3"]);
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("best overall: "));
    assert_eq!(
        code(&mrn(
            dir.path(),
            &["ablate", "--data", "d/dataset.bin", "--only", "q-L9"]
        )),
        1
    );
    assert_eq!(code(&mrn(dir.path(), &["ablate", "--data", "nowhere.bin"])), 3);
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = mrn(dir.path(), &["gradcheck", "--max-entries", "6", "--out", "g"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let report = fs::read_to_string(dir.path().join("g/gradcheck.txt")).unwrap();
    for name in ["mrn.block3.w_2.w", "cnn.conv1_w", "gru.u_z", "mrn.classifier.b"] {
        assert!(report.contains(name), "{name}");
    }
    let o = mrn(
        dir.path(),
        &["gradcheck", "--max-entries", "6", "--inject-fault", "sigmoid"],
    );
    assert_eq!(code(&o), 2);
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.lines().any(|l| l.starts_with("FAIL sigmoid")));
}
