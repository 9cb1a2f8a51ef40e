//! End-to-end tests of the `tdlrt` binary.

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tdlrt"))
}

fn write_idx_labels(path: &Path, labels: &[u8]) {
    let mut f = File::create(path).unwrap();
    f.write_all(&0x0000_0801u32.to_be_bytes()).unwrap();
    f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
    f.write_all(labels).unwrap();
}

/// Class-dependent striped images: learnable, deterministic.
fn fixture_dataset(dir: &Path, train: usize, test: usize) {
    let gen = |label: usize| {
        move |i: usize| {
            let (r, c) = (i / 28 % 28, i % 28);
            let phase = (r as f64 * (label as f64 + 1.0) * 0.3 + c as f64 * 0.2).sin();
            ((phase * 0.5 + 0.5) * 255.0) as u8
        }
    };
    let train_labels: Vec<u8> = (0..train).map(|i| (i % 10) as u8).collect();
    let test_labels: Vec<u8> = (0..test).map(|i| (i * 3 % 10) as u8).collect();
    // One image per sample; the generator depends only on the label stripe.
    let mut train_pixels = Vec::with_capacity(train * 28 * 28);
    for &l in &train_labels {
        let g = gen(l as usize);
        train_pixels.extend((0..28 * 28).map(g));
    }
    let mut test_pixels = Vec::with_capacity(test * 28 * 28);
    for &l in &test_labels {
        let g = gen(l as usize);
        test_pixels.extend((0..28 * 28).map(g));
    }
    let write_all = |path: &Path, pixels: &[u8], count: usize| {
        let mut f = File::create(path).unwrap();
        f.write_all(&0x0000_0803u32.to_be_bytes()).unwrap();
        f.write_all(&(count as u32).to_be_bytes()).unwrap();
        f.write_all(&28u32.to_be_bytes()).unwrap();
        f.write_all(&28u32.to_be_bytes()).unwrap();
        f.write_all(pixels).unwrap();
    };
    write_all(&dir.join("train-images-idx3-ubyte"), &train_pixels, train);
    write_idx_labels(&dir.join("train-labels-idx1-ubyte"), &train_labels);
    write_all(&dir.join("t10k-images-idx3-ubyte"), &test_pixels, test);
    write_idx_labels(&dir.join("t10k-labels-idx1-ubyte"), &test_labels);
}

#[test]
fn verify_command_exits_zero() {
    let out = bin().arg("verify").output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "verify failed:\n{stdout}");
    assert!(stdout.contains("all checks passed"));
    assert!(
        stdout.contains("SKIP"),
        "MNIST check should skip without data"
    );
}

#[test]
fn synthetic_zero_steps_writes_initial_record_only() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("run.csv");
    let out = bin()
        .args([
            "synthetic",
            "--shape",
            "6,6,6",
            "--true-ranks",
            "2,2,2",
            "--init-ranks",
            "4,4,4",
            "--steps",
            "0",
            "--out",
        ])
        .arg(&csv)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2, "expected header plus exactly one record");
    assert_eq!(
        lines[0],
        "step,loss,test_metric,ranks,compression_rate,projected_grad_norm,wall_ms"
    );
    assert!(lines[1].starts_with("0,"));
}

#[test]
fn synthetic_rejects_bad_flags() {
    let out = bin()
        .args([
            "synthetic",
            "--shape",
            "6,6",
            "--true-ranks",
            "2,2,2",
            "--init-ranks",
            "4,4,4",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());

    let out = bin()
        .args(["synthetic", "--optimizer", "sgd-magic"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown optimizer"));
}

#[test]
fn synthetic_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let csv = dir.path().join(name);
        let out = bin()
            .args([
                "synthetic",
                "--shape",
                "8,8,8",
                "--true-ranks",
                "2,2,2",
                "--init-ranks",
                "5,5,5",
                "--steps",
                "20",
                "--seed",
                seed,
                "--out",
            ])
            .arg(&csv)
            .output()
            .unwrap();
        assert!(out.status.success());
        // Wall-time column varies between runs; strip it before comparing.
        std::fs::read_to_string(&csv)
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect::<Vec<_>>()
    };
    let a = run("a.csv", "3");
    let b = run("b.csv", "3");
    let c = run("c.csv", "4");
    assert_eq!(a, b, "identical seeds must give identical logs");
    assert_ne!(a, c, "different seeds should differ");
}

#[test]
fn robustness_writes_curves() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("rob.csv");
    let out = bin()
        .args([
            "robustness",
            "--seed-count",
            "2",
            "--max-steps",
            "60",
            "--shape",
            "6,6,6",
            "--true-ranks",
            "2,2,2",
            "--init-ranks",
            "4,4,4",
            "--out",
        ])
        .arg(&csv)
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert!(stdout.contains("steps-to-target"));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("method,seed,step,loss"));
    // 3 methods x 2 seeds x 61 records.
    assert_eq!(text.lines().count(), 1 + 3 * 2 * 61);
}

#[test]
fn mnist_trains_checkpoints_and_reproduces_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    fixture_dataset(dir.path(), 300, 200);
    let csv = dir.path().join("mnist.csv");
    let ckpt = dir.path().join("net.tdlc");
    let out = bin()
        .args([
            "mnist",
            "--subset",
            "256",
            "--epochs",
            "1",
            "--batch",
            "64",
            "--data-dir",
        ])
        .arg(dir.path())
        .arg("--out")
        .arg(&csv)
        .arg("--save-checkpoint")
        .arg(&ckpt)
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        out.status.success(),
        "{stdout}\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let acc_line = stdout
        .lines()
        .find(|l| l.starts_with("test accuracy"))
        .expect("accuracy line");
    let acc: f64 = acc_line.rsplit(':').next().unwrap().trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(csv.exists());

    // Checkpoint evaluation reproduces the reported accuracy exactly.
    let eval = bin()
        .args(["mnist", "--data-dir"])
        .arg(dir.path())
        .arg("--eval-checkpoint")
        .arg(&ckpt)
        .output()
        .unwrap();
    let eval_out = String::from_utf8_lossy(&eval.stdout);
    assert!(eval.status.success(), "{eval_out}");
    let eval_acc: f64 = eval_out
        .lines()
        .find(|l| l.starts_with("checkpoint accuracy"))
        .unwrap()
        .split(':')
        .nth(1)
        .unwrap()
        .trim()
        .split(' ')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(
        acc, eval_acc,
        "checkpoint must reproduce test accuracy exactly"
    );
}

#[test]
fn mnist_fails_cleanly_without_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["mnist", "--data-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing MNIST file"));
}

#[test]
fn fetch_data_reports_missing_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["fetch-data", "--dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "missing files alone are not an error");
    assert!(stdout.contains("MISSING"));
    assert!(stdout.contains("curl -LO"));

    // A mismatching file flips the exit code.
    std::fs::write(dir.path().join("train-images-idx3-ubyte.gz"), b"not mnist").unwrap();
    let out = bin()
        .args(["fetch-data", "--dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("MISMATCH"));
}
