//! End-to-end tests of the `smf` binary: every subcommand, the exit-code
//! contract, and the reproducibility guarantees, all at toy scale.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY_CFG: &str = "d_model = 16\nn_blocks = 1\nn_heads = 2\nsteps = 6\nbatch_size = 4\n\
                        log_every = 2\ncheckpoint_every = 3\nn_train = 12\nn_eval = 6\nsampler_steps = 3\n";

fn testdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("smf-cli-{tag}-{}", std::process::id()));
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn smf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smf"))
        .args(args)
        .current_dir(dir)
        .env_remove("SMF_THREADS")
        .output()
        .expect("binary runs")
}

fn expect_code(out: &Output, code: i32, context: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{context}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_cfg(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Datagen for TINY_CFG plus a short training run; several tests start here.
fn datagen_and_train(dir: &Path, extra: &str) {
    write_cfg(dir, "run.cfg", &format!("{TINY_CFG}{extra}"));
    expect_code(&smf(dir, &["datagen", "--config", "run.cfg"]), 0, "datagen");
    expect_code(&smf(dir, &["train", "--config", "run.cfg", "--out", "run"]), 0, "train");
}

#[test]
fn datagen_writes_all_three_files_and_prints_tallies() {
    let dir = testdir("datagen");
    write_cfg(&dir, "run.cfg", TINY_CFG);
    let out = smf(&dir, &["datagen", "--config", "run.cfg"]);
    expect_code(&out, 0, "datagen");
    for f in ["data/train.smfd", "data/eval.smfd", "data/pairs.smfp"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let text = stdout(&out);
    for needle in ["12 triplets", "6 triplets", "kind:", "color:", "pattern:", "fit:", "6 pairs"] {
        assert!(text.contains(needle), "missing {needle:?} in:\n{text}");
    }
}

#[test]
fn datagen_rejects_empty_dataset_before_writing_anything() {
    let dir = testdir("datagen-zero");
    write_cfg(&dir, "bad.cfg", "n_train = 0\n");
    let out = smf(&dir, &["datagen", "--config", "bad.cfg"]);
    expect_code(&out, 1, "datagen with n_train = 0");
    assert!(!dir.join("data").exists(), "invalid config must not create outputs");
}

#[test]
fn config_errors_are_usage_errors() {
    let dir = testdir("config-errors");
    write_cfg(&dir, "unknown.cfg", "stepss = 5\n");
    let out = smf(&dir, &["datagen", "--config", "unknown.cfg"]);
    expect_code(&out, 1, "unknown key");
    assert!(stderr(&out).contains("stepss"), "error should name the key");

    let out = smf(&dir, &["datagen", "--config", "missing.cfg"]);
    expect_code(&out, 1, "missing config file");

    let out = smf(&dir, &["datagen", "--not-a-flag"]);
    expect_code(&out, 1, "unknown flag");

    let out = smf(&dir, &["frobnicate"]);
    expect_code(&out, 1, "unknown subcommand");
}

#[test]
fn train_logs_match_schedule_and_checkpoints_appear() {
    let dir = testdir("train-log");
    datagen_and_train(&dir, "");
    let log = std::fs::read_to_string(dir.join("run/train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,fm_loss,attn_loss,total_loss,grad_norm");
    let steps: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["2", "4", "6"], "log_every = 2 over 6 steps");
    for f in ["run/ckpt_000003.smfc", "run/ckpt_000006.smfc", "run/ckpt_final.smfc", "run/run_config.txt"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
}

#[test]
fn train_smoke_loss_decreases_over_200_steps() {
    let dir = testdir("train-smoke");
    write_cfg(
        &dir,
        "run.cfg",
        "d_model = 16\nn_blocks = 1\nn_heads = 2\nsteps = 200\nbatch_size = 8\nlog_every = 1\n\
         checkpoint_every = 200\nn_train = 12\nn_eval = 6\nsampler_steps = 3\nlr = 0.002\n",
    );
    expect_code(&smf(&dir, &["datagen", "--config", "run.cfg"]), 0, "datagen");
    expect_code(&smf(&dir, &["train", "--config", "run.cfg", "--out", "run"]), 0, "train");
    let log = std::fs::read_to_string(dir.join("run/train_log.csv")).unwrap();
    let totals: Vec<f64> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
        .collect();
    assert_eq!(totals.len(), 200);
    let first = totals[0];
    let tail = &totals[150..];
    let tail_avg = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(
        tail_avg < first,
        "no progress in 200 steps: step-1 loss {first}, trailing-50 average {tail_avg}"
    );
}

#[test]
fn train_attn_column_is_exactly_zero_when_disabled() {
    let dir = testdir("train-no-attn");
    datagen_and_train(&dir, "use_attn_loss = false\n");
    let log = std::fs::read_to_string(dir.join("run/train_log.csv")).unwrap();
    for line in log.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[2], "0", "attn_loss must be exactly zero: {line}");
        assert_eq!(cols[1], cols[3], "total must equal fm when the attention loss is off: {line}");
    }
}

#[test]
fn train_resume_reproduces_the_uninterrupted_run() {
    let dir = testdir("train-resume");
    datagen_and_train(&dir, "");
    let full = std::fs::read(dir.join("run/ckpt_final.smfc")).unwrap();

    let halted = smf(&dir, &["train", "--config", "run.cfg", "--out", "half", "--steps", "3"]);
    expect_code(&halted, 0, "first half");
    let resumed = smf(
        &dir,
        &["train", "--config", "run.cfg", "--out", "half", "--checkpoint", "half/ckpt_final.smfc"],
    );
    expect_code(&resumed, 0, "resumed half");
    let stitched = std::fs::read(dir.join("half/ckpt_final.smfc")).unwrap();
    assert_eq!(full, stitched, "resume must be bit-identical to the uninterrupted run");
}

#[test]
fn train_rejects_checkpoint_from_a_different_model_config() {
    let dir = testdir("train-mismatch");
    datagen_and_train(&dir, "");
    write_cfg(&dir, "wider.cfg", &TINY_CFG.replace("d_model = 16", "d_model = 32"));
    let out = smf(
        &dir,
        &["train", "--config", "wider.cfg", "--out", "other", "--checkpoint", "run/ckpt_final.smfc"],
    );
    expect_code(&out, 1, "config mismatch");
    assert!(stderr(&out).contains("different model config"), "{}", stderr(&out));
}

#[test]
fn train_divergence_aborts_but_keeps_the_last_checkpoint() {
    let dir = testdir("train-nan");
    write_cfg(
        &dir,
        "run.cfg",
        "d_model = 16\nn_blocks = 1\nn_heads = 2\nsteps = 40\nbatch_size = 4\nlog_every = 40\n\
         checkpoint_every = 2\nn_train = 12\nn_eval = 6\nsampler_steps = 3\nlr = 100000000\n",
    );
    expect_code(&smf(&dir, &["datagen", "--config", "run.cfg"]), 0, "datagen");
    let out = smf(&dir, &["train", "--config", "run.cfg", "--out", "run"]);
    expect_code(&out, 2, "divergent run must abort");
    let err = stderr(&out);
    assert!(err.contains("training aborted"), "{err}");
    assert!(err.contains("checkpoint"), "{err}");
    assert!(dir.join("run/ckpt_000002.smfc").exists(), "early checkpoint should survive the abort");
    assert!(!dir.join("run/ckpt_final.smfc").exists(), "no final checkpoint after an abort");
}

#[test]
fn sample_reruns_byte_identically_and_seed_changes_output() {
    let dir = testdir("sample");
    datagen_and_train(&dir, "");
    let args = ["sample", "--config", "run.cfg", "--checkpoint", "run/ckpt_final.smfc", "--person", "0", "--garment", "2"];
    let mut with_out = |out_dir: &str, extra: &[&str]| {
        let mut v: Vec<&str> = args.to_vec();
        v.extend_from_slice(&["--out", out_dir]);
        v.extend_from_slice(extra);
        expect_code(&smf(&dir, &v), 0, out_dir);
    };
    with_out("s1", &[]);
    with_out("s2", &[]);
    with_out("s3", &["--seed", "99"]);

    let a = std::fs::read(dir.join("s1/sample.ppm")).unwrap();
    let b = std::fs::read(dir.join("s2/sample.ppm")).unwrap();
    let c = std::fs::read(dir.join("s3/sample.ppm")).unwrap();
    assert_eq!(a, b, "same seed must reproduce the same bytes");
    assert_ne!(a, c, "a different seed should draw different noise");
    let g1 = std::fs::read(dir.join("s1/sample_grid.ppm")).unwrap();
    let g2 = std::fs::read(dir.join("s2/sample_grid.ppm")).unwrap();
    assert_eq!(g1, g2);

    assert!(a.starts_with(b"P6\n32 32\n255\n"), "sample is one 32x32 image");
    assert!(g1.starts_with(b"P6\n96 32\n255\n"), "grid is three images wide");
}

#[test]
fn sample_rejects_out_of_range_indices_and_unknown_words() {
    let dir = testdir("sample-errors");
    datagen_and_train(&dir, "");
    let base = ["sample", "--config", "run.cfg", "--checkpoint", "run/ckpt_final.smfc"];

    let mut v = base.to_vec();
    v.extend_from_slice(&["--person", "99", "--garment", "0"]);
    let out = smf(&dir, &v);
    expect_code(&out, 1, "person out of range");
    assert!(stderr(&out).contains("out of range"), "{}", stderr(&out));

    let mut v = base.to_vec();
    v.extend_from_slice(&["--person", "0", "--garment", "0", "--prompt", "wear this florp tshirt"]);
    let out = smf(&dir, &v);
    expect_code(&out, 1, "unknown word");
    let err = stderr(&out);
    assert!(err.contains("florp"), "{err}");
    for word in ["wear", "striped", "tucked", "dress"] {
        assert!(err.contains(word), "vocabulary listing should include {word:?}: {err}");
    }

    let mut v = base.to_vec();
    v.extend_from_slice(&["--person", "0", "--garment", "0", "--prompt", "wear this red solid short-sleeved tshirt"]);
    expect_code(&smf(&dir, &v), 0, "valid prompt override");
}

#[test]
fn eval_writes_report_and_per_pair_csv() {
    let dir = testdir("eval");
    datagen_and_train(&dir, "");
    let out = smf(&dir, &["eval", "--config", "run.cfg", "--checkpoint", "run/ckpt_final.smfc", "--out", "ev"]);
    expect_code(&out, 0, "eval");
    let report = std::fs::read_to_string(dir.join("ev/eval_report.txt")).unwrap();
    for key in
        ["ssim_mean", "frechet", "accuracy_kind", "accuracy_overall", "attention_mass_ratio_mean", "n_samples = 6"]
    {
        assert!(report.contains(key), "missing {key:?} in report:\n{report}");
    }
    assert_eq!(stdout(&out), report, "the report is echoed to stdout");
    let csv = std::fs::read_to_string(dir.join("ev/eval_pairs.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7, "header plus one row per pair");

    let rerun = smf(&dir, &["eval", "--config", "run.cfg", "--checkpoint", "run/ckpt_final.smfc", "--out", "ev2"]);
    expect_code(&rerun, 0, "eval rerun");
    assert_eq!(stdout(&rerun), report, "evaluation is deterministic");
}

#[test]
fn threads_env_does_not_change_training_results() {
    let dir = testdir("threads");
    write_cfg(&dir, "run.cfg", TINY_CFG);
    expect_code(&smf(&dir, &["datagen", "--config", "run.cfg"]), 0, "datagen");
    for (out_dir, threads) in [("t1", "1"), ("t4", "4")] {
        let out = Command::new(env!("CARGO_BIN_EXE_smf"))
            .args(["train", "--config", "run.cfg", "--out", out_dir])
            .current_dir(&dir)
            .env("SMF_THREADS", threads)
            .output()
            .expect("binary runs");
        expect_code(&out, 0, out_dir);
    }
    let a = std::fs::read(dir.join("t1/ckpt_final.smfc")).unwrap();
    let b = std::fs::read(dir.join("t4/ckpt_final.smfc")).unwrap();
    assert_eq!(a, b, "thread count must not change the artifacts");

    let out = Command::new(env!("CARGO_BIN_EXE_smf"))
        .args(["train", "--config", "run.cfg", "--out", "t0"])
        .current_dir(&dir)
        .env("SMF_THREADS", "zero")
        .output()
        .expect("binary runs");
    expect_code(&out, 1, "bad SMF_THREADS is a usage error");
}

#[test]
fn gradcheck_passes_and_names_every_suite() {
    let dir = testdir("gradcheck");
    let out = smf(&dir, &["gradcheck"]);
    expect_code(&out, 0, "gradcheck");
    let text = stdout(&out);
    for needle in ["matmul", "softmax", "layer_norm", "e2e-reduced", "self-test", "all checks passed"] {
        assert!(text.contains(needle), "missing {needle:?} in:\n{text}");
    }
    assert!(!text.contains("FAIL"), "{text}");
}
