use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nipa(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nipa"))
        .args(args)
        .current_dir(dir)
        .env("NIPA_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

const SMALL: &str = r#"
seed = 4
[target]
kind = "synthetic_regression"
n = 150
d = 5
h1 = 6
h2 = 3
[sampler]
kind = "nipa"
samples = 100
m0 = 20
[sampler.hmc]
step_size = 0.005
leapfrog_steps = 5
[sampler.sghmc]
step_size = 1e-5
burn_in = 50
thin = 2
[sampler.nipa]
refit_every = 40
[sampler.surrogate]
latent_dim = 4
ae_hidden = 16
ae_epochs = 20
reg_epochs = 20
"#;

fn write_config(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

#[test]
fn repeated_sample_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "c.toml", SMALL);
    for out in ["a", "b"] {
        let o = nipa(&["sample", "--config", "c.toml", "--out", out], dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["samples.bin", "trace.jsonl", "pool_states.bin"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs between identical runs");
    }
    let o = nipa(
        &["sample", "--config", "c.toml", "--out", "c", "--seed", "5"],
        dir.path(),
    );
    assert!(o.status.success());
    assert_ne!(
        fs::read(dir.path().join("a/samples.bin")).unwrap(),
        fs::read(dir.path().join("c/samples.bin")).unwrap()
    );
}

#[test]
fn hmc_metrics_contain_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        "c.toml",
        &SMALL.replace("kind = \"nipa\"", "kind = \"hmc\""),
    );
    let o = nipa(
        &["sample", "--config", "c.toml", "--out", "hmc"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("hmc/metrics.txt")).unwrap();
    for key in [
        "rmse_or_acc",
        "cp95_or_ece",
        "min_ess",
        "median_ess",
        "max_ess",
        "min_ess_per_sec",
        "wall_seconds",
        "samples",
    ] {
        assert!(
            text.lines().any(|l| l.starts_with(&format!("{key} ="))),
            "missing {key}"
        );
    }
    let snapshot = fs::read_to_string(dir.path().join("hmc/config.resolved.toml")).unwrap();
    assert!(snapshot.contains("leapfrog_steps = 5"));
    assert!(snapshot.contains("refit_every"), "defaults are spelled out");

    let o = nipa(&["metrics", "hmc"], dir.path());
    assert!(o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stdout), text);

    let o = nipa(
        &["compare", "hmc/metrics.txt", "hmc/metrics.txt"],
        dir.path(),
    );
    assert!(o.status.success());
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(
        table.lines().last().unwrap().trim_end().ends_with("1.0000"),
        "{table}"
    );
}

#[test]
fn inverted_thresholds_fail_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("refit_every = 40", "refit_every = 40\nt1 = 2.0\nt2 = 1.0");
    write_config(dir.path(), "c.toml", &text);
    let o = nipa(
        &["sample", "--config", "c.toml", "--out", "bad"],
        dir.path(),
    );
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("t1 < t2"), "{err}");
    assert!(!dir.path().join("bad").exists());
}

#[test]
fn every_validation_problem_is_listed() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL
        .replace("n = 150", "n = 150\nprior_var = 0.0")
        .replace("samples = 100", "samples = 100\nrw_sigma = -1.0")
        .replace("[sampler.hmc]", "[diagnostics]\nbins = 0\n[sampler.hmc]");
    write_config(dir.path(), "c.toml", &text);
    let o = nipa(
        &["sample", "--config", "c.toml", "--out", "bad"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    for needle in ["prior_var", "rw_sigma", "bins"] {
        assert!(err.contains(needle), "missing {needle}:\n{err}");
    }
    assert!(!dir.path().join("bad").exists());
}

#[test]
fn existing_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        "c.toml",
        &SMALL.replace("kind = \"nipa\"", "kind = \"rw\""),
    );
    fs::create_dir(dir.path().join("taken")).unwrap();
    let o = nipa(
        &["sample", "--config", "c.toml", "--out", "taken"],
        dir.path(),
    );
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("already exists"));
    assert_eq!(fs::read_dir(dir.path().join("taken")).unwrap().count(), 0);
}

#[test]
fn generate_then_sample_from_files() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "c.toml", SMALL);
    let o = nipa(
        &[
            "generate",
            "--config",
            "c.toml",
            "--out",
            "data",
            "--subsample",
            "120",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = fs::read_to_string(dir.path().join("data/train.csv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(rows, 108);
    let text = SMALL
        .replace("kind = \"synthetic_regression\"", "kind = \"delimited\"\npath = \"data/train.csv\"\ntest_path = \"data/test.csv\"\nhidden = [6, 3]")
        .replace("n = 150\nd = 5\nh1 = 6\nh2 = 3\n", "")
        .replace("kind = \"nipa\"", "kind = \"sghmc\"");
    write_config(dir.path(), "d.toml", &text);
    let o = nipa(
        &["sample", "--config", "d.toml", "--out", "run"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("run/metrics.tsv").is_file());
}

#[test]
fn compare_reports_missing_fields() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("a.txt"),
        "sampler = hmc\nmin_ess_per_sec = 2.0\n",
    )
    .unwrap();
    let o = nipa(&["compare", "a.txt", "a.txt"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("`task` is missing") && err.contains("`dim` is missing"),
        "{err}"
    );
}
