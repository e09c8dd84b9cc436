use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use blockout::data::load_binary;
use blockout_cli::{
    cmd_analyze, cmd_gen_data, cmd_train, Analysis, RunConfig, CHECKPOINT_FILE, LOG_FILE,
    RESOLVED_CONFIG_FILE, SNAPSHOT_FILE,
};

fn blockout(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_blockout"));
    cmd.args(args).env_remove("BLOCKOUT_SEED");
    if let Some(seed) = seed_env {
        cmd.env("BLOCKOUT_SEED", seed);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes a small synthetic config into `dir`, with `overrides` (a JSON
/// object) merged on top, and returns its path.
fn small_config(dir: &Path, overrides: &str) -> std::path::PathBuf {
    let mut json = serde_json::json!({
        "run_id": "small",
        "out_dir": dir.join("run"),
        "hidden_widths": [16, 16],
        "clusters": 3,
        "superclasses": 2,
        "subclasses_per": 3,
        "dim": 8,
        "per_class": 40,
        "test_per_class": 40,
        "batch_size": 32,
        "iterations": 60,
        "snapshot_interval": 20,
        "eval_interval": 20
    });
    let extra: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(overrides).unwrap();
    json.as_object_mut().unwrap().extend(extra);
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&json).unwrap()).unwrap();
    path
}

#[test]
fn unknown_key_is_reported_with_position() {
    let err =
        RunConfig::parse("{\n  \"seed\": 1,\n  \"lerning_rate\": 0.1\n}", "c.json").unwrap_err();
    let msg = format!("{err:#}");
    assert!(msg.starts_with("c.json:3:"), "{msg}");
    assert!(msg.contains("lerning_rate"), "{msg}");
}

#[test]
fn invalid_values_name_the_field() {
    let err = RunConfig::parse(r#"{"lr_decay": 0.0}"#, "c.json").unwrap_err();
    assert!(format!("{err:#}").contains("lr_decay"));
    let err = RunConfig::parse(r#"{"clusters": 0}"#, "c.json").unwrap_err();
    assert!(format!("{err:#}").contains("clusters"));
    let err = RunConfig::parse(r#"{"variant": "hard"}"#, "c.json").unwrap_err();
    assert!(format!("{err:#}").contains("c.json:1:"));
}

#[test]
fn empty_config_materializes_defaults() {
    let cfg = RunConfig::parse("{}", "c.json").unwrap();
    assert_eq!(cfg, RunConfig::default());
    let json: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
    assert_eq!(json.as_object().unwrap().len(), 27);
    assert_eq!(RunConfig::parse(&cfg.to_json(), "resolved").unwrap(), cfg);
}

#[test]
fn zero_iterations_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), r#"{"iterations": 0}"#);
    let o = blockout(&["train", "--config", config.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    let mut names: Vec<String> = fs::read_dir(&run)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, vec![CHECKPOINT_FILE, RESOLVED_CONFIG_FILE]);
}

#[test]
fn train_eval_and_analyze_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), "{}");
    let o = blockout(&["train", "--config", config.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    for f in [
        CHECKPOINT_FILE,
        LOG_FILE,
        SNAPSHOT_FILE,
        RESOLVED_CONFIG_FILE,
    ] {
        assert!(run.join(f).exists(), "{f}");
    }

    let data = dir.path().join("data");
    let o = blockout(
        &[
            "gen-data",
            "--config",
            config.to_str().unwrap(),
            "--out",
            data.to_str().unwrap(),
        ],
        None,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = run.join(CHECKPOINT_FILE);
    let ckpt_bytes = fs::read(&ckpt).unwrap();
    let test = data.join("test.bods");
    let eval = |()| {
        blockout(
            &[
                "eval",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--data",
                test.to_str().unwrap(),
            ],
            None,
        )
    };
    let first = eval(());
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stdout(&first).starts_with("accuracy "));
    assert_eq!(stdout(&first), stdout(&eval(())));
    assert_eq!(fs::read(&ckpt).unwrap(), ckpt_bytes);

    let o = blockout(
        &["analyze", "--run", run.to_str().unwrap(), "--which", "all"],
        None,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let listed: Vec<String> = stdout(&o).lines().map(str::to_owned).collect();
    for family in ["hist", "pca", "clusters", "curve"] {
        assert!(
            listed
                .iter()
                .any(|p| p.contains(&format!("small.{family}."))),
            "{family} missing from {listed:?}"
        );
    }
    // Three interfaces: input side of the first Blockout layer, the shared
    // interface, and the output layer.
    assert!(listed.iter().any(|p| p.ends_with("small.hist.2.csv")));
    assert!(listed.iter().any(|p| p.ends_with("small.clusters.2.csv")));
    assert!(listed.iter().any(|p| p.ends_with("small.curve.all.csv")));

    let before: Vec<Vec<u8>> = listed.iter().map(|p| fs::read(p).unwrap()).collect();
    let again = blockout(
        &["analyze", "--run", run.to_str().unwrap(), "--which", "all"],
        None,
    );
    assert!(again.status.success());
    let after: Vec<Vec<u8>> = listed.iter().map(|p| fs::read(p).unwrap()).collect();
    assert_eq!(before, after);

    let clusters = fs::read_to_string(run.join("small.clusters.2.csv")).unwrap();
    assert_eq!(clusters.lines().count(), 1 + 6);
    let curve = fs::read_to_string(run.join("small.curve.all.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 60);
}

#[test]
fn shortest_run_gives_initial_and_final_histograms() {
    let dir = tempfile::tempdir().unwrap();
    // One iteration: the initial and final snapshots only.
    let config = small_config(dir.path(), r#"{"iterations": 1, "snapshot_interval": 5}"#);
    cmd_train(&config).unwrap();
    let run = dir.path().join("run");
    let written = cmd_analyze(&run, Analysis::Hist).unwrap();
    assert_eq!(written.len(), 3);
    let text = fs::read_to_string(&written[0]).unwrap();
    let iterations: std::collections::BTreeSet<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(iterations.into_iter().collect::<Vec<_>>(), vec!["0", "1"]);
    // 20 bins per snapshot.
    assert_eq!(text.lines().count(), 1 + 2 * 20);
}

#[test]
fn missing_snapshots_fail_with_the_expected_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), r#"{"iterations": 0}"#);
    cmd_train(&config).unwrap();
    let run = dir.path().join("run");
    let o = blockout(
        &["analyze", "--run", run.to_str().unwrap(), "--which", "hist"],
        None,
    );
    assert!(!o.status.success());
    assert!(
        stderr(&o).contains(&run.join(SNAPSHOT_FILE).display().to_string()),
        "{}",
        stderr(&o)
    );
    // The curve alone needs only the log, which is also missing.
    let o = blockout(
        &[
            "analyze",
            "--run",
            run.to_str().unwrap(),
            "--which",
            "curve",
        ],
        None,
    );
    assert!(!o.status.success());
    assert!(stderr(&o).contains(LOG_FILE));
}

#[test]
fn invalid_config_exits_nonzero_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{\n  \"iterations\": 10,\n  \"batchsize\": 4\n}\n").unwrap();
    let o = blockout(&["train", "--config", path.to_str().unwrap()], None);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("bad.json:3:"), "{}", stderr(&o));
}

#[test]
fn diverging_training_exits_nonzero_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), r#"{"learning_rate": 1e200, "momentum": 0.0}"#);
    let o = blockout(&["train", "--config", config.to_str().unwrap()], None);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("iteration") && err.contains("layer"), "{err}");
}

#[test]
fn seed_environment_variable_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), r#"{"iterations": 5, "seed": 1}"#);
    let run = dir.path().join("run");
    let train = |env: Option<&str>| {
        let o = blockout(&["train", "--config", config.to_str().unwrap()], env);
        assert!(o.status.success(), "{}", stderr(&o));
        let resolved: RunConfig =
            serde_json::from_str(&fs::read_to_string(run.join(RESOLVED_CONFIG_FILE)).unwrap())
                .unwrap();
        (resolved.seed, fs::read(run.join(CHECKPOINT_FILE)).unwrap())
    };
    let (seed_a, ckpt_a) = train(None);
    let (seed_b, ckpt_b) = train(Some("2"));
    let (seed_c, ckpt_c) = train(Some("1"));
    assert_eq!((seed_a, seed_b, seed_c), (1, 2, 1));
    assert_ne!(ckpt_a, ckpt_b);
    assert_eq!(ckpt_a, ckpt_c);

    let o = blockout(&["train", "--config", config.to_str().unwrap()], Some("x"));
    assert!(!o.status.success());
    assert!(stderr(&o).contains("BLOCKOUT_SEED"));
}

fn nearest_centroid_accuracy(
    train: &blockout::data::Dataset,
    test: &blockout::data::Dataset,
) -> f64 {
    let mut centroids = vec![vec![0.0; train.dim()]; train.num_classes];
    let mut counts = vec![0usize; train.num_classes];
    for r in 0..train.len() {
        for (c, v) in centroids[train.labels[r]]
            .iter_mut()
            .zip(train.features.row(r))
        {
            *c += v;
        }
        counts[train.labels[r]] += 1;
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= *n as f64);
    }
    let correct = (0..test.len())
        .filter(|&r| {
            let x = test.features.row(r);
            let best = (0..centroids.len())
                .min_by(|&a, &b| {
                    let d = |c: usize| -> f64 {
                        x.iter()
                            .zip(&centroids[c])
                            .map(|(p, q)| (p - q).powi(2))
                            .sum()
                    };
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            best == test.labels[r]
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
#[ignore = "nearest centroid is the Bayes rule for isotropic equal-variance classes; fails (0.993 vs 0.9995)"]
fn trained_network_beats_nearest_centroid_on_raw_features() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = dir.path().join("c.json");
    fs::write(
        &config,
        format!(
            r#"{{"run_id": "nc", "out_dir": {out:?}, "iterations": 2000, "eval_interval": 0}}"#
        ),
    )
    .unwrap();
    let outcome = cmd_train(&config).unwrap();
    let data = dir.path().join("data");
    let (train_path, test_path) = cmd_gen_data(&config, &data).unwrap();
    let baseline = nearest_centroid_accuracy(
        &load_binary(&train_path).unwrap(),
        &load_binary(&test_path).unwrap(),
    );
    let accuracy = outcome.test_accuracy.unwrap();
    assert!(
        accuracy > baseline,
        "network {accuracy} vs nearest centroid {baseline}"
    );
}
