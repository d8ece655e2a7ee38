use std::fs;
use std::path::Path;

use pdstate::data::CohortSpec;
use pdstate::harness::cli::cli_run;
use pdstate::harness::{
    load_corpus, run_experiment, train_members, DatasetSource, ExperimentConfig, ExperimentKind, RunOptions,
};
use pdstate::net::NetConfig;

fn tiny(kind: ExperimentKind, out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        kind,
        dataset: DatasetSource::Synthetic(CohortSpec {
            patients: 4,
            minutes: 24,
            seed: 2,
            idiosyncrasy: 0.5,
            no_motion_fraction: 0.1,
            ..CohortSpec::default()
        }),
        net: NetConfig {
            epochs: 2,
            batch_size: 16,
            seed: 1,
            ..NetConfig::with_width_scale(64.0)
        },
        subset_size: 2,
        subset_count: 4,
        ensemble_size: 3,
        kfold: 10,
        seed: 1,
        output_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(String::from).collect()
}

#[test]
fn every_kind_reports_each_patient_and_conserves_windows() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [
        ExperimentKind::CnnSingle,
        ExperimentKind::CnnLoso,
        ExperimentKind::Kfold10,
        ExperimentKind::EsbDropout,
        ExperimentKind::EsbDiffinit,
        ExperimentKind::EsbDiffpat,
    ] {
        let out = dir.path().join(kind.as_str());
        let bundle = run_experiment(&tiny(kind, &out)).unwrap();
        assert_eq!(bundle.per_patient.len(), 4, "{kind:?}");
        let corpus = lines(&out.join("corpus.csv"));
        let kept: usize = corpus[1..]
            .iter()
            .map(|l| l.split(',').nth(4).unwrap().parse::<usize>().unwrap())
            .sum();
        assert_eq!(
            bundle.per_patient.iter().map(|s| s.windows).sum::<usize>(),
            kept,
            "{kind:?}"
        );

        let table = lines(&out.join("accuracy.csv"));
        assert_eq!(table[0], "experiment,0,1,2,3,All");
        assert!(table[1].starts_with(kind.as_str()));
        assert!(out.join("predictions.csv").exists());
        let per_window = !bundle.predictions.is_empty();
        assert_eq!(
            per_window,
            !matches!(kind, ExperimentKind::CnnSingle | ExperimentKind::EsbDiffinit)
        );
        if per_window {
            assert_eq!(bundle.predictions.len(), kept);
            assert_eq!(lines(&out.join("aggregated.csv")).len(), kept + 1);
            let sweep = lines(&out.join("smoothing.csv"));
            let kernels: Vec<&str> = sweep[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
            assert_eq!(kernels, ["0", "5", "11", "31", "61", "181", "Inf"]);
            assert_eq!(
                lines(&out.join("top_share.csv"))
                    .last()
                    .unwrap()
                    .split(',')
                    .nth(1)
                    .unwrap(),
                kept.to_string()
            );
        }
    }
}

#[test]
fn kfold_report_lists_ten_folds_and_average() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = run_experiment(&tiny(ExperimentKind::Kfold10, dir.path())).unwrap();
    let rows = lines(&dir.path().join("kfold.csv"));
    let labels: Vec<&str> = rows[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "Avg."]);
    assert_eq!(bundle.folds.len(), 10);
}

#[test]
fn train_then_evaluate_reuses_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(ExperimentKind::EsbDiffpat, dir.path());
    let (trained, loaded) = train_members(&config, RunOptions::default()).unwrap();
    assert_eq!((trained, loaded), (4, 0));
    let bundle = run_experiment(&config).unwrap();
    assert_eq!((bundle.members_trained, bundle.members_loaded), (0, 4));

    // Same weights serve other kinds that share the pool.
    let mut single = config.clone();
    single.kind = ExperimentKind::CnnSingle;
    assert_eq!(run_experiment(&single).unwrap().members_trained, 0);
}

#[test]
fn corrupt_cache_entries_are_retrained() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(ExperimentKind::CnnLoso, dir.path());
    let first = run_experiment(&config).unwrap();
    let cache = fs::read_dir(dir.path().join("cache"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let victim = cache.join("loso-0.pdw");
    let bytes = fs::read(&victim).unwrap();
    fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
    let second = run_experiment(&config).unwrap();
    assert_eq!(second.members_trained, 1);
    assert_eq!(first.per_patient, second.per_patient);
}

#[test]
fn csv_directories_load_like_synthetic_cohorts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let code = cli_run([
        "pdstate",
        "synth",
        "--patients",
        "3",
        "--minutes",
        "6",
        "--seed",
        "5",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let config = ExperimentConfig {
        dataset: DatasetSource::CsvDir(data.clone()),
        ..ExperimentConfig::default()
    };
    let corpus = load_corpus(&config).unwrap();
    assert_eq!(corpus.records.len(), 3);
    let synthetic = load_corpus(&ExperimentConfig {
        dataset: DatasetSource::Synthetic(CohortSpec {
            patients: 3,
            minutes: 6,
            seed: 5,
            ..CohortSpec::default()
        }),
        ..ExperimentConfig::default()
    })
    .unwrap();
    for (a, b) in corpus.records.iter().zip(&synthetic.records) {
        assert_eq!(a.patient_id(), b.patient_id());
        assert_eq!(a.state_minutes(), b.state_minutes());
    }

    let out = dir.path().join("pre");
    let code = cli_run([
        "pdstate",
        "preprocess",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert_eq!(lines(&out.join("corpus.csv")).len(), 4);
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli_run(["pdstate", "gradcheck", "--seed", "7"]), 0);

    let out = dir.path().join("synth");
    let code = cli_run([
        "pdstate",
        "synth",
        "--patients",
        "8",
        "--minutes",
        "3",
        "--seed",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let files = fs::read_dir(&out).unwrap().count();
    assert_eq!(files, 16);
    for p in 0..8 {
        assert!(out.join(format!("patient_{p}_raw.csv")).exists());
        assert!(out.join(format!("patient_{p}_labels.csv")).exists());
    }

    assert_eq!(cli_run(["pdstate", "synth", "--patients", "8"]), 2);
    assert_eq!(cli_run(["pdstate", "frobnicate"]), 2);
    assert_eq!(cli_run(["pdstate", "evaluate", "--bogus"]), 2);
    let missing = dir.path().join("nope.json");
    assert_eq!(
        cli_run(["pdstate", "evaluate", "--config", missing.to_str().unwrap()]),
        1
    );
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"kind": "NOT_A_KIND"}"#).unwrap();
    assert_eq!(cli_run(["pdstate", "evaluate", "--config", bad.to_str().unwrap()]), 1);
}

#[test]
fn cli_runs_an_experiment_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config_path = dir.path().join("config.json");
    fs::write(&config_path, tiny(ExperimentKind::CnnLoso, &out).to_json()).unwrap();
    let cfg = config_path.to_str().unwrap();
    assert_eq!(cli_run(["pdstate", "train", "--config", cfg]), 0);
    assert_eq!(cli_run(["pdstate", "evaluate", "--config", cfg]), 0);
    assert_eq!(
        cli_run(["pdstate", "sweep-smoothing", "--config", cfg, "--kernels", "0,3,Inf"]),
        0
    );
    assert_eq!(
        cli_run(["pdstate", "confidence-report", "--config", cfg, "--fraction", "0.5"]),
        0
    );
    let archived: ExperimentConfig =
        serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(archived.kind, ExperimentKind::CnnLoso);

    let cache = fs::read_dir(out.join("cache")).unwrap().next().unwrap().unwrap().path();
    let weights = cache.join("loso-1.pdw");
    let svg = dir.path().join("cam").join("overlay.svg");
    let code = cli_run([
        "pdstate",
        "cam",
        "--config",
        cfg,
        "--weights",
        weights.to_str().unwrap(),
        "--patient",
        "1",
        "--minute",
        &first_kept_minute(&out, 1),
        "--svg",
        svg.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(fs::read_to_string(&svg).unwrap().contains("<polyline"));
    assert_eq!(lines(&svg.with_extension("csv")).len(), 3601);

    // Width override no longer matches the stored weights.
    let code = cli_run([
        "pdstate",
        "cam",
        "--config",
        cfg,
        "--width-scale",
        "32",
        "--weights",
        weights.to_str().unwrap(),
        "--patient",
        "1",
        "--minute",
        "0",
        "--svg",
        svg.to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
}

fn first_kept_minute(out: &Path, patient: u32) -> String {
    lines(&out.join("aggregated.csv"))
        .into_iter()
        .skip(1)
        .find(|l| l.starts_with(&format!("{patient},")))
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .to_string()
}
