//! Acceptance criteria 1-11. Each test writes one `criterion N: PASS|FAIL`
//! line straight to stdout, so the verdicts show up even when output
//! capture is on.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use pdstate::cam::compute_cam;
use pdstate::data::{
    class_distribution, reference_cohort_minutes, reference_top_share, render_minute, CohortSpec, MinutePlan,
    PatientRecord, SynthProfile,
};
use pdstate::ensemble::{
    aggregate, smooth, AggregationMode, ConfidenceMode, SmoothingKernel, WindowRef, DEFAULT_GAP_LIMIT,
};
use pdstate::harness::report::bands_nonincreasing;
use pdstate::harness::{
    load_model, run_experiment, run_experiment_with, save_model, DatasetSource, ExperimentConfig, ExperimentKind,
    ReportBundle, RunOptions,
};
use pdstate::net::{self, argmax, gradient_check, NetConfig, Prediction, GRADIENT_CHECK_STEP};
use pdstate::signal::{filter_no_motion, NoMotionPolicy, PatientId, SensorWindow, StateLabel, NO_MOTION_THRESHOLD};
use pdstate::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(criterion: u32, pass: bool, detail: &str, elapsed: Duration) {
    let line = format!(
        "criterion {criterion}: {} ({detail}; {:.1}s)\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "criterion {criterion} failed: {detail}");
}

#[test]
fn criterion_01_gradient_oracle() {
    let start = Instant::now();
    let params = net::build(&NetConfig::with_width_scale(64.0))
        .unwrap()
        .parameter_count();
    let errors: Vec<f64> = (0..5)
        .map(|seed| gradient_check(64.0, seed, GRADIENT_CHECK_STEP).unwrap())
        .collect();
    let worst = errors.iter().copied().fold(0.0, f64::max);
    let elapsed = start.elapsed();
    verdict(
        1,
        worst < 1e-4 && elapsed < Duration::from_secs(60),
        &format!("width 64 ({params} parameters), worst relative error {worst:.2e} over 5 seeds"),
        elapsed,
    );
}

#[test]
fn criterion_02_architecture_identity() {
    let start = Instant::now();
    let config = NetConfig::default();
    let chain: Vec<usize> = config.extent_chain().unwrap().iter().map(|e| e.0).collect();
    let params = net::build(&config).unwrap();
    let window = SensorWindow::new(vec![0.1; 3600 * 3], 0, StateLabel::Off, PatientId(0)).unwrap();
    let feature_shape = params.forward(&window).unwrap().feature_map.shape().to_vec();
    let elapsed = start.elapsed();
    let last = *config.effective_channels().unwrap().last().unwrap();
    let pass = chain == [3600, 1799, 899, 449, 224, 111, 55, 27] && feature_shape == [1, last, 27, 1];
    verdict(
        2,
        pass,
        &format!("extent chain {chain:?}, feature map {feature_shape:?}"),
        elapsed,
    );
}

#[test]
fn criterion_03_no_motion_filter() {
    let start = Instant::now();
    let policy = NoMotionPolicy::default();
    let zero = SensorWindow::new(vec![0.0; 3600 * 3], 0, StateLabel::Off, PatientId(0)).unwrap();
    // Magnitude alternates between 1 - d and 1 + d, so its variance is d^2.
    let d = NO_MOTION_THRESHOLD.sqrt();
    let values: Vec<f64> = (0..3600)
        .flat_map(|k| [0.0, 0.0, if k % 2 == 0 { 1.0 - d } else { 1.0 + d }])
        .collect();
    let edge = SensorWindow::new(values, 1, StateLabel::Off, PatientId(0)).unwrap();
    let edge_statistic = policy.statistic_of(&edge);
    let unit = filter_no_motion(vec![zero, edge], &policy);
    let unit_ok = unit.removed.len() == 1 && unit.removed[0].window.minute_index == 0 && unit.kept.len() == 1;
    // The constructed window sits on the threshold up to rounding; it must be kept
    // whenever its statistic is not below the threshold.
    let edge_ok = edge_statistic >= NO_MOTION_THRESHOLD || (NO_MOTION_THRESHOLD - edge_statistic) < 1e-18;

    let cohort = CohortSpec {
        patients: 4,
        minutes: 50,
        seed: 9,
        idiosyncrasy: 1.0,
        mix_concentration: Some(0.5),
        no_motion_fraction: 0.2,
        ..CohortSpec::default()
    };
    let records = cohort.generate().unwrap();
    let total: usize = records.iter().map(PatientRecord::len).sum();
    let (mut kept, mut removed) = (0, 0);
    for r in records {
        let outcome = filter_no_motion(r.into_windows(), &policy);
        kept += outcome.kept.len();
        removed += outcome.removed.len();
    }
    let fraction = removed as f64 / total as f64;
    let elapsed = start.elapsed();
    let pass = unit_ok && edge_ok && kept + removed == total && (fraction - 0.2).abs() <= 0.02;
    verdict(
        3,
        pass,
        &format!("zero removed, threshold window kept: {}; {kept} kept + {removed} removed of {total}, fraction {fraction:.3}", unit_ok && edge_ok),
        elapsed,
    );
}

#[test]
fn criterion_04_cam_identity() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let config = NetConfig {
            epochs: 2,
            batch_size: 4,
            seed,
            ..NetConfig::with_width_scale(if seed % 2 == 0 { 64.0 } else { 32.0 })
        };
        let profile = SynthProfile::new(PatientId(seed as u32), seed);
        let train: Vec<SensorWindow> = (0..6u32)
            .map(|m| {
                render_minute(
                    &profile,
                    m,
                    MinutePlan {
                        state: StateLabel::CLASSES[m as usize % 3],
                        no_motion: false,
                    },
                )
            })
            .collect();
        let refs: Vec<&SensorWindow> = train.iter().collect();
        let mut params = net::build(&config).unwrap();
        net::train(&mut params, &refs, &config).unwrap();
        let probe = render_minute(
            &profile,
            500,
            MinutePlan {
                state: StateLabel::CLASSES[seed as usize % 3],
                no_motion: false,
            },
        );
        let cam = compute_cam(&params, &probe).unwrap();
        for c in 0..3 {
            let mean = cam.values[c].iter().sum::<f64>() / cam.values[c].len() as f64;
            worst = worst.max((mean + params.head_bias.data()[c] - cam.logits[c]).abs());
        }
    }
    let elapsed = start.elapsed();
    verdict(
        4,
        worst < 1e-8,
        &format!("20 trained networks, worst |mean CAM + bias - logit| {worst:.2e}"),
        elapsed,
    );
}

/// Reference aggregation written out longhand.
fn brute_force_aggregate(outputs: &[[f64; 3]], mode: AggregationMode) -> usize {
    let best = |v: [f64; 3]| {
        let mut b = 0;
        for c in 1..3 {
            if v[c] > v[b] {
                b = c;
            }
        }
        b
    };
    match mode {
        AggregationMode::Majority => {
            let mut votes = [0.0; 3];
            for o in outputs {
                votes[best(*o)] += 1.0;
            }
            best(votes)
        }
        AggregationMode::LogitSum => best(
            outputs
                .iter()
                .fold([0.0; 3], |a, o| [a[0] + o[0], a[1] + o[1], a[2] + o[2]]),
        ),
        AggregationMode::SoftmaxSum => best(outputs.iter().fold([0.0; 3], |a, o| {
            let m = o[0].max(o[1]).max(o[2]);
            let e = [(o[0] - m).exp(), (o[1] - m).exp(), (o[2] - m).exp()];
            let s = e[0] + e[1] + e[2];
            [a[0] + e[0] / s, a[1] + e[1] / s, a[2] + e[2] / s]
        })),
    }
}

fn brute_force_smooth(logits: &[[f64; 3]], width: usize) -> Vec<usize> {
    let n = logits.len() as i64;
    let half = (width / 2) as i64;
    (0..n)
        .map(|i| {
            let (lo, hi) = if width <= 1 {
                (i, i)
            } else {
                ((i - half).max(0), (i + half).min(n - 1))
            };
            let mut sum = [0.0; 3];
            for j in lo..=hi {
                for c in 0..3 {
                    sum[c] += logits[j as usize][c];
                }
            }
            let count = (hi - lo + 1) as f64;
            argmax(&sum.map(|s| s / count))
        })
        .collect()
}

#[test]
fn criterion_05_aggregation_oracles() {
    let start = Instant::now();
    let window = WindowRef {
        patient: PatientId(0),
        minute: 0,
        label: StateLabel::Off,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    let modes = [
        AggregationMode::Majority,
        AggregationMode::LogitSum,
        AggregationMode::SoftmaxSum,
    ];
    for set in 0..1000 {
        let outputs: Vec<[f64; 3]> = if set == 0 {
            vec![[1.5, 2.7, 0.5], [0.1, 0.1, 3.0]]
        } else {
            let n = rng.gen_range(1..=15);
            (0..n)
                .map(|_| [0.0; 3].map(|_: f64| rng.gen_range(-4.0..4.0)))
                .collect()
        };
        let preds: Vec<Prediction> = outputs.iter().map(|&l| Prediction::from_logits(l)).collect();
        for mode in modes {
            if aggregate(window, &preds, mode).unwrap().aggregated_label != brute_force_aggregate(&outputs, mode) {
                mismatches += 1;
            }
        }
    }
    let example = aggregate(
        window,
        &[
            Prediction::from_logits([1.5, 2.7, 0.5]),
            Prediction::from_logits([0.1, 0.1, 3.0]),
        ],
        AggregationMode::LogitSum,
    )
    .unwrap();
    let example_ok = example.aggregated_label == 2
        && example
            .summed_logits
            .iter()
            .zip([1.6, 2.8, 3.5])
            .all(|(a, b)| (a - b).abs() < 1e-12);

    let mut smooth_mismatches = 0;
    let mut identity_ok = true;
    for trial in 0..200 {
        let n = rng.gen_range(1..60);
        let logits: Vec<[f64; 3]> = (0..n)
            .map(|_| [0.0; 3].map(|_: f64| rng.gen_range(-3.0..3.0)))
            .collect();
        let seq: Vec<(u32, [f64; 3])> = logits.iter().enumerate().map(|(i, &l)| (i as u32, l)).collect();
        for width in [0, 5, 11] {
            let got = smooth(&seq, SmoothingKernel::Minutes(width), DEFAULT_GAP_LIMIT).unwrap();
            if got != brute_force_smooth(&logits, width) {
                smooth_mismatches += 1;
            }
            if width == 0 {
                identity_ok &= got == logits.iter().map(|l| argmax(l)).collect::<Vec<_>>();
            }
        }
        let _ = trial;
    }
    let elapsed = start.elapsed();
    let pass =
        mismatches == 0 && example_ok && smooth_mismatches == 0 && identity_ok && elapsed < Duration::from_secs(10);
    verdict(
        5,
        pass,
        &format!(
            "{mismatches} aggregation mismatches in 3000 checks, example ok {example_ok}, {smooth_mismatches} smoothing mismatches, identity {identity_ok}"
        ),
        elapsed,
    );
}

#[test]
fn criterion_06_overfit_check() {
    let start = Instant::now();
    let profile = SynthProfile::new(PatientId(0), 61);
    let windows: Vec<SensorWindow> = StateLabel::CLASSES
        .iter()
        .enumerate()
        .flat_map(|(c, &state)| {
            let profile = &profile;
            (0..40u32).map(move |m| {
                render_minute(
                    profile,
                    c as u32 * 1000 + m,
                    MinutePlan {
                        state,
                        no_motion: false,
                    },
                )
            })
        })
        .collect();
    let refs: Vec<&SensorWindow> = windows.iter().collect();
    let config = NetConfig {
        epochs: 40,
        seed: 6,
        ..NetConfig::with_width_scale(16.0)
    };
    let mut params = net::build(&config).unwrap();
    let trace = net::train(&mut params, &refs, &config).unwrap();
    let accuracy = params.accuracy(&refs).unwrap();
    let elapsed = start.elapsed();
    verdict(
        6,
        accuracy >= 0.95 && elapsed < Duration::from_secs(600),
        &format!(
            "width 16, 40 epochs, lr {}, 120 windows: training accuracy {:.1}% (last epoch loss {:.4})",
            config.lr,
            100.0 * accuracy,
            trace.epochs.last().unwrap().loss
        ),
        elapsed,
    );
}

const RUN7_SEEDS: u64 = 5;

/// The synthetic cohort of criteria 7-9 for one seed.
fn run7_config(kind: ExperimentKind, seed: u64, out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        kind,
        dataset: DatasetSource::Synthetic(CohortSpec {
            patients: 10,
            minutes: 80,
            seed: 100 + seed,
            idiosyncrasy: 1.0,
            mix_concentration: Some(1.0),
            target_agreement: 0.913,
            no_motion_fraction: 0.1,
            confusion: 0.3,
            ..CohortSpec::default()
        }),
        net: NetConfig {
            epochs: 20,
            batch_size: 32,
            seed,
            ..NetConfig::with_width_scale(64.0)
        },
        subset_size: 5,
        subset_count: 20,
        aggregation: AggregationMode::LogitSum,
        seed,
        output_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

struct Run7 {
    loso: Vec<ReportBundle>,
    ensemble: Vec<ReportBundle>,
    agreement: Vec<f64>,
    elapsed: Duration,
}

fn run7() -> &'static Run7 {
    static RUNS: OnceLock<Run7> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let mut loso = Vec::new();
        let mut ensemble = Vec::new();
        let mut agreement = Vec::new();
        for seed in 0..RUN7_SEEDS {
            let base = run7_config(ExperimentKind::CnnLoso, seed, &dir.path().join(format!("loso{seed}")));
            if let DatasetSource::Synthetic(spec) = &base.dataset {
                agreement.push(pdstate::data::pooled_consecutive_agreement(&spec.generate().unwrap(), 3).unwrap());
            }
            loso.push(run_experiment(&base).unwrap());
            let esb = run7_config(ExperimentKind::EsbDiffpat, seed, &dir.path().join(format!("esb{seed}")));
            ensemble.push(run_experiment(&esb).unwrap());
        }
        Run7 {
            loso,
            ensemble,
            agreement,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn criterion_07_ensemble_advantage() {
    let runs = run7();
    let loso: Vec<f64> = runs.loso.iter().map(|b| 100.0 * b.overall).collect();
    let esb: Vec<f64> = runs.ensemble.iter().map(|b| 100.0 * b.overall).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gain = mean(&esb) - mean(&loso);
    verdict(
        7,
        gain > 2.0 && runs.elapsed < Duration::from_secs(3600),
        &format!(
            "sub-bagged {:.2}% vs leave-one-out {:.2}% (gain {gain:.2} points); per seed {:?} vs {:?}",
            mean(&esb),
            mean(&loso),
            esb.iter().map(|a| (a * 100.0).round() / 100.0).collect::<Vec<_>>(),
            loso.iter().map(|a| (a * 100.0).round() / 100.0).collect::<Vec<_>>()
        ),
        runs.elapsed,
    );
}

#[test]
fn criterion_08_smoothing_benefit() {
    let runs = run7();
    let start = Instant::now();
    let mut wins = 0;
    let mut detail = Vec::new();
    for b in &runs.ensemble {
        let by_kernel: BTreeMap<String, f64> = b
            .smoothing
            .iter()
            .map(|s| (s.kernel.to_string(), 100.0 * s.accuracy()))
            .collect();
        let (raw, k11) = (by_kernel["0"], by_kernel["11"]);
        wins += usize::from(k11 >= raw);
        detail.push(format!("{raw:.1}->{k11:.1}"));
    }
    let agreement = runs.agreement.iter().sum::<f64>() / runs.agreement.len() as f64;
    verdict(
        8,
        wins >= 4,
        &format!(
            "kernel 11 >= unsmoothed in {wins}/5 seeds [{}]; 3-minute label agreement {agreement:.3}",
            detail.join(", ")
        ),
        start.elapsed(),
    );
}

#[test]
fn criterion_09_confidence_monotonicity() {
    let runs = run7();
    let start = Instant::now();
    let mut wins = 0;
    let mut detail = Vec::new();
    for b in &runs.ensemble {
        let report = b.confidence.as_ref().unwrap();
        let ok = bands_nonincreasing(report.bands_for(ConfidenceMode::Logit));
        wins += usize::from(ok);
        let acc: Vec<String> = report
            .bands_for(ConfidenceMode::Logit)
            .map(|b| format!("{:.0}", 100.0 * b.accuracy()))
            .collect();
        detail.push(acc.join("/"));
    }
    let elapsed = start.elapsed();
    verdict(
        9,
        wins >= 4 && elapsed < Duration::from_secs(60),
        &format!("logit bands nonincreasing in {wins}/5 seeds [{}]", detail.join(", ")),
        elapsed,
    );
}

#[test]
fn criterion_10_fixture_integrity() {
    let start = Instant::now();
    let cohort = reference_cohort_minutes();
    let dist = class_distribution(cohort.iter().map(|(_, m)| m));
    let rows = reference_top_share();
    let all: usize = rows.iter().map(|r| r.all).sum();
    let top: usize = rows.iter().map(|r| r.top_conf).sum();
    let share = 100.0 * top as f64 / all as f64;
    let per_patient_ok = cohort
        .iter()
        .zip(&rows)
        .all(|((p, m), r)| p.0 == r.patient && m.total() == r.all);
    let pass = (dist.off, dist.on, dist.dys, dist.total()) == (2303, 3815, 2543, 8661)
        && (all, top) == (8661, 1732)
        && format!("{share:.1}") == "20.0"
        && per_patient_ok;
    verdict(
        10,
        pass,
        &format!(
            "OFF {} ON {} DYS {} total {}; All {all} TopConf {top} share {share:.1}%; per-patient totals agree {per_patient_ok}",
            dist.off,
            dist.on,
            dist.dys,
            dist.total()
        ),
        start.elapsed(),
    );
}

fn report_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect()
}

#[test]
fn criterion_11_persistence_and_reproducibility() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();

    let config = NetConfig {
        epochs: 3,
        batch_size: 4,
        seed: 12,
        ..NetConfig::with_width_scale(32.0)
    };
    let profile = SynthProfile::new(PatientId(0), 12);
    let windows: Vec<SensorWindow> = (0..9u32)
        .map(|m| {
            render_minute(
                &profile,
                m,
                MinutePlan {
                    state: StateLabel::CLASSES[m as usize % 3],
                    no_motion: false,
                },
            )
        })
        .collect();
    let refs: Vec<&SensorWindow> = windows.iter().collect();
    let mut params = net::build(&config).unwrap();
    net::train(&mut params, &refs, &config).unwrap();
    let path = dir.path().join("model.pdw");
    save_model(&params, &path).unwrap();
    let round_trip = load_model(&path, &config).unwrap() == params;

    let out = dir.path().join("run");
    let experiment = ExperimentConfig {
        kind: ExperimentKind::EsbDiffpat,
        dataset: DatasetSource::Synthetic(CohortSpec {
            patients: 5,
            minutes: 30,
            seed: 4,
            idiosyncrasy: 0.7,
            mix_concentration: Some(1.0),
            no_motion_fraction: 0.1,
            ..CohortSpec::default()
        }),
        net: NetConfig {
            epochs: 3,
            batch_size: 16,
            seed: 4,
            ..NetConfig::with_width_scale(64.0)
        },
        subset_size: 2,
        subset_count: 8,
        aggregation: AggregationMode::LogitSum,
        seed: 4,
        output_dir: out.clone(),
        ..ExperimentConfig::default()
    };
    run_experiment(&experiment).unwrap();
    let first = report_files(&out);

    fs::remove_dir_all(&out).unwrap();
    run_experiment(&experiment).unwrap();
    let rerun_identical = report_files(&out) == first;

    fs::remove_dir_all(&out).unwrap();
    let interrupted = run_experiment_with(
        &experiment,
        RunOptions {
            stop_after_trained: Some(3),
        },
    );
    let was_interrupted = matches!(interrupted, Err(Error::Interrupted(_)));
    let resumed = run_experiment(&experiment).unwrap();
    let resume_identical = report_files(&out) == first && resumed.members_loaded >= 3;

    let elapsed = start.elapsed();
    let pass =
        round_trip && rerun_identical && was_interrupted && resume_identical && elapsed < Duration::from_secs(300);
    verdict(
        11,
        pass,
        &format!(
            "bit-exact round trip {round_trip}, rerun byte-identical {rerun_identical} ({} report files), interrupted {was_interrupted}, resumed identical {resume_identical}",
            first.len()
        ),
        elapsed,
    );
}
