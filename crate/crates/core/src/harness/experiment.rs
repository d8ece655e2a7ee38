//! Experiment orchestration: corpus loading, member training with an on-disk
//! cache, evaluation per experiment kind and report emission.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use super::config::{DatasetSource, ExperimentConfig, ExperimentKind};
use super::report::{self, ConfidenceReport, FoldScore, MemberRow, PatientScore, SmoothingScore};
use super::weights::{load_model, save_model};
use crate::data::{self, kfold_windows, loso_folds, sample_patient_subsets, ClassMinutes, FoldPlan, PatientRecord};
use crate::ensemble::{self, aggregate, ensemble_dropout, AggregationMode, EnsemblePrediction, WindowRef};
use crate::error::{Error, Result};
use crate::net::{NetworkParams, Prediction};
use crate::signal::{PatientId, SensorWindow, StateLabel};

/// Per-patient window accounting after preprocessing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusRow {
    pub patient: PatientId,
    pub total: usize,
    pub no_motion: usize,
    pub unlabeled: usize,
    pub kept: ClassMinutes,
}

/// Kept (moving, labelled) windows of every patient, in patient order.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub records: Vec<PatientRecord>,
    pub rows: Vec<CorpusRow>,
}

impl Corpus {
    pub fn patients(&self) -> Vec<PatientId> {
        self.records.iter().map(PatientRecord::patient_id).collect()
    }

    /// Every kept window, patient by patient.
    pub fn windows(&self) -> Vec<&SensorWindow> {
        self.records.iter().flat_map(|r| r.windows()).collect()
    }
}

fn read_dataset(source: &DatasetSource) -> Result<Vec<PatientRecord>> {
    match source {
        DatasetSource::Synthetic(spec) => {
            let profiles = spec.profiles()?;
            profiles
                .par_iter()
                .map(|p| data::synth_generate(p, spec.minutes))
                .collect()
        }
        DatasetSource::CsvDir(dir) => {
            let mut ids = Vec::new();
            for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
                let name = entry.map_err(|e| Error::io(dir, e))?.file_name();
                let name = name.to_string_lossy();
                if let Some(id) = name.strip_prefix("patient_").and_then(|s| s.strip_suffix("_raw.csv")) {
                    ids.push(id.parse::<u32>().map_err(|_| Error::Parse {
                        source_name: name.to_string(),
                        reason: "patient id is not an integer".into(),
                    })?);
                }
            }
            if ids.is_empty() {
                return Err(Error::InsufficientData(format!(
                    "no patient_<id>_raw.csv files in {}",
                    dir.display()
                )));
            }
            ids.sort_unstable();
            ids.par_iter()
                .map(|&id| {
                    data::load_patient(
                        &dir.join(format!("patient_{id}_raw.csv")),
                        &dir.join(format!("patient_{id}_labels.csv")),
                        PatientId(id),
                    )
                })
                .collect()
        }
    }
}

/// Loads the dataset, drops no-motion minutes and then unlabelled ones.
pub fn load_corpus(config: &ExperimentConfig) -> Result<Corpus> {
    let mut records = Vec::new();
    let mut rows = Vec::new();
    for raw in read_dataset(&config.dataset)? {
        let total = raw.len();
        let patient = raw.patient_id();
        let (moving, no_motion) = raw.without_no_motion(&config.no_motion)?;
        let unlabeled = moving.unlabeled_minutes();
        let kept: Vec<SensorWindow> = moving
            .into_windows()
            .into_iter()
            .filter(|w| w.label != StateLabel::Unlabeled)
            .collect();
        let record = PatientRecord::new(patient, kept)?;
        rows.push(CorpusRow {
            patient,
            total,
            no_motion,
            unlabeled,
            kept: record.state_minutes(),
        });
        if record.is_empty() {
            log::warn!("patient {patient} has no kept windows and is left out");
        } else {
            records.push(record);
        }
    }
    if records.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} patients with kept windows",
            records.len()
        )));
    }
    Ok(Corpus { records, rows })
}

/// Controls for interrupting a run, used to exercise resumption.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Abort once this many members have been trained in this run.
    pub stop_after_trained: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub output_dir: PathBuf,
    pub kind: ExperimentKind,
    pub per_patient: Vec<PatientScore>,
    pub overall: f64,
    pub folds: Vec<FoldScore>,
    /// One aggregated prediction per kept window, for kinds that produce one.
    pub predictions: Vec<EnsemblePrediction>,
    pub smoothing: Vec<SmoothingScore>,
    pub confidence: Option<ConfidenceReport>,
    pub members_trained: usize,
    pub members_loaded: usize,
}

/// One network to obtain: its cache name, training windows and seed offset.
struct Job {
    name: String,
    train: Vec<usize>,
    patients: Vec<PatientId>,
    seed_index: usize,
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    windows: Vec<&'a SensorWindow>,
    /// Global window indices of each patient, in corpus order.
    by_patient: Vec<(PatientId, Vec<usize>)>,
    cache_dir: PathBuf,
    options: RunOptions,
    trained: AtomicUsize,
    loaded: AtomicUsize,
}

impl Context<'_> {
    fn indices_of(&self, patients: &[PatientId]) -> Vec<usize> {
        self.by_patient
            .iter()
            .filter(|(p, _)| patients.contains(p))
            .flat_map(|(_, idx)| idx.iter().copied())
            .collect()
    }

    fn patient_job(&self, name: String, patients: Vec<PatientId>, seed_index: usize) -> Job {
        Job {
            name,
            train: self.indices_of(&patients),
            patients,
            seed_index,
        }
    }

    /// Loads cached members and trains the rest in parallel. Results follow
    /// job order; a member whose training fails is `None`.
    fn obtain(&self, jobs: &[Job]) -> Result<Vec<Option<NetworkParams>>> {
        let results: Vec<Result<Option<NetworkParams>>> = jobs.par_iter().map(|job| self.obtain_one(job)).collect();
        results.into_iter().collect()
    }

    fn obtain_one(&self, job: &Job) -> Result<Option<NetworkParams>> {
        let path = self.cache_dir.join(format!("{}.pdw", job.name));
        if path.exists() {
            match load_model(&path, &self.config.net) {
                Ok(p) => {
                    self.loaded.fetch_add(1, Ordering::SeqCst);
                    return Ok(Some(p));
                }
                Err(e) => log::warn!("retraining {}: cached weights unusable: {e}", job.name),
            }
        }
        if let Some(limit) = self.options.stop_after_trained {
            if self.trained.load(Ordering::SeqCst) >= limit {
                return Err(Error::Interrupted(format!("stopped after {limit} trained members")));
            }
        }
        let windows: Vec<&SensorWindow> = job.train.iter().map(|&i| self.windows[i]).collect();
        match ensemble::train_on_windows(&windows, job.patients.clone(), job.seed_index, &self.config.net) {
            Ok(member) => {
                log::info!(
                    "trained {} on {} windows, final loss {:.4}",
                    job.name,
                    windows.len(),
                    member.trace.epochs.last().map_or(f64::NAN, |e| e.loss)
                );
                for w in &member.trace.warnings {
                    log::warn!("{}: {w}", job.name);
                }
                save_model(&member.params, &path)?;
                self.trained.fetch_add(1, Ordering::SeqCst);
                Ok(Some(member.params))
            }
            Err(e) => {
                log::error!("member {} failed and is excluded: {e}", job.name);
                Ok(None)
            }
        }
    }

    fn predict(&self, params: &NetworkParams, indices: &[usize]) -> Result<Vec<Prediction>> {
        let windows: Vec<&SensorWindow> = indices.iter().map(|&i| self.windows[i]).collect();
        params.predict_many(&windows)
    }
}

fn required(member: Option<NetworkParams>, name: &str) -> Result<NetworkParams> {
    member.ok_or_else(|| Error::InsufficientData(format!("network {name} could not be trained")))
}

/// What one experiment kind produces before reporting.
#[derive(Default)]
struct Evaluation {
    per_patient: Vec<PatientScore>,
    folds: Vec<FoldScore>,
    predictions: Vec<EnsemblePrediction>,
    member_rows: Vec<MemberRow>,
}

impl Evaluation {
    fn record_members(&mut self, ctx: &Context, indices: &[usize], model_id: usize, outs: &[Prediction]) {
        for (&i, p) in indices.iter().zip(outs) {
            let w = ctx.windows[i];
            self.member_rows.push(MemberRow {
                patient: w.patient_id,
                minute: w.minute_index,
                label: w.label,
                model_id,
                logits: p.logits,
            });
        }
    }

    /// Aggregates member outputs (`outs[member][window]`) for `indices`.
    fn aggregate(
        ctx: &Context,
        indices: &[usize],
        outs: &[Vec<Prediction>],
        mode: AggregationMode,
    ) -> Result<Vec<EnsemblePrediction>> {
        indices
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let member_outs: Vec<Prediction> = outs.iter().map(|o| o[k]).collect();
                aggregate(WindowRef::of(ctx.windows[i]), &member_outs, mode)
            })
            .collect()
    }
}

fn accuracy_of(preds: &[EnsemblePrediction]) -> f64 {
    let correct = preds.iter().filter(|p| report::is_correct(p)).count();
    correct as f64 / preds.len().max(1) as f64
}

fn member_accuracy(ctx: &Context, indices: &[usize], outs: &[Prediction]) -> f64 {
    let correct = indices
        .iter()
        .zip(outs)
        .filter(|(&i, p)| ctx.windows[i].label.class_index() == Some(p.label))
        .count();
    correct as f64 / indices.len().max(1) as f64
}

/// Patient subsets for the pool shared by every fold, or for one left-out
/// patient when retraining per fold. Job names identify the pool.
fn subset_pool(ctx: &Context, exclude: Option<(usize, PatientId)>) -> Result<(String, Vec<Vec<PatientId>>)> {
    let c = ctx.config;
    let everyone: Vec<PatientId> = ctx.by_patient.iter().map(|(p, _)| *p).collect();
    match exclude {
        None => Ok((
            "pool".into(),
            sample_patient_subsets(&everyone, c.subset_size, c.subset_count, c.seed)?,
        )),
        Some((fold, patient)) => {
            let others: Vec<PatientId> = everyone.into_iter().filter(|&p| p != patient).collect();
            let seed = c.seed.wrapping_add(1 + fold as u64);
            Ok((
                format!("fold{patient}-pool"),
                sample_patient_subsets(&others, c.subset_size, c.subset_count, seed)?,
            ))
        }
    }
}

/// Pools needed by subset-based kinds: one shared, or one per left-out patient.
fn pools(ctx: &Context) -> Result<Vec<(String, Vec<Vec<PatientId>>)>> {
    if ctx.config.retrain_per_fold {
        ctx.by_patient
            .iter()
            .enumerate()
            .map(|(f, (p, _))| subset_pool(ctx, Some((f, *p))))
            .collect()
    } else {
        Ok(vec![subset_pool(ctx, None)?])
    }
}

fn pool_for(pools: &[(String, Vec<Vec<PatientId>>)], fold: usize) -> usize {
    if pools.len() == 1 {
        0
    } else {
        fold
    }
}

fn loso_jobs(ctx: &Context) -> Result<(Vec<FoldPlan>, Vec<Job>)> {
    let patients: Vec<PatientId> = ctx.by_patient.iter().map(|(p, _)| *p).collect();
    let folds = loso_folds(&patients)?;
    let jobs = folds
        .iter()
        .enumerate()
        .map(|(f, fold)| {
            ctx.patient_job(
                format!("loso-{}", fold.test_patients[0]),
                fold.train_patients.clone(),
                f,
            )
        })
        .collect();
    Ok((folds, jobs))
}

fn evaluate_loso(ctx: &Context, dropout: bool) -> Result<Evaluation> {
    let c = ctx.config;
    let (folds, jobs) = loso_jobs(ctx)?;
    let models = ctx.obtain(&jobs)?;
    let mut eval = Evaluation::default();
    for (f, ((fold, model), job)) in folds.iter().zip(models).zip(&jobs).enumerate() {
        let model = required(model, &job.name)?;
        let test = ctx.indices_of(&fold.test_patients);
        let members = if dropout {
            ensemble_dropout(&model, c.drop_fraction, c.ensemble_size, c.seed.wrapping_add(f as u64))?
        } else {
            vec![model]
        };
        let outs: Vec<Vec<Prediction>> = members
            .par_iter()
            .map(|m| ctx.predict(m, &test))
            .collect::<Result<_>>()?;
        for (id, o) in outs.iter().enumerate() {
            eval.record_members(ctx, &test, if dropout { id } else { f }, o);
        }
        let mode = if dropout {
            c.aggregation
        } else {
            AggregationMode::LogitSum
        };
        let preds = Evaluation::aggregate(ctx, &test, &outs, mode)?;
        eval.per_patient.push(PatientScore {
            patient: fold.test_patients[0],
            windows: test.len(),
            accuracy: accuracy_of(&preds),
        });
        eval.predictions.extend(preds);
    }
    Ok(eval)
}

type Pools = Vec<(String, Vec<Vec<PatientId>>)>;

fn subset_jobs(ctx: &Context) -> Result<(Pools, Vec<Job>)> {
    let pools = pools(ctx)?;
    let mut jobs = Vec::new();
    for (name, subsets) in &pools {
        for (i, s) in subsets.iter().enumerate() {
            let seed_index = jobs.len();
            jobs.push(ctx.patient_job(format!("{name}-{i}"), s.clone(), seed_index));
        }
    }
    Ok((pools, jobs))
}

/// Sub-bagged ensembles, or (`single`) their members scored one by one.
fn evaluate_subsets(ctx: &Context, single: bool) -> Result<Evaluation> {
    let (pools, jobs) = subset_jobs(ctx)?;
    let models = ctx.obtain(&jobs)?;
    let count = ctx.config.subset_count;
    let mut eval = Evaluation::default();
    for (f, (patient, test)) in ctx.by_patient.iter().enumerate() {
        let p = pool_for(&pools, f);
        let base = p * count;
        let eligible: Vec<usize> = data::eligible_models(&pools[p].1, *patient)?
            .into_iter()
            .filter(|&i| models[base + i].is_some())
            .collect();
        if eligible.is_empty() {
            return Err(Error::NoEligibleModels(patient.0));
        }
        let outs: Vec<Vec<Prediction>> = eligible
            .par_iter()
            .map(|&i| ctx.predict(models[base + i].as_ref().expect("filtered"), test))
            .collect::<Result<_>>()?;
        for (&i, o) in eligible.iter().zip(&outs) {
            eval.record_members(ctx, test, base + i, o);
        }
        let accuracy = if single {
            outs.iter().map(|o| member_accuracy(ctx, test, o)).sum::<f64>() / outs.len() as f64
        } else {
            let preds = Evaluation::aggregate(ctx, test, &outs, ctx.config.aggregation)?;
            let acc = accuracy_of(&preds);
            eval.predictions.extend(preds);
            acc
        };
        eval.per_patient.push(PatientScore {
            patient: *patient,
            windows: test.len(),
            accuracy,
        });
    }
    Ok(eval)
}

/// Initialization ensembles per subset, scored per subset and averaged.
/// Initialization 0 of subset `i` is the sub-bagging member `i`.
fn diffinit_jobs(ctx: &Context) -> Result<(Pools, Vec<Job>)> {
    let c = ctx.config;
    let pools = pools(ctx)?;
    let mut jobs = Vec::new();
    for (p, (name, subsets)) in pools.iter().enumerate() {
        for (i, s) in subsets.iter().enumerate() {
            for j in 0..c.ensemble_size {
                let member = p * c.subset_count + i;
                let (job_name, seed_index) = if j == 0 {
                    (format!("{name}-{i}"), member)
                } else {
                    (
                        format!("{name}-{i}-init{j}"),
                        (pools.len() * c.subset_count) * j + member,
                    )
                };
                jobs.push(ctx.patient_job(job_name, s.clone(), seed_index));
            }
        }
    }
    Ok((pools, jobs))
}

fn evaluate_diffinit(ctx: &Context) -> Result<Evaluation> {
    let c = ctx.config;
    let (pools, jobs) = diffinit_jobs(ctx)?;
    let models = ctx.obtain(&jobs)?;
    let member = |p: usize, i: usize, j: usize| ((p * c.subset_count + i) * c.ensemble_size) + j;
    let mut eval = Evaluation::default();
    for (f, (patient, test)) in ctx.by_patient.iter().enumerate() {
        let p = pool_for(&pools, f);
        let mut group_acc = Vec::new();
        for i in data::eligible_models(&pools[p].1, *patient)? {
            let ids: Vec<usize> = (0..c.ensemble_size)
                .map(|j| member(p, i, j))
                .filter(|&m| models[m].is_some())
                .collect();
            if ids.is_empty() {
                continue;
            }
            let outs: Vec<Vec<Prediction>> = ids
                .par_iter()
                .map(|&m| ctx.predict(models[m].as_ref().expect("filtered"), test))
                .collect::<Result<_>>()?;
            for (&m, o) in ids.iter().zip(&outs) {
                eval.record_members(ctx, test, m, o);
            }
            group_acc.push(accuracy_of(&Evaluation::aggregate(ctx, test, &outs, c.aggregation)?));
        }
        if group_acc.is_empty() {
            return Err(Error::NoEligibleModels(patient.0));
        }
        eval.per_patient.push(PatientScore {
            patient: *patient,
            windows: test.len(),
            accuracy: group_acc.iter().sum::<f64>() / group_acc.len() as f64,
        });
    }
    Ok(eval)
}

fn kfold_jobs(ctx: &Context) -> Result<(Vec<FoldPlan>, Vec<Job>)> {
    let c = ctx.config;
    let folds = kfold_windows(ctx.windows.len(), c.kfold, c.seed)?;
    let everyone: Vec<PatientId> = ctx.by_patient.iter().map(|(p, _)| *p).collect();
    let jobs: Vec<Job> = folds
        .iter()
        .enumerate()
        .map(|(f, fold)| Job {
            name: format!("kfold{}-{f}", c.kfold),
            train: fold.train_indices.clone(),
            patients: everyone.clone(),
            seed_index: f,
        })
        .collect();
    Ok((folds, jobs))
}

fn evaluate_kfold(ctx: &Context) -> Result<Evaluation> {
    let (folds, jobs) = kfold_jobs(ctx)?;
    let models = ctx.obtain(&jobs)?;
    let mut eval = Evaluation::default();
    let mut preds: Vec<Option<EnsemblePrediction>> = vec![None; ctx.windows.len()];
    for (f, ((fold, model), job)) in folds.iter().zip(models).zip(&jobs).enumerate() {
        let model = required(model, &job.name)?;
        let outs = vec![ctx.predict(&model, &fold.test_indices)?];
        eval.record_members(ctx, &fold.test_indices, f, &outs[0]);
        let fold_preds = Evaluation::aggregate(ctx, &fold.test_indices, &outs, AggregationMode::LogitSum)?;
        eval.folds.push(FoldScore {
            fold: f,
            windows: fold_preds.len(),
            correct: fold_preds.iter().filter(|p| report::is_correct(p)).count(),
        });
        for (&i, p) in fold.test_indices.iter().zip(fold_preds) {
            preds[i] = Some(p);
        }
    }
    let preds: Vec<EnsemblePrediction> = preds
        .into_iter()
        .map(|p| p.expect("every window tested once"))
        .collect();
    for (patient, idx) in &ctx.by_patient {
        let mine: Vec<EnsemblePrediction> = idx.iter().map(|&i| preds[i].clone()).collect();
        eval.per_patient.push(PatientScore {
            patient: *patient,
            windows: mine.len(),
            accuracy: accuracy_of(&mine),
        });
    }
    eval.predictions = preds;
    Ok(eval)
}

pub(super) fn write_corpus(path: &Path, rows: &[CorpusRow]) -> Result<()> {
    let mut s = String::from("patient,total,no_motion,unlabeled,kept,off,on,dys\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.patient,
            r.total,
            r.no_motion,
            r.unlabeled,
            r.kept.total(),
            r.kept.off,
            r.kept.on,
            r.kept.dys
        )
        .unwrap();
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn prepare<'a>(config: &'a ExperimentConfig, corpus: &'a Corpus, options: RunOptions) -> Result<Context<'a>> {
    let out = &config.output_dir;
    let cache_dir = out.join("cache").join(config.training_hash());
    fs::create_dir_all(&cache_dir).map_err(|e| Error::io(&cache_dir, e))?;
    fs::write(out.join("config.json"), config.to_json()).map_err(|e| Error::io(out.join("config.json"), e))?;
    write_corpus(&out.join("corpus.csv"), &corpus.rows)?;
    let mut by_patient = Vec::new();
    let mut next = 0;
    for r in &corpus.records {
        by_patient.push((r.patient_id(), (next..next + r.len()).collect::<Vec<_>>()));
        next += r.len();
    }
    Ok(Context {
        config,
        windows: corpus.windows(),
        by_patient,
        cache_dir,
        options,
        trained: AtomicUsize::new(0),
        loaded: AtomicUsize::new(0),
    })
}

/// Trains (or finds in the cache) every member `config` needs, without
/// evaluating. Returns the number trained and the number already cached.
pub fn train_members(config: &ExperimentConfig, options: RunOptions) -> Result<(usize, usize)> {
    config.validate()?;
    let corpus = load_corpus(config)?;
    let ctx = prepare(config, &corpus, options)?;
    let jobs = match config.kind {
        ExperimentKind::CnnLoso | ExperimentKind::EsbDropout => loso_jobs(&ctx)?.1,
        ExperimentKind::CnnSingle | ExperimentKind::EsbDiffpat => subset_jobs(&ctx)?.1,
        ExperimentKind::EsbDiffinit => diffinit_jobs(&ctx)?.1,
        ExperimentKind::Kfold10 => kfold_jobs(&ctx)?.1,
    };
    ctx.obtain(&jobs)?;
    Ok((ctx.trained.load(Ordering::SeqCst), ctx.loaded.load(Ordering::SeqCst)))
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ReportBundle> {
    run_experiment_with(config, RunOptions::default())
}

/// Runs `config` and writes its reports to `config.output_dir`. Trained
/// members are cached under `output_dir/cache`, so an interrupted run picks
/// up where it stopped.
pub fn run_experiment_with(config: &ExperimentConfig, options: RunOptions) -> Result<ReportBundle> {
    config.validate()?;
    let corpus = load_corpus(config)?;
    let ctx = prepare(config, &corpus, options)?;
    let out = &config.output_dir;
    let eval = match config.kind {
        ExperimentKind::CnnLoso => evaluate_loso(&ctx, false)?,
        ExperimentKind::EsbDropout => evaluate_loso(&ctx, true)?,
        ExperimentKind::CnnSingle => evaluate_subsets(&ctx, true)?,
        ExperimentKind::EsbDiffpat => evaluate_subsets(&ctx, false)?,
        ExperimentKind::EsbDiffinit => evaluate_diffinit(&ctx)?,
        ExperimentKind::Kfold10 => evaluate_kfold(&ctx)?,
    };

    let kind = config.kind.as_str();
    report::write_accuracy_table(&out.join("accuracy.csv"), kind, &eval.per_patient)?;
    report::write_patient_scores(&out.join("accuracy_by_patient.csv"), &eval.per_patient)?;
    report::write_member_predictions(&out.join("predictions.csv"), &eval.member_rows)?;
    if config.kind == ExperimentKind::Kfold10 {
        report::write_folds(&out.join("kfold.csv"), &eval.folds)?;
    }
    let (smoothing, confidence) = if eval.predictions.is_empty() {
        (Vec::new(), None)
    } else {
        let smoothing = report::smoothing_sweep(&eval.predictions, &config.smoothing, config.gap_limit)?;
        report::write_smoothing(&out.join("smoothing.csv"), &smoothing)?;
        let confidence =
            report::confidence_report(&eval.predictions, config.confidence_fraction, config.coverage_threshold)?;
        report::write_confidence(out, &confidence)?;
        let smoothed = report::smoothed_labels(&eval.predictions, config.dump_kernel, config.gap_limit)?;
        report::write_aggregated(&out.join("aggregated.csv"), &eval.predictions, &smoothed)?;
        (smoothing, Some(confidence))
    };

    Ok(ReportBundle {
        output_dir: out.clone(),
        kind: config.kind,
        overall: report::overall_accuracy(&eval.per_patient),
        per_patient: eval.per_patient,
        folds: eval.folds,
        predictions: eval.predictions,
        smoothing,
        confidence,
        members_trained: ctx.trained.load(Ordering::SeqCst),
        members_loaded: ctx.loaded.load(Ordering::SeqCst),
    })
}
