//! Patient records, cross-validation folds, patient-subset sampling, cohort
//! statistics and the reference cohort tables.

mod synth;

pub use synth::{
    render_minute, synth_generate, synth_raw_stream, write_synth_patient, CohortSpec, MinutePlan, SynthProfile,
};

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{self, PatientId, SensorWindow, StateLabel};

/// Minutes per motor state.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMinutes {
    pub off: usize,
    pub on: usize,
    pub dys: usize,
}

impl ClassMinutes {
    pub fn total(&self) -> usize {
        self.off + self.on + self.dys
    }

    pub fn get(&self, class: usize) -> usize {
        [self.off, self.on, self.dys][class]
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.off, self.on, self.dys]
    }

    fn add_label(&mut self, label: StateLabel) {
        match label {
            StateLabel::Off => self.off += 1,
            StateLabel::On => self.on += 1,
            StateLabel::Dys => self.dys += 1,
            StateLabel::Unlabeled => {}
        }
    }
}

impl std::ops::Add for ClassMinutes {
    type Output = ClassMinutes;
    fn add(self, o: ClassMinutes) -> ClassMinutes {
        ClassMinutes {
            off: self.off + o.off,
            on: self.on + o.on,
            dys: self.dys + o.dys,
        }
    }
}

/// One patient's day as time-ordered one-minute windows.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    patient_id: PatientId,
    windows: Vec<SensorWindow>,
    state_minutes: ClassMinutes,
    unlabeled_minutes: usize,
}

impl PatientRecord {
    /// Sorts windows by minute and tallies labels. Every window must belong
    /// to `patient_id` and minute indices must be distinct.
    pub fn new(patient_id: PatientId, mut windows: Vec<SensorWindow>) -> Result<Self> {
        if let Some(w) = windows.iter().find(|w| w.patient_id != patient_id) {
            return Err(Error::Precondition(format!(
                "window of patient {} in record of patient {patient_id}",
                w.patient_id
            )));
        }
        windows.sort_by_key(|w| w.minute_index);
        if windows.windows(2).any(|p| p[0].minute_index == p[1].minute_index) {
            return Err(Error::Precondition(format!(
                "duplicate minute index in record of patient {patient_id}"
            )));
        }
        let mut state_minutes = ClassMinutes::default();
        let mut unlabeled_minutes = 0;
        for w in &windows {
            if w.label == StateLabel::Unlabeled {
                unlabeled_minutes += 1;
            }
            state_minutes.add_label(w.label);
        }
        Ok(Self {
            patient_id,
            windows,
            state_minutes,
            unlabeled_minutes,
        })
    }

    pub fn patient_id(&self) -> PatientId {
        self.patient_id
    }

    pub fn windows(&self) -> &[SensorWindow] {
        &self.windows
    }

    pub fn into_windows(self) -> Vec<SensorWindow> {
        self.windows
    }

    pub fn state_minutes(&self) -> ClassMinutes {
        self.state_minutes
    }

    pub fn unlabeled_minutes(&self) -> usize {
        self.unlabeled_minutes
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Drops no-motion minutes, returning the filtered record and the number removed.
    pub fn without_no_motion(self, policy: &signal::NoMotionPolicy) -> Result<(Self, usize)> {
        let id = self.patient_id;
        let outcome = signal::filter_no_motion(self.windows, policy);
        Ok((Self::new(id, outcome.kept)?, outcome.removed.len()))
    }
}

/// Reads a raw accelerometer CSV and its minute labels, resamples to 60 Hz
/// and cuts the stream into minutes.
pub fn load_patient(raw_csv: &Path, label_csv: &Path, patient_id: PatientId) -> Result<PatientRecord> {
    let raw = signal::read_raw_csv(raw_csv, signal::DEVICE_RATE_HZ)?;
    let labels = signal::read_label_csv(label_csv)?;
    let uniform = signal::resample(&raw, signal::TARGET_RATE_HZ)?;
    PatientRecord::new(patient_id, signal::windowize(&uniform, &labels, patient_id)?)
}

pub fn class_distribution<'a>(minutes: impl IntoIterator<Item = &'a ClassMinutes>) -> ClassMinutes {
    minutes.into_iter().fold(ClassMinutes::default(), |acc, m| acc + *m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FoldKind {
    Loso,
    KFold(usize),
    PatientSubset,
}

/// One train/test split. Patient-level folds fill the patient lists;
/// window-level folds fill the index lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub kind: FoldKind,
    pub test_patients: Vec<PatientId>,
    pub train_patients: Vec<PatientId>,
    pub test_indices: Vec<usize>,
    pub train_indices: Vec<usize>,
    pub seed: u64,
}

pub fn loso_folds(patients: &[PatientId]) -> Result<Vec<FoldPlan>> {
    if patients.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "leave-one-subject-out needs at least 2 patients, got {}",
            patients.len()
        )));
    }
    let distinct: BTreeSet<_> = patients.iter().collect();
    if distinct.len() != patients.len() {
        return Err(Error::Precondition("duplicate patient in fold population".into()));
    }
    Ok(patients
        .iter()
        .map(|&test| FoldPlan {
            kind: FoldKind::Loso,
            test_patients: vec![test],
            train_patients: patients.iter().copied().filter(|&p| p != test).collect(),
            test_indices: Vec::new(),
            train_indices: Vec::new(),
            seed: 0,
        })
        .collect())
}

/// Shuffled window-level partition into `k` folds whose sizes differ by at most one.
pub fn kfold_windows(window_count: usize, k: usize, seed: u64) -> Result<Vec<FoldPlan>> {
    if k < 2 {
        return Err(Error::Precondition(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > window_count {
        return Err(Error::InsufficientData(format!(
            "{k} folds requested for {window_count} windows"
        )));
    }
    let mut order: Vec<usize> = (0..window_count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (window_count / k, window_count % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut test: Vec<usize> = order[start..start + size].to_vec();
        let mut train: Vec<usize> = order[..start].iter().chain(&order[start + size..]).copied().collect();
        test.sort_unstable();
        train.sort_unstable();
        folds.push(FoldPlan {
            kind: FoldKind::KFold(k),
            test_patients: Vec::new(),
            train_patients: Vec::new(),
            test_indices: test,
            train_indices: train,
            seed,
        });
        start += size;
    }
    Ok(folds)
}

/// `count` independent uniform draws of `subset_size` distinct patients.
/// Draws are independent, so the same subset may appear more than once.
/// Each subset is returned sorted.
pub fn sample_patient_subsets(
    patients: &[PatientId],
    subset_size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<PatientId>>> {
    if subset_size > patients.len() {
        return Err(Error::Precondition(format!(
            "subset size {subset_size} exceeds population {}",
            patients.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let mut s: Vec<PatientId> = patients.choose_multiple(&mut rng, subset_size).copied().collect();
            s.sort_unstable();
            s
        })
        .collect())
}

/// Indices of the subsets that leave `test_patient` out.
pub fn eligible_models(subsets: &[Vec<PatientId>], test_patient: PatientId) -> Result<Vec<usize>> {
    let idx: Vec<usize> = subsets
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.contains(&test_patient))
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return Err(Error::NoEligibleModels(test_patient.0));
    }
    Ok(idx)
}

/// Fraction of sliding runs of `run_length` consecutive minutes whose labels
/// are all identical. Runs that span a missing minute are not counted.
pub fn consecutive_agreement(record: &PatientRecord, run_length: usize) -> Result<f64> {
    let (agree, runs) = agreement_counts(record.windows(), run_length)?;
    if runs == 0 {
        return Err(Error::InsufficientData(format!(
            "no run of {run_length} consecutive minutes in patient {}",
            record.patient_id()
        )));
    }
    Ok(agree as f64 / runs as f64)
}

/// Pooled agreement over several records: agreeing runs over all runs.
pub fn pooled_consecutive_agreement(records: &[PatientRecord], run_length: usize) -> Result<f64> {
    let (mut agree, mut runs) = (0, 0);
    for r in records {
        let (a, n) = agreement_counts(r.windows(), run_length)?;
        agree += a;
        runs += n;
    }
    if runs == 0 {
        return Err(Error::InsufficientData("no complete runs in any record".into()));
    }
    Ok(agree as f64 / runs as f64)
}

fn agreement_counts(windows: &[SensorWindow], run_length: usize) -> Result<(usize, usize)> {
    if run_length == 0 {
        return Err(Error::Precondition("run length must be positive".into()));
    }
    if windows.len() < run_length {
        return Err(Error::InsufficientData(format!(
            "{} windows for runs of {run_length}",
            windows.len()
        )));
    }
    let (mut agree, mut runs) = (0, 0);
    for run in windows.windows(run_length) {
        let first = run[0].minute_index;
        let contiguous = run
            .iter()
            .enumerate()
            .all(|(j, w)| w.minute_index as usize == first as usize + j);
        if contiguous {
            runs += 1;
            if run.iter().all(|w| w.label == run[0].label) {
                agree += 1;
            }
        }
    }
    Ok((agree, runs))
}

/// Per-patient state minutes of the 30-patient reference cohort.
pub fn reference_cohort_minutes() -> Vec<(PatientId, ClassMinutes)> {
    #[derive(Deserialize)]
    struct Row {
        patient: u32,
        off_min: usize,
        on_min: usize,
        dys_min: usize,
    }
    let mut reader = csv::Reader::from_reader(include_str!("../../fixtures/cohort_minutes.csv").as_bytes());
    reader
        .deserialize::<Row>()
        .map(|r| {
            let r = r.expect("embedded fixture is well-formed");
            (
                PatientId(r.patient),
                ClassMinutes {
                    off: r.off_min,
                    on: r.on_min,
                    dys: r.dys_min,
                },
            )
        })
        .collect()
}

/// Reference per-patient counts of all kept predictions and of those in the
/// top 20% by logit confidence, with the reference share.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct TopShareRow {
    pub patient: u32,
    pub all: usize,
    pub top_conf: usize,
    pub top_share_pct: f64,
}

pub fn reference_top_share() -> Vec<TopShareRow> {
    let mut reader = csv::Reader::from_reader(include_str!("../../fixtures/top_share.csv").as_bytes());
    reader
        .deserialize()
        .map(|r| r.expect("embedded fixture is well-formed"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: u32) -> Vec<PatientId> {
        (0..n).map(PatientId).collect()
    }

    fn labelled(labels: &[StateLabel], minutes: &[u32]) -> PatientRecord {
        let windows = labels
            .iter()
            .zip(minutes)
            .map(|(&l, &m)| SensorWindow::new(vec![0.0; 10_800], m, l, PatientId(0)).unwrap())
            .collect();
        PatientRecord::new(PatientId(0), windows).unwrap()
    }

    #[test]
    fn record_sorts_and_counts() {
        use StateLabel::*;
        let r = labelled(&[On, Off, Unlabeled, Dys, On], &[4, 0, 2, 3, 1]);
        let minutes: Vec<u32> = r.windows().iter().map(|w| w.minute_index).collect();
        assert_eq!(minutes, [0, 1, 2, 3, 4]);
        assert_eq!(r.state_minutes(), ClassMinutes { off: 1, on: 2, dys: 1 });
        assert_eq!(r.unlabeled_minutes(), 1);
    }

    #[test]
    fn record_rejects_duplicates_and_foreign_windows() {
        let w = |m, p| SensorWindow::new(vec![0.0; 10_800], m, StateLabel::On, PatientId(p)).unwrap();
        assert!(PatientRecord::new(PatientId(0), vec![w(1, 0), w(1, 0)]).is_err());
        assert!(PatientRecord::new(PatientId(0), vec![w(1, 0), w(2, 1)]).is_err());
    }

    #[test]
    fn loso_examples() {
        let folds = loso_folds(&ids(30)).unwrap();
        assert_eq!(folds.len(), 30);
        let tests: BTreeSet<_> = folds.iter().map(|f| f.test_patients[0]).collect();
        assert_eq!(tests.len(), 30);
        for f in &folds {
            assert_eq!(f.train_patients.len(), 29);
            assert!(!f.train_patients.contains(&f.test_patients[0]));
        }
        let two = loso_folds(&ids(2)).unwrap();
        assert!(two.iter().all(|f| f.train_patients.len() == 1));
        assert!(loso_folds(&ids(1)).is_err());
    }

    #[test]
    fn kfold_examples() {
        let folds = kfold_windows(100, 10, 3).unwrap();
        assert_eq!(folds.len(), 10);
        assert!(folds.iter().all(|f| f.test_indices.len() == 10));
        assert_eq!(folds, kfold_windows(100, 10, 3).unwrap());
        assert_ne!(folds, kfold_windows(100, 10, 4).unwrap());
        assert!(kfold_windows(5, 6, 0).is_err());
        assert!(kfold_windows(5, 1, 0).is_err());
    }

    #[test]
    fn subset_examples() {
        let s = sample_patient_subsets(&ids(30), 15, 100, 9).unwrap();
        assert_eq!(s.len(), 100);
        for sub in &s {
            assert_eq!(sub.iter().collect::<BTreeSet<_>>().len(), 15);
        }
        assert_eq!(s, sample_patient_subsets(&ids(30), 15, 100, 9).unwrap());
        let full = sample_patient_subsets(&ids(7), 7, 5, 1).unwrap();
        assert!(full.iter().all(|sub| *sub == ids(7)));
        assert!(sample_patient_subsets(&ids(3), 4, 1, 0).is_err());
    }

    #[test]
    fn subset_inclusion_is_unbiased() {
        let s = sample_patient_subsets(&ids(30), 15, 10_000, 2024).unwrap();
        let mut counts = [0usize; 30];
        for sub in &s {
            for p in sub {
                counts[p.0 as usize] += 1;
            }
        }
        for (p, &c) in counts.iter().enumerate() {
            let freq = c as f64 / 10_000.0;
            assert!((freq - 0.5).abs() <= 0.02, "patient {p}: {freq}");
        }
    }

    #[test]
    fn eligible_examples() {
        let s = sample_patient_subsets(&ids(30), 15, 100, 5).unwrap();
        for p in ids(30) {
            let e = eligible_models(&s, p).unwrap();
            assert!((30..=70).contains(&e.len()), "{p}: {}", e.len());
            assert!(e.iter().all(|&i| !s[i].contains(&p)));
        }
        let all_contain = vec![ids(3), ids(3)];
        assert!(matches!(
            eligible_models(&all_contain, PatientId(1)),
            Err(Error::NoEligibleModels(1))
        ));

        let s = sample_patient_subsets(&ids(6), 5, 40, 1).unwrap();
        let missing_3 = s.iter().filter(|sub| !sub.contains(&PatientId(3))).count();
        assert_eq!(eligible_models(&s, PatientId(3)).unwrap().len(), missing_3);
    }

    #[test]
    fn reference_cohort_distribution() {
        let fixture = reference_cohort_minutes();
        assert_eq!(fixture.len(), 30);
        let d = class_distribution(fixture.iter().map(|(_, m)| m));
        assert_eq!((d.off, d.on, d.dys, d.total()), (2303, 3815, 2543, 8661));
        assert_eq!(
            fixture[10].1,
            ClassMinutes {
                off: 0,
                on: 0,
                dys: 162
            }
        );
        assert_eq!(class_distribution([]), ClassMinutes::default());
    }

    #[test]
    fn top_share_totals_match_cohort() {
        let cohort = reference_cohort_minutes();
        let top = reference_top_share();
        assert_eq!(top.iter().map(|r| r.all).sum::<usize>(), 8661);
        assert_eq!(top.iter().map(|r| r.top_conf).sum::<usize>(), 1732);
        for (row, (id, m)) in top.iter().zip(&cohort) {
            assert_eq!(row.patient, id.0);
            assert_eq!(row.all, m.total());
        }
    }

    #[test]
    fn agreement_examples() {
        use StateLabel::*;
        let m: Vec<u32> = (0..6).collect();
        assert_eq!(consecutive_agreement(&labelled(&[On; 6], &m), 3).unwrap(), 1.0);
        let alt = labelled(&[Off, On, Off, On, Off, On], &m);
        assert_eq!(consecutive_agreement(&alt, 3).unwrap(), 0.0);
        let steps = labelled(&[Off, Off, Off, On, On, On], &m);
        assert_eq!(consecutive_agreement(&steps, 3).unwrap(), 0.5);
        assert!(consecutive_agreement(&labelled(&[On, On], &[0, 1]), 3).is_err());
    }

    #[test]
    fn agreement_skips_runs_across_gaps() {
        use StateLabel::*;
        let r = labelled(&[On, On, Off, Off, Off], &[0, 1, 5, 6, 7]);
        assert_eq!(consecutive_agreement(&r, 3).unwrap(), 1.0);
        let gappy = labelled(&[On, On, On], &[0, 2, 4]);
        assert!(consecutive_agreement(&gappy, 3).is_err());
    }

    proptest! {
        #[test]
        fn kfold_partitions(n in 2usize..300, k in 2usize..12, seed in any::<u64>()) {
            prop_assume!(k <= n);
            let folds = kfold_windows(n, k, seed).unwrap();
            let mut seen = vec![0usize; n];
            let sizes: Vec<usize> = folds.iter().map(|f| f.test_indices.len()).collect();
            for f in &folds {
                prop_assert_eq!(f.test_indices.len() + f.train_indices.len(), n);
                let test: BTreeSet<_> = f.test_indices.iter().collect();
                prop_assert!(f.train_indices.iter().all(|i| !test.contains(i)));
                for &i in &f.test_indices { seen[i] += 1; }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }

        #[test]
        fn loso_disjoint(n in 2u32..40) {
            for f in loso_folds(&ids(n)).unwrap() {
                prop_assert!(!f.train_patients.contains(&f.test_patients[0]));
                prop_assert_eq!(f.train_patients.len() + 1, n as usize);
            }
        }
    }
}
