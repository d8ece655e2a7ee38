//! Ensembles of networks and what is done with their outputs: aggregation
//! across members, smoothing across minutes and ranking by confidence.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PatientRecord;
use crate::error::{Error, Result};
use crate::net::{self, argmax, NetConfig, NetworkParams, Prediction, TrainTrace, CLASSES};
use crate::signal::{PatientId, SensorWindow, StateLabel};

/// A trained network and the patients it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    /// Index of the subset (or seed offset) the member was built from.
    pub index: usize,
    pub train_patients: Vec<PatientId>,
    pub params: NetworkParams,
    pub trace: TrainTrace,
}

/// Trains one network on every window of the listed patients, seeded by
/// `config.seed + index`.
pub fn train_member(
    records: &[PatientRecord],
    patients: &[PatientId],
    index: usize,
    config: &NetConfig,
) -> Result<Member> {
    let windows: Vec<&SensorWindow> = records
        .iter()
        .filter(|r| patients.contains(&r.patient_id()))
        .flat_map(|r| r.windows())
        .collect();
    train_on_windows(&windows, patients.to_vec(), index, config)
}

/// Trains one network on `windows`, seeded by `config.seed + index`.
pub fn train_on_windows(
    windows: &[&SensorWindow],
    train_patients: Vec<PatientId>,
    index: usize,
    config: &NetConfig,
) -> Result<Member> {
    let config = NetConfig {
        seed: config.seed.wrapping_add(index as u64),
        ..config.clone()
    };
    let mut params = net::build(&config)?;
    let trace = net::train(&mut params, windows, &config)?;
    Ok(Member {
        index,
        train_patients,
        params,
        trace,
    })
}

/// One network per patient subset, trained in parallel and returned in
/// subset order. Members that fail to train are logged and left out.
pub fn train_subbag(records: &[PatientRecord], subsets: &[Vec<PatientId>], config: &NetConfig) -> Vec<Member> {
    let results: Vec<Result<Member>> = subsets
        .par_iter()
        .enumerate()
        .map(|(i, subset)| train_member(records, subset, i, config))
        .collect();
    results
        .into_iter()
        .enumerate()
        .filter_map(|(i, r)| match r {
            Ok(m) => Some(m),
            Err(e) => {
                log::error!("ensemble member {i} failed and is excluded: {e}");
                None
            }
        })
        .collect()
}

/// `count` networks trained on the same windows from seeds
/// `config.seed .. config.seed + count`.
pub fn ensemble_diffinit(windows: &[&SensorWindow], count: usize, config: &NetConfig) -> Result<Vec<Member>> {
    let mut patients: Vec<PatientId> = windows.iter().map(|w| w.patient_id).collect();
    patients.sort_unstable();
    patients.dedup();
    (0..count)
        .into_par_iter()
        .map(|i| train_on_windows(windows, patients.clone(), i, config))
        .collect()
}

/// Copies of `model` with a fixed random fraction of convolution and head
/// weights set to zero. Member `i` draws its mask from stream `i` of `seed`.
pub fn ensemble_dropout(
    model: &NetworkParams,
    drop_fraction: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<NetworkParams>> {
    if !(0.0..=1.0).contains(&drop_fraction) {
        return Err(Error::Precondition(format!(
            "drop fraction {drop_fraction} outside [0, 1]"
        )));
    }
    Ok((0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut member = model.clone();
            for t in member.connection_weights_mut() {
                for w in t.data_mut() {
                    if rng.gen::<f64>() < drop_fraction {
                        *w = 0.0;
                    }
                }
            }
            member
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AggregationMode {
    Majority,
    LogitSum,
    SoftmaxSum,
}

/// Identifies the minute a prediction belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowRef {
    pub patient: PatientId,
    pub minute: u32,
    pub label: StateLabel,
}

impl WindowRef {
    pub fn of(w: &SensorWindow) -> Self {
        Self {
            patient: w.patient_id,
            minute: w.minute_index,
            label: w.label,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub window: WindowRef,
    pub per_model_logits: Vec<[f64; CLASSES]>,
    pub per_model_labels: Vec<usize>,
    pub aggregated_label: usize,
    /// Fraction of members voting for the aggregated label.
    pub agreement: f64,
    pub summed_logits: [f64; CLASSES],
    pub summed_softmax: [f64; CLASSES],
}

fn majority(labels: &[usize]) -> usize {
    let mut votes = [0usize; CLASSES];
    for &l in labels {
        votes[l] += 1;
    }
    // Lowest index wins ties.
    let mut best = 0;
    for c in 1..CLASSES {
        if votes[c] > votes[best] {
            best = c;
        }
    }
    best
}

/// Combines member outputs for one window. All summaries are filled in
/// whatever the mode; the mode only picks the aggregated label.
pub fn aggregate(window: WindowRef, outputs: &[Prediction], mode: AggregationMode) -> Result<EnsemblePrediction> {
    if outputs.is_empty() {
        return Err(Error::InsufficientData("no member outputs to aggregate".into()));
    }
    let mut summed_logits = [0.0; CLASSES];
    let mut summed_softmax = [0.0; CLASSES];
    for p in outputs {
        for c in 0..CLASSES {
            summed_logits[c] += p.logits[c];
            summed_softmax[c] += p.softmax[c];
        }
    }
    let per_model_labels: Vec<usize> = outputs.iter().map(|p| p.label).collect();
    let aggregated_label = match mode {
        AggregationMode::Majority => majority(&per_model_labels),
        AggregationMode::LogitSum => argmax(&summed_logits),
        AggregationMode::SoftmaxSum => argmax(&summed_softmax),
    };
    let votes = per_model_labels.iter().filter(|&&l| l == aggregated_label).count();
    Ok(EnsemblePrediction {
        window,
        per_model_logits: outputs.iter().map(|p| p.logits).collect(),
        per_model_labels,
        aggregated_label,
        agreement: votes as f64 / outputs.len() as f64,
        summed_logits,
        summed_softmax,
    })
}

/// Temporal window of a uniform smoothing kernel, in labelled minutes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SmoothingKernel {
    /// 0 or an odd width; 0 and 1 leave labels unchanged.
    Minutes(usize),
    /// The whole day.
    Infinite,
}

impl SmoothingKernel {
    /// Kernel widths of the standard sweep.
    pub const SWEEP: [SmoothingKernel; 7] = [
        SmoothingKernel::Minutes(0),
        SmoothingKernel::Minutes(5),
        SmoothingKernel::Minutes(11),
        SmoothingKernel::Minutes(31),
        SmoothingKernel::Minutes(61),
        SmoothingKernel::Minutes(181),
        SmoothingKernel::Infinite,
    ];

    pub fn validate(self) -> Result<()> {
        match self {
            SmoothingKernel::Minutes(w) if w > 0 && w % 2 == 0 => {
                Err(Error::Config(format!("smoothing window {w} must be 0 or odd")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for SmoothingKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SmoothingKernel::Minutes(w) => write!(f, "{w}"),
            SmoothingKernel::Infinite => write!(f, "Inf"),
        }
    }
}

impl FromStr for SmoothingKernel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let kernel = match s.trim() {
            "Inf" | "inf" | "infinite" => SmoothingKernel::Infinite,
            other => SmoothingKernel::Minutes(other.parse().map_err(|_| Error::Parse {
                source_name: "smoothing kernel".into(),
                reason: format!("expected a width or \"Inf\", got {other:?}"),
            })?),
        };
        kernel.validate()?;
        Ok(kernel)
    }
}

impl Serialize for SmoothingKernel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            SmoothingKernel::Minutes(w) => s.serialize_u64(*w as u64),
            SmoothingKernel::Infinite => s.serialize_str("Inf"),
        }
    }
}

impl<'de> Deserialize<'de> for SmoothingKernel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Width(usize),
            Name(String),
        }
        let kernel = match Raw::deserialize(d)? {
            Raw::Width(w) => SmoothingKernel::Minutes(w),
            Raw::Name(n) => return n.parse().map_err(serde::de::Error::custom),
        };
        kernel.validate().map_err(serde::de::Error::custom)?;
        Ok(kernel)
    }
}

/// Default largest run of missing minutes a finite kernel may reach across.
pub const DEFAULT_GAP_LIMIT: u32 = 10;

/// Smoothed labels for one patient's minute-ordered `(minute, logits)` sequence.
///
/// A finite kernel averages the logit vectors of the `w` neighbouring entries
/// centred on each minute, truncated at the ends, and takes the argmax. The
/// sequence is split wherever more than `gap_limit` minutes are missing, and
/// no kernel reaches across a split. The infinite kernel labels every minute
/// with the argmax of the whole-day sum.
pub fn smooth(sequence: &[(u32, [f64; CLASSES])], kernel: SmoothingKernel, gap_limit: u32) -> Result<Vec<usize>> {
    if sequence.is_empty() {
        return Err(Error::InsufficientData("empty sequence to smooth".into()));
    }
    kernel.validate()?;
    if sequence.windows(2).any(|p| p[1].0 <= p[0].0) {
        return Err(Error::Precondition(
            "smoothing needs strictly increasing minutes".into(),
        ));
    }
    let width = match kernel {
        SmoothingKernel::Infinite => {
            let mut total = [0.0; CLASSES];
            for (_, l) in sequence {
                for c in 0..CLASSES {
                    total[c] += l[c];
                }
            }
            return Ok(vec![argmax(&total); sequence.len()]);
        }
        SmoothingKernel::Minutes(w) if w <= 1 => return Ok(sequence.iter().map(|(_, l)| argmax(l)).collect()),
        SmoothingKernel::Minutes(w) => w,
    };
    let half = width / 2;
    let mut out = Vec::with_capacity(sequence.len());
    let mut start = 0;
    while start < sequence.len() {
        let mut end = start + 1;
        while end < sequence.len() && sequence[end].0 - sequence[end - 1].0 - 1 <= gap_limit {
            end += 1;
        }
        let segment = &sequence[start..end];
        // Prefix sums make each window O(1).
        let mut prefix = vec![[0.0; CLASSES]; segment.len() + 1];
        for (i, (_, l)) in segment.iter().enumerate() {
            for c in 0..CLASSES {
                prefix[i + 1][c] = prefix[i][c] + l[c];
            }
        }
        for i in 0..segment.len() {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(segment.len());
            let n = (hi - lo) as f64;
            let mean: Vec<f64> = (0..CLASSES).map(|c| (prefix[hi][c] - prefix[lo][c]) / n).collect();
            out.push(argmax(&mean));
        }
        start = end;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConfidenceMode {
    Agreement,
    Logit,
    Softmax,
}

impl ConfidenceMode {
    pub const ALL: [ConfidenceMode; 3] = [
        ConfidenceMode::Agreement,
        ConfidenceMode::Logit,
        ConfidenceMode::Softmax,
    ];

    pub fn score(self, p: &EnsemblePrediction) -> f64 {
        let max = |v: &[f64; CLASSES]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        match self {
            ConfidenceMode::Agreement => p.agreement,
            ConfidenceMode::Logit => max(&p.summed_logits),
            ConfidenceMode::Softmax => max(&p.summed_softmax),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConfidenceMode::Agreement => "agreement",
            ConfidenceMode::Logit => "logit",
            ConfidenceMode::Softmax => "softmax",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceRanking {
    pub mode: ConfidenceMode,
    /// Score of each prediction, in input order.
    pub scores: Vec<f64>,
    /// Prediction indices from most to least confident.
    pub order: Vec<usize>,
}

impl ConfidenceRanking {
    /// Number of predictions in the top `fraction`: `floor(fraction * N)`.
    pub fn top_count(&self, fraction: f64) -> usize {
        let n = self.order.len();
        // The small allowance keeps e.g. 0.29 * 100 from flooring to 28.
        (((fraction * n as f64) + 1e-9).floor() as usize).min(n)
    }

    pub fn top(&self, fraction: f64) -> &[usize] {
        &self.order[..self.top_count(fraction)]
    }

    /// Rank position (0 = most confident) of every prediction, in input order.
    pub fn ranks(&self) -> Vec<usize> {
        let mut ranks = vec![0; self.order.len()];
        for (r, &i) in self.order.iter().enumerate() {
            ranks[i] = r;
        }
        ranks
    }
}

/// Sorts predictions by descending confidence; equal scores are ordered by
/// patient, then minute, then input position.
pub fn confidence_rank(preds: &[EnsemblePrediction], mode: ConfidenceMode) -> ConfidenceRanking {
    let scores: Vec<f64> = preds.iter().map(|p| mode.score(p)).collect();
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| preds[a].window.patient.cmp(&preds[b].window.patient))
            .then_with(|| preds[a].window.minute.cmp(&preds[b].window.minute))
            .then(a.cmp(&b))
    });
    ConfidenceRanking { mode, scores, order }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interpolation {
    /// Label per prediction, in input order; `None` for patients without any
    /// selected prediction.
    pub labels: Vec<Option<usize>>,
    /// Whether each prediction was itself selected.
    pub selected: Vec<bool>,
    pub uncovered: Vec<PatientId>,
}

/// Labels every minute with the aggregated label of the nearest selected
/// minute of the same patient; equidistant ties go to the earlier minute.
pub fn interpolate_confident(
    preds: &[EnsemblePrediction],
    ranking: &ConfidenceRanking,
    top_fraction: f64,
) -> Result<Interpolation> {
    let mut selected = vec![false; preds.len()];
    for &i in ranking.top(top_fraction) {
        selected[i] = true;
    }
    if !selected.iter().any(|&s| s) {
        return Err(Error::InsufficientData(format!(
            "top {top_fraction} of {} predictions selects nothing",
            preds.len()
        )));
    }
    let mut patients: Vec<PatientId> = preds.iter().map(|p| p.window.patient).collect();
    patients.sort_unstable();
    patients.dedup();
    let mut labels = vec![None; preds.len()];
    let mut uncovered = Vec::new();
    for patient in patients {
        let members: Vec<usize> = (0..preds.len())
            .filter(|&i| preds[i].window.patient == patient)
            .collect();
        let mut anchors: Vec<(u32, usize)> = members
            .iter()
            .filter(|&&i| selected[i])
            .map(|&i| (preds[i].window.minute, preds[i].aggregated_label))
            .collect();
        if anchors.is_empty() {
            uncovered.push(patient);
            continue;
        }
        anchors.sort_unstable();
        for &i in &members {
            let m = preds[i].window.minute;
            let after = anchors.partition_point(|a| a.0 < m);
            let nearest = match (after.checked_sub(1).map(|j| anchors[j]), anchors.get(after)) {
                (Some(before), Some(next)) => if next.0 - m < m - before.0 { next } else { &before }.1,
                (Some(before), None) => before.1,
                (None, Some(next)) => next.1,
                (None, None) => unreachable!("anchors is nonempty"),
            };
            labels[i] = Some(nearest);
        }
    }
    Ok(Interpolation {
        labels,
        selected,
        uncovered,
    })
}

/// Orders predictions by (patient, minute).
pub fn by_patient_minute(a: &EnsemblePrediction, b: &EnsemblePrediction) -> Ordering {
    (a.window.patient, a.window.minute).cmp(&(b.window.patient, b.window.minute))
}
