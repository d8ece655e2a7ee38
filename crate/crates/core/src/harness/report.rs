//! Report tables and their CSV forms.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::ensemble::{
    confidence_rank, interpolate_confident, smooth, ConfidenceMode, EnsemblePrediction, SmoothingKernel,
};
use crate::error::{Error, Result};
use crate::net::CLASSES;
use crate::signal::{PatientId, StateLabel};

/// Accuracy of one patient's kept windows. For kinds that average several
/// independent models the accuracy is that average.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatientScore {
    pub patient: PatientId,
    pub windows: usize,
    pub accuracy: f64,
}

/// Window-weighted mean accuracy.
pub fn overall_accuracy(scores: &[PatientScore]) -> f64 {
    let windows: usize = scores.iter().map(|s| s.windows).sum();
    if windows == 0 {
        return 0.0;
    }
    scores.iter().map(|s| s.accuracy * s.windows as f64).sum::<f64>() / windows as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldScore {
    pub fold: usize,
    pub windows: usize,
    pub correct: usize,
}

impl FoldScore {
    pub fn accuracy(&self) -> f64 {
        ratio(self.correct, self.windows)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub(crate) fn is_correct(p: &EnsemblePrediction) -> bool {
    p.window.label.class_index() == Some(p.aggregated_label)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingScore {
    pub kernel: SmoothingKernel,
    pub windows: usize,
    pub correct: usize,
}

impl SmoothingScore {
    pub fn accuracy(&self) -> f64 {
        ratio(self.correct, self.windows)
    }
}

/// Predictions grouped by patient, each group in minute order. Returns
/// indices into `preds`.
pub(crate) fn patient_sequences(preds: &[EnsemblePrediction]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by_key(|&i| (preds[i].window.patient, preds[i].window.minute));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if preds[g[0]].window.patient == preds[i].window.patient => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Smoothed label of every prediction, in input order.
pub fn smoothed_labels(preds: &[EnsemblePrediction], kernel: SmoothingKernel, gap_limit: u32) -> Result<Vec<usize>> {
    let mut out = vec![0; preds.len()];
    for group in patient_sequences(preds) {
        let seq: Vec<(u32, [f64; CLASSES])> = group
            .iter()
            .map(|&i| (preds[i].window.minute, preds[i].summed_logits))
            .collect();
        for (&i, label) in group.iter().zip(smooth(&seq, kernel, gap_limit)?) {
            out[i] = label;
        }
    }
    Ok(out)
}

pub fn smoothing_sweep(
    preds: &[EnsemblePrediction],
    kernels: &[SmoothingKernel],
    gap_limit: u32,
) -> Result<Vec<SmoothingScore>> {
    kernels
        .iter()
        .map(|&kernel| {
            let labels = smoothed_labels(preds, kernel, gap_limit)?;
            let correct = preds
                .iter()
                .zip(&labels)
                .filter(|(p, &l)| p.window.label.class_index() == Some(l))
                .count();
            Ok(SmoothingScore {
                kernel,
                windows: preds.len(),
                correct,
            })
        })
        .collect()
}

/// Accuracy of the predictions ranked within one confidence band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceBand {
    pub mode: ConfidenceMode,
    pub index: usize,
    pub lo_fraction: f64,
    pub hi_fraction: f64,
    pub windows: usize,
    pub correct: usize,
}

impl ConfidenceBand {
    pub fn accuracy(&self) -> f64 {
        ratio(self.correct, self.windows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopShare {
    pub patient: PatientId,
    pub all: usize,
    pub top: usize,
}

impl TopShare {
    pub fn share(&self) -> f64 {
        ratio(self.top, self.all)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpolationScore {
    pub patient: PatientId,
    pub windows: usize,
    pub share: f64,
    /// Whether the patient's top-set share reaches the coverage threshold.
    pub eligible: bool,
    /// `None` when the patient has no prediction in the top set.
    pub correct: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceReport {
    pub fraction: f64,
    pub bands: Vec<ConfidenceBand>,
    /// Top-set membership per patient under logit confidence.
    pub top_share: Vec<TopShare>,
    pub interpolation: Vec<InterpolationScore>,
}

impl ConfidenceReport {
    pub fn bands_for(&self, mode: ConfidenceMode) -> impl Iterator<Item = &ConfidenceBand> {
        self.bands.iter().filter(move |b| b.mode == mode)
    }

    /// Pooled interpolation accuracy over eligible patients.
    pub fn interpolation_accuracy(&self) -> Option<f64> {
        let rows: Vec<_> = self
            .interpolation
            .iter()
            .filter(|r| r.eligible && r.correct.is_some())
            .collect();
        let windows: usize = rows.iter().map(|r| r.windows).sum();
        (windows > 0).then(|| ratio(rows.iter().filter_map(|r| r.correct).sum(), windows))
    }
}

/// Band boundaries: band `i` holds ranks `[floor(i f N), floor((i + 1) f N))`,
/// the last band running to `N`.
fn band_edges(n: usize, fraction: f64) -> Vec<usize> {
    let bands = ((1.0 / fraction) - 1e-9).ceil().max(1.0) as usize;
    let mut edges: Vec<usize> = (0..bands)
        .map(|i| ((i as f64 * fraction * n as f64) + 1e-9).floor() as usize)
        .map(|e| e.min(n))
        .collect();
    edges.push(n);
    edges
}

/// Accuracy by confidence band for every ranking mode, per-patient top-set
/// shares and interpolation accuracy, all relative to `fraction`.
pub fn confidence_report(
    preds: &[EnsemblePrediction],
    fraction: f64,
    coverage_threshold: f64,
) -> Result<ConfidenceReport> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Precondition(format!(
            "confidence fraction {fraction} outside (0, 1]"
        )));
    }
    let n = preds.len();
    let correct: Vec<bool> = preds.iter().map(is_correct).collect();
    let edges = band_edges(n, fraction);
    let mut bands = Vec::new();
    let mut logit_ranking = None;
    for mode in ConfidenceMode::ALL {
        let ranking = confidence_rank(preds, mode);
        for (index, w) in edges.windows(2).enumerate() {
            let members = &ranking.order[w[0]..w[1]];
            bands.push(ConfidenceBand {
                mode,
                index,
                lo_fraction: index as f64 * fraction,
                hi_fraction: ((index + 1) as f64 * fraction).min(1.0),
                windows: members.len(),
                correct: members.iter().filter(|&&i| correct[i]).count(),
            });
        }
        if mode == ConfidenceMode::Logit {
            logit_ranking = Some(ranking);
        }
    }
    let ranking = logit_ranking.expect("logit mode ranked");

    let mut top_set = vec![false; n];
    for &i in ranking.top(fraction) {
        top_set[i] = true;
    }
    let groups = patient_sequences(preds);
    let top_share: Vec<TopShare> = groups
        .iter()
        .map(|g| TopShare {
            patient: preds[g[0]].window.patient,
            all: g.len(),
            top: g.iter().filter(|&&i| top_set[i]).count(),
        })
        .collect();

    let interpolated = if n > 0 && ranking.top_count(fraction) > 0 {
        Some(interpolate_confident(preds, &ranking, fraction)?)
    } else {
        None
    };
    let interpolation = groups
        .iter()
        .zip(&top_share)
        .map(|(g, share)| {
            let correct = interpolated.as_ref().and_then(|interp| {
                g.iter()
                    .map(|&i| interp.labels[i].map(|l| usize::from(preds[i].window.label.class_index() == Some(l))))
                    .sum::<Option<usize>>()
            });
            InterpolationScore {
                patient: share.patient,
                windows: g.len(),
                share: share.share(),
                eligible: share.share() + 1e-12 >= coverage_threshold,
                correct,
            }
        })
        .collect();
    Ok(ConfidenceReport {
        fraction,
        bands,
        top_share,
        interpolation,
    })
}

/// Whether band accuracies never increase from the most to the least
/// confident band. Empty bands are skipped.
pub fn bands_nonincreasing<'a>(bands: impl IntoIterator<Item = &'a ConfidenceBand>) -> bool {
    let acc: Vec<f64> = bands
        .into_iter()
        .filter(|b| b.windows > 0)
        .map(|b| b.accuracy())
        .collect();
    acc.windows(2).all(|w| w[1] <= w[0] + 1e-12)
}

fn pct(x: f64) -> String {
    format!("{:.4}", 100.0 * x)
}

fn write(path: &Path, text: String) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Wide table: one column per patient, then `All`.
pub fn write_accuracy_table(path: &Path, experiment: &str, scores: &[PatientScore]) -> Result<()> {
    let mut s = String::from("experiment");
    for sc in scores {
        write!(s, ",{}", sc.patient).unwrap();
    }
    s.push_str(",All\n");
    s.push_str(experiment);
    for sc in scores {
        write!(s, ",{}", pct(sc.accuracy)).unwrap();
    }
    writeln!(s, ",{}", pct(overall_accuracy(scores))).unwrap();
    write(path, s)
}

pub fn write_patient_scores(path: &Path, scores: &[PatientScore]) -> Result<()> {
    let mut s = String::from("patient,windows,accuracy_pct\n");
    for sc in scores {
        writeln!(s, "{},{},{}", sc.patient, sc.windows, pct(sc.accuracy)).unwrap();
    }
    let total: usize = scores.iter().map(|s| s.windows).sum();
    writeln!(s, "All,{total},{}", pct(overall_accuracy(scores))).unwrap();
    write(path, s)
}

pub fn write_folds(path: &Path, folds: &[FoldScore]) -> Result<()> {
    let mut s = String::from("fold,windows,correct,accuracy_pct\n");
    for f in folds {
        writeln!(s, "{},{},{},{}", f.fold, f.windows, f.correct, pct(f.accuracy())).unwrap();
    }
    let mean = folds.iter().map(FoldScore::accuracy).sum::<f64>() / folds.len().max(1) as f64;
    let windows: usize = folds.iter().map(|f| f.windows).sum();
    let correct: usize = folds.iter().map(|f| f.correct).sum();
    writeln!(s, "Avg.,{windows},{correct},{}", pct(mean)).unwrap();
    write(path, s)
}

pub fn write_smoothing(path: &Path, scores: &[SmoothingScore]) -> Result<()> {
    let mut s = String::from("kernel_min,windows,correct,accuracy_pct\n");
    for sc in scores {
        writeln!(s, "{},{},{},{}", sc.kernel, sc.windows, sc.correct, pct(sc.accuracy())).unwrap();
    }
    write(path, s)
}

pub fn write_confidence(dir: &Path, report: &ConfidenceReport) -> Result<()> {
    let mut s = String::from("mode,band,lo_pct,hi_pct,windows,correct,accuracy_pct\n");
    for b in &report.bands {
        writeln!(
            s,
            "{},{},{:.1},{:.1},{},{},{}",
            b.mode.as_str(),
            b.index,
            100.0 * b.lo_fraction,
            100.0 * b.hi_fraction,
            b.windows,
            b.correct,
            pct(b.accuracy())
        )
        .unwrap();
    }
    write(&dir.join("confidence_bands.csv"), s)?;

    let mut s = String::from("patient,all,top_conf,top_share_pct\n");
    for t in &report.top_share {
        writeln!(s, "{},{},{},{:.1}", t.patient, t.all, t.top, 100.0 * t.share()).unwrap();
    }
    let all: usize = report.top_share.iter().map(|t| t.all).sum();
    let top: usize = report.top_share.iter().map(|t| t.top).sum();
    writeln!(s, "All,{all},{top},{:.1}", 100.0 * ratio(top, all)).unwrap();
    write(&dir.join("top_share.csv"), s)?;

    let mut s = String::from("patient,windows,top_share_pct,eligible,correct,accuracy_pct\n");
    for r in &report.interpolation {
        let (correct, acc) = match r.correct {
            Some(c) => (c.to_string(), pct(ratio(c, r.windows))),
            None => ("UNCOVERED".into(), "UNCOVERED".into()),
        };
        writeln!(
            s,
            "{},{},{:.1},{},{correct},{acc}",
            r.patient,
            r.windows,
            100.0 * r.share,
            r.eligible
        )
        .unwrap();
    }
    let summary = report.interpolation_accuracy().map_or_else(|| "NA".into(), pct);
    writeln!(s, "Eligible,,,,,{summary}").unwrap();
    write(&dir.join("interpolation.csv"), s)
}

/// One row per member prediction.
pub struct MemberRow {
    pub patient: PatientId,
    pub minute: u32,
    pub label: StateLabel,
    pub model_id: usize,
    pub logits: [f64; CLASSES],
}

pub fn write_member_predictions(path: &Path, rows: &[MemberRow]) -> Result<()> {
    let mut s = String::from("patient,minute,true,model_id,logit_off,logit_on,logit_dys\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{:.9},{:.9},{:.9}",
            r.patient,
            r.minute,
            r.label.as_str(),
            r.model_id,
            r.logits[0],
            r.logits[1],
            r.logits[2]
        )
        .unwrap();
    }
    write(path, s)
}

/// Aggregated predictions in (patient, minute) order, with the smoothed label
/// and the logit-confidence rank (0 = most confident).
pub fn write_aggregated(path: &Path, preds: &[EnsemblePrediction], smoothed: &[usize]) -> Result<()> {
    let ranks = confidence_rank(preds, ConfidenceMode::Logit).ranks();
    let mut s =
        String::from("patient,minute,true,pred,agreement,logit_off,logit_on,logit_dys,smoothed_pred,confidence_rank\n");
    let class = |c: usize| StateLabel::CLASSES[c].as_str();
    for group in patient_sequences(preds) {
        for i in group {
            let p = &preds[i];
            writeln!(
                s,
                "{},{},{},{},{:.6},{:.9},{:.9},{:.9},{},{}",
                p.window.patient,
                p.window.minute,
                p.window.label.as_str(),
                class(p.aggregated_label),
                p.agreement,
                p.summed_logits[0],
                p.summed_logits[1],
                p.summed_logits[2],
                class(smoothed[i]),
                ranks[i]
            )
            .unwrap();
        }
    }
    write(path, s)
}
