//! Raw accelerometer streams to labelled one-minute windows.
//!
//! Streams are resampled onto a uniform 60 Hz grid by linear interpolation,
//! cut into non-overlapping 3600-sample minutes, and minutes whose motion
//! statistic falls below the no-motion threshold are set aside.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling rate of the wrist band the recordings come from.
pub const DEVICE_RATE_HZ: f64 = 62.5;
/// Rate every stream is resampled to before windowing.
pub const TARGET_RATE_HZ: f64 = 60.0;
pub const WINDOW_SAMPLES: usize = 3600;
pub const AXES: usize = 3;
/// Default no-motion threshold on the magnitude variance, in G².
pub const NO_MOTION_THRESHOLD: f64 = 2.75e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PatientId(pub u32);

impl fmt::Display for PatientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Motor state annotated for one minute. Class indices are fixed: OFF 0, ON 1, DYS 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StateLabel {
    Off,
    On,
    Dys,
    Unlabeled,
}

impl StateLabel {
    pub const CLASSES: [StateLabel; 3] = [StateLabel::Off, StateLabel::On, StateLabel::Dys];
    pub const CLASS_COUNT: usize = 3;

    pub fn class_index(self) -> Option<usize> {
        match self {
            StateLabel::Off => Some(0),
            StateLabel::On => Some(1),
            StateLabel::Dys => Some(2),
            StateLabel::Unlabeled => None,
        }
    }

    pub fn from_class_index(index: usize) -> Option<Self> {
        Self::CLASSES.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StateLabel::Off => "OFF",
            StateLabel::On => "ON",
            StateLabel::Dys => "DYS",
            StateLabel::Unlabeled => "UNLABELED",
        }
    }
}

impl fmt::Display for StateLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StateLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "OFF" => Ok(StateLabel::Off),
            "ON" => Ok(StateLabel::On),
            "DYS" => Ok(StateLabel::Dys),
            "UNLABELED" => Ok(StateLabel::Unlabeled),
            other => Err(Error::Parse {
                source_name: "state label".into(),
                reason: format!("unknown state {other:?}"),
            }),
        }
    }
}

/// Timestamped triaxial acceleration in G.
#[derive(Debug, Clone, PartialEq)]
pub struct RawStream {
    timestamps: Vec<f64>,
    samples: Vec<[f64; AXES]>,
    pub nominal_rate: f64,
}

impl RawStream {
    pub fn new(timestamps: Vec<f64>, samples: Vec<[f64; AXES]>, nominal_rate: f64) -> Result<Self> {
        if timestamps.len() != samples.len() {
            return Err(Error::shape("raw stream", timestamps.len(), samples.len()));
        }
        if timestamps.windows(2).any(|w| !(w[1] >= w[0])) {
            return Err(Error::Precondition("timestamps must be non-decreasing".into()));
        }
        if timestamps.iter().any(|t| !t.is_finite()) || samples.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("raw stream contains non-finite values".into()));
        }
        Ok(Self {
            timestamps,
            samples,
            nominal_rate,
        })
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn samples(&self) -> &[[f64; AXES]] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// True when consecutive timestamps are `1 / rate` apart (to 1e-6 relative).
    pub fn is_uniform_at(&self, rate: f64) -> bool {
        let dt = 1.0 / rate;
        self.timestamps
            .windows(2)
            .all(|w| ((w[1] - w[0]) - dt).abs() <= 1e-6 * dt)
    }
}

/// Linear interpolation onto the uniform grid `first + k / target_rate`
/// covering `[first, last]`.
pub fn resample(stream: &RawStream, target_rate: f64) -> Result<RawStream> {
    if stream.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "resampling needs at least 2 samples, got {}",
            stream.len()
        )));
    }
    if !(target_rate > 0.0) {
        return Err(Error::Precondition("target rate must be positive".into()));
    }
    let ts = &stream.timestamps;
    let xs = &stream.samples;
    let first = ts[0];
    let span = ts[ts.len() - 1] - first;
    let count = (span * target_rate + 1e-9).floor() as usize + 1;

    let mut out_t = Vec::with_capacity(count);
    let mut out_x = Vec::with_capacity(count);
    let mut seg = 0;
    for k in 0..count {
        let t = first + k as f64 / target_rate;
        while seg + 2 < ts.len() && ts[seg + 1] <= t {
            seg += 1;
        }
        let (t0, t1) = (ts[seg], ts[seg + 1]);
        let sample = if t1 > t0 {
            let a = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
            let (x0, x1) = (xs[seg], xs[seg + 1]);
            [
                x0[0] + a * (x1[0] - x0[0]),
                x0[1] + a * (x1[1] - x0[1]),
                x0[2] + a * (x1[2] - x0[2]),
            ]
        } else {
            xs[seg + 1]
        };
        out_t.push(t);
        out_x.push(sample);
    }
    RawStream::new(out_t, out_x, target_rate)
}

/// One minute of acceleration at 60 Hz: 3600 rows of (x, y, z) in G, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorWindow {
    values: Vec<f64>,
    pub minute_index: u32,
    pub label: StateLabel,
    pub patient_id: PatientId,
}

impl SensorWindow {
    pub fn new(values: Vec<f64>, minute_index: u32, label: StateLabel, patient_id: PatientId) -> Result<Self> {
        if values.len() != WINDOW_SAMPLES * AXES {
            return Err(Error::shape("sensor window", WINDOW_SAMPLES * AXES, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("sensor window contains non-finite values".into()));
        }
        Ok(Self {
            values,
            minute_index,
            label,
            patient_id,
        })
    }

    /// Row-major `3600 x 3` values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn rows(&self) -> impl Iterator<Item = [f64; AXES]> + '_ {
        self.values.chunks_exact(AXES).map(|r| [r[0], r[1], r[2]])
    }

    pub fn magnitudes(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows().map(|[x, y, z]| (x * x + y * y + z * z).sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinuteLabel {
    pub minute: u32,
    pub state: StateLabel,
    /// Accepted for format compatibility, never used.
    pub severity: u8,
}

/// Cuts a uniform 60 Hz stream into consecutive 3600-sample minutes and
/// attaches labels by minute index. Minutes without a label are UNLABELED;
/// a trailing partial minute is dropped.
pub fn windowize(stream: &RawStream, labels: &[MinuteLabel], patient_id: PatientId) -> Result<Vec<SensorWindow>> {
    if !stream.is_uniform_at(TARGET_RATE_HZ) {
        return Err(Error::Precondition(format!(
            "windowing needs a uniform {TARGET_RATE_HZ} Hz stream"
        )));
    }
    let first_minute = stream
        .timestamps
        .first()
        .map(|t| (t / 60.0 + 1e-9).floor() as u32)
        .unwrap_or(0);
    stream
        .samples
        .chunks_exact(WINDOW_SAMPLES)
        .enumerate()
        .map(|(k, chunk)| {
            let minute = first_minute + k as u32;
            let label = labels
                .iter()
                .find(|l| l.minute == minute)
                .map(|l| l.state)
                .unwrap_or(StateLabel::Unlabeled);
            SensorWindow::new(chunk.iter().flatten().copied().collect(), minute, label, patient_id)
        })
        .collect()
}

/// Population variance of the per-sample Euclidean magnitude, in G².
pub fn magnitude_variance(window: &SensorWindow) -> f64 {
    let n = WINDOW_SAMPLES as f64;
    let mean = window.magnitudes().sum::<f64>() / n;
    window.magnitudes().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n
}

/// Mean of the three per-axis population variances, in G².
pub fn mean_axis_variance(window: &SensorWindow) -> f64 {
    let n = WINDOW_SAMPLES as f64;
    (0..AXES)
        .map(|a| {
            let axis = || window.values.iter().skip(a).step_by(AXES);
            let mean = axis().sum::<f64>() / n;
            axis().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
        })
        .sum::<f64>()
        / AXES as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionStatistic {
    MagnitudeVariance,
    MeanAxisVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoMotionPolicy {
    pub variance_threshold: f64,
    pub statistic: MotionStatistic,
}

impl Default for NoMotionPolicy {
    fn default() -> Self {
        Self {
            variance_threshold: NO_MOTION_THRESHOLD,
            statistic: MotionStatistic::MagnitudeVariance,
        }
    }
}

impl NoMotionPolicy {
    pub fn with_threshold(variance_threshold: f64) -> Result<Self> {
        if !(variance_threshold > 0.0) {
            return Err(Error::Config("no-motion threshold must be positive".into()));
        }
        Ok(Self {
            variance_threshold,
            ..Self::default()
        })
    }

    pub fn statistic_of(&self, window: &SensorWindow) -> f64 {
        match self.statistic {
            MotionStatistic::MagnitudeVariance => magnitude_variance(window),
            MotionStatistic::MeanAxisVariance => mean_axis_variance(window),
        }
    }

    /// Strictly below the threshold counts as no motion.
    pub fn is_no_motion(&self, window: &SensorWindow) -> bool {
        self.statistic_of(window) < self.variance_threshold
    }
}

/// A minute set aside by the no-motion filter; reported as "no motion" at runtime.
#[derive(Debug, Clone, PartialEq)]
pub struct NoMotionWindow {
    pub window: SensorWindow,
    pub statistic: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<SensorWindow>,
    pub removed: Vec<NoMotionWindow>,
}

pub fn filter_no_motion(windows: Vec<SensorWindow>, policy: &NoMotionPolicy) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for window in windows {
        let statistic = policy.statistic_of(&window);
        if statistic < policy.variance_threshold {
            out.removed.push(NoMotionWindow { window, statistic });
        } else {
            out.kept.push(window);
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRow {
    t: f64,
    ax: f64,
    ay: f64,
    az: f64,
}

/// Reads a `t,ax,ay,az` CSV (seconds, G).
pub fn read_raw_csv(path: &Path, nominal_rate: f64) -> Result<RawStream> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_open_error(path, e))?;
    let mut ts = Vec::new();
    let mut xs = Vec::new();
    for row in reader.deserialize::<RawRow>() {
        let row = row?;
        ts.push(row.t);
        xs.push([row.ax, row.ay, row.az]);
    }
    RawStream::new(ts, xs, nominal_rate)
}

pub fn write_raw_csv(path: &Path, stream: &RawStream) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_open_error(path, e))?;
    for (t, [ax, ay, az]) in stream.timestamps.iter().zip(&stream.samples) {
        writer.serialize(RawRow {
            t: *t,
            ax: *ax,
            ay: *ay,
            az: *az,
        })?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    minute: u32,
    state: String,
    severity: u8,
}

/// Reads a `minute,state,severity` CSV. Severity must be 0–4 and is otherwise ignored.
pub fn read_label_csv(path: &Path) -> Result<Vec<MinuteLabel>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_open_error(path, e))?;
    let mut out = Vec::new();
    for row in reader.deserialize::<LabelRow>() {
        let row = row?;
        if row.severity > 4 {
            return Err(Error::Parse {
                source_name: path.display().to_string(),
                reason: format!("severity {} outside 0-4", row.severity),
            });
        }
        out.push(MinuteLabel {
            minute: row.minute,
            state: row.state.parse()?,
            severity: row.severity,
        });
    }
    Ok(out)
}

pub fn write_label_csv(path: &Path, labels: &[MinuteLabel]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_open_error(path, e))?;
    for l in labels {
        writer.serialize(LabelRow {
            minute: l.minute,
            state: l.state.as_str().to_string(),
            severity: l.severity,
        })?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn csv_open_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            source_name: path.display().to_string(),
            reason: format!("{other:?}"),
        },
    }
}
