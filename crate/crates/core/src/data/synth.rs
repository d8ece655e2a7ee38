//! Seeded synthetic patients.
//!
//! Every minute is a continuous-time model (gravity direction plus linear
//! acceleration components), so the same minute can be rendered on the 60 Hz
//! grid or on a jittered device-rate clock. Minute models are drawn from a
//! per-minute random stream, which keeps minutes independent of the sampling
//! grid and of each other.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution, Normal, Poisson, UnitSphere};
use serde::{Deserialize, Serialize};

use super::PatientRecord;
use crate::error::{Error, Result};
use crate::signal::{
    self, MinuteLabel, PatientId, RawStream, SensorWindow, StateLabel, AXES, DEVICE_RATE_HZ, TARGET_RATE_HZ,
    WINDOW_SAMPLES,
};

/// Per-axis noise of a resting sensor, in G.
const STILL_NOISE: f64 = 0.002;
const MINUTE_S: f64 = 60.0;
/// Random-stream offsets for the per-minute generators.
const NOISE_STREAM: u64 = 1 << 40;
const RAW_NOISE_STREAM: u64 = 2 << 40;

/// Generator parameters for one synthetic patient. Amplitudes are in G.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthProfile {
    pub patient_id: PatientId,
    /// Long-run proportions of OFF, ON and DYS minutes.
    pub state_mix: [f64; 3],
    /// Tremor frequency in Hz, within [4, 6].
    pub tremor_freq: f64,
    pub tremor_amplitude: f64,
    /// RMS of the dyskinetic fluctuation.
    pub dyskinesia_scale: f64,
    /// Frequency band of the dyskinetic fluctuation in Hz.
    pub dyskinesia_band: (f64, f64),
    /// Mean number of pose changes per ON minute.
    pub pose_change_rate: f64,
    /// Peak linear acceleration of a voluntary movement.
    pub movement_scale: f64,
    /// Gain on every dynamic component.
    pub amplitude_factor: f64,
    /// Constant sensor bias added to every sample.
    pub offset: [f64; 3],
    /// Habitual gravity direction in sensor coordinates.
    pub base_orientation: [f64; 3],
    /// Mean minutes between state redraws.
    pub mean_run_minutes: f64,
    pub no_motion_fraction: f64,
    /// Probability that a minute also shows a feature of another state.
    pub confusion: f64,
    pub noise_level: f64,
    pub seed: u64,
}

impl SynthProfile {
    /// Balanced, well-separated patient with no idiosyncrasy.
    pub fn new(patient_id: PatientId, seed: u64) -> Self {
        Self {
            patient_id,
            state_mix: [1.0 / 3.0; 3],
            tremor_freq: 5.0,
            tremor_amplitude: 0.15,
            dyskinesia_scale: 0.15,
            dyskinesia_band: (0.6, 3.0),
            pose_change_rate: 3.0,
            movement_scale: 0.3,
            amplitude_factor: 1.0,
            offset: [0.0; 3],
            base_orientation: [0.0, 0.0, 1.0],
            mean_run_minutes: 22.0,
            no_motion_fraction: 0.0,
            confusion: 0.0,
            noise_level: 0.01,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("synthetic profile {}: {what}", self.patient_id)));
        if self.state_mix.iter().any(|p| !(0.0..=1.0).contains(p))
            || (self.state_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad("state mix must be proportions summing to 1");
        }
        if !(4.0..=6.0).contains(&self.tremor_freq) {
            return bad("tremor frequency outside [4, 6] Hz");
        }
        let (lo, hi) = self.dyskinesia_band;
        if !(lo > 0.0 && hi > lo) {
            return bad("dyskinesia band must be increasing and positive");
        }
        if !(0.0..=1.0).contains(&self.no_motion_fraction) || !(0.0..=1.0).contains(&self.confusion) {
            return bad("fractions must lie in [0, 1]");
        }
        if !(self.mean_run_minutes >= 1.0) {
            return bad("mean run must be at least one minute");
        }
        if norm(self.base_orientation) < 1e-9 {
            return bad("base orientation must be nonzero");
        }
        let amplitudes = [
            self.tremor_amplitude,
            self.dyskinesia_scale,
            self.pose_change_rate,
            self.movement_scale,
            self.amplitude_factor,
            self.noise_level,
        ];
        if amplitudes.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return bad("amplitudes and rates must be finite and nonnegative");
        }
        Ok(())
    }

    /// Mean run length that makes three consecutive minutes agree with
    /// probability `target` under this state mix.
    fn run_for_agreement(mix: [f64; 3], target: f64) -> f64 {
        let diversity = 1.0 - mix.iter().map(|p| p * p).sum::<f64>();
        let redraw = (1.0 - target.sqrt()) / diversity.max(1e-12);
        1.0 / redraw.clamp(1e-9, 1.0)
    }
}

/// State and no-motion flag of one generated minute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MinutePlan {
    pub state: StateLabel,
    pub no_motion: bool,
}

fn plan_minutes(profile: &SynthProfile, minutes: u32) -> Vec<MinutePlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let draw = |rng: &mut ChaCha8Rng| {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in profile.state_mix.iter().enumerate() {
            acc += p;
            if u < acc {
                return StateLabel::CLASSES[i];
            }
        }
        StateLabel::CLASSES[profile.state_mix.iter().rposition(|&p| p > 0.0).unwrap_or(0)]
    };
    let redraw = 1.0 / profile.mean_run_minutes;
    let mut state = draw(&mut rng);
    let mut plan: Vec<MinutePlan> = (0..minutes)
        .map(|m| {
            if m > 0 && rng.gen::<f64>() < redraw {
                state = draw(&mut rng);
            }
            MinutePlan {
                state,
                no_motion: false,
            }
        })
        .collect();
    let still = (profile.no_motion_fraction * minutes as f64).round() as usize;
    for i in index::sample(&mut rng, minutes as usize, still.min(minutes as usize)) {
        plan[i].no_motion = true;
    }
    plan
}

type Vec3 = [f64; 3];

fn norm(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn normalize(v: Vec3) -> Vec3 {
    let n = norm(v);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn scale(v: Vec3, s: f64) -> Vec3 {
    [v[0] * s, v[1] * s, v[2] * s]
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn unit(rng: &mut ChaCha8Rng) -> Vec3 {
    UnitSphere.sample(rng)
}

/// Random unit vector perpendicular to `d`.
fn perpendicular(d: Vec3, rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let u = unit(rng);
        let dot = u[0] * d[0] + u[1] * d[1] + u[2] * d[2];
        let p = add(u, scale(d, -dot));
        if norm(p) > 1e-3 {
            return normalize(p);
        }
    }
}

/// `d` tilted by `angle` radians in a random direction.
fn tilt(d: Vec3, angle: f64, rng: &mut ChaCha8Rng) -> Vec3 {
    let d = normalize(d);
    let e = perpendicular(d, rng);
    add(scale(d, angle.cos()), scale(e, angle.sin()))
}

#[derive(Debug, Clone)]
enum Orientation {
    Fixed(Vec3),
    /// Sigmoid transitions between successive poses: (time, time constant, pose).
    Poses {
        initial: Vec3,
        steps: Vec<(f64, f64, Vec3)>,
    },
    /// Slow wandering around a base direction: (axis, amplitude, frequency, phase).
    Wander {
        base: Vec3,
        terms: Vec<(Vec3, f64, f64, f64)>,
    },
    /// Weighted blend of two orientations; the weight applies to the second.
    Mix(Box<Orientation>, Box<Orientation>, f64),
}

impl Orientation {
    fn at(&self, t: f64) -> Vec3 {
        match self {
            Orientation::Fixed(d) => *d,
            Orientation::Poses { initial, steps } => {
                let mut g = *initial;
                let mut prev = *initial;
                for &(tk, tau, d) in steps {
                    let w = sigmoid((t - tk) / tau);
                    g = add(g, scale(add(d, scale(prev, -1.0)), w));
                    prev = d;
                }
                normalize(g)
            }
            Orientation::Wander { base, terms } => {
                let mut g = *base;
                for &(axis, amp, f, ph) in terms {
                    g = add(g, scale(axis, amp * (2.0 * PI * f * t + ph).sin()));
                }
                normalize(g)
            }
            Orientation::Mix(a, b, w) => normalize(add(scale(a.at(t), 1.0 - w), scale(b.at(t), *w))),
        }
    }
}

#[derive(Debug, Clone)]
enum Component {
    /// Sinusoid gated by smooth bursts `(start, end)`; no bursts means always on.
    Sine {
        amp: Vec3,
        freq: f64,
        phase: f64,
        bursts: Vec<(f64, f64)>,
    },
    /// Accelerate-then-decelerate pulse of a reaching movement.
    Biphasic { centre: f64, width: f64, amp: Vec3 },
    /// Short impact.
    Spike { centre: f64, width: f64, amp: Vec3 },
}

const BURST_EDGE_S: f64 = 0.15;

impl Component {
    fn rescale(&mut self, s: f64) {
        match self {
            Component::Sine { amp, .. } | Component::Biphasic { amp, .. } | Component::Spike { amp, .. } => {
                *amp = scale(*amp, s)
            }
        }
    }

    fn at(&self, t: f64) -> Vec3 {
        match self {
            Component::Sine {
                amp,
                freq,
                phase,
                bursts,
            } => {
                let gate = if bursts.is_empty() {
                    1.0
                } else {
                    bursts
                        .iter()
                        .map(|&(s, e)| sigmoid((t - s) / BURST_EDGE_S) * sigmoid((e - t) / BURST_EDGE_S))
                        .sum()
                };
                scale(*amp, gate * (2.0 * PI * freq * t + phase).sin())
            }
            Component::Biphasic { centre, width, amp } => {
                let u = (t - centre) / width;
                // u·exp(-u²/2) peaks at e^{-1/2}; normalize the peak to 1.
                scale(*amp, u * (-0.5 * u * u).exp() * (0.5f64).exp())
            }
            Component::Spike { centre, width, amp } => {
                let u = (t - centre) / width;
                scale(*amp, (-0.5 * u * u).exp())
            }
        }
    }
}

#[derive(Debug, Clone)]
struct MinuteModel {
    orientation: Orientation,
    components: Vec<Component>,
    noise: f64,
    gain: f64,
    offset: Vec3,
}

impl MinuteModel {
    fn at(&self, t: f64) -> Vec3 {
        let dynamic = self.components.iter().fold([0.0; 3], |acc, c| add(acc, c.at(t)));
        add(add(self.orientation.at(t), self.offset), scale(dynamic, self.gain))
    }
}

/// Non-overlapping bursts covering `coverage` seconds of the minute.
fn bursts(count: usize, coverage: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let free = (MINUTE_S - coverage).max(0.0);
    let mut cuts: Vec<f64> = (0..count).map(|_| rng.gen_range(0.0..=free)).collect();
    cuts.sort_by(f64::total_cmp);
    let mut lengths: Vec<f64> = (0..count).map(|_| rng.gen_range(0.5..1.5)).collect();
    let total: f64 = lengths.iter().sum();
    lengths.iter_mut().for_each(|l| *l *= coverage / total);
    let mut out = Vec::with_capacity(count);
    let mut used = 0.0;
    for (cut, len) in cuts.into_iter().zip(lengths) {
        let start = cut + used;
        out.push((start, start + len));
        used += len;
    }
    out
}

fn tremor(profile: &SynthProfile, g: Vec3, amp: f64, bursts: Vec<(f64, f64)>, rng: &mut ChaCha8Rng) -> Component {
    let jitter = Normal::new(0.0, 0.1).unwrap().sample(rng);
    let dir = normalize(add(g, scale(unit(rng), 0.6)));
    Component::Sine {
        amp: scale(dir, amp),
        freq: (profile.tremor_freq + jitter).clamp(4.0, 6.0),
        phase: rng.gen_range(0.0..2.0 * PI),
        bursts,
    }
}

fn pose_changes(profile: &SynthProfile, count: usize, rng: &mut ChaCha8Rng) -> (Orientation, Vec<Component>) {
    let initial = tilt(profile.base_orientation, rng.gen_range(0.0..0.6), rng);
    let mut times: Vec<f64> = (0..count).map(|_| rng.gen_range(2.0..58.0)).collect();
    times.sort_by(f64::total_cmp);
    let mut steps = Vec::with_capacity(count);
    let mut pulses = Vec::with_capacity(count);
    for t in times {
        let tau = rng.gen_range(0.25..0.6);
        let pose = tilt(profile.base_orientation, rng.gen_range(0.3..1.2), rng);
        steps.push((t, tau, pose));
        pulses.push(Component::Biphasic {
            centre: t,
            width: tau,
            amp: scale(unit(rng), profile.movement_scale * rng.gen_range(0.6..1.4)),
        });
    }
    (Orientation::Poses { initial, steps }, pulses)
}

fn sway(scale_g: f64, freq: (f64, f64), rng: &mut ChaCha8Rng) -> Component {
    Component::Sine {
        amp: scale(unit(rng), scale_g),
        freq: rng.gen_range(freq.0..freq.1),
        phase: rng.gen_range(0.0..2.0 * PI),
        bursts: Vec::new(),
    }
}

/// Orientation and dynamic components typical of `state`.
fn state_dynamics(profile: &SynthProfile, state: StateLabel, rng: &mut ChaCha8Rng) -> (Orientation, Vec<Component>) {
    let mut components = Vec::new();
    let orientation = match state {
        StateLabel::Off => {
            let g = tilt(profile.base_orientation, rng.gen_range(0.0..0.25), rng);
            let n = rng.gen_range(1..=3);
            let coverage = rng.gen_range(0.45..0.85) * MINUTE_S;
            let amp = profile.tremor_amplitude * rng.gen_range(0.7..1.3);
            let b = bursts(n, coverage, rng);
            components.push(tremor(profile, g, amp, b, rng));
            let spikes = Poisson::new(0.8).unwrap().sample(rng) as usize;
            for _ in 0..spikes {
                components.push(Component::Spike {
                    centre: rng.gen_range(0.0..MINUTE_S),
                    width: 0.04,
                    amp: scale(unit(rng), rng.gen_range(0.2..0.6)),
                });
            }
            components.push(sway(0.01, (0.1, 0.4), rng));
            Orientation::Fixed(g)
        }
        StateLabel::On | StateLabel::Unlabeled => {
            let lambda = profile.pose_change_rate.max(1e-3);
            let count = (Poisson::new(lambda).unwrap().sample(rng) as usize).max(1);
            let (orientation, pulses) = pose_changes(profile, count, rng);
            components.extend(pulses);
            components.push(sway(0.3 * profile.movement_scale, (0.2, 0.8), rng));
            orientation
        }
        StateLabel::Dys => {
            let base = tilt(profile.base_orientation, rng.gen_range(0.0..0.4), rng);
            let terms = (0..3)
                .map(|_| {
                    let axis = perpendicular(base, rng);
                    (
                        axis,
                        rng.gen_range(0.2..0.5),
                        rng.gen_range(0.05..0.3),
                        rng.gen_range(0.0..2.0 * PI),
                    )
                })
                .collect();
            let (lo, hi) = profile.dyskinesia_band;
            let raw: Vec<(Vec3, f64, f64, f64)> = (0..12)
                .map(|_| {
                    (
                        unit(rng),
                        rng.gen_range(0.3..1.0),
                        rng.gen_range(lo..hi),
                        rng.gen_range(0.0..2.0 * PI),
                    )
                })
                .collect();
            // Sinusoids of distinct frequency add in power: RMS = sqrt(Σ a²/2).
            let power: f64 = raw.iter().map(|r| r.1 * r.1 / 2.0).sum();
            let rms = profile.dyskinesia_scale * rng.gen_range(0.8..1.2);
            let k = rms / power.sqrt();
            for (dir, a, f, ph) in raw {
                components.push(Component::Sine {
                    amp: scale(dir, a * k),
                    freq: f,
                    phase: ph,
                    bursts: Vec::new(),
                });
            }
            Orientation::Wander { base, terms }
        }
    };
    (orientation, components)
}

fn minute_model(profile: &SynthProfile, minute: u32, plan: MinutePlan) -> MinuteModel {
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    rng.set_stream(1 + minute as u64);
    let rng = &mut rng;
    let mut model = MinuteModel {
        orientation: Orientation::Fixed(normalize(profile.base_orientation)),
        components: Vec::new(),
        noise: profile.noise_level,
        gain: profile.amplitude_factor,
        offset: profile.offset,
    };
    if plan.no_motion {
        model.orientation = Orientation::Fixed(tilt(profile.base_orientation, rng.gen_range(0.0..0.3), rng));
        model.noise = STILL_NOISE;
        return model;
    }
    let confused = rng.gen::<f64>() < profile.confusion;
    let (orientation, components) = state_dynamics(profile, plan.state, rng);
    model.orientation = orientation;
    model.components = components;
    if confused {
        // Blend in another state; past a weight of one half the decoy dominates.
        let others: Vec<StateLabel> = StateLabel::CLASSES
            .iter()
            .copied()
            .filter(|&s| s != plan.state)
            .collect();
        let decoy = others[rng.gen_range(0..others.len())];
        let w = rng.gen_range(0.3..0.8);
        let (orientation, components) = state_dynamics(profile, decoy, rng);
        model.orientation = Orientation::Mix(Box::new(model.orientation), Box::new(orientation), w);
        model.components.iter_mut().for_each(|c| c.rescale(1.0 - w));
        model.components.extend(components.into_iter().map(|mut c| {
            c.rescale(w);
            c
        }));
    }
    model
}

fn noise_rng(profile: &SynthProfile, stream: u64, minute: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    rng.set_stream(stream + minute as u64);
    rng
}

/// Samples one planned minute at the given offsets (seconds from the start
/// of the minute), adding white sensor noise from `noise`.
fn sample_minute(model: &MinuteModel, offsets: &[f64], noise: &mut ChaCha8Rng) -> Vec<Vec3> {
    let gauss = Normal::new(0.0, 1.0).unwrap();
    offsets
        .iter()
        .map(|&t| {
            let clean = model.at(t);
            let mut out = [0.0; AXES];
            for (o, c) in out.iter_mut().zip(clean) {
                *o = c + model.noise * gauss.sample(noise);
            }
            out
        })
        .collect()
}

/// One minute of the given state rendered on the 60 Hz grid, independent of
/// the profile's state sequence.
pub fn render_minute(profile: &SynthProfile, minute: u32, plan: MinutePlan) -> SensorWindow {
    let model = minute_model(profile, minute, plan);
    let offsets: Vec<f64> = (0..WINDOW_SAMPLES).map(|k| k as f64 / TARGET_RATE_HZ).collect();
    let rows = sample_minute(&model, &offsets, &mut noise_rng(profile, NOISE_STREAM, minute));
    SensorWindow::new(rows.concat(), minute, plan.state, profile.patient_id).expect("3600 rows of 3 axes")
}

/// A patient day of `minutes` one-minute windows on the 60 Hz grid.
pub fn synth_generate(profile: &SynthProfile, minutes: u32) -> Result<PatientRecord> {
    profile.validate()?;
    if minutes == 0 {
        return Err(Error::Precondition("synthetic record needs at least one minute".into()));
    }
    let windows = plan_minutes(profile, minutes)
        .into_iter()
        .enumerate()
        .map(|(m, plan)| render_minute(profile, m as u32, plan))
        .collect();
    PatientRecord::new(profile.patient_id, windows)
}

/// The same day as a device-rate stream with up to 1 ms clock jitter, plus
/// its minute labels. A final sample at the end of the last minute makes the
/// stream span whole minutes.
pub fn synth_raw_stream(profile: &SynthProfile, minutes: u32) -> Result<(RawStream, Vec<MinuteLabel>)> {
    profile.validate()?;
    if minutes == 0 {
        return Err(Error::Precondition("synthetic record needs at least one minute".into()));
    }
    let per_minute = (MINUTE_S * DEVICE_RATE_HZ).round() as usize;
    let mut times = Vec::with_capacity(per_minute * minutes as usize + 1);
    let mut samples = Vec::with_capacity(times.capacity());
    let mut labels = Vec::with_capacity(minutes as usize);
    let plans = plan_minutes(profile, minutes);
    for (m, plan) in plans.iter().enumerate() {
        let mut rng = noise_rng(profile, RAW_NOISE_STREAM, m as u32);
        let offsets: Vec<f64> = (0..per_minute)
            .map(|k| {
                let jitter = if m == 0 && k == 0 {
                    0.0
                } else {
                    rng.gen_range(-1e-3..1e-3)
                };
                k as f64 / DEVICE_RATE_HZ + jitter
            })
            .collect();
        let model = minute_model(profile, m as u32, *plan);
        samples.extend(sample_minute(&model, &offsets, &mut rng));
        times.extend(offsets.iter().map(|o| m as f64 * MINUTE_S + o));
        labels.push(MinuteLabel {
            minute: m as u32,
            state: plan.state,
            severity: 0,
        });
    }
    let last = minutes - 1;
    let model = minute_model(profile, last, plans[last as usize]);
    let mut rng = noise_rng(profile, RAW_NOISE_STREAM, minutes);
    samples.extend(sample_minute(&model, &[MINUTE_S], &mut rng));
    times.push(minutes as f64 * MINUTE_S);
    Ok((RawStream::new(times, samples, DEVICE_RATE_HZ)?, labels))
}

/// Writes `patient_<id>_raw.csv` and `patient_<id>_labels.csv` into `dir`.
pub fn write_synth_patient(profile: &SynthProfile, minutes: u32, dir: &Path) -> Result<()> {
    let (stream, labels) = synth_raw_stream(profile, minutes)?;
    let id = profile.patient_id;
    signal::write_raw_csv(&dir.join(format!("patient_{id}_raw.csv")), &stream)?;
    signal::write_label_csv(&dir.join(format!("patient_{id}_labels.csv")), &labels)
}

/// A synthetic cohort: per-patient profiles drawn around shared defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub patients: u32,
    pub minutes: u32,
    pub seed: u64,
    /// 0 gives identical patients; 1 gives strong amplitude, offset,
    /// orientation and frequency differences between patients.
    pub idiosyncrasy: f64,
    /// Dirichlet concentration of the per-patient state mix; `None` gives
    /// balanced mixes. Small values give skewed, often single-state patients.
    pub mix_concentration: Option<f64>,
    /// Three-minute label agreement the run lengths are tuned for.
    pub target_agreement: f64,
    pub no_motion_fraction: f64,
    pub confusion: f64,
    pub tremor_amplitude: f64,
    pub dyskinesia_scale: f64,
    pub movement_scale: f64,
    pub noise_level: f64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        let base = SynthProfile::new(PatientId(0), 0);
        Self {
            patients: 10,
            minutes: 60,
            seed: 0,
            idiosyncrasy: 0.0,
            mix_concentration: None,
            target_agreement: 0.913,
            no_motion_fraction: 0.0,
            confusion: 0.0,
            tremor_amplitude: base.tremor_amplitude,
            dyskinesia_scale: base.dyskinesia_scale,
            movement_scale: base.movement_scale,
            noise_level: base.noise_level,
        }
    }
}

impl CohortSpec {
    pub fn profiles(&self) -> Result<Vec<SynthProfile>> {
        if !(0.0..=1.0).contains(&self.idiosyncrasy) {
            return Err(Error::Config("idiosyncrasy must lie in [0, 1]".into()));
        }
        if !(self.target_agreement > 0.0 && self.target_agreement < 1.0) {
            return Err(Error::Config("target agreement must lie in (0, 1)".into()));
        }
        let dirichlet = match self.mix_concentration {
            Some(a) if a > 0.0 => Some(Dirichlet::new(&[a; 3]).map_err(|e| Error::Config(e.to_string()))?),
            Some(_) => return Err(Error::Config("mix concentration must be positive".into())),
            None => None,
        };
        let s = self.idiosyncrasy;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let profiles: Vec<SynthProfile> = (0..self.patients)
            .map(|p| {
                let mut prof = SynthProfile::new(PatientId(p), rng.gen());
                if let Some(d) = &dirichlet {
                    let mix: Vec<f64> = d.sample(&mut rng);
                    prof.state_mix = [mix[0], mix[1], 1.0 - mix[0] - mix[1]];
                    prof.state_mix[2] = prof.state_mix[2].max(0.0);
                }
                let spread = |rng: &mut ChaCha8Rng, ratio: f64| ratio.powf(s * rng.gen_range(-1.0..1.0));
                prof.amplitude_factor = spread(&mut rng, 1.7);
                prof.tremor_freq = (5.0 + s * rng.gen_range(-1.0..1.0)).clamp(4.0, 6.0);
                prof.tremor_amplitude = self.tremor_amplitude * spread(&mut rng, 1.3);
                prof.dyskinesia_scale = self.dyskinesia_scale * spread(&mut rng, 1.3);
                let centre = 1.5 * spread(&mut rng, 1.6);
                prof.dyskinesia_band = (0.4 * centre, 2.0 * centre);
                prof.pose_change_rate = 3.0 * spread(&mut rng, 1.8);
                prof.movement_scale = self.movement_scale * spread(&mut rng, 1.3);
                prof.offset = [0.0; 3].map(|_| 0.15 * s * rng.gen_range(-1.0..1.0));
                prof.base_orientation = tilt([0.0, 0.0, 1.0], s * rng.gen_range(0.0..PI), &mut rng);
                prof.no_motion_fraction = self.no_motion_fraction;
                prof.confusion = self.confusion;
                prof.noise_level = self.noise_level;
                prof.mean_run_minutes = SynthProfile::run_for_agreement(prof.state_mix, self.target_agreement);
                prof
            })
            .collect();
        for p in &profiles {
            p.validate()?;
        }
        Ok(profiles)
    }

    pub fn generate(&self) -> Result<Vec<PatientRecord>> {
        self.profiles()?
            .iter()
            .map(|p| synth_generate(p, self.minutes))
            .collect()
    }
}
