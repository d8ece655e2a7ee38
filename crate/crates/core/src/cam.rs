//! Class activation maps over the time axis of the final feature map.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{NetworkParams, CLASSES, FEATURE_EXTENT};
use crate::signal::{SensorWindow, StateLabel, AXES, TARGET_RATE_HZ, WINDOW_SAMPLES};
use crate::tensor::Tensor;

/// Per-class attention along the 27 feature positions and its 3600-sample
/// upsampling.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassActivationMap {
    /// `values[c][x]`
    pub values: [Vec<f64>; CLASSES],
    pub upsampled: [Vec<f64>; CLASSES],
    pub logits: [f64; CLASSES],
    pub class_labels: [StateLabel; CLASSES],
}

/// CAM of every class for one window, using the inference path:
/// `CAM_c(x) = sum_k W[c, k] * F[k, x]`.
pub fn compute_cam(params: &NetworkParams, window: &SensorWindow) -> Result<ClassActivationMap> {
    let out = params.forward(window)?;
    let values = cam_values(&params.head_weight, &out.feature_map)?;
    let upsampled = std::array::from_fn(|c| upsample_cam(&values[c], WINDOW_SAMPLES));
    Ok(ClassActivationMap {
        values,
        upsampled,
        logits: out.logits,
        class_labels: StateLabel::CLASSES,
    })
}

/// Head-weighted channel sums of a `[1, C, X, 1]` feature map, per class.
pub fn cam_values(head_weight: &Tensor, feature_map: &Tensor) -> Result<[Vec<f64>; CLASSES]> {
    let [n, channels, extent, w] = feature_map.dims4()?;
    if n != 1 || w != 1 || head_weight.shape() != [CLASSES, channels] {
        return Err(Error::shape(
            "class activation map",
            format!("[1, C, X, 1] features with a [{CLASSES}, C] head"),
            format!("{:?} with {:?}", feature_map.shape(), head_weight.shape()),
        ));
    }
    debug_assert_eq!(extent, FEATURE_EXTENT.0);
    let features = feature_map.data();
    let weights = head_weight.data();
    Ok(std::array::from_fn(|c| {
        (0..extent)
            .map(|x| {
                (0..channels)
                    .map(|k| weights[c * channels + k] * features[k * extent + x])
                    .sum()
            })
            .collect()
    }))
}

/// Linear interpolation of `values` onto `target_len` evenly spaced points
/// with both endpoints pinned.
pub fn upsample_cam(values: &[f64], target_len: usize) -> Vec<f64> {
    match (values.len(), target_len) {
        (_, 0) => Vec::new(),
        (0, _) => vec![0.0; target_len],
        (1, _) => vec![values[0]; target_len],
        (_, 1) => vec![values[0]],
        (n, len) => {
            let scale = (n - 1) as f64 / (len - 1) as f64;
            (0..len)
                .map(|i| {
                    if i == len - 1 {
                        return values[n - 1];
                    }
                    let pos = i as f64 * scale;
                    let lo = (pos.floor() as usize).min(n - 2);
                    let frac = pos - lo as f64;
                    values[lo] + frac * (values[lo + 1] - values[lo])
                })
                .collect()
        }
    }
}

/// Rescales to [0, 1]; a constant input maps to all zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect()
}

const SVG_HEIGHT: f64 = 300.0;
const AXIS_COLORS: [&str; AXES] = ["red", "green", "blue"];

/// Writes `path` as an SVG of the three signal axes over a background whose
/// brightness follows the normalized CAM of `class`, and
/// `path` with extension `csv` holding the raw upsampled maps.
pub fn export_overlay(window: &SensorWindow, cam: &ClassActivationMap, class: usize, path: &Path) -> Result<()> {
    if class >= CLASSES {
        return Err(Error::LabelOutOfRange {
            label: class,
            classes: CLASSES,
        });
    }
    let width = WINDOW_SAMPLES;
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{SVG_HEIGHT}" viewBox="0 0 {width} {SVG_HEIGHT}">"#
    )
    .unwrap();
    writeln!(
        svg,
        "<title>patient {} minute {} class {}</title>",
        window.patient_id,
        window.minute_index,
        StateLabel::CLASSES[class].as_str()
    )
    .unwrap();

    // Background: grey level per column, merged into runs of equal shade.
    let shades: Vec<u8> = min_max_normalize(&cam.upsampled[class])
        .iter()
        .map(|v| (40.0 + 215.0 * v).round() as u8)
        .collect();
    let mut start = 0;
    while start < shades.len() {
        let mut end = start + 1;
        while end < shades.len() && shades[end] == shades[start] {
            end += 1;
        }
        let g = shades[start];
        writeln!(
            svg,
            r#"<rect x="{start}" y="0" width="{}" height="{SVG_HEIGHT}" fill="rgb({g},{g},{g})"/>"#,
            end - start
        )
        .unwrap();
        start = end;
    }

    let values = window.values();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    for (axis, color) in AXIS_COLORS.iter().enumerate() {
        let mut points = String::new();
        for (t, row) in window.rows().enumerate() {
            let y = SVG_HEIGHT * (1.0 - (row[axis] - lo) / span);
            write!(points, "{t},{y:.2} ").unwrap();
        }
        writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1" points="{}"/>"#,
            points.trim_end()
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg).map_err(|e| Error::io(path, e))?;

    let sidecar = path.with_extension("csv");
    let mut csv = String::from("t,cam_off,cam_on,cam_dys\n");
    for i in 0..WINDOW_SAMPLES {
        writeln!(
            csv,
            "{:.6},{:.9},{:.9},{:.9}",
            i as f64 / TARGET_RATE_HZ,
            cam.upsampled[0][i],
            cam.upsampled[1][i],
            cam.upsampled[2][i]
        )
        .unwrap();
    }
    fs::write(&sidecar, csv).map_err(|e| Error::io(&sidecar, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render_minute, MinutePlan, SynthProfile};
    use crate::net::{self, argmax, NetConfig};
    use crate::signal::PatientId;
    use proptest::prelude::*;

    fn window(state: StateLabel, minute: u32) -> SensorWindow {
        render_minute(
            &SynthProfile::new(PatientId(1), 5),
            minute,
            MinutePlan {
                state,
                no_motion: false,
            },
        )
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn cam_mean_recovers_logits() {
        for seed in 0..3 {
            let params = net::build(&NetConfig {
                seed,
                ..NetConfig::with_width_scale(32.0)
            })
            .unwrap();
            let cam = compute_cam(&params, &window(StateLabel::Off, seed as u32)).unwrap();
            for c in 0..CLASSES {
                assert_eq!(cam.values[c].len(), 27);
                let err = (mean(&cam.values[c]) + params.head_bias.data()[c] - cam.logits[c]).abs();
                assert!(err < 1e-8, "class {c}: {err}");
            }
        }
    }

    #[test]
    fn zero_head_gives_zero_cam() {
        let mut params = net::build(&NetConfig::with_width_scale(32.0)).unwrap();
        params.head_weight = Tensor::zeros(params.head_weight.shape());
        let cam = compute_cam(&params, &window(StateLabel::On, 0)).unwrap();
        assert!(cam.values.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn single_active_position_localizes_cam() {
        let head = Tensor::new(&[3, 2], vec![1.0, -2.0, 0.5, 0.5, 0.0, 3.0]).unwrap();
        let mut features = Tensor::zeros(&[1, 2, 27, 1]);
        features.data_mut()[13] = 2.0;
        features.data_mut()[27 + 13] = 1.0;
        let cam = cam_values(&head, &features).unwrap();
        for (c, want) in [0.0, 1.5, 3.0].into_iter().enumerate() {
            for (x, v) in cam[c].iter().enumerate() {
                assert_eq!(*v, if x == 13 { want } else { 0.0 });
            }
        }
        assert!(cam_values(&Tensor::zeros(&[3, 3]), &features).is_err());
    }

    /// Straightforward interpolation written against sample times.
    fn interp_oracle(values: &[f64], len: usize) -> Vec<f64> {
        let n = values.len();
        (0..len)
            .map(|i| {
                let t = i as f64 / (len - 1) as f64 * (n - 1) as f64;
                let mut k = 0;
                while k + 1 < n - 1 && (k + 1) as f64 <= t {
                    k += 1;
                }
                let w = t - k as f64;
                (1.0 - w) * values[k] + w * values[k + 1]
            })
            .collect()
    }

    #[test]
    fn upsampling_examples() {
        assert_eq!(upsample_cam(&[0.7; 27], 3600), vec![0.7; 3600]);
        let v: Vec<f64> = (0..27).map(|i| ((i * 7) % 5) as f64 - 1.3).collect();
        let up = upsample_cam(&v, 3600);
        assert_eq!(up[0], v[0]);
        assert_eq!(up[3599], v[26]);
        let oracle = interp_oracle(&v, 3600);
        for (a, b) in up.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn upsampling_stays_within_neighbours(v in prop::collection::vec(-5.0f64..5.0, 2..40), len in 2usize..500) {
            let up = upsample_cam(&v, len);
            let oracle = interp_oracle(&v, len);
            for (a, b) in up.iter().zip(&oracle) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(up.iter().all(|&x| x >= lo - 1e-12 && x <= hi + 1e-12));
        }

        #[test]
        fn normalization_keeps_argmax(v in prop::collection::vec(-5.0f64..5.0, 1..60)) {
            prop_assert_eq!(argmax(&v), argmax(&min_max_normalize(&v)));
        }
    }

    fn fake_cam(value: impl Fn(usize) -> f64) -> ClassActivationMap {
        let values: [Vec<f64>; 3] = std::array::from_fn(|_| (0..27).map(&value).collect());
        ClassActivationMap {
            upsampled: std::array::from_fn(|c| upsample_cam(&values[c], WINDOW_SAMPLES)),
            values,
            logits: [0.0; 3],
            class_labels: StateLabel::CLASSES,
        }
    }

    fn rect_fills(svg: &str) -> Vec<&str> {
        svg.lines()
            .filter(|l| l.starts_with("<rect"))
            .map(|l| l.split("fill=\"").nth(1).unwrap().split('"').next().unwrap())
            .collect()
    }

    #[test]
    fn overlay_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("overlay.svg");
        let w = window(StateLabel::Off, 2);
        export_overlay(&w, &fake_cam(|x| x as f64), 0, &path).unwrap();
        let svg = fs::read_to_string(&path).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 3);
        for color in AXIS_COLORS {
            assert!(svg.contains(&format!("stroke=\"{color}\"")));
        }
        // Every element opened on a line is closed on it.
        for line in svg
            .lines()
            .filter(|l| l.starts_with("<rect") || l.starts_with("<polyline"))
        {
            assert!(line.ends_with("/>"));
        }
        assert!(rect_fills(&svg).len() > 1);
        let csv = fs::read_to_string(path.with_extension("csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("t,cam_off,cam_on,cam_dys"));
        assert_eq!(lines.count(), 3600);

        export_overlay(&w, &fake_cam(|_| 2.5), 1, &path).unwrap();
        let fills = rect_fills(&fs::read_to_string(&path).unwrap()).len();
        assert_eq!(fills, 1);

        let bad = dir.path().join("missing").join("x.svg");
        assert!(matches!(
            export_overlay(&w, &fake_cam(|_| 0.0), 0, &bad),
            Err(Error::Io { .. })
        ));
        assert!(export_overlay(&w, &fake_cam(|_| 0.0), 3, &path).is_err());
    }

    #[test]
    fn trained_networks_neglect_still_segments() {
        let profile = SynthProfile::new(PatientId(3), 21);
        let train: Vec<SensorWindow> = (0..90u32)
            .map(|m| {
                let state = StateLabel::CLASSES[m as usize % 3];
                render_minute(
                    &profile,
                    m,
                    MinutePlan {
                        state,
                        no_motion: false,
                    },
                )
            })
            .collect();
        let refs: Vec<&SensorWindow> = train.iter().collect();
        let config = NetConfig {
            epochs: 8,
            batch_size: 16,
            seed: 4,
            ..NetConfig::with_width_scale(32.0)
        };
        let mut params = net::build(&config).unwrap();
        net::train(&mut params, &refs, &config).unwrap();

        let half = WINDOW_SAMPLES / 2;
        let mut wins = 0;
        let trials = 20;
        for i in 0..trials {
            let minute = 1000 + i;
            let moving = render_minute(
                &profile,
                minute,
                MinutePlan {
                    state: StateLabel::Off,
                    no_motion: false,
                },
            );
            let still = render_minute(
                &profile,
                minute,
                MinutePlan {
                    state: StateLabel::Off,
                    no_motion: true,
                },
            );
            // Alternate which half is still.
            let still_first = i % 2 == 0;
            let mut values = moving.values().to_vec();
            let range = if still_first {
                0..half * AXES
            } else {
                half * AXES..WINDOW_SAMPLES * AXES
            };
            values[range.clone()].copy_from_slice(&still.values()[range]);
            let mixed = SensorWindow::new(values, minute, StateLabel::Off, profile.patient_id).unwrap();
            let cam = compute_cam(&params, &mixed).unwrap();
            let magnitude =
                |r: std::ops::Range<usize>| mean(&cam.upsampled[0][r].iter().map(|v| v.abs()).collect::<Vec<_>>());
            let (still_mag, moving_mag) = if still_first {
                (magnitude(0..half), magnitude(half..WINDOW_SAMPLES))
            } else {
                (magnitude(half..WINDOW_SAMPLES), magnitude(0..half))
            };
            wins += usize::from(moving_mag > still_mag);
        }
        assert!(wins as f64 >= 0.8 * trials as f64, "{wins}/{trials}");
    }
}
