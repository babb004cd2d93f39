use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use seld_autodiff::Tensor;

use super::EventLabel;
use crate::error::{invalid, Result};
use crate::features::FoaClip;

const MAX_POLYPHONY: usize = 3;
const PLACEMENT_TRIES: usize = 200;
const FADE_SECONDS: f64 = 0.01;
const HARMONICS: usize = 8;

/// Parameters of one synthetic scene. Angles in degrees, times in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub duration: f64,
    pub sample_rate: u32,
    pub n_events: usize,
    pub n_classes: usize,
    pub azimuth: (f64, f64),
    pub elevation: (f64, f64),
    pub distance: (f64, f64),
    pub snr_db: (f64, f64),
    pub event_duration: (f64, f64),
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            duration: 5.0,
            sample_rate: 24_000,
            n_events: 3,
            n_classes: 13,
            azimuth: (-180.0, 180.0),
            elevation: (-45.0, 45.0),
            distance: (0.5, 4.0),
            snr_db: (10.0, 30.0),
            event_duration: (0.5, 2.5),
        }
    }
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        let ok = self.duration > 0.0
            && self.sample_rate > 0
            && self.n_classes > 0
            && ordered(self.azimuth)
            && self.azimuth.0 >= -180.0
            && self.azimuth.1 <= 180.0
            && ordered(self.elevation)
            && self.elevation.0 >= -90.0
            && self.elevation.1 <= 90.0
            && ordered(self.distance)
            && self.distance.0 > 0.0
            && ordered(self.snr_db)
            && ordered(self.event_duration)
            && self.event_duration.0 > 0.0
            && self.event_duration.1 <= self.duration;
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("invalid scene spec {self:?}")))
        }
    }
}

fn sample(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Log-spaced class pitches between 200 Hz and 3.2 kHz.
fn class_pitch(class: usize, n_classes: usize) -> f64 {
    let frac = if n_classes > 1 {
        class as f64 / (n_classes - 1) as f64
    } else {
        0.5
    };
    200.0 * 16f64.powf(frac)
}

/// Snaps to the 100 ms label grid.
fn snap(t: f64) -> f64 {
    (t * 10.0).round() / 10.0
}

fn overlaps(a: &EventLabel, onset: f64, offset: f64) -> bool {
    a.onset < offset && onset < a.offset
}

/// Finds an onset so that at most `MAX_POLYPHONY` events ever overlap.
fn place(rng: &mut impl Rng, placed: &[EventLabel], len: f64, duration: f64) -> Option<(f64, f64)> {
    for _ in 0..PLACEMENT_TRIES {
        let onset = snap(rng.random_range(0.0..=(duration - len).max(0.0)));
        let offset = snap(onset + len).min(duration);
        if offset <= onset {
            continue;
        }
        // polyphony only rises at onsets, so checking those instants suffices
        let instants = std::iter::once(onset).chain(
            placed
                .iter()
                .filter(|e| overlaps(e, onset, offset) && e.onset > onset)
                .map(|e| e.onset),
        );
        let fits = instants
            .map(|t| placed.iter().filter(|e| e.onset <= t && t < e.offset).count())
            .all(|n| n < MAX_POLYPHONY);
        if fits {
            return Some((onset, offset));
        }
    }
    None
}

/// Renders a random scene: each event is a harmonic complex on its class
/// pitch (unit RMS), faded in and out, encoded to FOA as a plane wave with
/// amplitude `1 / max(d, 0.3)`; diffuse noise is added at the sampled SNR
/// relative to the mean event power. Deterministic per seed.
///
/// An event that cannot be placed without exceeding three overlapping
/// sources is halved in length (down to 0.1 s) before the scene is rejected.
pub fn synth_scene(spec: &SceneSpec) -> Result<(FoaClip, Vec<EventLabel>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sr = spec.sample_rate as f64;
    let len = (spec.duration * sr).round() as usize;

    let mut labels: Vec<EventLabel> = Vec::with_capacity(spec.n_events);
    for i in 0..spec.n_events {
        // crowded scenes shorten the event rather than give up
        let mut dur = sample(&mut rng, spec.event_duration);
        let mut slot = place(&mut rng, &labels, dur, spec.duration);
        while slot.is_none() && dur > 0.2 {
            dur /= 2.0;
            slot = place(&mut rng, &labels, dur, spec.duration);
        }
        let (onset, offset) = slot.ok_or_else(|| {
            invalid(format!(
                "cannot place event {} of {} without exceeding {MAX_POLYPHONY} overlapping events",
                i + 1,
                spec.n_events
            ))
        })?;
        let mut azimuth = sample(&mut rng, spec.azimuth);
        if azimuth >= 180.0 {
            azimuth -= 360.0;
        }
        labels.push(EventLabel {
            class: rng.random_range(0..spec.n_classes),
            onset,
            offset,
            azimuth,
            elevation: sample(&mut rng, spec.elevation),
            distance: sample(&mut rng, spec.distance),
        });
    }
    labels.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.class.cmp(&b.class)));

    let mut data = vec![0.0; 4 * len];
    let mut event_power = 0.0;
    let mut event_samples = 0usize;
    for ev in &labels {
        let start = (ev.onset * sr).round() as usize;
        let end = ((ev.offset * sr).round() as usize).min(len);
        let pitch = class_pitch(ev.class, spec.n_classes);
        let nyquist = 0.45 * sr;
        // harmonic complex: amplitude 1/sqrt(k), slight per-event detuning
        let partials: Vec<(f64, f64, f64)> = (1..=HARMONICS)
            .map(|k| {
                let f = k as f64 * pitch * rng.random_range(0.99..1.01);
                (f, (k as f64).powf(-0.5), rng.random_range(0.0..2.0 * PI))
            })
            .filter(|(f, _, _)| *f < nyquist)
            .collect();
        let norm = (2.0 / partials.iter().map(|(_, a, _)| a * a).sum::<f64>()).sqrt();
        let gain = 1.0 / ev.distance.max(0.3);
        let d = ev.direction();
        let gains = [1.0, d[0], d[1], d[2]];
        let fade = (FADE_SECONDS * sr) as usize;
        let n = end - start;
        for k in 0..n {
            let t = k as f64 / sr;
            let mut s = norm * partials.iter().map(|(f, a, ph)| a * (2.0 * PI * f * t + ph).sin()).sum::<f64>();
            let edge = k.min(n - 1 - k);
            if edge < fade {
                s *= 0.5 - 0.5 * (PI * edge as f64 / fade as f64).cos();
            }
            let s = s * gain;
            event_power += s * s;
            for (c, g) in gains.iter().enumerate() {
                data[c * len + start + k] += g * s;
            }
        }
        event_samples += n;
    }

    let reference = if event_samples > 0 {
        event_power / event_samples as f64
    } else {
        1.0
    };
    let snr = sample(&mut rng, spec.snr_db);
    let noise_std = (reference / 10f64.powf(snr / 10.0)).sqrt();
    // diffuse field: omni power σ², each dipole σ²/3
    for c in 0..4 {
        let std = if c == 0 { noise_std } else { noise_std / 3f64.sqrt() };
        let normal = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
        for v in &mut data[c * len..(c + 1) * len] {
            *v += normal.sample(&mut rng);
        }
    }
    let clip = FoaClip::new(Tensor::new(&[4, len], data)?, spec.sample_rate)?;
    Ok((clip, labels))
}
