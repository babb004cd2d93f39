use seld_autodiff::Tensor;

use super::EventLabel;
use crate::error::{invalid, Result};
use crate::features::FoaClip;
use crate::metrics::{direction, Event, EventList};
use crate::model::N_TRACKS;
use crate::objective::FrameTargets;

/// Label frame hop.
pub const FRAME_SECONDS: f64 = 0.1;

/// Frame-wise events: frame `k` holds every label whose interval contains
/// the frame centre `(k + 0.5)·0.1 s`, ordered by onset then class.
pub fn events_to_frames(labels: &[EventLabel], frames: usize) -> Result<EventList> {
    for l in labels {
        l.validate()?;
    }
    let mut order: Vec<&EventLabel> = labels.iter().collect();
    order.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.class.cmp(&b.class)));
    let mut out = vec![Vec::new(); frames];
    for (k, frame) in out.iter_mut().enumerate() {
        let centre = (k as f64 + 0.5) * FRAME_SECONDS;
        for l in order.iter().filter(|l| l.onset <= centre && centre < l.offset) {
            frame.push(Event::new(l.class, l.azimuth, l.elevation, l.distance));
        }
        if frame.len() > N_TRACKS {
            return Err(invalid(format!(
                "{} events active in frame {k}; at most {N_TRACKS} are supported",
                frame.len()
            )));
        }
    }
    Ok(out)
}

/// Track-wise targets for one example (`batch = 1`): the `i`-th event in a
/// frame goes to track `i`.
pub fn frames_to_targets(list: &EventList, n_classes: usize) -> Result<FrameTargets> {
    let frames = list.len();
    let mut tgt = FrameTargets::zeros(1, frames, n_classes);
    for (k, events) in list.iter().enumerate() {
        if events.len() > N_TRACKS {
            return Err(invalid(format!(
                "{} events active in frame {k}; at most {N_TRACKS} are supported",
                events.len()
            )));
        }
        for (track, e) in events.iter().enumerate() {
            if e.class >= n_classes {
                return Err(invalid(format!("class {} out of range for {n_classes} classes", e.class)));
            }
            let (az, el) = (e.azimuth.to_radians(), e.elevation.to_radians());
            let v = [az.cos() * el.cos(), az.sin() * el.cos(), el.sin()];
            tgt.active.set(&[0, track, k], 1.0);
            tgt.sed.set(&[0, track, k, e.class], 1.0);
            for (c, x) in v.iter().enumerate() {
                tgt.doa.set(&[0, track, k, c], *x);
            }
            tgt.dist.set(&[0, track, k, 0], e.distance);
        }
    }
    Ok(tgt)
}

/// Encodes labels into `frames` track-wise target frames.
pub fn encode_targets(labels: &[EventLabel], frames: usize, n_classes: usize) -> Result<FrameTargets> {
    frames_to_targets(&events_to_frames(labels, frames)?, n_classes)
}

/// Decodes one example of track-wise targets back into frame events.
pub fn targets_to_events(tgt: &FrameTargets, example: usize) -> Result<EventList> {
    if example >= tgt.batch() {
        return Err(invalid(format!("example {example} out of {}", tgt.batch())));
    }
    let (frames, classes) = (tgt.frames(), tgt.n_classes());
    let mut out = vec![Vec::new(); frames];
    for (k, frame) in out.iter_mut().enumerate() {
        for tr in 0..N_TRACKS {
            if tgt.active.at(&[example, tr, k]) == 0.0 {
                continue;
            }
            let class = (0..classes)
                .find(|&c| tgt.sed.at(&[example, tr, k, c]) == 1.0)
                .ok_or_else(|| invalid(format!("active track {tr} in frame {k} has no class")))?;
            let v = [
                tgt.doa.at(&[example, tr, k, 0]),
                tgt.doa.at(&[example, tr, k, 1]),
                tgt.doa.at(&[example, tr, k, 2]),
            ];
            let (az, el) = direction(v);
            frame.push(Event::new(class, az, el, tgt.dist.at(&[example, tr, k, 0])));
        }
    }
    Ok(out)
}

/// A fixed-length window of a longer recording.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub clip: FoaClip,
    /// Events clipped to the window, times relative to its start.
    pub labels: Vec<EventLabel>,
}

impl Segment {
    pub fn frames(&self, seconds: f64) -> usize {
        (seconds / FRAME_SECONDS).round() as usize
    }

    pub fn targets(&self, seconds: f64, n_classes: usize) -> Result<FrameTargets> {
        encode_targets(&self.labels, self.frames(seconds), n_classes)
    }
}

/// Splits a clip into non-overlapping windows of `seconds`, zero-padding the
/// last one. Labels crossing a boundary appear truncated in both windows.
pub fn segment(clip: &FoaClip, labels: &[EventLabel], seconds: f64) -> Result<Vec<Segment>> {
    if !(seconds > 0.0) {
        return Err(invalid(format!("segment length must be positive, got {seconds}")));
    }
    let sr = clip.sample_rate() as f64;
    let win = (seconds * sr).round() as usize;
    let n = clip.len().div_ceil(win);
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let start = s * win;
        let take = win.min(clip.len() - start);
        let mut data = vec![0.0; 4 * win];
        for c in 0..4 {
            data[c * win..c * win + take].copy_from_slice(&clip.channel(c)[start..start + take]);
        }
        let (t0, t1) = (s as f64 * seconds, (s + 1) as f64 * seconds);
        let labels = labels
            .iter()
            .filter(|l| l.onset < t1 && t0 < l.offset)
            .map(|l| EventLabel {
                onset: l.onset.max(t0) - t0,
                offset: l.offset.min(t1) - t0,
                ..*l
            })
            .collect();
        out.push(Segment {
            clip: FoaClip::new(Tensor::new(&[4, win], data)?, clip.sample_rate())?,
            labels,
        });
    }
    Ok(out)
}

/// Splits frame-wise labels into windows of `frames`, padding with empty
/// frames.
pub fn segment_frames(list: &EventList, frames: usize) -> Vec<EventList> {
    let n = list.len().div_ceil(frames).max(1);
    (0..n)
        .map(|s| {
            let mut w: EventList = list.iter().skip(s * frames).take(frames).cloned().collect();
            w.resize(frames, Vec::new());
            w
        })
        .collect()
}
