//! Synthetic FOA scenes, track-wise target encoding, segmenting and the
//! on-disk label, audio and manifest formats.

mod audio;
mod labels;
mod scene;
mod targets;

pub use audio::{read_wav, write_wav};
pub use labels::{read_labels, read_manifest, write_labels, write_manifest, ManifestEntry};
pub use scene::{synth_scene, SceneSpec};
pub use targets::{
    encode_targets, events_to_frames, frames_to_targets, segment, segment_frames, targets_to_events, Segment, FRAME_SECONDS,
};

use crate::error::{invalid, Result};

/// A reference sound event with a static source position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EventLabel {
    pub class: usize,
    /// Seconds.
    pub onset: f64,
    /// Seconds, exclusive.
    pub offset: f64,
    /// Degrees.
    pub azimuth: f64,
    /// Degrees.
    pub elevation: f64,
    /// Meters.
    pub distance: f64,
}

impl EventLabel {
    pub fn validate(&self) -> Result<()> {
        if !(self.onset < self.offset) || self.onset < 0.0 {
            return Err(invalid(format!("event needs 0 <= onset < offset, got {}..{}", self.onset, self.offset)));
        }
        if !(self.distance > 0.0) {
            return Err(invalid(format!("event distance must be positive, got {}", self.distance)));
        }
        if !(-180.0..180.0).contains(&self.azimuth) || !(-90.0..=90.0).contains(&self.elevation) {
            return Err(invalid(format!(
                "event angles out of range: azimuth {}, elevation {}",
                self.azimuth, self.elevation
            )));
        }
        Ok(())
    }

    /// Unit vector `(cos φ cos θ, sin φ cos θ, sin θ)`.
    pub fn direction(&self) -> [f64; 3] {
        let (az, el) = (self.azimuth.to_radians(), self.elevation.to_radians());
        [az.cos() * el.cos(), az.sin() * el.cos(), el.sin()]
    }
}
