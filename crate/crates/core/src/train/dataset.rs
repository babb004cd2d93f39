use std::path::Path;

use super::config::RunConfig;
use crate::data::{
    encode_targets, events_to_frames, frames_to_targets, read_labels, read_manifest, read_wav, segment, segment_frames,
    synth_scene, SceneSpec,
};
use crate::error::{invalid, Result};
use crate::features::{assemble_branch_inputs, BranchFeatures};
use crate::metrics::EventList;
use crate::model::BatchInput;
use crate::objective::FrameTargets;

/// Segments ready for training or scoring: features, track-wise targets and
/// the frame-wise reference events they were encoded from.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub inputs: Vec<BranchFeatures>,
    pub targets: Vec<FrameTargets>,
    pub refs: Vec<EventList>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Training data named by the config: its manifest, or synthetic scenes.
    pub fn for_training(cfg: &RunConfig) -> Result<Self> {
        match &cfg.data.manifest {
            Some(m) => Self::from_manifest(m, cfg),
            None => Self::synthetic(cfg),
        }
    }

    /// `data.segments` synthetic scenes of one segment each; scene `i` uses
    /// seed `data.seed · 1_000_003 + i`.
    pub fn synthetic(cfg: &RunConfig) -> Result<Self> {
        let d = &cfg.data;
        let frames = cfg.target_frames();
        let mut out = Self::empty();
        for i in 0..d.segments {
            let spec = SceneSpec {
                seed: d.seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
                duration: d.segment_seconds,
                sample_rate: cfg.features.sample_rate,
                n_events: d.n_events,
                n_classes: cfg.model.n_classes,
                snr_db: d.snr_db,
                event_duration: (d.event_seconds.0, d.event_seconds.1.min(d.segment_seconds)),
                ..SceneSpec::default()
            };
            let (clip, labels) = synth_scene(&spec)?;
            out.inputs.push(assemble_branch_inputs(&clip, &cfg.features)?);
            out.targets.push(encode_targets(&labels, frames, cfg.model.n_classes)?);
            out.refs.push(events_to_frames(&labels, frames)?);
        }
        Ok(out)
    }

    /// Clips and frame-wise label files listed in a manifest, cut into
    /// segments of `data.segment_seconds`.
    pub fn from_manifest(path: impl AsRef<Path>, cfg: &RunConfig) -> Result<Self> {
        let frames = cfg.target_frames();
        let mut out = Self::empty();
        for entry in read_manifest(path)? {
            let clip = read_wav(&entry.clip)?;
            if clip.sample_rate() != cfg.features.sample_rate {
                return Err(invalid(format!(
                    "{} is sampled at {} Hz, config expects {} Hz",
                    entry.clip.display(),
                    clip.sample_rate(),
                    cfg.features.sample_rate
                )));
            }
            let labels = read_labels(&entry.labels)?;
            let clips = segment(&clip, &[], cfg.data.segment_seconds)?;
            let mut lists = segment_frames(&labels, frames);
            if lists.len() > clips.len() {
                return Err(invalid(format!(
                    "{} labels frames beyond the end of {}",
                    entry.labels.display(),
                    entry.clip.display()
                )));
            }
            lists.resize(clips.len(), vec![Vec::new(); frames]);
            for (seg, refs) in clips.iter().zip(lists) {
                for e in refs.iter().flatten() {
                    if e.class >= cfg.model.n_classes {
                        return Err(invalid(format!(
                            "{}: class {} but the model has {} classes",
                            entry.labels.display(),
                            e.class,
                            cfg.model.n_classes
                        )));
                    }
                }
                out.inputs.push(assemble_branch_inputs(&seg.clip, &cfg.features)?);
                out.targets.push(frames_to_targets(&refs, cfg.model.n_classes)?);
                out.refs.push(refs);
            }
        }
        if out.is_empty() {
            return Err(invalid("manifest lists no clips"));
        }
        Ok(out)
    }

    fn empty() -> Self {
        Self {
            inputs: Vec::new(),
            targets: Vec::new(),
            refs: Vec::new(),
        }
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(BatchInput, FrameTargets)> {
        let inputs: Vec<&BranchFeatures> = idx.iter().map(|&i| &self.inputs[i]).collect();
        let targets: Vec<&FrameTargets> = idx.iter().map(|&i| &self.targets[i]).collect();
        Ok((BatchInput::stack(&inputs)?, FrameTargets::concat(&targets)?))
    }
}
