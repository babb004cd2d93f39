//! Frame-level permutation-invariant training loss over the three tracks and
//! the loss-weight schedule.

use std::fmt;
use std::str::FromStr;

use seld_autodiff::{Graph, Tensor, Var};

use crate::error::{invalid, Result};
use crate::model::{TrackOutput, TrackVars, N_TRACKS};

pub const BCE_CLAMP: f64 = 1e-7;

/// All orderings of three tracks, lexicographic.
pub const PERMUTATIONS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub sed: f64,
    pub doa: f64,
    pub dist: f64,
}

impl LossWeights {
    pub fn new(sed: f64, doa: f64, dist: f64) -> Result<Self> {
        if [sed, doa, dist].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid(format!("loss weights must be finite and nonnegative, got ({sed}, {doa}, {dist})")));
        }
        Ok(Self { sed, doa, dist })
    }
}

impl fmt::Display for LossWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.sed, self.doa, self.dist)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Unified,
    Stage1,
    Stage2,
}

impl Stage {
    pub fn weights(self) -> LossWeights {
        let dist = match self {
            Stage::Unified => 1.0,
            Stage::Stage1 => 0.0,
            Stage::Stage2 => 3.0,
        };
        LossWeights { sed: 25.0, doa: 5.0, dist }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Unified => "unified",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }
}

impl FromStr for Stage {
    type Err = crate::SeldError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unified" => Ok(Stage::Unified),
            "stage1" => Ok(Stage::Stage1),
            "stage2" => Ok(Stage::Stage2),
            other => Err(invalid(format!("unknown stage {other:?} (expected unified, stage1 or stage2)"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn stage_schedule(tag: &str) -> Result<LossWeights> {
    Ok(tag.parse::<Stage>()?.weights())
}

/// Track-wise reference tensors with a leading batch axis:
/// `sed [B, 3, T', C]`, `doa [B, 3, T', 3]`, `dist [B, 3, T', 1]`,
/// `active [B, 3, T']`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTargets {
    pub sed: Tensor,
    pub doa: Tensor,
    pub dist: Tensor,
    pub active: Tensor,
}

impl FrameTargets {
    pub fn zeros(batch: usize, frames: usize, n_classes: usize) -> Self {
        Self {
            sed: Tensor::zeros(&[batch, N_TRACKS, frames, n_classes]),
            doa: Tensor::zeros(&[batch, N_TRACKS, frames, 3]),
            dist: Tensor::zeros(&[batch, N_TRACKS, frames, 1]),
            active: Tensor::zeros(&[batch, N_TRACKS, frames]),
        }
    }

    pub fn batch(&self) -> usize {
        self.sed.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.sed.shape()[2]
    }

    pub fn n_classes(&self) -> usize {
        self.sed.shape()[3]
    }

    /// Checks shapes, one-hot classes and unit DoA on active cells and
    /// all-zero inactive cells.
    pub fn validate(&self) -> Result<()> {
        let (b, t, c) = (self.batch(), self.frames(), self.n_classes());
        let want = [
            (&self.sed, vec![b, N_TRACKS, t, c]),
            (&self.doa, vec![b, N_TRACKS, t, 3]),
            (&self.dist, vec![b, N_TRACKS, t, 1]),
            (&self.active, vec![b, N_TRACKS, t]),
        ];
        for (tensor, shape) in want {
            if tensor.shape() != shape.as_slice() {
                return Err(invalid(format!("targets: expected {shape:?}, got {:?}", tensor.shape())));
            }
        }
        for cell in 0..b * N_TRACKS * t {
            let sed = &self.sed.data()[cell * c..(cell + 1) * c];
            let doa = &self.doa.data()[cell * 3..(cell + 1) * 3];
            let dist = self.dist.data()[cell];
            match self.active.data()[cell] {
                a if a == 1.0 => {
                    let ones = sed.iter().filter(|&&v| v == 1.0).count();
                    if ones != 1 || sed.iter().any(|&v| v != 0.0 && v != 1.0) {
                        return Err(invalid(format!("targets: active cell {cell} is not one-hot")));
                    }
                    let norm = doa.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if (norm - 1.0).abs() > 1e-4 {
                        return Err(invalid(format!("targets: active cell {cell} has DoA norm {norm}")));
                    }
                    if dist.is_nan() || dist < 0.0 {
                        return Err(invalid(format!("targets: active cell {cell} has distance {dist}")));
                    }
                }
                a if a == 0.0 => {
                    if sed.iter().chain(doa).any(|&v| v != 0.0) || dist != 0.0 {
                        return Err(invalid(format!("targets: inactive cell {cell} is not all-zero")));
                    }
                }
                a => return Err(invalid(format!("targets: activity mask value {a}"))),
            }
        }
        Ok(())
    }

    /// Concatenates examples along the batch axis.
    pub fn concat(parts: &[&FrameTargets]) -> Result<Self> {
        let cat = |f: fn(&FrameTargets) -> &Tensor| -> Result<Tensor> {
            let ts: Vec<&Tensor> = parts.iter().map(|p| f(p)).collect();
            Ok(Tensor::concat(&ts, 0)?)
        };
        Ok(Self {
            sed: cat(|t| &t.sed)?,
            doa: cat(|t| &t.doa)?,
            dist: cat(|t| &t.dist)?,
            active: cat(|t| &t.active)?,
        })
    }

    /// Reorders tracks so that new track `i` is old track `perm[i]`.
    /// Reorders tracks frame by frame: frame `(b, t)` takes the permutation
    /// `PERMUTATIONS[best[b·T + t]]`, as returned by [`pit_loss`].
    pub fn align(&self, best: &[usize]) -> Result<Self> {
        let (b, t) = (self.batch(), self.frames());
        if best.len() != b * t || best.iter().any(|&i| i >= PERMUTATIONS.len()) {
            return Err(invalid(format!("align: need {} permutation indices below 6", b * t)));
        }
        let reorder = |x: &Tensor| -> Result<Tensor> {
            let inner = x.numel() / (b * N_TRACKS * t);
            let per_track = t * inner;
            let data = (0..x.numel())
                .map(|flat| {
                    let (bi, rest) = (flat / (N_TRACKS * per_track), flat % (N_TRACKS * per_track));
                    let (i, rest) = (rest / per_track, rest % per_track);
                    let p = PERMUTATIONS[best[bi * t + rest / inner]][i];
                    x.data()[(bi * N_TRACKS + p) * per_track + rest]
                })
                .collect();
            Ok(Tensor::new(x.shape(), data)?)
        };
        let out = Self {
            sed: reorder(&self.sed)?,
            doa: reorder(&self.doa)?,
            dist: reorder(&self.dist)?,
            active: reorder(&self.active)?,
        };
        Ok(out)
    }

    pub fn permute_tracks(&self, perm: [usize; 3]) -> Result<Self> {
        check_perm(perm)?;
        Ok(Self {
            sed: permute_axis1(&self.sed, perm),
            doa: permute_axis1(&self.doa, perm),
            dist: permute_axis1(&self.dist, perm),
            active: permute_axis1(&self.active, perm),
        })
    }

    /// Number of active tracks per `(batch, frame)`, shaped `[B, T']`.
    fn active_counts(&self) -> Vec<f64> {
        let (b, t) = (self.batch(), self.frames());
        let mut counts = vec![0.0; b * t];
        for bi in 0..b {
            for tr in 0..N_TRACKS {
                for fr in 0..t {
                    counts[bi * t + fr] += self.active.data()[(bi * N_TRACKS + tr) * t + fr];
                }
            }
        }
        counts
    }
}

fn check_perm(perm: [usize; 3]) -> Result<()> {
    let mut seen = [false; 3];
    for &p in &perm {
        if p >= 3 || seen[p] {
            return Err(invalid(format!("{perm:?} is not a permutation of 0, 1, 2")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Permutes axis 1 (tracks) of a `[B, 3, ...]` tensor.
fn permute_axis1(t: &Tensor, perm: [usize; 3]) -> Tensor {
    let b = t.shape()[0];
    let inner = t.numel() / (b * N_TRACKS);
    let mut out = t.clone();
    let (src, dst) = (t.data(), out.data_mut());
    for bi in 0..b {
        for (i, &p) in perm.iter().enumerate() {
            let d = (bi * N_TRACKS + i) * inner;
            let s = (bi * N_TRACKS + p) * inner;
            dst[d..d + inner].copy_from_slice(&src[s..s + inner]);
        }
    }
    out
}

/// Activity mask repeated along a trailing axis of width `k`.
fn expand_mask(active: &Tensor, k: usize) -> Tensor {
    let mut shape = active.shape().to_vec();
    shape.push(k);
    Tensor::new(&shape, active.data().iter().flat_map(|&a| std::iter::repeat_n(a, k)).collect())
        .expect("mask shape")
}

fn check_shapes(g: &Graph, pred: &TrackVars, tgt: &FrameTargets) -> Result<()> {
    for (name, v, t) in [("sed", pred.sed, &tgt.sed), ("doa", pred.doa, &tgt.doa), ("dist", pred.dist, &tgt.dist)] {
        if g.shape(v) != t.shape() {
            return Err(invalid(format!(
                "{name}: prediction {:?} vs target {:?}",
                g.shape(v),
                t.shape()
            )));
        }
    }
    Ok(())
}

struct SedLogs {
    log_p: Var,
    log_q: Var,
}

fn sed_logs(g: &mut Graph, sed: Var) -> Result<SedLogs> {
    let p = g.clamp(sed, BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let log_p = g.log(p)?;
    let q = g.neg(p)?;
    let q = g.add_scalar(q, 1.0)?;
    let log_q = g.log(q)?;
    Ok(SedLogs { log_p, log_q })
}

/// Summed BCE per `(batch, track, frame)`: `[B, 3, T']`.
fn bce_cells(g: &mut Graph, logs: &SedLogs, y: &Tensor) -> Result<Var> {
    let yc = g.constant(y.clone());
    let nc = g.constant(y.map(|v| 1.0 - v));
    let a = g.mul(logs.log_p, yc)?;
    let b = g.mul(logs.log_q, nc)?;
    let s = g.add(a, b)?;
    let s = g.neg(s)?;
    Ok(g.sum_axis(s, 3)?)
}

/// Masked squared error summed over coordinates: `[B, 3, T']`.
fn doa_cells(g: &mut Graph, doa: Var, tgt: &Tensor, active: &Tensor) -> Result<Var> {
    let t = g.constant(tgt.clone());
    let d = g.sub(doa, t)?;
    let sq = g.mul(d, d)?;
    let m = g.constant(expand_mask(active, 3));
    let sq = g.mul(sq, m)?;
    Ok(g.sum_axis(sq, 3)?)
}

/// Masked absolute distance error: `[B, 3, T']`.
fn dist_cells(g: &mut Graph, dist: Var, tgt: &Tensor, active: &Tensor) -> Result<Var> {
    let t = g.constant(tgt.clone());
    let d = g.sub(dist, t)?;
    let a = g.abs(d)?;
    let m = g.constant(expand_mask(active, 1));
    let a = g.mul(a, m)?;
    Ok(g.sum_axis(a, 3)?)
}

fn recip_or_zero(v: f64) -> f64 {
    if v > 0.0 {
        1.0 / v
    } else {
        0.0
    }
}

/// Batch-global component losses for one fixed track assignment:
/// prediction track `i` is compared with target track `perm[i]`.
pub fn component_losses(g: &mut Graph, pred: &TrackVars, tgt: &FrameTargets, perm: [usize; 3]) -> Result<(Var, Var, Var)> {
    check_perm(perm)?;
    check_shapes(g, pred, tgt)?;
    let tp = tgt.permute_tracks(perm)?;
    let n_active: f64 = tp.active.sum();

    let logs = sed_logs(g, pred.sed)?;
    let bce = bce_cells(g, &logs, &tp.sed)?;
    let bce = g.mean(bce)?;
    let l_sed = g.scale(bce, 1.0 / tgt.n_classes() as f64)?;

    let doa = doa_cells(g, pred.doa, &tp.doa, &tp.active)?;
    let doa = g.sum(doa)?;
    let l_doa = g.scale(doa, recip_or_zero(3.0 * n_active))?;

    let dist = dist_cells(g, pred.dist, &tp.dist, &tp.active)?;
    let dist = g.sum(dist)?;
    let l_dist = g.scale(dist, recip_or_zero(n_active))?;
    Ok((l_sed, l_doa, l_dist))
}

/// Component losses on plain tensors.
pub fn component_loss_values(pred: &TrackOutput, tgt: &FrameTargets, perm: [usize; 3]) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new();
    let vars = constants(&mut g, pred);
    let (a, b, c) = component_losses(&mut g, &vars, tgt, perm)?;
    Ok((g.value(a).item(), g.value(b).item(), g.value(c).item()))
}

fn constants(g: &mut Graph, pred: &TrackOutput) -> TrackVars {
    TrackVars {
        sed: g.constant(pred.sed.clone()),
        doa: g.constant(pred.doa.clone()),
        dist: g.constant(pred.dist.clone()),
    }
}

pub struct PitLoss {
    pub loss: Var,
    /// Winning permutation (index into [`PERMUTATIONS`]) per `(batch, frame)`.
    pub best: Vec<usize>,
}

/// Frame-level PIT: each `(example, frame)` takes the permutation that
/// minimizes `λ1·L_sed + λ2·L_doa + λ3·L_dist` computed over that frame
/// alone; the minima are averaged over frames and examples.
///
/// Per frame, `L_sed` averages BCE over tracks × classes, `L_doa` averages
/// squared error over the coordinates of active target tracks and `L_dist`
/// averages absolute error over active target tracks (both 0 when no
/// track is active).
pub fn pit_loss(g: &mut Graph, pred: &TrackVars, tgt: &FrameTargets, w: LossWeights) -> Result<PitLoss> {
    check_shapes(g, pred, tgt)?;
    let (b, t, c) = (tgt.batch(), tgt.frames(), tgt.n_classes());
    let counts = tgt.active_counts();
    let doa_norm = Tensor::new(&[b, t], counts.iter().map(|&n| recip_or_zero(3.0 * n)).collect())?;
    let dist_norm = Tensor::new(&[b, t], counts.iter().map(|&n| recip_or_zero(n)).collect())?;
    let doa_norm = g.constant(doa_norm);
    let dist_norm = g.constant(dist_norm);

    let logs = sed_logs(g, pred.sed)?;
    let mut per_perm = Vec::with_capacity(PERMUTATIONS.len());
    for perm in PERMUTATIONS {
        let tp = tgt.permute_tracks(perm)?;
        let bce = bce_cells(g, &logs, &tp.sed)?;
        let bce = g.sum_axis(bce, 1)?;
        let l_sed = g.scale(bce, w.sed / (N_TRACKS * c) as f64)?;

        let doa = doa_cells(g, pred.doa, &tp.doa, &tp.active)?;
        let doa = g.sum_axis(doa, 1)?;
        let doa = g.mul(doa, doa_norm)?;
        let l_doa = g.scale(doa, w.doa)?;

        let dist = dist_cells(g, pred.dist, &tp.dist, &tp.active)?;
        let dist = g.sum_axis(dist, 1)?;
        let dist = g.mul(dist, dist_norm)?;
        let l_dist = g.scale(dist, w.dist)?;

        let total = g.add(l_sed, l_doa)?;
        let total = g.add(total, l_dist)?;
        per_perm.push(g.reshape(total, &[b, t, 1])?);
    }
    let all = g.concat(&per_perm, 2)?;
    let (best_loss, best) = g.min_axis(all, 2)?;
    let loss = g.mean(best_loss)?;
    Ok(PitLoss { loss, best })
}

/// PIT loss on plain tensors, with the winning permutation per frame.
pub fn pit_loss_value(pred: &TrackOutput, tgt: &FrameTargets, w: LossWeights) -> Result<(f64, Vec<[usize; 3]>)> {
    let mut g = Graph::new();
    let vars = constants(&mut g, pred);
    let pit = pit_loss(&mut g, &vars, tgt, w)?;
    Ok((g.value(pit.loss).item(), pit.best.iter().map(|&i| PERMUTATIONS[i]).collect()))
}
