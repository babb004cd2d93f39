//! Location-dependent F-score, class-dependent DoA and relative distance
//! errors, and their aggregate.

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::model::TrackOutput;

/// One sound event in one 100 ms frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub class: usize,
    /// Degrees in [−180, 180).
    pub azimuth: f64,
    /// Degrees in [−90, 90].
    pub elevation: f64,
    /// Meters.
    pub distance: f64,
}

impl Event {
    pub fn new(class: usize, azimuth: f64, elevation: f64, distance: f64) -> Self {
        Self {
            class,
            azimuth,
            elevation,
            distance,
        }
    }

    fn check(&self, is_reference: bool) -> Result<()> {
        if !(-180.0..180.0).contains(&self.azimuth) || !(-90.0..=90.0).contains(&self.elevation) {
            return Err(invalid(format!(
                "event angles out of range: azimuth {}, elevation {}",
                self.azimuth, self.elevation
            )));
        }
        if is_reference && !(self.distance > 0.0) {
            return Err(invalid(format!("reference distance must be positive, got {}", self.distance)));
        }
        Ok(())
    }
}

/// Events per frame.
pub type EventList = Vec<Vec<Event>>;

/// Checks angle ranges (and positive distances for references).
pub fn validate_events(list: &EventList, is_reference: bool) -> Result<()> {
    list.iter().flatten().try_for_each(|e| e.check(is_reference))
}

fn unit(az: f64, el: f64) -> [f64; 3] {
    let (az, el) = (az.to_radians(), el.to_radians());
    [az.cos() * el.cos(), az.sin() * el.cos(), el.sin()]
}

/// Great-circle angle in degrees between two (azimuth, elevation) pairs.
pub fn angular_error(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (u, v) = (unit(a.0, a.1), unit(b.0, b.1));
    let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    let cross = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    // atan2 stays accurate for nearly parallel vectors, unlike acos
    let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    sin.atan2(dot).to_degrees()
}

/// A matched prediction/reference pair within one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub pred: usize,
    pub reference: usize,
    pub class: usize,
    pub angle: f64,
    /// `|d_pred − d_ref| / d_ref`.
    pub rel_dist: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameMatch {
    pub pairs: Vec<Match>,
    /// Predictions left without a same-class reference.
    pub unmatched_pred: Vec<usize>,
    /// References left without a same-class prediction.
    pub unmatched_ref: Vec<usize>,
}

/// Lowest-total-cost injection of `small` into `large`, by enumeration.
fn best_injection(cost: &dyn Fn(usize, usize) -> f64, small: usize, large: usize) -> Vec<usize> {
    fn go(
        cost: &dyn Fn(usize, usize) -> f64,
        i: usize,
        small: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<usize>,
        acc: f64,
        best: &mut (f64, Vec<usize>),
    ) {
        if acc >= best.0 {
            return;
        }
        if i == small {
            *best = (acc, cur.clone());
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                go(cost, i + 1, small, used, cur, acc + cost(i, j), best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (f64::INFINITY, Vec::new());
    go(cost, 0, small, &mut vec![false; large], &mut Vec::new(), 0.0, &mut best);
    best.1
}

/// Optimal one-to-one assignment on angular error within each class.
pub fn match_events(pred: &[Event], refs: &[Event]) -> FrameMatch {
    let mut out = FrameMatch::default();
    let mut classes: Vec<usize> = pred.iter().chain(refs).map(|e| e.class).collect();
    classes.sort_unstable();
    classes.dedup();
    for class in classes {
        let p: Vec<usize> = (0..pred.len()).filter(|&i| pred[i].class == class).collect();
        let r: Vec<usize> = (0..refs.len()).filter(|&i| refs[i].class == class).collect();
        let angle = |i: usize, j: usize| {
            let (a, b) = (&pred[p[i]], &refs[r[j]]);
            angular_error((a.azimuth, a.elevation), (b.azimuth, b.elevation))
        };
        let mut pair = |pi: usize, rj: usize| {
            let (a, b) = (&pred[p[pi]], &refs[r[rj]]);
            out.pairs.push(Match {
                pred: p[pi],
                reference: r[rj],
                class,
                angle: angle(pi, rj),
                rel_dist: (a.distance - b.distance).abs() / b.distance,
            });
        };
        let (mut p_used, mut r_used) = (vec![false; p.len()], vec![false; r.len()]);
        if p.len() <= r.len() {
            for (pi, rj) in best_injection(&angle, p.len(), r.len()).into_iter().enumerate() {
                pair(pi, rj);
                p_used[pi] = true;
                r_used[rj] = true;
            }
        } else {
            let flipped = |j: usize, i: usize| angle(i, j);
            for (rj, pi) in best_injection(&flipped, r.len(), p.len()).into_iter().enumerate() {
                pair(pi, rj);
                p_used[pi] = true;
                r_used[rj] = true;
            }
        }
        out.unmatched_pred.extend((0..p.len()).filter(|&i| !p_used[i]).map(|i| p[i]));
        out.unmatched_ref.extend((0..r.len()).filter(|&j| !r_used[j]).map(|j| r[j]));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricConfig {
    /// Angular threshold for a true positive, degrees.
    pub ang_thresh: f64,
    /// Optional relative-distance gate for true positives.
    pub dist_gate: Option<f64>,
    /// Average F over classes instead of pooling counts.
    pub macro_f: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            ang_thresh: 20.0,
            dist_gate: None,
            macro_f: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn f_score(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            // nothing to detect and nothing predicted
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub f20: f64,
    pub doae: f64,
    pub rde: f64,
    pub seld_score: f64,
    pub counts: Counts,
    pub matched_pairs: usize,
    /// Set when no pair was matched, so DOAE and RDE hold their worst-case
    /// sentinels.
    pub no_matches: bool,
}

impl MetricReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "F20     {:.4}\nDOAE    {:.2} deg\nRDE     {:.4}\nSELD    {:.4}\nTP/FP/FN {}/{}/{}  matched pairs {}\n",
            self.f20, self.doae, self.rde, self.seld_score, self.counts.tp, self.counts.fp, self.counts.fn_, self.matched_pairs
        );
        if self.no_matches {
            s.push_str("warning: no class-matched pairs; DOAE and RDE are sentinel values\n");
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub const DOAE_SENTINEL: f64 = 180.0;
pub const RDE_SENTINEL: f64 = 1.0;

fn check_aligned(preds: &EventList, refs: &EventList) -> Result<()> {
    if preds.len() != refs.len() {
        return Err(invalid(format!(
            "prediction has {} frames, reference has {}",
            preds.len(),
            refs.len()
        )));
    }
    validate_events(preds, false)?;
    validate_events(refs, true)
}

fn all_matches(preds: &EventList, refs: &EventList) -> Vec<FrameMatch> {
    preds.iter().zip(refs).map(|(p, r)| match_events(p, r)).collect()
}

fn counts_per_class(matches: &[FrameMatch], cfg: &MetricConfig, classes: usize) -> Vec<Counts> {
    let mut per = vec![Counts::default(); classes];
    for m in matches {
        for pair in &m.pairs {
            let c = &mut per[pair.class];
            let close = pair.angle <= cfg.ang_thresh && cfg.dist_gate.is_none_or(|g| pair.rel_dist <= g);
            if close {
                c.tp += 1;
            } else {
                c.fp += 1;
                c.fn_ += 1;
            }
        }
    }
    per
}

fn f_from(matches: &[FrameMatch], preds: &EventList, refs: &EventList, cfg: &MetricConfig) -> (f64, Counts) {
    let n_classes = preds
        .iter()
        .chain(refs)
        .flatten()
        .map(|e| e.class + 1)
        .max()
        .unwrap_or(0);
    let mut per = counts_per_class(matches, cfg, n_classes);
    for ((m, p), r) in matches.iter().zip(preds).zip(refs) {
        for &i in &m.unmatched_pred {
            per[p[i].class].fp += 1;
        }
        for &j in &m.unmatched_ref {
            per[r[j].class].fn_ += 1;
        }
    }
    let total = per.iter().fold(Counts::default(), |a, c| Counts {
        tp: a.tp + c.tp,
        fp: a.fp + c.fp,
        fn_: a.fn_ + c.fn_,
    });
    let f = if cfg.macro_f {
        let present: Vec<&Counts> = per.iter().filter(|c| c.tp + c.fp + c.fn_ > 0).collect();
        if present.is_empty() {
            1.0
        } else {
            present.iter().map(|c| c.f_score()).sum::<f64>() / present.len() as f64
        }
    } else {
        total.f_score()
    };
    (f, total)
}

pub fn compute_f20(preds: &EventList, refs: &EventList, cfg: &MetricConfig) -> Result<f64> {
    check_aligned(preds, refs)?;
    Ok(f_from(&all_matches(preds, refs), preds, refs, cfg).0)
}

/// Mean angular error over matched pairs; `(180, true)` when there are none.
pub fn compute_doae(preds: &EventList, refs: &EventList) -> Result<(f64, bool)> {
    check_aligned(preds, refs)?;
    Ok(mean_or(all_matches(preds, refs).iter().flat_map(|m| m.pairs.iter().map(|p| p.angle)), DOAE_SENTINEL))
}

/// Mean relative distance error over matched pairs; `(1, true)` when there
/// are none.
pub fn compute_rde(preds: &EventList, refs: &EventList) -> Result<(f64, bool)> {
    check_aligned(preds, refs)?;
    Ok(mean_or(all_matches(preds, refs).iter().flat_map(|m| m.pairs.iter().map(|p| p.rel_dist)), RDE_SENTINEL))
}

fn mean_or(values: impl Iterator<Item = f64>, sentinel: f64) -> (f64, bool) {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        (sentinel, true)
    } else {
        (sum / n as f64, false)
    }
}

/// `((1 − F) + DOAE/180 + RDE) / 3`.
pub fn seld_score(f20: f64, doae_deg: f64, rde: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&f20) || !(0.0..=180.0).contains(&doae_deg) || !(rde >= 0.0 && rde.is_finite()) {
        return Err(invalid(format!(
            "seld_score inputs out of range: F {f20}, DOAE {doae_deg}, RDE {rde}"
        )));
    }
    Ok(((1.0 - f20) + doae_deg / 180.0 + rde) / 3.0)
}

/// All metrics from one matching pass.
pub fn evaluate(preds: &EventList, refs: &EventList, cfg: &MetricConfig) -> Result<MetricReport> {
    check_aligned(preds, refs)?;
    let matches = all_matches(preds, refs);
    let (f20, counts) = f_from(&matches, preds, refs, cfg);
    let pairs = || matches.iter().flat_map(|m| m.pairs.iter());
    let (doae, none) = mean_or(pairs().map(|p| p.angle), DOAE_SENTINEL);
    let (rde, _) = mean_or(pairs().map(|p| p.rel_dist), RDE_SENTINEL);
    if none {
        log::warn!("no class-matched pairs; DOAE and RDE set to sentinels");
    }
    Ok(MetricReport {
        f20,
        doae,
        rde,
        seld_score: seld_score(f20, doae, rde)?,
        counts,
        matched_pairs: pairs().count(),
        no_matches: none,
    })
}

/// Converts one example's track outputs (`sed [3, T', C]`, `doa [3, T', 3]`,
/// `dist [3, T', 1]`) into events: every class whose activity exceeds
/// `threshold` on a track emits an event with that track's direction and
/// distance.
pub fn tracks_to_events(out: &TrackOutput, threshold: f64) -> Result<EventList> {
    let s = out.sed.shape();
    if s.len() != 3 || out.doa.shape() != [s[0], s[1], 3] || out.dist.shape() != [s[0], s[1], 1] {
        return Err(invalid(format!(
            "tracks_to_events expects one example, got sed {:?} doa {:?} dist {:?}",
            s,
            out.doa.shape(),
            out.dist.shape()
        )));
    }
    let (tracks, frames, classes) = (s[0], s[1], s[2]);
    let mut list = vec![Vec::new(); frames];
    for (t, events) in list.iter_mut().enumerate() {
        for tr in 0..tracks {
            let v = [out.doa.at(&[tr, t, 0]), out.doa.at(&[tr, t, 1]), out.doa.at(&[tr, t, 2])];
            let (az, el) = direction(v);
            for c in 0..classes {
                if out.sed.at(&[tr, t, c]) > threshold {
                    events.push(Event::new(c, az, el, out.dist.at(&[tr, t, 0])));
                }
            }
        }
    }
    Ok(list)
}

/// Azimuth/elevation in degrees of a Cartesian vector; the zero vector maps
/// to (0, 0).
pub fn direction(v: [f64; 3]) -> (f64, f64) {
    let horiz = v[0].hypot(v[1]);
    if horiz == 0.0 && v[2] == 0.0 {
        return (0.0, 0.0);
    }
    let mut az = v[1].atan2(v[0]).to_degrees();
    if az >= 180.0 {
        az -= 360.0;
    }
    (az, v[2].atan2(horiz).to_degrees())
}
