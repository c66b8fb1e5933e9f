//! Evaluation: localization (mIoU, mAP, P@τ), identity (IDF1) and re-capture
//! (RCR, RCL) metrics, with stratified reporting.
//!
//! A [`SequenceEval`] holds everything the metrics need from one sequence.
//! Evaluations concatenate with [`SequenceEval::merge`], so suite-level
//! numbers are pooled over frames and re-entry events.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BBox, FrameOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Visibility {
    Visible,
    Occluded,
    Absent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtFrame {
    pub visibility: Visibility,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    /// Boxes of look-alike objects present in this frame.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub distractors: Vec<BBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReentryEvent {
    pub frame: usize,
    /// Anchor the target re-enters at, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub frames: Vec<GtFrame>,
    pub reentries: Vec<ReentryEvent>,
}

/// Frames where the target becomes visible after being absent. Occluded
/// frames in between do not break the absence.
pub fn derive_reentries(frames: &[GtFrame]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut last: Option<Visibility> = None;
    for (t, f) in frames.iter().enumerate() {
        match f.visibility {
            Visibility::Occluded => {}
            v => {
                if v == Visibility::Visible && last == Some(Visibility::Absent) {
                    out.push(t);
                }
                last = Some(v);
            }
        }
    }
    out
}

impl GroundTruth {
    pub fn validate(&self) -> Result<()> {
        for (t, f) in self.frames.iter().enumerate() {
            match (f.visibility, f.bbox) {
                (Visibility::Visible, None) => {
                    return Err(Error::Invalid(format!("gt frame {t}: visible without box")))
                }
                (_, Some(b)) if b.x0 >= b.x1 || b.y0 >= b.y1 => {
                    return Err(Error::Invalid(format!("gt frame {t}: degenerate box")))
                }
                _ => {}
            }
        }
        let want = derive_reentries(&self.frames);
        let have: Vec<usize> = self.reentries.iter().map(|e| e.frame).collect();
        if want != have {
            return Err(Error::Invalid(format!(
                "re-entry events {have:?} do not match absent→visible transitions {want:?}"
            )));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let gt: GroundTruth = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        gt.validate()?;
        Ok(gt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Intersection over union of two half-open boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = a.x1.min(b.x1).saturating_sub(a.x0.max(b.x0)) as f64;
    let iy = a.y1.min(b.y1).saturating_sub(a.y0.max(b.y0)) as f64;
    let inter = ix * iy;
    let union = a.area() as f64 + b.area() as f64 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// COCO IoU thresholds 0.50:0.05:0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

pub const PRECISION_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Absence-duration stratum of a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AbsenceStratum {
    Short,
    Medium,
    Long,
}

impl AbsenceStratum {
    /// Short < 60, Medium 60–180, Long > 180 frames.
    pub fn of(longest_absence: usize) -> Self {
        if longest_absence < 60 {
            AbsenceStratum::Short
        } else if longest_absence <= 180 {
            AbsenceStratum::Medium
        } else {
            AbsenceStratum::Long
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ReentryStratum {
    Single,
    Multiple,
}

/// Stratification metadata derived from the GT labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceMeta {
    /// Longest absent run that ends in a re-entry after the target was
    /// first seen.
    pub longest_absence: usize,
    /// Re-entries after the first appearance.
    pub reentries: usize,
}

impl SequenceMeta {
    pub fn from_gt(gt: &GroundTruth) -> Self {
        let first_visible = gt.frames.iter().position(|f| f.visibility == Visibility::Visible);
        let mut longest = 0;
        let mut count = 0;
        for e in &gt.reentries {
            if Some(e.frame) == first_visible {
                continue;
            }
            // walk back over the absence
            let mut len = 0;
            let mut t = e.frame;
            while t > 0 {
                t -= 1;
                match gt.frames[t].visibility {
                    Visibility::Visible => break,
                    _ => len += 1,
                }
            }
            longest = longest.max(len);
            count += 1;
        }
        SequenceMeta {
            longest_absence: longest,
            reentries: count,
        }
    }

    pub fn absence_stratum(&self) -> AbsenceStratum {
        AbsenceStratum::of(self.longest_absence)
    }

    pub fn reentry_stratum(&self) -> ReentryStratum {
        if self.reentries <= 1 {
            ReentryStratum::Single
        } else {
            ReentryStratum::Multiple
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EventEval {
    /// IoU against GT for every frame of the event window; `None` where the
    /// prediction is absent.
    window: Vec<Option<f64>>,
}

/// Per-sequence evaluation state; merges by concatenation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SequenceEval {
    /// IoU per visible GT frame (0 for an absent prediction).
    visible_ious: Vec<f64>,
    /// `(score, IoU vs GT or 0, sequence, frame)` for every non-occluded Box.
    predictions: Vec<(f32, f64, usize, usize)>,
    events: Vec<EventEval>,
    /// Absence frames after the first appearance.
    absence_frames: usize,
    /// Of those, frames where the output matches a distractor box.
    identity_switches: usize,
    sequences: usize,
}

impl SequenceEval {
    pub fn new(pred: &[FrameOutput], gt: &GroundTruth) -> Result<Self> {
        if pred.len() != gt.frames.len() {
            return Err(Error::Invalid(format!(
                "trajectory has {} frames, ground truth {}",
                pred.len(),
                gt.frames.len()
            )));
        }
        let iou_at = |t: usize| -> Option<f64> {
            let b = pred[t].bbox()?;
            Some(gt.frames[t].bbox.map_or(0.0, |g| iou(&b, &g)))
        };
        let mut ev = SequenceEval {
            sequences: 1,
            ..SequenceEval::default()
        };
        let first_visible = gt.frames.iter().position(|f| f.visibility == Visibility::Visible);
        for (t, f) in gt.frames.iter().enumerate() {
            match f.visibility {
                Visibility::Visible => ev.visible_ious.push(iou_at(t).unwrap_or(0.0)),
                Visibility::Occluded => continue,
                Visibility::Absent => {
                    if first_visible.is_some_and(|fv| t > fv) {
                        ev.absence_frames += 1;
                        if let Some(b) = pred[t].bbox() {
                            if f.distractors.iter().any(|d| iou(&b, d) >= 0.5) {
                                ev.identity_switches += 1;
                            }
                        }
                    }
                }
            }
            if let FrameOutput::Box { score, .. } = pred[t] {
                ev.predictions.push((score, iou_at(t).unwrap_or(0.0), 0, t));
            }
        }
        let starts: Vec<usize> = gt.reentries.iter().map(|e| e.frame).collect();
        for (k, &s) in starts.iter().enumerate() {
            let end = starts.get(k + 1).copied().unwrap_or(gt.frames.len());
            if s >= end {
                return Err(Error::Invalid("re-entry events are not increasing".into()));
            }
            ev.events.push(EventEval {
                window: (s..end).map(iou_at).collect(),
            });
        }
        Ok(ev)
    }

    /// Concatenates another evaluation into this one.
    pub fn merge(&mut self, other: &SequenceEval) {
        let base = self.sequences;
        self.visible_ious.extend_from_slice(&other.visible_ious);
        self.predictions
            .extend(other.predictions.iter().map(|&(s, i, q, t)| (s, i, q + base, t)));
        self.events.extend(other.events.iter().cloned());
        self.absence_frames += other.absence_frames;
        self.identity_switches += other.identity_switches;
        self.sequences += other.sequences;
    }

    pub fn merged<'a>(items: impl IntoIterator<Item = &'a SequenceEval>) -> SequenceEval {
        let mut acc = SequenceEval::default();
        for it in items {
            acc.merge(it);
        }
        acc
    }

    pub fn num_events(&self) -> usize {
        self.events.len()
    }

    pub fn miou(&self) -> Option<f64> {
        if self.visible_ious.is_empty() {
            return None;
        }
        Some(self.visible_ious.iter().sum::<f64>() / self.visible_ious.len() as f64)
    }

    /// Fraction of visible frames localized with IoU ≥ τ.
    pub fn precision_at(&self, tau: f64) -> Option<f64> {
        if self.visible_ious.is_empty() {
            return None;
        }
        let hits = self.visible_ious.iter().filter(|&&v| v >= tau).count();
        Some(hits as f64 / self.visible_ious.len() as f64)
    }

    /// 101-point interpolated AP at one IoU threshold.
    pub fn ap_at(&self, tau: f64) -> Option<f64> {
        let num_gt = self.visible_ious.len();
        if num_gt == 0 {
            return None;
        }
        let mut preds = self.predictions.clone();
        preds.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));
        let mut tp = 0usize;
        let mut recall = Vec::with_capacity(preds.len());
        let mut precision = Vec::with_capacity(preds.len());
        for (i, p) in preds.iter().enumerate() {
            if p.1 >= tau {
                tp += 1;
            }
            recall.push(tp as f64 / num_gt as f64);
            precision.push(tp as f64 / (i + 1) as f64);
        }
        // precision envelope
        for i in (0..precision.len().saturating_sub(1)).rev() {
            precision[i] = precision[i].max(precision[i + 1]);
        }
        let mut sum = 0.0;
        for j in 0..=100 {
            let r = j as f64 / 100.0;
            let idx = recall.partition_point(|&x| x < r - 1e-12);
            if idx < precision.len() {
                sum += precision[idx];
            }
        }
        Some(sum / 101.0)
    }

    /// AP averaged over the COCO thresholds.
    pub fn map(&self) -> Option<f64> {
        let ts = coco_thresholds();
        let aps: Option<Vec<f64>> = ts.iter().map(|&t| self.ap_at(t)).collect();
        aps.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// `(IDTP, IDFP, IDFN)` at IoU 0.5.
    pub fn id_counts(&self) -> (usize, usize, usize) {
        let tp = self.visible_ious.iter().filter(|&&v| v >= 0.5).count();
        let fp = self.predictions.len() - self.predictions.iter().filter(|p| p.1 >= 0.5).count();
        let fnn = self.visible_ious.len() - tp;
        (tp, fp, fnn)
    }

    pub fn idf1(&self) -> Option<f64> {
        let (tp, fp, fnn) = self.id_counts();
        let denom = 2 * tp + fp + fnn;
        (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
    }

    /// Fraction of re-entries whose first Box in the window has IoU ≥ τ.
    pub fn rcr(&self, tau: f64) -> Option<f64> {
        if self.events.is_empty() {
            return None;
        }
        let hits = self
            .events
            .iter()
            .filter(|e| e.window.iter().flatten().next().is_some_and(|&v| v >= tau))
            .count();
        Some(hits as f64 / self.events.len() as f64)
    }

    /// Per-event latency to the first correct detection, capped at the event
    /// window; the flag tells whether a detection happened.
    pub fn latencies(&self, tau: f64) -> Vec<(usize, bool)> {
        self.events
            .iter()
            .map(
                |e| match e.window.iter().position(|v| v.is_some_and(|x| x >= tau)) {
                    Some(d) => (d, true),
                    None => (e.window.len(), false),
                },
            )
            .collect()
    }

    pub fn rcl(&self, tau: f64) -> Option<f64> {
        let l = self.latencies(tau);
        if l.is_empty() {
            return None;
        }
        Some(l.iter().map(|x| x.0 as f64).sum::<f64>() / l.len() as f64)
    }

    pub fn redetected_fraction(&self, tau: f64) -> Option<f64> {
        let l = self.latencies(tau);
        if l.is_empty() {
            return None;
        }
        Some(l.iter().filter(|x| x.1).count() as f64 / l.len() as f64)
    }

    pub fn identity_switch_rate(&self) -> Option<f64> {
        (self.absence_frames > 0).then(|| self.identity_switches as f64 / self.absence_frames as f64)
    }

    pub fn report(&self, tau: f64, sweep: Option<&[f64]>) -> EvalReport {
        let precision_at = PRECISION_THRESHOLDS
            .iter()
            .filter_map(|&t| self.precision_at(t).map(|p| (format!("{t:.1}"), p)))
            .collect();
        EvalReport {
            sequences: self.sequences,
            visible_frames: self.visible_ious.len(),
            predictions: self.predictions.len(),
            reentries: self.events.len(),
            miou: self.miou(),
            map: self.map(),
            ap50: self.ap_at(0.5),
            precision_at,
            idf1: self.idf1(),
            rcr: self.rcr(tau),
            rcl: self.rcl(tau),
            redetected_fraction: self.redetected_fraction(tau),
            tau,
            rcr_sweep: sweep.map(|ts| {
                ts.iter()
                    .map(|&t| RcrPoint {
                        tau: t,
                        rcr: self.rcr(t),
                    })
                    .collect()
            }),
            absence_frames: self.absence_frames,
            identity_switches: self.identity_switches,
            identity_switch_rate: self.identity_switch_rate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcrPoint {
    pub tau: f64,
    pub rcr: Option<f64>,
}

/// Metric summary. `None` marks a metric that is undefined for the input
/// (for example RCR without re-entry events).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequences: usize,
    pub visible_frames: usize,
    pub predictions: usize,
    pub reentries: usize,
    pub miou: Option<f64>,
    pub map: Option<f64>,
    pub ap50: Option<f64>,
    pub precision_at: BTreeMap<String, f64>,
    pub idf1: Option<f64>,
    pub rcr: Option<f64>,
    pub rcl: Option<f64>,
    pub redetected_fraction: Option<f64>,
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rcr_sweep: Option<Vec<RcrPoint>>,
    pub absence_frames: usize,
    pub identity_switches: usize,
    pub identity_switch_rate: Option<f64>,
}

fn cell(v: Option<f64>, pct: bool) -> String {
    match v {
        None => "N/A".into(),
        Some(x) if pct => format!("{:.1}", 100.0 * x),
        Some(x) => format!("{x:.2}"),
    }
}

pub const TABLE_COLUMNS: [&str; 5] = ["mIoU", "mAP", "IDF1", "RCR", "RCL"];

impl EvalReport {
    /// `mIoU, mAP, IDF1` in percent, `RCR` as a rate, `RCL` in frames.
    pub fn table_cells(&self) -> [String; 5] {
        [
            cell(self.miou, true),
            cell(self.map, true),
            cell(self.idf1, true),
            cell(self.rcr, false),
            match self.rcl {
                None => "N/A".into(),
                Some(x) => format!("{x:.1}"),
            },
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let cells = self.table_cells();
        let _ = writeln!(
            s,
            "{:>8} {:>8} {:>8} {:>8} {:>8}",
            "mIoU", "mAP", "IDF1", "RCR", "RCL"
        );
        let _ = writeln!(
            s,
            "{:>8} {:>8} {:>8} {:>8} {:>8}",
            cells[0], cells[1], cells[2], cells[3], cells[4]
        );
        let _ = writeln!(
            s,
            "sequences={} visible={} re-entries={} re-detected={} tau={}",
            self.sequences,
            self.visible_frames,
            self.reentries,
            cell(self.redetected_fraction, false),
            self.tau
        );
        for (t, p) in &self.precision_at {
            let _ = write!(s, "P@{t}={p:.3} ");
        }
        s.push('\n');
        if let Some(sw) = &self.rcr_sweep {
            for p in sw {
                let _ = writeln!(s, "RCR@{:.2}={}", p.tau, cell(p.rcr, false));
            }
        }
        s
    }

    pub fn csv_header() -> &'static str {
        "miou,map,ap50,idf1,rcr,rcl,redetected_fraction,reentries,visible_frames,identity_switch_rate"
    }

    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            f(self.miou),
            f(self.map),
            f(self.ap50),
            f(self.idf1),
            f(self.rcr),
            f(self.rcl),
            f(self.redetected_fraction),
            self.reentries,
            self.visible_frames,
            f(self.identity_switch_rate)
        )
    }
}

pub fn evaluate(pred: &[FrameOutput], gt: &GroundTruth, tau: f64) -> Result<EvalReport> {
    Ok(SequenceEval::new(pred, gt)?.report(tau, None))
}

pub fn miou(pred: &[FrameOutput], gt: &GroundTruth) -> Result<Option<f64>> {
    Ok(SequenceEval::new(pred, gt)?.miou())
}

pub fn map(pred: &[FrameOutput], gt: &GroundTruth) -> Result<Option<f64>> {
    Ok(SequenceEval::new(pred, gt)?.map())
}

pub fn idf1(pred: &[FrameOutput], gt: &GroundTruth) -> Result<Option<f64>> {
    Ok(SequenceEval::new(pred, gt)?.idf1())
}

pub fn rcr(pred: &[FrameOutput], gt: &GroundTruth, tau: f64) -> Result<Option<f64>> {
    Ok(SequenceEval::new(pred, gt)?.rcr(tau))
}

pub fn rcl(pred: &[FrameOutput], gt: &GroundTruth, tau: f64) -> Result<Option<f64>> {
    Ok(SequenceEval::new(pred, gt)?.rcl(tau))
}

pub fn precision_at(pred: &[FrameOutput], gt: &GroundTruth, tau: f64) -> Result<Option<f64>> {
    Ok(SequenceEval::new(pred, gt)?.precision_at(tau))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    pub axis: String,
    pub stratum: String,
    pub report: EvalReport,
}

/// Groups sequences by absence duration and by re-entry count.
pub fn stratify(items: &[(SequenceEval, SequenceMeta)], tau: f64) -> Vec<StratumReport> {
    let mut by_absence: BTreeMap<AbsenceStratum, SequenceEval> = BTreeMap::new();
    let mut by_reentry: BTreeMap<ReentryStratum, SequenceEval> = BTreeMap::new();
    for (ev, meta) in items {
        by_absence.entry(meta.absence_stratum()).or_default().merge(ev);
        by_reentry.entry(meta.reentry_stratum()).or_default().merge(ev);
    }
    let mut out: Vec<StratumReport> = by_absence
        .into_iter()
        .map(|(k, ev)| StratumReport {
            axis: "absence".into(),
            stratum: format!("{k:?}"),
            report: ev.report(tau, None),
        })
        .collect();
    out.extend(by_reentry.into_iter().map(|(k, ev)| StratumReport {
        axis: "reentries".into(),
        stratum: format!("{k:?}"),
        report: ev.report(tau, None),
    }));
    out
}
