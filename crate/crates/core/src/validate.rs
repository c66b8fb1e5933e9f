//! Trace validation against the fixed-view contract.

use std::fmt;

use serde::Serialize;

use crate::container::FrameSource;
use crate::error::{Error, Result};
use crate::types::{PerceptionFrame, QuerySpec};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    /// Position of the offending frame in the trace, if frame-specific.
    pub frame: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.frame {
            Some(i) => write!(f, "frame {i}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub frames_checked: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, frame: Option<usize>, message: impl Into<String>) {
        self.violations.push(Violation {
            frame,
            message: message.into(),
        });
    }
}

/// Checks every frame of `source` and the query. I/O and container errors
/// abort with `Err`; contract violations are collected in the report.
pub fn validate_trace(source: &dyn FrameSource, query: &QuerySpec) -> Result<ValidationReport> {
    if source.num_frames() == 0 {
        return Err(Error::Invalid("trace is empty".into()));
    }
    let ext = source.extent();
    let mut report = ValidationReport::default();

    if !query.embedding.is_finite() {
        report.push(None, "query embedding is not finite");
    }
    if query.embedding.dim() != ext.text_dim {
        report.push(
            None,
            format!(
                "query embedding dim {} != d_l {}",
                query.embedding.dim(),
                ext.text_dim
            ),
        );
    }

    let mut prev_index: Option<u64> = None;
    let mut identity_dim: Option<usize> = None;
    for i in 0..source.num_frames() {
        let frame = source.frame(i)?;
        check_frame(
            i,
            &frame,
            (ext.height, ext.width, ext.feature_dim),
            &mut identity_dim,
            &mut report,
        );
        if let Some(prev) = prev_index {
            if frame.frame_index <= prev {
                report.push(
                    Some(i),
                    format!(
                        "frame_index {} not strictly increasing (previous {prev})",
                        frame.frame_index
                    ),
                );
            }
        }
        prev_index = Some(frame.frame_index);
        report.frames_checked += 1;
    }
    Ok(report)
}

fn check_frame(
    i: usize,
    frame: &PerceptionFrame,
    (h, w, d): (usize, usize, usize),
    identity_dim: &mut Option<usize>,
    report: &mut ValidationReport,
) {
    let f = &frame.features;
    if f.height() != h || f.width() != w || f.channels() != d {
        report.push(
            Some(i),
            format!(
                "extent mismatch at frame {i}: {}×{}×{} vs {h}×{w}×{d}",
                f.height(),
                f.width(),
                f.channels()
            ),
        );
    }
    if !f.is_finite() {
        report.push(Some(i), "non-finite feature values");
    }
    if !frame.mean_brightness.is_finite() {
        report.push(Some(i), "non-finite mean_brightness");
    }
    for (j, p) in frame.proposals.iter().enumerate() {
        if !p.bbox.is_valid_in(h, w) {
            report.push(Some(i), format!("proposal {j}: invalid box {:?}", p.bbox));
        }
        if p.mask.height() != h || p.mask.width() != w {
            report.push(
                Some(i),
                format!(
                    "proposal {j}: mask extent {}×{} vs {h}×{w}",
                    p.mask.height(),
                    p.mask.width()
                ),
            );
        } else if p.mask.popcount() == 0 {
            report.push(Some(i), format!("proposal {j}: empty mask"));
        }
        if !p.identity.is_finite() {
            report.push(Some(i), format!("proposal {j}: identity embedding not finite"));
        } else if !p.identity.is_normalized() {
            report.push(
                Some(i),
                format!(
                    "proposal {j}: identity embedding not normalized (norm {:.6})",
                    p.identity.norm()
                ),
            );
        }
        match identity_dim {
            None => *identity_dim = Some(p.identity.dim()),
            Some(dim) if *dim != p.identity.dim() => report.push(
                Some(i),
                format!(
                    "proposal {j}: identity dim {} differs from {dim}",
                    p.identity.dim()
                ),
            ),
            _ => {}
        }
        if !(0.0..=1.0).contains(&p.detector_score) {
            report.push(
                Some(i),
                format!("proposal {j}: detector_score {} outside [0,1]", p.detector_score),
            );
        }
        if p.refiner_score.is_some_and(|s| !s.is_finite()) {
            report.push(Some(i), format!("proposal {j}: non-finite refiner_score"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::InMemoryTrace;
    use crate::embedding::Embedding;
    use crate::mask::BinaryMask;
    use crate::types::{BBox, FeatureGrid, Proposal};

    fn frame(idx: u64, h: usize, w: usize) -> PerceptionFrame {
        PerceptionFrame {
            frame_index: idx,
            mean_brightness: 0.5,
            features: FeatureGrid::zeros(h, w, 2),
            proposals: vec![],
        }
    }

    fn query() -> QuerySpec {
        QuerySpec {
            text: "q".into(),
            embedding: Embedding::basis(2, 0),
        }
    }

    fn trace(frames: Vec<PerceptionFrame>) -> InMemoryTrace {
        let mut t = InMemoryTrace::from_frames(frames, vec![query()]).unwrap();
        t.extent.text_dim = 2;
        t
    }

    #[test]
    fn well_formed_trace_is_ok() {
        let t = trace((0..3).map(|i| frame(i, 4, 4)).collect());
        let r = validate_trace(&t, &query()).unwrap();
        assert!(r.is_ok(), "{:?}", r.violations);
        assert_eq!(r.frames_checked, 3);
    }

    #[test]
    fn extent_mismatch_reported() {
        let t = trace(vec![frame(0, 4, 4), frame(1, 4, 5), frame(2, 4, 4)]);
        let r = validate_trace(&t, &query()).unwrap();
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].frame, Some(1));
        assert!(r.violations[0].message.contains("extent mismatch at frame 1"));
    }

    #[test]
    fn empty_mask_and_bad_identity_reported() {
        let mut f = frame(0, 4, 4);
        f.proposals.push(Proposal {
            bbox: BBox::new(0, 0, 2, 2),
            mask: BinaryMask::empty(4, 4),
            identity: Embedding::new(vec![2.0, 0.0]),
            detector_score: 0.5,
            refiner_score: None,
        });
        let t = trace(vec![f]);
        let r = validate_trace(&t, &query()).unwrap();
        let msgs: Vec<_> = r.violations.iter().map(|v| v.message.clone()).collect();
        assert!(msgs.iter().any(|m| m.contains("empty mask")), "{msgs:?}");
        assert!(msgs.iter().any(|m| m.contains("not normalized")), "{msgs:?}");
    }

    #[test]
    fn non_increasing_indices_reported() {
        let t = trace(vec![frame(0, 4, 4), frame(0, 4, 4)]);
        let r = validate_trace(&t, &query()).unwrap();
        assert!(r.violations[0].message.contains("strictly increasing"));
    }

    #[test]
    fn empty_trace_is_an_error() {
        let t = InMemoryTrace {
            extent: crate::container::TraceExtent {
                height: 1,
                width: 1,
                feature_dim: 1,
                text_dim: 2,
            },
            frames: vec![],
            queries: vec![],
        };
        assert!(validate_trace(&t, &query()).is_err());
    }
}
