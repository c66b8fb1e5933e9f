//! Hand-built micro-sequences with metric values worked out by hand.
#![allow(dead_code)]

use anchorref::metrics::{GroundTruth, GtFrame, ReentryEvent, Visibility};
use anchorref::types::{BBox, FrameOutput};

pub struct Micro {
    pub name: &'static str,
    pub pred: Vec<FrameOutput>,
    pub gt: GroundTruth,
    pub miou: f64,
    pub map: f64,
    pub idf1: f64,
    pub rcr: Option<f64>,
    pub rcl: Option<f64>,
}

const G: BBox = BBox::new(0, 0, 10, 10);
/// IoU 1/3 against `G`.
const HALF_SHIFT: BBox = BBox::new(5, 0, 15, 10);
/// IoU exactly 0.5 against `G`.
const TOP_HALF: BBox = BBox::new(0, 0, 10, 5);
const ELSEWHERE: BBox = BBox::new(20, 20, 30, 30);

fn b(bbox: BBox, score: f32) -> FrameOutput {
    FrameOutput::Box { bbox, score }
}

fn vis() -> GtFrame {
    GtFrame {
        visibility: Visibility::Visible,
        bbox: Some(G),
        distractors: Vec::new(),
    }
}

fn absent() -> GtFrame {
    GtFrame {
        visibility: Visibility::Absent,
        bbox: None,
        distractors: Vec::new(),
    }
}

/// Runs of `(visible?, length)`; re-entries at each absent→visible edge.
fn gt_from(runs: &[(bool, usize)]) -> GroundTruth {
    let mut frames = Vec::new();
    let mut reentries = Vec::new();
    for &(v, n) in runs {
        if v && frames
            .last()
            .is_some_and(|f: &GtFrame| f.visibility == Visibility::Absent)
        {
            reentries.push(ReentryEvent {
                frame: frames.len(),
                anchor: None,
            });
        }
        frames.extend((0..n).map(|_| if v { vis() } else { absent() }));
    }
    GroundTruth { frames, reentries }
}

pub fn cases() -> Vec<Micro> {
    let mut out = Vec::new();

    // 1. perfect tracking with two re-entries
    let gt = gt_from(&[(false, 3), (true, 5), (false, 2), (true, 2)]);
    let pred = gt
        .frames
        .iter()
        .map(|f| f.bbox.map_or(FrameOutput::Absent, |g| b(g, 0.9)))
        .collect();
    out.push(Micro {
        name: "perfect",
        pred,
        gt,
        miou: 1.0,
        map: 1.0,
        idf1: 1.0,
        rcr: Some(1.0),
        rcl: Some(0.0),
    });

    // 2. never detected: latencies capped at the windows 3..10 and 10..12
    let gt = gt_from(&[(false, 3), (true, 5), (false, 2), (true, 2)]);
    out.push(Micro {
        name: "all-absent",
        pred: vec![FrameOutput::Absent; 12],
        gt,
        miou: 0.0,
        map: 0.0,
        idf1: 0.0,
        rcr: Some(0.0),
        rcl: Some(4.5),
    });

    // 3. ten visible frames, eight matched, one false positive after exit:
    //    IDF1 = 16/19; AP = 81/101 at every threshold (recall tops at 0.8)
    let gt = gt_from(&[(false, 1), (true, 10), (false, 1)]);
    let mut pred = vec![FrameOutput::Absent; 3];
    pred.extend((0..8).map(|_| b(G, 0.9)));
    pred.push(b(ELSEWHERE, 0.5));
    out.push(Micro {
        name: "idf1-worked",
        pred,
        gt,
        miou: 0.8,
        map: 81.0 / 101.0,
        idf1: 16.0 / 19.0,
        rcr: Some(1.0),
        rcl: Some(2.0),
    });

    // 4. re-entries at 100 and 400, correct from 105 and 430: RCL 17.5.
    //    The first re-entry starts with five low-IoU boxes, so RCR = 1/2.
    //    mIoU = (5/3 + 195 + 70)/300 = 8/9; IDF1 = 530/570; AP = 89/101.
    let gt = gt_from(&[(false, 100), (true, 200), (false, 100), (true, 100)]);
    let mut pred = vec![FrameOutput::Absent; 100];
    pred.extend((0..5).map(|_| b(HALF_SHIFT, 0.3)));
    pred.extend((0..195).map(|_| b(G, 0.9)));
    pred.extend(vec![FrameOutput::Absent; 130]);
    pred.extend((0..70).map(|_| b(G, 0.9)));
    out.push(Micro {
        name: "latency-worked",
        pred,
        gt,
        miou: 8.0 / 9.0,
        map: 89.0 / 101.0,
        idf1: 530.0 / 570.0,
        rcr: Some(0.5),
        rcl: Some(17.5),
    });

    // 5. three-frame toy with a top-ranked false positive and an occluded
    //    frame that must be ignored. At IoU 0.5 AP = 2/3; above it the
    //    half box misses and AP = 25.5/101.
    let mut gt = gt_from(&[(true, 2), (false, 1)]);
    gt.frames.push(GtFrame {
        visibility: Visibility::Occluded,
        bbox: None,
        distractors: Vec::new(),
    });
    gt.frames[2].distractors.push(ELSEWHERE);
    let pred = vec![b(G, 0.8), b(TOP_HALF, 0.7), b(ELSEWHERE, 0.9), b(ELSEWHERE, 0.95)];
    out.push(Micro {
        name: "ap-toy",
        pred,
        gt,
        miou: 0.75,
        map: (2.0 / 3.0 + 9.0 * 25.5 / 101.0) / 10.0,
        idf1: 0.8,
        rcr: None,
        rcl: None,
    });
    out
}
