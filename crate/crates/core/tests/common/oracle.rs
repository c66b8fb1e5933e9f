//! Naive brute-force scoring of one frame, written straight from the
//! formulas with plain loops, plus a random frame generator.
#![allow(dead_code)]

use anchorref::anchor::AnchorMap;
use anchorref::association::{AssociationParams, RefinerMode};
use anchorref::heads::{AlignmentHeads, Linear};
use anchorref::mask::BinaryMask;
use anchorref::types::{BBox, FeatureGrid, Grid2D, PerceptionFrame, Proposal};
use anchorref::Embedding;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Case {
    pub frame: PerceptionFrame,
    pub map: AnchorMap,
    pub heads: AlignmentHeads,
    pub query: Embedding,
}

fn gauss(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller keeps the oracle free of the library's sampling path
    let u1: f64 = rng.random_range(1e-12..1.0);
    let u2: f64 = rng.random();
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}

fn random_linear(rng: &mut ChaCha8Rng, i: usize, o: usize) -> Linear {
    let w = (0..i * o).map(|_| gauss(rng) / (i as f32).sqrt()).collect();
    let b = (0..o).map(|_| 0.1 * gauss(rng)).collect();
    Linear::new(i, o, w, b).unwrap()
}

pub fn random_case(seed: u64) -> Case {
    let (h, w, dv, dl, d) = (32, 32, 6, 5, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..h * w * dv).map(|_| gauss(&mut rng)).collect();
    let features = FeatureGrid::new(h, w, dv, values).unwrap();

    // block-structured map with zero regions so the gate bites
    let mut grid = vec![0f32; h * w];
    for _ in 0..4 {
        let (y0, x0) = (rng.random_range(0..28), rng.random_range(0..28));
        let (y1, x1) = (rng.random_range(y0 + 2..=32), rng.random_range(x0 + 2..=32));
        let v: f32 = rng.random();
        for r in y0..y1 {
            for c in x0..x1 {
                grid[r * w + c] = (grid[r * w + c] + v).min(1.0);
            }
        }
    }
    let map = AnchorMap {
        grid: Grid2D::new(h, w, grid).unwrap(),
        weights: Vec::new(),
        similarities: Vec::new(),
        query_fingerprint: String::new(),
        clamped: false,
    };

    let n = rng.random_range(0..=10);
    let proposals = (0..n)
        .map(|_| {
            let (y0, x0) = (rng.random_range(0..30u32), rng.random_range(0..30u32));
            let (y1, x1) = (rng.random_range(y0 + 1..=32), rng.random_range(x0 + 1..=32));
            let b = BBox::new(x0, y0, x1, y1);
            let mut mask = BinaryMask::empty(h, w);
            for r in y0..y1 {
                for c in x0..x1 {
                    if rng.random_bool(0.7) {
                        mask.set(r as usize, c as usize, true);
                    }
                }
            }
            if mask.popcount() == 0 {
                mask.set(y0 as usize, x0 as usize, true);
            }
            let id: Vec<f32> = (0..8).map(|_| gauss(&mut rng)).collect();
            Proposal {
                bbox: b,
                mask,
                identity: Embedding::new(id).normalized().unwrap(),
                detector_score: rng.random(),
                refiner_score: None,
            }
        })
        .collect();
    let heads = AlignmentHeads::new(
        random_linear(&mut rng, dl, d),
        random_linear(&mut rng, dv, d),
        10.0,
    )
    .unwrap();
    let query = Embedding::new((0..dl).map(|_| gauss(&mut rng)).collect());
    Case {
        frame: PerceptionFrame {
            frame_index: seed,
            mean_brightness: 0.5,
            features,
            proposals,
        },
        map,
        heads,
        query,
    }
}

fn affine(l: &Linear, x: &[f64]) -> Vec<f64> {
    let (i_n, o_n) = (l.in_dim(), l.out_dim());
    (0..o_n)
        .map(|j| {
            f64::from(l.bias()[j])
                + (0..i_n)
                    .map(|i| x[i] * f64::from(l.weight()[i * o_n + j]))
                    .sum::<f64>()
        })
        .collect()
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 1e-12).then(|| v.iter().map(|x| x / n).collect())
}

/// `(proposal index, fusion score)` for the candidates surviving gate and
/// the default refiner, in proposal order, and the chosen index (θ applied).
pub fn brute_force(c: &Case, p: &AssociationParams) -> (Vec<(usize, f64)>, Option<usize>) {
    assert_eq!(p.refiner, RefinerMode::Default);
    let f = &c.frame.features;
    let (h, w, dv) = (f.height(), f.width(), f.channels());
    let a = |r: usize, col: usize| f64::from(c.map.grid.get(r, col));
    let q: Vec<f64> = c.query.as_slice().iter().map(|&x| f64::from(x)).collect();
    let gl = unit(&affine(&c.heads.text, &q)).expect("query projects to nonzero");
    let mut scored = Vec::new();
    for (i, pr) in c.frame.proposals.iter().enumerate() {
        let b = pr.bbox;
        let mut box_sum = 0.0;
        let mut box_n = 0.0;
        for r in b.y0 as usize..b.y1 as usize {
            for col in b.x0 as usize..b.x1 as usize {
                box_sum += a(r, col);
                box_n += 1.0;
            }
        }
        if box_sum / box_n < p.eta {
            continue;
        }
        let mut mean = vec![0f64; dv];
        let mut am = 0.0;
        let mut n = 0.0;
        for r in 0..h {
            for col in 0..w {
                if pr.mask.get(r, col) {
                    for (k, m) in mean.iter_mut().enumerate() {
                        *m += f64::from(f.pixel(r, col)[k]);
                    }
                    am += a(r, col);
                    n += 1.0;
                }
            }
        }
        let mean: Vec<f64> = mean.iter().map(|m| m / n).collect();
        let Some(gv) = unit(&mean) else { continue };
        let Some(pv) = unit(&affine(&c.heads.visual, &gv)) else {
            continue;
        };
        let cos: f64 = pv.iter().zip(&gl).map(|(x, y)| x * y).sum();
        let cos_plus = if p.clamp_cosine { cos.clamp(0.0, 1.0) } else { cos };
        scored.push((i, cos, p.lambda * cos_plus + (1.0 - p.lambda) * am / n));
    }
    // default refiner: top-N by cosine above the floor, ties to lower index
    let mut kept: Vec<_> = scored.into_iter().filter(|s| s.1 >= p.floor).collect();
    kept.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
    kept.truncate(p.top_n);
    kept.sort_by_key(|s| s.0);
    let mut best: Option<(usize, f64)> = None;
    for &(i, _, s) in &kept {
        if best.is_none_or(|(_, bs)| s > bs) {
            best = Some((i, s));
        }
    }
    let pick = best.filter(|&(_, s)| s >= p.theta).map(|(i, _)| i);
    (kept.into_iter().map(|(i, _, s)| (i, s)).collect(), pick)
}
