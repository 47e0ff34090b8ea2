//! Region similarity J, boundary accuracy F and the J&F composite.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

pub const DEFAULT_BOUNDARY_TOL: usize = 1;

/// Boundary pixels of a binary mask: foreground pixels with a 4-neighbor that is
/// background or outside the grid.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let at = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize];
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if at(y, x) {
                out[y as usize * w + x as usize] =
                    !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1));
            }
        }
    }
    out
}

/// Number of `from` pixels with a `to` pixel within Chebyshev distance `tol`.
fn matched(from: &[bool], to: &[bool], h: usize, w: usize, tol: usize) -> usize {
    let mut count = 0;
    for y in 0..h {
        for x in 0..w {
            if !from[y * w + x] {
                continue;
            }
            let (y0, y1) = (y.saturating_sub(tol), (y + tol).min(h - 1));
            let (x0, x1) = (x.saturating_sub(tol), (x + tol).min(w - 1));
            if (y0..=y1).any(|yy| (x0..=x1).any(|xx| to[yy * w + xx])) {
                count += 1;
            }
        }
    }
    count
}

/// Boundary sizes and matched counts for one object in one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundaryCounts {
    pub pred: usize,
    pub gt: usize,
    /// Predicted boundary pixels with a ground-truth boundary pixel in range.
    pub pred_matched: usize,
    /// Ground-truth boundary pixels with a predicted boundary pixel in range.
    pub gt_matched: usize,
}

impl BoundaryCounts {
    pub fn compute(pred: &[bool], gt: &[bool], h: usize, w: usize, tol: usize) -> Self {
        let bp = boundary(pred, h, w);
        let bg = boundary(gt, h, w);
        Self {
            pred: bp.iter().filter(|&&b| b).count(),
            gt: bg.iter().filter(|&&b| b).count(),
            pred_matched: matched(&bp, &bg, h, w, tol),
            gt_matched: matched(&bg, &bp, h, w, tol),
        }
    }

    pub fn f_measure(&self) -> f64 {
        match (self.pred, self.gt) {
            (0, 0) => 1.0,
            (0, _) | (_, 0) => 0.0,
            _ => {
                let p = self.pred_matched as f64 / self.pred as f64;
                let r = self.gt_matched as f64 / self.gt as f64;
                if p + r == 0.0 {
                    0.0
                } else {
                    2.0 * p * r / (p + r)
                }
            }
        }
    }
}

/// Intersection over union; 1 when both masks are empty.
pub fn jaccard(pred: &[bool], gt: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectScore {
    pub object: u8,
    pub j: f64,
    pub f: f64,
    pub jf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub video: usize,
    pub objects: Vec<ObjectScore>,
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf_mean: f64,
}

/// Scores per object and video, with means over all objects of all videos.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub videos: Vec<VideoScore>,
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf_mean: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl SegReport {
    /// Combines per-video reports, renumbering videos in order.
    pub fn merge(reports: impl IntoIterator<Item = SegReport>) -> Self {
        let videos: Vec<VideoScore> = reports
            .into_iter()
            .flat_map(|r| r.videos)
            .enumerate()
            .map(|(i, mut v)| {
                v.video = i;
                v
            })
            .collect();
        Self::from_videos(videos)
    }

    fn from_videos(videos: Vec<VideoScore>) -> Self {
        let all = || videos.iter().flat_map(|v| v.objects.iter());
        Self {
            j_mean: mean(all().map(|o| o.j)),
            f_mean: mean(all().map(|o| o.f)),
            jf_mean: mean(all().map(|o| o.jf)),
            videos,
        }
    }
}

/// Scores a predicted `T×H×W` mask sequence against ground truth for objects `1..=K`.
///
/// Frame 0 is the given annotation and is skipped unless it is the only frame.
pub fn evaluate_masks(
    pred: &[u8],
    gt: &[u8],
    shape: (usize, usize, usize),
    max_objects: usize,
    boundary_tol: usize,
) -> Result<SegReport> {
    let (t, h, w) = shape;
    let hw = h * w;
    if pred.len() != t * hw || gt.len() != t * hw {
        return Err(shape_err!("masks of {} and {} pixels for shape {t}×{h}×{w}", pred.len(), gt.len()));
    }
    let frames: Vec<usize> = if t > 1 { (1..t).collect() } else { (0..t).collect() };
    let objects = (1..=max_objects)
        .map(|k| {
            let k = k as u8;
            let (mut js, mut fs) = (Vec::new(), Vec::new());
            for &f in &frames {
                let p: Vec<bool> = pred[f * hw..(f + 1) * hw].iter().map(|&v| v == k).collect();
                let g: Vec<bool> = gt[f * hw..(f + 1) * hw].iter().map(|&v| v == k).collect();
                js.push(jaccard(&p, &g));
                fs.push(BoundaryCounts::compute(&p, &g, h, w, boundary_tol).f_measure());
            }
            let (j, f) = (mean(js.into_iter()), mean(fs.into_iter()));
            ObjectScore {
                object: k,
                j,
                f,
                jf: (j + f) / 2.0,
            }
        })
        .collect::<Vec<_>>();
    let video = VideoScore {
        video: 0,
        j_mean: mean(objects.iter().map(|o| o.j)),
        f_mean: mean(objects.iter().map(|o| o.f)),
        jf_mean: mean(objects.iter().map(|o| o.jf)),
        objects,
    };
    Ok(SegReport::from_videos(vec![video]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(h: usize, w: usize, y0: usize, x0: usize, bh: usize, bw: usize) -> Vec<u8> {
        let mut m = vec![0u8; h * w];
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                m[y * w + x] = 1;
            }
        }
        m
    }

    #[test]
    fn perfect_and_disjoint() {
        let a = block(16, 16, 2, 2, 4, 4);
        let r = evaluate_masks(&a, &a, (1, 16, 16), 1, 1).unwrap();
        assert_eq!((r.j_mean, r.f_mean, r.jf_mean), (1.0, 1.0, 1.0));
        let b = block(16, 16, 10, 10, 4, 4);
        let r = evaluate_masks(&a, &b, (1, 16, 16), 1, 1).unwrap();
        assert_eq!((r.j_mean, r.f_mean, r.jf_mean), (0.0, 0.0, 0.0));
    }

    #[test]
    fn shifted_block_jaccard() {
        let p = block(4, 4, 1, 0, 2, 2);
        let g = block(4, 4, 1, 1, 2, 2);
        let r = evaluate_masks(&p, &g, (1, 4, 4), 1, 1).unwrap();
        assert_eq!(r.j_mean, 1.0 / 3.0);
        // every boundary pixel is within one column of the other block
        assert_eq!(r.f_mean, 1.0);
    }

    #[test]
    fn interior_is_not_boundary() {
        let m: Vec<bool> = block(5, 5, 1, 1, 3, 3).iter().map(|&v| v == 1).collect();
        let b = boundary(&m, 5, 5);
        assert_eq!(b.iter().filter(|&&v| v).count(), 8);
        assert!(!b[2 * 5 + 2]);
        let full = vec![true; 9];
        assert_eq!(boundary(&full, 3, 3).iter().filter(|&&v| v).count(), 8);
    }

    #[test]
    fn frame_zero_is_excluded() {
        let a = block(8, 8, 0, 0, 3, 3);
        let z = vec![0u8; 64];
        let pred = [z.clone(), a.clone()].concat();
        let gt = [a.clone(), a].concat();
        let r = evaluate_masks(&pred, &gt, (2, 8, 8), 1, 1).unwrap();
        assert_eq!(r.jf_mean, 1.0);
        assert!(evaluate_masks(&pred, &gt[..64], (2, 8, 8), 1, 1).is_err());
    }

    #[test]
    fn absent_objects_score_one() {
        let z = vec![0u8; 64];
        let r = evaluate_masks(&z, &z, (1, 8, 8), 3, 1).unwrap();
        assert_eq!(r.videos[0].objects.len(), 3);
        assert_eq!(r.jf_mean, 1.0);
    }
}
