//! Region similarity `J`, boundary accuracy `F`, and their mean `J&F`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities strictly above this are foreground.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Input(format!(
                "{} mask values for a {height}x{width} mask",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    /// Threshold a `[H, W]` (or `[1, H, W]`) map at [`THRESHOLD`].
    pub fn from_probabilities(p: &Tensor) -> Result<Self> {
        let (h, w) = match p.shape() {
            [h, w] | [1, h, w] => (*h, *w),
            s => return Err(Error::Input(format!("mask map {s:?}, expected [H,W]"))),
        };
        Self::new(h, w, p.data().iter().map(|&v| v > THRESHOLD).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Foreground pixels with a background 4-neighbour; outside counts as background.
    pub fn boundary(&self) -> BinaryMask {
        let (h, w) = (self.height, self.width);
        let fg = |y: isize, x: isize| {
            y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && self.get(y as usize, x as usize)
        };
        let data = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as isize, (i % w) as isize);
                fg(y, x) && !(fg(y - 1, x) && fg(y + 1, x) && fg(y, x - 1) && fg(y, x + 1))
            })
            .collect();
        BinaryMask { height: h, width: w, data }
    }

    fn check_pair(&self, other: &BinaryMask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Input(format!(
                "mask shapes {}x{} and {}x{} differ",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// `|A ∩ B| / |A ∪ B|`, with two empty masks scoring 1.
pub fn region_similarity_j(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check_pair(gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `ceil(0.0075 · diagonal)` pixels.
pub fn default_tolerance(height: usize, width: usize) -> usize {
    let diag = ((height * height + width * width) as f64).sqrt();
    (0.0075 * diag).ceil() as usize
}

/// Offsets within Euclidean distance `tol`.
fn disk(tol: usize) -> Vec<(isize, isize)> {
    let r = tol as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

fn dilate(m: &BinaryMask, offsets: &[(isize, isize)]) -> BinaryMask {
    let (h, w) = (m.height as isize, m.width as isize);
    let mut out = BinaryMask::empty(m.height, m.width);
    for y in 0..h {
        for x in 0..w {
            if !m.get(y as usize, x as usize) {
                continue;
            }
            for &(dy, dx) in offsets {
                let (yy, xx) = (y + dy, x + dx);
                if yy >= 0 && xx >= 0 && yy < h && xx < w {
                    out.set(yy as usize, xx as usize, true);
                }
            }
        }
    }
    out
}

fn matched(boundary: &BinaryMask, dilated_other: &BinaryMask) -> usize {
    boundary
        .data
        .iter()
        .zip(&dilated_other.data)
        .filter(|(&b, &d)| b && d)
        .count()
}

/// Boundary F-measure with matches allowed within `tolerance` pixels.
pub fn boundary_accuracy_f(pred: &BinaryMask, gt: &BinaryMask, tolerance: usize) -> Result<f64> {
    pred.check_pair(gt)?;
    let (bp, bg) = (pred.boundary(), gt.boundary());
    let (np, ng) = (bp.count(), bg.count());
    match (np, ng) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let offsets = disk(tolerance);
    let precision = matched(&bp, &dilate(&bg, &offsets)) as f64 / np as f64;
    let recall = matched(&bg, &dilate(&bp, &offsets)) as f64 / ng as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JfScore {
    pub j: f64,
    pub f: f64,
    pub jf: f64,
}

/// Means of per-frame `J` and `F`, and their average.
pub fn jf_score(js: &[f64], fs: &[f64]) -> Result<JfScore> {
    if js.is_empty() || js.len() != fs.len() {
        return Err(Error::Input(format!(
            "need equal nonempty score lists, got {} J and {} F",
            js.len(),
            fs.len()
        )));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (j, f) = (mean(js), mean(fs));
    Ok(JfScore { j, f, jf: (j + f) / 2.0 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipMetrics {
    pub js: Vec<f64>,
    pub fs: Vec<f64>,
}

impl ClipMetrics {
    pub fn score(&self) -> Result<JfScore> {
        jf_score(&self.js, &self.fs)
    }
}

/// Per-frame metrics of `[T, H, W]` probabilities against 0/1 ground truth.
pub fn evaluate_clip(probs: &Tensor, gt: &Tensor, tolerance: Option<usize>) -> Result<ClipMetrics> {
    let [t, h, w] = probs.shape()[..] else {
        return Err(Error::Input(format!("predictions {:?}, expected [T,H,W]", probs.shape())));
    };
    if gt.shape() != probs.shape() {
        return Err(Error::Input(format!(
            "predictions {:?} vs ground truth {:?}",
            probs.shape(),
            gt.shape()
        )));
    }
    let tol = tolerance.unwrap_or_else(|| default_tolerance(h, w));
    let mut out = ClipMetrics {
        js: Vec::with_capacity(t),
        fs: Vec::with_capacity(t),
    };
    for i in 0..t {
        let p = BinaryMask::from_probabilities(&probs.slice(0, i, i + 1)?)?;
        let g = BinaryMask::from_probabilities(&gt.slice(0, i, i + 1)?)?;
        out.js.push(region_similarity_j(&p, &g)?);
        out.fs.push(boundary_accuracy_f(&p, &g, tol)?);
    }
    Ok(out)
}

/// Mean `J`, `F` and `J&F` over clips, each clip weighted equally.
pub fn aggregate(clips: &[ClipMetrics]) -> Result<JfScore> {
    let scores = clips.iter().map(ClipMetrics::score).collect::<Result<Vec<_>>>()?;
    let js: Vec<f64> = scores.iter().map(|s| s.j).collect();
    let fs: Vec<f64> = scores.iter().map(|s| s.f).collect();
    jf_score(&js, &fs)
}
