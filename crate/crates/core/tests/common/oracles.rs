//! Plain-loop reference implementations used as test oracles. Nothing here
//! calls the library's kernels.
#![allow(dead_code)]

/// Row-major `[rows, cols]` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// `x W + b` with `W: [in, out]`.
pub fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    assert_eq!(x.cols, w.rows);
    let mut out = vec![0.0; x.rows * w.cols];
    for i in 0..x.rows {
        for j in 0..w.cols {
            let mut acc = b[j];
            for k in 0..x.cols {
                acc += x.at(i, k) * w.at(k, j);
            }
            out[i * w.cols + j] = acc;
        }
    }
    Mat::new(x.rows, w.cols, out)
}

pub struct AttentionWeights<'a> {
    pub wq: &'a Mat,
    pub bq: &'a [f64],
    pub wk: &'a Mat,
    pub bk: &'a [f64],
    pub wv: &'a Mat,
    pub bv: &'a [f64],
    pub wo: &'a Mat,
    pub bo: &'a [f64],
}

/// `concat_h softmax(Q_h K_hᵀ / sqrt(d_h)) V_h · W_o + b_o`.
pub fn multi_head_attention(q: &Mat, k: &Mat, v: &Mat, w: &AttentionWeights<'_>, heads: usize) -> Mat {
    let qp = affine(q, w.wq, w.bq);
    let kp = affine(k, w.wk, w.bk);
    let vp = affine(v, w.wv, w.bv);
    let d = qp.cols;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut mixed = vec![0.0; q.rows * d];
    for h in 0..heads {
        for i in 0..q.rows {
            let scores: Vec<f64> = (0..k.rows)
                .map(|j| (0..dh).map(|c| qp.at(i, h * dh + c) * kp.at(j, h * dh + c)).sum::<f64>() * scale)
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                let mut acc = 0.0;
                for j in 0..k.rows {
                    acc += e[j] / z * vp.at(j, h * dh + c);
                }
                mixed[i * d + h * dh + c] = acc;
            }
        }
    }
    affine(&Mat::new(q.rows, d, mixed), w.wo, w.bo)
}

/// Intersection over union by pixel counting; empty union scores 1.
pub fn jaccard(pred: &[bool], gt: &[bool]) -> f64 {
    let mut inter = 0;
    let mut union = 0;
    for i in 0..pred.len() {
        if pred[i] && gt[i] {
            inter += 1;
        }
        if pred[i] || gt[i] {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Boundary pixel coordinates: foreground with a 4-neighbour that is
/// background or outside the image.
pub fn boundary_points(m: &[bool], h: usize, w: usize) -> Vec<(i64, i64)> {
    let mut pts = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !m[(y as usize) * w + x as usize] {
                continue;
            }
            let bg = [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| {
                let (yy, xx) = (y + dy, x + dx);
                yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 || !m[(yy as usize) * w + xx as usize]
            });
            if bg {
                pts.push((y, x));
            }
        }
    }
    pts
}

/// F-measure by checking every boundary pair against the tolerance disk.
pub fn boundary_f_all_pairs(pred: &[bool], gt: &[bool], h: usize, w: usize, tol: usize) -> f64 {
    let bp = boundary_points(pred, h, w);
    let bg = boundary_points(gt, h, w);
    if bp.is_empty() && bg.is_empty() {
        return 1.0;
    }
    if bp.is_empty() || bg.is_empty() {
        return 0.0;
    }
    let t2 = (tol * tol) as i64;
    let near = |a: &(i64, i64), set: &[(i64, i64)]| {
        set.iter().any(|b| (a.0 - b.0).pow(2) + (a.1 - b.1).pow(2) <= t2)
    };
    let precision = bp.iter().filter(|p| near(p, &bg)).count() as f64 / bp.len() as f64;
    let recall = bg.iter().filter(|g| near(g, &bp)).count() as f64 / bg.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Dice loss of one frame, written out as sums.
pub fn dice(p: &[f64], g: &[f64], smooth: f64) -> f64 {
    let inter: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    let sp: f64 = p.iter().sum();
    let sg: f64 = g.iter().sum();
    1.0 - (2.0 * inter + smooth) / (sp + sg + smooth)
}

/// Mean focal loss from logits, written with explicit probabilities.
pub fn focal(logits: &[f64], g: &[f64], alpha: f64, gamma: f64) -> f64 {
    let mut total = 0.0;
    for (&x, &y) in logits.iter().zip(g) {
        let p = 1.0 / (1.0 + (-x).exp());
        let (pt, at) = if y > 0.5 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
        total += -at * (1.0 - pt).powf(gamma) * pt.ln();
    }
    total / logits.len() as f64
}
