//! Multi-scale Harris corner detection on the masked grayscale image, with a
//! 128-d descriptor built from orientation-normalized gradient histograms
//! (4x4 spatial cells, 8 orientation bins).

use crate::features::{Keypoint, KeypointProvider, DESCRIPTOR_LEN};
use crate::frame::Frame;
use crate::se3::Vec2;
use rayon::prelude::*;

const HARRIS_K: f32 = 0.04;
const PYRAMID_LEVELS: usize = 3;
/// Candidates below this fraction of the level's strongest response are
/// dropped, as is anything under an absolute floor.
const RESPONSE_REL_THRESHOLD: f32 = 0.005;
const RESPONSE_ABS_FLOOR: f32 = 1e-8;
/// Keypoints need this margin to the level border so the rotated descriptor
/// patch stays inside the image.
const PATCH_MARGIN: isize = 13;

struct Level {
    w: usize,
    h: usize,
    gray: Vec<f32>,
    grad_x: Vec<f32>,
    grad_y: Vec<f32>,
}

impl Level {
    fn build(gray: Vec<f32>, w: usize, h: usize) -> Level {
        let mut grad_x = vec![0.0f32; w * h];
        let mut grad_y = vec![0.0f32; w * h];
        for v in 1..h.saturating_sub(1) {
            for u in 1..w - 1 {
                let i = v * w + u;
                grad_x[i] = (gray[i - w + 1] + 2.0 * gray[i + 1] + gray[i + w + 1]
                    - gray[i - w - 1]
                    - 2.0 * gray[i - 1]
                    - gray[i + w - 1])
                    * 0.125;
                grad_y[i] = (gray[i + w - 1] + 2.0 * gray[i + w] + gray[i + w + 1]
                    - gray[i - w - 1]
                    - 2.0 * gray[i - w]
                    - gray[i - w + 1])
                    * 0.125;
            }
        }
        Level {
            w,
            h,
            gray,
            grad_x,
            grad_y,
        }
    }

    fn downsample(&self) -> Level {
        let w = self.w / 2;
        let h = self.h / 2;
        let mut gray = vec![0.0f32; w * h];
        for v in 0..h {
            for u in 0..w {
                let i = 2 * v * self.w + 2 * u;
                gray[v * w + u] =
                    0.25 * (self.gray[i] + self.gray[i + 1] + self.gray[i + self.w]
                        + self.gray[i + self.w + 1]);
            }
        }
        Level::build(gray, w, h)
    }

    fn bilinear_grad(&self, x: f32, y: f32) -> (f32, f32) {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as usize, y0 as usize);
        let i = y0 * self.w + x0;
        let lerp = |m: &Vec<f32>| {
            m[i] * (1.0 - fx) * (1.0 - fy)
                + m[i + 1] * fx * (1.0 - fy)
                + m[i + self.w] * (1.0 - fx) * fy
                + m[i + self.w + 1] * fx * fy
        };
        (lerp(&self.grad_x), lerp(&self.grad_y))
    }
}

/// 5x5 box filter, borders left untouched.
fn box_filter(src: &[f32], w: usize, h: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; w * h];
    if w < 5 || h < 5 {
        return out;
    }
    for v in 2..h - 2 {
        for u in 2..w - 2 {
            let mut acc = 0.0f32;
            for dv in 0..5 {
                let row = (v + dv - 2) * w + u - 2;
                for dx in 0..5 {
                    acc += src[row + dx];
                }
            }
            out[v * w + u] = acc / 25.0;
        }
    }
    out
}

fn harris_response(level: &Level) -> Vec<f32> {
    let n = level.w * level.h;
    let mut xx = vec![0.0f32; n];
    let mut yy = vec![0.0f32; n];
    let mut xy = vec![0.0f32; n];
    for i in 0..n {
        xx[i] = level.grad_x[i] * level.grad_x[i];
        yy[i] = level.grad_y[i] * level.grad_y[i];
        xy[i] = level.grad_x[i] * level.grad_y[i];
    }
    let sxx = box_filter(&xx, level.w, level.h);
    let syy = box_filter(&yy, level.w, level.h);
    let sxy = box_filter(&xy, level.w, level.h);
    let mut resp = vec![0.0f32; n];
    for i in 0..n {
        let det = sxx[i] * syy[i] - sxy[i] * sxy[i];
        let tr = sxx[i] + syy[i];
        resp[i] = det - HARRIS_K * tr * tr;
    }
    resp
}

struct Candidate {
    level: usize,
    u: usize,
    v: usize,
    /// Subpixel offsets from a parabola fit of the response.
    du: f32,
    dv: f32,
    response: f32,
}

/// Histogram-of-oriented-gradients descriptor over a 16x16 patch at the
/// detection scale: 4x4 spatial cells by 8 orientation bins, L2-normalized
/// with the usual 0.2 clamp. Sampled upright; checker-like corners have no
/// stable dominant orientation, and the graph only needs matches between
/// views close enough in rotation to register anyway.
fn describe(level: &Level, u: f32, v: f32) -> [f32; DESCRIPTOR_LEN] {
    let mut desc = [0.0f32; DESCRIPTOR_LEN];
    for sy in 0..16 {
        for sx in 0..16 {
            let px = sx as f32 - 7.5;
            let py = sy as f32 - 7.5;
            let (gx, gy) = level.bilinear_grad(u + px, v + py);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let angle = gy.atan2(gx).rem_euclid(2.0 * std::f32::consts::PI);
            let obin = ((angle / (2.0 * std::f32::consts::PI)) * 8.0) as usize;
            let cell = (sy / 4) * 4 + sx / 4;
            desc[cell * 8 + obin.min(7)] += mag;
        }
    }
    let mut norm = desc.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm > 0.0 {
        for value in desc.iter_mut() {
            *value = (*value / norm).min(0.2);
        }
        norm = desc.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            for value in desc.iter_mut() {
                *value /= norm;
            }
        }
    }
    desc
}

/// Is the 5x5 neighborhood of a level-0 pixel fully inside the mask?
fn well_inside_mask(frame: &Frame, u: usize, v: usize) -> bool {
    let w = frame.mask.width;
    let h = frame.mask.height;
    if u < 2 || v < 2 || u + 2 >= w || v + 2 >= h {
        return false;
    }
    for dv in v - 2..=v + 2 {
        for du in u - 2..=u + 2 {
            if !frame.mask.at(du, dv) {
                return false;
            }
        }
    }
    true
}

/// Detect up to `target_n` corners inside the mask, ranked by Harris
/// response, each with a descriptor, back-projected point and normal.
/// Fully deterministic: same frame in, bitwise identical keypoints out.
pub fn detect_keypoints(frame: &Frame, target_n: usize) -> Vec<Keypoint> {
    let w = frame.mask.width;
    let h = frame.mask.height;
    let gray_full = frame.grayscale();
    let mut masked = vec![0.0f32; w * h];
    for i in 0..w * h {
        if frame.mask.values[i] != 0 {
            masked[i] = gray_full[i] / 255.0;
        }
    }

    let mut levels = vec![Level::build(masked, w, h)];
    for _ in 1..PYRAMID_LEVELS {
        let prev = levels.last().unwrap();
        if prev.w < 48 || prev.h < 48 {
            break;
        }
        levels.push(prev.downsample());
    }

    let mut candidates: Vec<Candidate> = Vec::new();
    for (li, level) in levels.iter().enumerate() {
        let resp = harris_response(level);
        let max_resp = resp.iter().cloned().fold(0.0f32, f32::max);
        let threshold = (max_resp * RESPONSE_REL_THRESHOLD).max(RESPONSE_ABS_FLOOR);
        let margin = PATCH_MARGIN as usize;
        if level.w <= 2 * margin || level.h <= 2 * margin {
            continue;
        }
        for v in margin..level.h - margin {
            for u in margin..level.w - margin {
                let r = resp[v * level.w + u];
                if r < threshold {
                    continue;
                }
                // 3x3 non-max suppression with deterministic tie handling:
                // earlier (row-major) equal pixels win.
                let mut is_max = true;
                'nms: for dv in -1i32..=1 {
                    for du in -1i32..=1 {
                        if du == 0 && dv == 0 {
                            continue;
                        }
                        let nr = resp[(v as i32 + dv) as usize * level.w + (u as i32 + du) as usize];
                        if nr > r || (nr == r && (dv < 0 || (dv == 0 && du < 0))) {
                            is_max = false;
                            break 'nms;
                        }
                    }
                }
                if is_max {
                    let refine = |a: f32, b: f32, c: f32| -> f32 {
                        let denom = a - 2.0 * b + c;
                        if denom < 0.0 {
                            (0.5 * (a - c) / denom).clamp(-0.6, 0.6)
                        } else {
                            0.0
                        }
                    };
                    let du = refine(
                        resp[v * level.w + u - 1],
                        r,
                        resp[v * level.w + u + 1],
                    );
                    let dv = refine(
                        resp[(v - 1) * level.w + u],
                        r,
                        resp[(v + 1) * level.w + u],
                    );
                    candidates.push(Candidate {
                        level: li,
                        u,
                        v,
                        du,
                        dv,
                        response: r,
                    });
                }
            }
        }
    }

    candidates.sort_by(|a, b| {
        b.response
            .partial_cmp(&a.response)
            .unwrap()
            .then(a.level.cmp(&b.level))
            .then(a.v.cmp(&b.v))
            .then(a.u.cmp(&b.u))
    });

    // Validate against mask, depth and normals at full resolution. The
    // subpixel location drives unprojection; depth and normal come from the
    // nearest pixel.
    let to_level0 = |cand: &Candidate| -> (f64, f64) {
        let scale = (1usize << cand.level) as f64;
        (
            (cand.u as f64 + cand.du as f64 + 0.5) * scale - 0.5,
            (cand.v as f64 + cand.dv as f64 + 0.5) * scale - 0.5,
        )
    };
    let mut accepted: Vec<&Candidate> = Vec::new();
    let mut occupied = vec![false; w * h];
    for cand in &candidates {
        if accepted.len() >= target_n {
            break;
        }
        let (u0f, v0f) = to_level0(cand);
        let u0 = u0f.round() as usize;
        let v0 = v0f.round() as usize;
        if u0 >= w || v0 >= h || occupied[v0 * w + u0] {
            continue;
        }
        if !well_inside_mask(frame, u0, v0) {
            continue;
        }
        if frame.normal_at(u0, v0).is_none() || !frame.depth.is_valid(u0, v0) {
            continue;
        }
        occupied[v0 * w + u0] = true;
        accepted.push(cand);
    }

    accepted
        .par_iter()
        .map(|cand| {
            let level = &levels[cand.level];
            let (u0f, v0f) = to_level0(cand);
            let u0 = u0f.round() as usize;
            let v0 = v0f.round() as usize;
            let depth = frame.depth.at(u0, v0);
            Keypoint {
                pixel: Vec2::new(u0f, v0f),
                point: crate::se3::unproject(u0f, v0f, depth, &frame.intrinsics)
                    .expect("validated"),
                normal: frame.normal_at(u0, v0).expect("validated"),
                descriptor: describe(level, cand.u as f32 + cand.du, cand.v as f32 + cand.dv),
            }
        })
        .collect()
}

/// Default keypoint source: the classical multi-scale corner detector.
pub struct HarrisKeypointProvider;

impl KeypointProvider for HarrisKeypointProvider {
    fn detect(&self, frame: &Frame, target_n: usize) -> Result<Vec<Keypoint>, String> {
        Ok(detect_keypoints(frame, target_n))
    }
}
