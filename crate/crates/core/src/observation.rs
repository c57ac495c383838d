//! Depth preprocessing, joint depth proxies and visibility.

use crate::camera::{backproject, project_pinhole, PinholeIntrinsics};
use crate::geometry::{Vec2, Vec3};
use crate::render::{DepthFrame, Rasterization};

/// Default visibility tolerance (mm).
pub const DEFAULT_TAU: f64 = 30.0;

/// Everything the training pipeline may see for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    /// 2D joints in pixels.
    pub keypoints: Vec<Vec2>,
    pub confidence: Vec<f64>,
    pub visibility: Vec<bool>,
    /// Depth frame as observed (possibly cleaned).
    pub depth: DepthFrame,
    /// Observed body region.
    pub body_mask: Vec<bool>,
    /// Back-projected joint proxies (mm, camera frame); `None` where the depth is missing.
    pub proxies: Vec<Option<Vec3>>,
}

impl ObservationSet {
    /// Cleans a raw frame and extracts the joint proxies from it.
    pub fn from_raw(
        keypoints: Vec<Vec2>,
        confidence: Vec<f64>,
        visibility: Vec<bool>,
        raw: &DepthFrame,
        body_mask: Vec<bool>,
        k: &PinholeIntrinsics,
        window: usize,
    ) -> Self {
        let depth = preprocess(raw);
        let proxies = extract_proxy(&keypoints, &depth, k, window);
        Self {
            keypoints,
            confidence,
            visibility,
            depth,
            body_mask,
            proxies,
        }
    }

    /// Visibility usable for proxy supervision: flagged visible and a proxy exists.
    pub fn usable_visibility(&self) -> Vec<bool> {
        self.visibility.iter().zip(&self.proxies).map(|(v, p)| *v && p.is_some()).collect()
    }
}

/// 3x3 median over the valid pixels of each window. Invalid pixels stay
/// invalid; even counts take the lower median.
pub fn denoise(frame: &DepthFrame) -> DepthFrame {
    let (w, h) = (frame.width, frame.height);
    let mut out = frame.clone();
    let mut window = Vec::with_capacity(9);
    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            if !frame.mask[i] {
                continue;
            }
            window.clear();
            for r in row.saturating_sub(1)..=(row + 1).min(h - 1) {
                for c in col.saturating_sub(1)..=(col + 1).min(w - 1) {
                    let j = r * w + c;
                    if frame.mask[j] {
                        window.push(frame.depth[j]);
                    }
                }
            }
            window.sort_by(f32::total_cmp);
            out.depth[i] = window[(window.len() - 1) / 2];
        }
    }
    out
}

/// Fills every invalid pixel with the value of the nearest valid pixel
/// (4-connected steps, i.e. Manhattan distance); ties go to the valid pixel
/// with the smallest linear index. Frames without any valid pixel are
/// returned unchanged.
pub fn hole_fill(frame: &DepthFrame) -> DepthFrame {
    let (w, h) = (frame.width, frame.height);
    let n = w * h;
    let mut source = vec![usize::MAX; n];
    let mut frontier: Vec<usize> = (0..n).filter(|&i| frame.mask[i]).collect();
    if frontier.is_empty() {
        return frame.clone();
    }
    for &i in &frontier {
        source[i] = i;
    }
    let mut out = frame.clone();
    let mut level = vec![0u32; n];
    let mut current = 0u32;
    while !frontier.is_empty() {
        current += 1;
        let mut next = Vec::new();
        for &p in &frontier {
            let (r, c) = (p / w, p % w);
            let mut push = |q: usize| {
                if frame.mask[q] {
                    return;
                }
                if source[q] == usize::MAX {
                    next.push(q);
                    source[q] = source[p];
                    level[q] = current;
                } else if level[q] == current && source[p] < source[q] {
                    source[q] = source[p];
                }
            };
            if r > 0 {
                push(p - w);
            }
            if r + 1 < h {
                push(p + w);
            }
            if c > 0 {
                push(p - 1);
            }
            if c + 1 < w {
                push(p + 1);
            }
        }
        frontier = next;
    }
    for i in 0..n {
        if !frame.mask[i] {
            out.depth[i] = frame.depth[source[i]];
            out.mask[i] = true;
        }
    }
    out
}

/// Denoise then fill.
pub fn preprocess(frame: &DepthFrame) -> DepthFrame {
    hole_fill(&denoise(frame))
}

fn pixel_of(p: &Vec2, width: usize, height: usize) -> Option<(usize, usize)> {
    let (c, r) = (p.x.round(), p.y.round());
    if c < 0.0 || r < 0.0 || c >= width as f64 || r >= height as f64 || !c.is_finite() || !r.is_finite() {
        return None;
    }
    Some((c as usize, r as usize))
}

/// Back-projects each joint through the depth frame at its nearest pixel.
/// With `window > 0` the depth is the mean of the valid pixels within that
/// radius instead of the single pixel.
pub fn extract_proxy(keypoints: &[Vec2], depth: &DepthFrame, k: &PinholeIntrinsics, window: usize) -> Vec<Option<Vec3>> {
    keypoints
        .iter()
        .map(|x| {
            let (col, row) = pixel_of(x, depth.width, depth.height)?;
            let d = if window == 0 {
                let i = depth.index(col, row);
                if !depth.mask[i] {
                    return None;
                }
                depth.depth[i] as f64
            } else {
                let mut sum = 0.0;
                let mut count = 0usize;
                for r in row.saturating_sub(window)..=(row + window).min(depth.height - 1) {
                    for c in col.saturating_sub(window)..=(col + window).min(depth.width - 1) {
                        let i = depth.index(c, r);
                        if depth.mask[i] {
                            sum += depth.depth[i] as f64;
                            count += 1;
                        }
                    }
                }
                if count == 0 {
                    return None;
                }
                sum / count as f64
            };
            backproject(x, d, k).ok()
        })
        .collect()
}

/// A joint is visible when the rendered surface at its pixel is no more than
/// `tau` in front of it. Joints that project outside the frame or onto an
/// uncovered pixel are invisible.
pub fn visibility_from_render(joints: &[Vec3], render: &Rasterization, k: &PinholeIntrinsics, tau: f64) -> Vec<bool> {
    joints
        .iter()
        .map(|j| {
            let Ok(p) = project_pinhole(j, k) else { return false };
            let Some((col, row)) = pixel_of(&p, render.width, render.height) else {
                return false;
            };
            let i = row * render.width + col;
            render.covered(i) && render.depth[i] >= j.z - tau
        })
        .collect()
}
