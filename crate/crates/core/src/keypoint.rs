//! Keypoints from the grounding map: greedy radius NMS, a single
//! regularized Newton step for sub-pixel placement, and neighborhood
//! sampling of the enhanced image features.

use std::cmp::Ordering;

use crate::error::{LensError, Result};
use crate::numerics::{bilinear_sample, bilinear_taps, grid_dims, Tensor};
use crate::tape::GatherTaps;

/// Condition number above which the 2x2 solve falls back to the diagonal.
const MAX_CONDITION: f64 = 1e8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    /// Column coordinate on the heatmap grid.
    pub x: f64,
    /// Row coordinate.
    pub y: f64,
    /// Heatmap value at the originating integer cell.
    pub score: f64,
    pub cell: (usize, usize),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeypointSet {
    pub points: Vec<Keypoint>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn coords(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.x, p.y)).collect()
    }
}

/// Greedy Euclidean NMS. Repeatedly takes the largest positive response
/// (lowest flat index on ties) and discards every cell within `radius` of it,
/// until nothing positive remains or `max_points` are chosen.
pub fn nms_extract(heatmap: &Tensor, radius: f64, max_points: usize) -> KeypointSet {
    let (h, w, _) = grid_dims(heatmap);
    let values = heatmap.data();
    let mut order: Vec<usize> = (0..h * w).filter(|&i| values[i] > 0.0).collect();
    // stable sort keeps row-major order among equal values
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(Ordering::Equal));
    let r2 = radius * radius;
    let mut points: Vec<Keypoint> = Vec::new();
    for idx in order {
        if points.len() >= max_points {
            break;
        }
        let (row, col) = (idx / w, idx % w);
        let suppressed = points.iter().any(|p| {
            let dy = p.cell.0 as f64 - row as f64;
            let dx = p.cell.1 as f64 - col as f64;
            dx * dx + dy * dy <= r2
        });
        if !suppressed {
            points.push(Keypoint {
                x: col as f64,
                y: row as f64,
                score: values[idx],
                cell: (row, col),
            });
        }
    }
    KeypointSet { points }
}

/// Local derivative estimates around one integer keypoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalQuadratic {
    pub dx: f64,
    pub dy: f64,
    pub dxx: f64,
    pub dyy: f64,
    pub dxy: f64,
}

/// Samples the 3x3 neighborhood in normalized `[-1, 1]` grid coordinates
/// (align-corners) and forms central differences.
pub fn local_quadratic(heatmap: &Tensor, x: usize, y: usize) -> LocalQuadratic {
    let (h, w, _) = grid_dims(heatmap);
    let step = |n: usize| if n > 1 { 2.0 / (n as f64 - 1.0) } else { 0.0 };
    let to_norm = |v: usize, n: usize| if n > 1 { 2.0 * v as f64 / (n as f64 - 1.0) - 1.0 } else { 0.0 };
    // snapping undoes round-off from the normalized round trip
    let to_pix = |v: f64, n: usize| {
        if n < 2 {
            return 0.0;
        }
        let p = (v + 1.0) * 0.5 * (n as f64 - 1.0);
        if (p - p.round()).abs() < 1e-9 {
            p.round()
        } else {
            p
        }
    };
    let (xn, yn) = (to_norm(x, w), to_norm(y, h));
    let (sx, sy) = (step(w), step(h));
    let offsets = [
        (0.0, 0.0),
        (sx, 0.0),
        (-sx, 0.0),
        (0.0, sy),
        (0.0, -sy),
        (sx, sy),
        (-sx, -sy),
        (-sx, sy),
        (sx, -sy),
    ];
    let pts: Vec<(f64, f64)> = offsets
        .iter()
        .map(|(ox, oy)| (to_pix(xn + ox, w), to_pix(yn + oy, h)))
        .collect();
    let v: Vec<f64> = bilinear_sample(heatmap, &pts).into_iter().map(|s| s[0]).collect();
    LocalQuadratic {
        dx: 0.5 * (v[1] - v[2]),
        dy: 0.5 * (v[3] - v[4]),
        dxx: v[1] - 2.0 * v[0] + v[2],
        dyy: v[3] - 2.0 * v[0] + v[4],
        dxy: 0.25 * (v[5] + v[6] - v[7] - v[8]),
    }
}

/// Offset `δ = −(H + εI)⁻¹ g`, with a diagonal solve when the regularized
/// Hessian is ill-conditioned, clipped to `[-1, 1]` per axis.
pub fn newton_offset(q: &LocalQuadratic, eps: f64) -> (f64, f64) {
    let a = q.dxx + eps;
    let d = q.dyy + eps;
    let b = q.dxy;
    let det = a * d - b * b;
    let trace = a + d;
    let half_gap = (((a - d) * 0.5).powi(2) + b * b).sqrt();
    let (l1, l2) = (trace * 0.5 + half_gap, trace * 0.5 - half_gap);
    let (big, small) = if l1.abs() >= l2.abs() { (l1.abs(), l2.abs()) } else { (l2.abs(), l1.abs()) };
    let ill = det == 0.0
        || det.abs() < 1e-12 * trace * trace
        || small == 0.0
        || big / small > MAX_CONDITION;
    let (ox, oy) = if ill {
        (safe_div(-q.dx, a), safe_div(-q.dy, d))
    } else {
        (
            -(d * q.dx - b * q.dy) / det,
            -(-b * q.dx + a * q.dy) / det,
        )
    };
    (clip_unit(ox), clip_unit(oy))
}

fn safe_div(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn clip_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(-1.0, 1.0)
    }
}

/// One regularized Newton step per keypoint on the discrete heatmap.
pub fn subpixel_refine(heatmap: &Tensor, points: &KeypointSet, eps: f64) -> Result<KeypointSet> {
    let (h, w, _) = grid_dims(heatmap);
    let mut refined = Vec::with_capacity(points.len());
    for p in &points.points {
        let inside = p.x >= 0.0
            && p.y >= 0.0
            && p.x <= (w - 1) as f64
            && p.y <= (h - 1) as f64
            && p.x.fract() == 0.0
            && p.y.fract() == 0.0;
        if !inside {
            return Err(LensError::PointOutsideHeatmap { x: p.x, y: p.y, h, w });
        }
        let (xi, yi) = (p.x as usize, p.y as usize);
        let (ox, oy) = newton_offset(&local_quadratic(heatmap, xi, yi), eps);
        refined.push(Keypoint {
            x: xi as f64 + ox,
            y: yi as f64 + oy,
            ..*p
        });
    }
    Ok(KeypointSet { points: refined })
}

/// Symmetric cell offsets spanning a `window x window` patch, row-major.
fn window_offsets(window: usize) -> Vec<(f64, f64)> {
    let half = (window / 2) as i64;
    let mut out = Vec::with_capacity(window * window);
    for dy in -half..=half {
        for dx in -half..=half {
            out.push((dx as f64, dy as f64));
        }
    }
    out
}

/// Interpolation taps for every neighborhood sample of every keypoint, in
/// keypoint-major order. Rows index the flattened `h x w` grid.
pub fn neighborhood_taps(grid: (usize, usize), points: &KeypointSet, window: usize) -> GatherTaps {
    let offsets = window_offsets(window);
    let mut taps = Vec::with_capacity(points.len() * offsets.len());
    for p in &points.points {
        for (dx, dy) in &offsets {
            let t = bilinear_taps(grid.0, grid.1, p.x + dx, p.y + dy);
            taps.push(t.iter().copied().filter(|&(_, w)| w != 0.0).collect());
        }
    }
    taps
}

/// For each keypoint, the `window²` border-clamped bilinear samples of an
/// `h x w x d` feature field around it.
pub fn sample_neighborhoods(features: &Tensor, points: &KeypointSet, window: usize) -> Vec<Vec<Vec<f64>>> {
    let offsets = window_offsets(window);
    points
        .points
        .iter()
        .map(|p| {
            let pts: Vec<(f64, f64)> = offsets.iter().map(|(dx, dy)| (p.x + dx, p.y + dy)).collect();
            bilinear_sample(features, &pts)
        })
        .collect()
}
