#![allow(dead_code)]

use lens_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Literal greedy NMS: pick the largest positive cell (first in row-major
/// order on ties), zero everything within `radius`, repeat.
pub fn oracle_nms(map: &Tensor, radius: f64, max_points: usize) -> Vec<(usize, usize, f64)> {
    let (h, w) = (map.dims()[0], map.dims()[1]);
    let mut m: Vec<f64> = map.data().to_vec();
    let mut out = Vec::new();
    while out.len() < max_points {
        let mut best: Option<usize> = None;
        for i in 0..h * w {
            if m[i] > 0.0 && best.map_or(true, |b| m[i] > m[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        let (br, bc) = (b / w, b % w);
        out.push((br, bc, map.data()[b]));
        for r in 0..h {
            for c in 0..w {
                let d2 = (r as f64 - br as f64).powi(2) + (c as f64 - bc as f64).powi(2);
                if d2 <= radius * radius {
                    m[r * w + c] = 0.0;
                }
            }
        }
    }
    out
}

/// Random heatmap; with `quantized` the values repeat so ties occur.
pub fn random_heatmap(rng: &mut ChaCha8Rng, h: usize, w: usize, quantized: bool) -> Tensor {
    Tensor::from_fn(h, w, |_, _| {
        let v: f64 = rng.gen_range(-0.2..1.0);
        if quantized {
            (v * 8.0).round() / 8.0
        } else {
            v
        }
    })
}

/// Concave quadratic `c - a(x-x0)² - b(y-y0)² - e(x-x0)(y-y0)` sampled on
/// the integer grid.
pub struct Quadratic {
    pub x0: f64,
    pub y0: f64,
    pub a: f64,
    pub b: f64,
    pub e: f64,
}

impl Quadratic {
    pub fn value(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.x0, y - self.y0);
        1000.0 - self.a * dx * dx - self.b * dy * dy - self.e * dx * dy
    }

    pub fn map(&self, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(h, w, |r, c| self.value(c as f64, r as f64))
    }

    /// Stationary point of the quadratic.
    pub fn peak(&self) -> (f64, f64) {
        (self.x0, self.y0)
    }
}

pub fn random_quadratic(rng: &mut ChaCha8Rng, h: usize, w: usize, curvature: (f64, f64)) -> Quadratic {
    let ix = rng.gen_range(2..w - 2) as f64;
    let iy = rng.gen_range(2..h - 2) as f64;
    let a = rng.gen_range(curvature.0..curvature.1);
    let b = rng.gen_range(curvature.0..curvature.1);
    let e = rng.gen_range(-0.1..0.1) * a.min(b);
    Quadratic {
        x0: ix + rng.gen_range(-0.45..0.45),
        y0: iy + rng.gen_range(-0.45..0.45),
        a,
        b,
        e,
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
