//! Synthetic referring-segmentation task: a few soft blobs, each with an
//! identity, and an instruction naming one of them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::RunConfig;
use crate::decoder::StubImageEncoder;
use crate::model::Sample;
use crate::numerics::Tensor;
use crate::seg_head::HeadInput;

pub const IDENTITIES: usize = 4;
const FEATURE_NOISE: f64 = 0.05;
const MAX_OBJECTS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    /// Center in the unit square.
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub identity: usize,
}

impl Blob {
    /// Truncated Gaussian profile, zero outside the radius.
    pub fn intensity(&self, x: f64, y: f64) -> f64 {
        let d2 = (x - self.cx).powi(2) + (y - self.cy).powi(2);
        if d2 > self.radius * self.radius {
            return 0.0;
        }
        let sigma = self.radius / 1.5;
        (-d2 / (2.0 * sigma * sigma)).exp()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.cx).powi(2) + (y - self.cy).powi(2) <= self.radius * self.radius
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub sample: Sample,
    pub blobs: Vec<Blob>,
    /// Index into `blobs` of the referred object.
    pub target: usize,
    /// `H_out x W_out x IDENTITIES` rendered image.
    pub image: Tensor,
}

/// Fixed embeddings and encoders shared by every sample of a task.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub config: RunConfig,
    /// `IDENTITIES x d`
    pub identities: Tensor,
    pub background: Tensor,
    /// `(text_len - 1) x d` instruction tokens, absent when `text_len == 1`.
    pub instruction: Option<Tensor>,
    pub encoder: StubImageEncoder,
}

/// Pixel or cell center in the unit square.
fn center(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}

impl SyntheticTask {
    pub fn new(config: &RunConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        let identities = Tensor::randn(&[IDENTITIES, d], 1.0, &mut rng);
        let background = Tensor::randn(&[1, d], 0.3, &mut rng);
        let instruction = (config.text_len > 1)
            .then(|| Tensor::randn(&[config.text_len - 1, d], 1.0, &mut rng));
        let encoder = StubImageEncoder::new(config.upsample, IDENTITIES, config.prompt_dim, rng.gen());
        SyntheticTask {
            config: config.clone(),
            identities,
            background,
            instruction,
            encoder,
        }
    }

    fn place_blobs(&self, rng: &mut ChaCha8Rng) -> Vec<Blob> {
        let count = rng.gen_range(1..=MAX_OBJECTS);
        let mut ids: Vec<usize> = (0..IDENTITIES).collect();
        for i in 0..count {
            let j = rng.gen_range(i..IDENTITIES);
            ids.swap(i, j);
        }
        let mut blobs: Vec<Blob> = Vec::with_capacity(count);
        let mut attempts = 0;
        while blobs.len() < count {
            let b = Blob {
                cx: rng.gen_range(0.15..0.85),
                cy: rng.gen_range(0.15..0.85),
                radius: rng.gen_range(0.14..0.24),
                identity: ids[blobs.len()],
            };
            attempts += 1;
            let clear = blobs.iter().all(|o| {
                let dist = ((b.cx - o.cx).powi(2) + (b.cy - o.cy).powi(2)).sqrt();
                dist > b.radius + o.radius
            });
            if clear {
                blobs.push(b);
            } else if attempts > 200 {
                break;
            }
        }
        blobs
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> SyntheticSample {
        let c = &self.config;
        let blobs = self.place_blobs(rng);
        let target = rng.gen_range(0..blobs.len());
        let d = c.model_dim;
        let noise = Normal::new(0.0, FEATURE_NOISE).expect("valid std");

        let (h, w) = c.grid;
        let mut feats = Vec::with_capacity(h * w * d);
        for r in 0..h {
            for col in 0..w {
                let (x, y) = (center(col, w), center(r, h));
                let mut cell = self.background.data().to_vec();
                for b in &blobs {
                    let s = b.intensity(x, y);
                    if s > 0.0 {
                        for (v, e) in cell.iter_mut().zip(self.identities.row(b.identity)) {
                            *v += s * e;
                        }
                    }
                }
                feats.extend(cell.into_iter().map(|v| v + noise.sample(rng)));
            }
        }
        let image_features = Tensor::matrix(h * w, d, feats).expect("non-empty grid");

        let mut text = self
            .instruction
            .as_ref()
            .map(|t| t.data().to_vec())
            .unwrap_or_default();
        text.extend_from_slice(self.identities.row(blobs[target].identity));
        let text_features = Tensor::matrix(c.text_len, d, text).expect("text rows");

        let (ho, wo) = c.output_size();
        let mut pixels = vec![0.0; ho * wo * IDENTITIES];
        let mut mask = vec![0.0; ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                let (x, y) = (center(j, wo), center(i, ho));
                for b in &blobs {
                    pixels[(i * wo + j) * IDENTITIES + b.identity] = b.intensity(x, y);
                }
                if blobs[target].contains(x, y) {
                    mask[i * wo + j] = 1.0;
                }
            }
        }
        let image = Tensor::new(vec![ho, wo, IDENTITIES], pixels).expect("image dims");
        let embedding = self.encoder.encode(&image).expect("encoder matches task");
        let input = HeadInput::new(image_features, text_features, c.grid).expect("task shapes");
        SyntheticSample {
            sample: Sample {
                input,
                image: embedding,
                mask: Tensor::matrix(ho, wo, mask).expect("mask dims"),
            },
            blobs,
            target,
            image,
        }
    }

    /// `count` samples from a dedicated stream.
    pub fn batch(&self, seed: u64, count: usize) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.sample(&mut rng).sample).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let cfg = RunConfig::toy();
        let a = SyntheticTask::new(&cfg, 5).batch(9, 3);
        let b = SyntheticTask::new(&cfg, 5).batch(9, 3);
        assert_eq!(a, b);
        let c = SyntheticTask::new(&cfg, 5).batch(10, 3);
        assert_ne!(a, c);
    }

    #[test]
    fn blobs_are_disjoint_and_mask_is_target() {
        let cfg = RunConfig::blob_task();
        let task = SyntheticTask::new(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let s = task.sample(&mut rng);
            assert!((1..=MAX_OBJECTS).contains(&s.blobs.len()));
            for (i, a) in s.blobs.iter().enumerate() {
                for b in &s.blobs[i + 1..] {
                    let d = ((a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2)).sqrt();
                    assert!(d > a.radius + b.radius);
                    assert_ne!(a.identity, b.identity);
                }
            }
            let m = &s.sample.mask;
            assert_eq!(m.dims(), &[cfg.output_size().0, cfg.output_size().1]);
            assert!(m.data().iter().any(|&v| v == 1.0));
            assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
            let t = s.blobs[s.target];
            let last = s.sample.input.text_features.row(cfg.text_len - 1);
            assert_eq!(last, task.identities.row(t.identity));
            assert_eq!(s.sample.image.grid(), cfg.embed_grid);
        }
    }

    #[test]
    fn intensity_is_truncated() {
        let b = Blob { cx: 0.5, cy: 0.5, radius: 0.2, identity: 0 };
        assert_eq!(b.intensity(0.5, 0.5), 1.0);
        assert_eq!(b.intensity(0.5, 0.71), 0.0);
        assert!(b.intensity(0.5, 0.69) > 0.0);
    }
}
