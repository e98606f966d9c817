//! Synthetic corpora. Three families with different structure for the
//! reconstruction task, plus one labeled family for classification:
//! `GaussianBlobs` (smooth, low-frequency), `Textures` (oriented gratings,
//! high-frequency), and `LabeledShapes` (four geometric classes). Every
//! image is generated from its own counter-derived stream, so corpus
//! contents depend only on (kind, seed, index), not on generation order.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::{CorpusError, CorpusHeader, CorpusWriter};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    GaussianBlobs,
    Textures,
    LabeledShapes,
}

impl SynthKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gaussian-blobs" => Some(SynthKind::GaussianBlobs),
            "textures" => Some(SynthKind::Textures),
            "labeled-shapes" => Some(SynthKind::LabeledShapes),
            _ => None,
        }
    }

    pub fn labeled(self) -> bool {
        matches!(self, SynthKind::LabeledShapes)
    }

    pub fn classes(self) -> usize {
        match self {
            SynthKind::LabeledShapes => 4,
            _ => 0,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index as u64)))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Additive float canvas, one per channel, converted to u8 at the end.
struct Canvas {
    px: usize,
    data: Vec<f64>, // [3, px, px]
}

impl Canvas {
    fn new(px: usize, base: f64) -> Self {
        Canvas { px, data: vec![base; 3 * px * px] }
    }

    fn add(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.px + y) * self.px + x] += v;
    }

    fn noise(&mut self, rng: &mut ChaCha8Rng, amp: f64) {
        for v in &mut self.data {
            *v += (rng.gen::<f64>() - 0.5) * amp;
        }
    }

    fn into_u8(self) -> Vec<u8> {
        self.data.into_iter().map(to_u8).collect()
    }
}

fn gaussian_blobs(px: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut canvas = Canvas::new(px, 0.45);
    // Broad directional ramp first: every image carries a smooth global
    // field, so the content of a masked unit stays inferable from any
    // visible neighborhood instead of being independent clutter.
    let theta = rng.gen::<f64>() * std::f64::consts::TAU;
    let (ts, tc) = theta.sin_cos();
    let sign = |rng: &mut ChaCha8Rng| if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let ramp: [f64; 3] = [
        sign(rng) * (0.35 + rng.gen::<f64>() * 0.35),
        sign(rng) * (0.35 + rng.gen::<f64>() * 0.35),
        sign(rng) * (0.35 + rng.gen::<f64>() * 0.35),
    ];
    let half = px as f64 / 2.0;
    for y in 0..px {
        for x in 0..px {
            let u = ((x as f64 + 0.5 - half) * tc + (y as f64 + 0.5 - half) * ts) / px as f64;
            for c in 0..3 {
                canvas.add(c, y, x, ramp[c] * u);
            }
        }
    }
    let blobs = rng.gen_range(1..=2);
    for _ in 0..blobs {
        let cy = rng.gen::<f64>() * px as f64;
        let cx = rng.gen::<f64>() * px as f64;
        let sigma = px as f64 * (0.20 + rng.gen::<f64>() * 0.25);
        let amp: [f64; 3] = [
            rng.gen::<f64>() * 0.4 - 0.2,
            rng.gen::<f64>() * 0.4 - 0.2,
            rng.gen::<f64>() * 0.4 - 0.2,
        ];
        for y in 0..px {
            for x in 0..px {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let g = (-d2 / (2.0 * sigma * sigma)).exp();
                for c in 0..3 {
                    canvas.add(c, y, x, amp[c] * g);
                }
            }
        }
    }
    canvas.noise(rng, 0.01);
    canvas.into_u8()
}

fn textures(px: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut canvas = Canvas::new(px, 0.5);
    let gratings = rng.gen_range(1..=3);
    for _ in 0..gratings {
        let theta = rng.gen::<f64>() * std::f64::consts::PI;
        let freq = 0.5 + rng.gen::<f64>() * 3.5; // cycles per 8 px
        let phase = rng.gen::<f64>() * std::f64::consts::TAU;
        let k = std::f64::consts::TAU * freq / 8.0;
        let amp: [f64; 3] = [
            0.1 + rng.gen::<f64>() * 0.25,
            0.1 + rng.gen::<f64>() * 0.25,
            0.1 + rng.gen::<f64>() * 0.25,
        ];
        let (s, c0) = theta.sin_cos();
        for y in 0..px {
            for x in 0..px {
                let u = x as f64 * c0 + y as f64 * s;
                let v = (k * u + phase).sin();
                for c in 0..3 {
                    canvas.add(c, y, x, amp[c] * v);
                }
            }
        }
    }
    canvas.noise(rng, 0.03);
    canvas.into_u8()
}

/// Classes: 0 filled square, 1 disc, 2 X cross, 3 horizontal stripes. Every
/// class is invariant under horizontal flips and small shifts, and shapes
/// stay clear of the border, so augmentation never changes a label.
fn labeled_shape(px: usize, rng: &mut ChaCha8Rng) -> (Vec<u8>, u16) {
    let label = rng.gen_range(0..4u16);
    let mut canvas = Canvas::new(px, 0.2 + rng.gen::<f64>() * 0.1);
    canvas.noise(rng, 0.05);
    let fg: [f64; 3] = [
        0.5 + rng.gen::<f64>() * 0.3,
        0.5 + rng.gen::<f64>() * 0.3,
        0.5 + rng.gen::<f64>() * 0.3,
    ];
    let size = px as f64 * (0.35 + rng.gen::<f64>() * 0.2);
    let cy = px as f64 * (0.38 + rng.gen::<f64>() * 0.24);
    let cx = px as f64 * (0.38 + rng.gen::<f64>() * 0.24);
    for y in 0..px {
        for x in 0..px {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let inside = match label {
                0 => dy.abs() <= size / 2.0 && dx.abs() <= size / 2.0,
                1 => dy * dy + dx * dx <= (size / 2.0) * (size / 2.0),
                2 => {
                    (dy - dx).abs() <= size / 5.0 && dy.abs() <= size / 2.0
                        || (dy + dx).abs() <= size / 5.0 && dy.abs() <= size / 2.0
                }
                _ => (y / 4) % 2 == 0,
            };
            if inside {
                for c in 0..3 {
                    canvas.add(c, y, x, fg[c]);
                }
            }
        }
    }
    (canvas.into_u8(), label)
}

/// Generate `count` images and write the corpus with measured per-channel
/// normalization stats.
pub fn synth_corpus(
    kind: SynthKind,
    count: usize,
    img_size: usize,
    seed: u64,
    path: &Path,
) -> Result<CorpusHeader, CorpusError> {
    assert!(count > 0 && img_size > 0);
    let mut images: Vec<Vec<u8>> = Vec::with_capacity(count);
    let mut labels: Vec<u16> = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = image_rng(seed, i);
        match kind {
            SynthKind::GaussianBlobs => images.push(gaussian_blobs(img_size, &mut rng)),
            SynthKind::Textures => images.push(textures(img_size, &mut rng)),
            SynthKind::LabeledShapes => {
                let (img, label) = labeled_shape(img_size, &mut rng);
                images.push(img);
                labels.push(label);
            }
        }
    }

    let plane = img_size * img_size;
    let mut mean = [0.0f64; 3];
    let mut var = [0.0f64; 3];
    let n = (count * plane) as f64;
    for img in &images {
        for c in 0..3 {
            for &px in &img[c * plane..(c + 1) * plane] {
                mean[c] += px as f64 / 255.0;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for img in &images {
        for c in 0..3 {
            for &px in &img[c * plane..(c + 1) * plane] {
                var[c] += (px as f64 / 255.0 - mean[c]).powi(2);
            }
        }
    }
    var.iter_mut().for_each(|v| *v /= n);

    let header = CorpusHeader {
        count,
        height: img_size,
        width: img_size,
        channels: 3,
        labeled: kind.labeled(),
        mean: [mean[0] as f32, mean[1] as f32, mean[2] as f32],
        std: [
            (var[0].sqrt().max(1e-3)) as f32,
            (var[1].sqrt().max(1e-3)) as f32,
            (var[2].sqrt().max(1e-3)) as f32,
        ],
    };
    let mut w = CorpusWriter::create(path, header.clone())?;
    for (i, img) in images.iter().enumerate() {
        w.push(img, kind.labeled().then(|| labels[i]))?;
    }
    w.finish()?;
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::Corpus;

    #[test]
    fn corpora_are_deterministic_and_self_normalizing() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.hvc");
        let b = dir.path().join("b.hvc");
        synth_corpus(SynthKind::Textures, 8, 32, 5, &a).unwrap();
        synth_corpus(SynthKind::Textures, 8, 32, 5, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

        let c = Corpus::open(&a).unwrap();
        // Normalized data should be roughly zero-mean unit-var per channel.
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut n = 0.0;
        for i in 0..c.len() {
            let (v, _) = c.get_normalized::<f64>(i).unwrap();
            for x in v {
                sum += x;
                sq += x * x;
                n += 1.0;
            }
        }
        let mean = sum / n;
        let var = sq / n - mean * mean;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn labeled_shapes_cover_all_classes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.hvc");
        synth_corpus(SynthKind::LabeledShapes, 64, 32, 1, &path).unwrap();
        let c = Corpus::open(&path).unwrap();
        assert!(c.header().labeled);
        let mut seen = [0usize; 4];
        for i in 0..c.len() {
            let (_, label) = c.get_raw(i).unwrap();
            seen[label.unwrap() as usize] += 1;
        }
        assert!(seen.iter().all(|&s| s > 4), "class balance {seen:?}");
    }

    #[test]
    fn unlabeled_kinds_have_no_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.hvc");
        synth_corpus(SynthKind::GaussianBlobs, 4, 16, 2, &path).unwrap();
        let c = Corpus::open(&path).unwrap();
        assert!(!c.header().labeled);
        assert_eq!(c.get_raw(0).unwrap().1, None);
    }

    #[test]
    fn different_seeds_differ() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.hvc");
        let b = dir.path().join("b.hvc");
        synth_corpus(SynthKind::GaussianBlobs, 4, 16, 1, &a).unwrap();
        synth_corpus(SynthKind::GaussianBlobs, 4, 16, 2, &b).unwrap();
        assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}
