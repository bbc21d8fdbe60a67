//! In-memory image classification datasets.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{stream_seed, Stream};
use crate::error::{Error, Result};
use crate::nested::{patchify, ModelConfig};
use crate::tensor::Tensor;

/// `M` images of `H×W×C` (row-major, channel-last) with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    /// `M·H·W·C` pixel values.
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    /// Token index of the informative patch, when known.
    pub planted: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Checks array sizes and label range.
    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.len() * self.image_len() {
            return Err(Error::Format(format!(
                "{} pixel values for {} images of {}x{}x{}",
                self.images.len(),
                self.len(),
                self.height,
                self.width,
                self.channels
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::Format(format!("label {bad} outside [0, {})", self.classes)));
        }
        if let Some(p) = &self.planted {
            if p.len() != self.len() {
                return Err(Error::Format("planted locations do not match image count".into()));
            }
        }
        Ok(())
    }

    /// Errors unless images fit `cfg`.
    pub fn check_model(&self, cfg: &ModelConfig) -> Result<()> {
        if (self.height, self.width, self.channels) != (cfg.height, cfg.width, cfg.channels) {
            return Err(Error::Config(format!(
                "dataset images are {}x{}x{}, model expects {}x{}x{}",
                self.height, self.width, self.channels, cfg.height, cfg.width, cfg.channels
            )));
        }
        if self.classes > cfg.classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model head has {}",
                self.classes, cfg.classes
            )));
        }
        Ok(())
    }

    /// Copies the listed examples, in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            planted: self.planted.as_ref().map(|p| indices.iter().map(|&i| p[i]).collect()),
            ..*self
        }
    }

    /// Splits into `(train, test)` with `test` examples held out. The split
    /// is a seeded permutation, so it depends only on `(len, test, seed)`.
    pub fn split(&self, test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        if test > self.len() {
            return Err(Error::Config(format!("cannot hold out {test} of {} examples", self.len())));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, Stream::Data) ^ SPLIT_SALT));
        let (te, tr) = order.split_at(test);
        Ok((self.subset(tr), self.subset(te)))
    }

    /// Patchified `(B·N)×(p·p·C)` batch of the listed examples.
    pub fn patches(&self, indices: &[usize], cfg: &ModelConfig) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        let mut buf = vec![0.0; self.image_len()];
        for &i in indices {
            buf.iter_mut().zip(self.image(i)).for_each(|(b, &v)| *b = v as f64);
            data.extend(patchify(&buf, cfg)?);
        }
        Tensor::new(&[indices.len() * cfg.tokens(), cfg.patch_len()], data)
    }
}

/// Knobs of [`synth_planted_patch_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    pub examples: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Std of the Gaussian noise added to every pixel.
    pub noise: f64,
    /// Patches that carry a glyph of some other class, without the marker frame.
    pub distractors: usize,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { examples: 6000, classes: 10, height: 32, width: 32, patch: 8, noise: 0.6, distractors: 3, seed: 0 }
    }
}

/// Keeps the split permutation apart from the generator's own stream.
const SPLIT_SALT: u64 = 0x5EED_5711;

/// Glyphs are a property of the task, not of the run: every seed and split
/// sees the same class patterns.
const GLYPH_SEED: u64 = 0x61F0_C0DE;

/// `classes` distinct binary `g×g` patterns.
fn glyphs(classes: usize, g: usize) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(GLYPH_SEED);
    let mut out: Vec<Vec<f32>> = Vec::with_capacity(classes);
    while out.len() < classes {
        let cand: Vec<f32> = (0..g * g).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
        if !out.contains(&cand) {
            out.push(cand);
        }
    }
    out
}

/// Single-channel noise images where exactly one patch, outlined by a
/// bright frame, carries the class glyph. A few other patches carry glyphs
/// of other classes without the frame, so the label can only be read off
/// the framed patch.
pub fn synth_planted_patch(m: usize, k: usize, h: usize, w: usize, seed: u64) -> Result<Dataset> {
    synth_planted_patch_with(&SynthOptions { examples: m, classes: k, height: h, width: w, seed, ..Default::default() })
}

pub fn synth_planted_patch_with(o: &SynthOptions) -> Result<Dataset> {
    let p = o.patch;
    if p < 3 || o.height % p != 0 || o.width % p != 0 {
        return Err(Error::Config(format!("{}x{} image does not tile into {p}x{p} patches", o.height, o.width)));
    }
    let g = p - 2;
    // 2^(g·g) distinct glyphs exist; only tiny patches can run short.
    if o.classes == 0 || (g * g < 64 && o.classes as u64 > 1u64 << (g * g)) {
        return Err(Error::Config(format!("{} class glyphs do not fit a {p}x{p} patch", o.classes)));
    }
    let (gh, gw) = (o.height / p, o.width / p);
    let n = gh * gw;
    if o.distractors >= n || (o.distractors > 0 && o.classes < 2) {
        return Err(Error::Config(format!("{} distractors with {n} patches and {} classes", o.distractors, o.classes)));
    }
    if !(o.noise >= 0.0) || !o.noise.is_finite() {
        return Err(Error::Config(format!("noise std {} must be non-negative", o.noise)));
    }

    let shapes = glyphs(o.classes, g);
    let noise = Normal::new(0.0, o.noise).expect("checked std");
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(o.seed, Stream::Data));
    let npx = o.height * o.width;
    let mut images = vec![0f32; o.examples * npx];
    let mut labels = Vec::with_capacity(o.examples);
    let mut planted = Vec::with_capacity(o.examples);

    for img in images.chunks_mut(npx) {
        let y = rng.random_range(0..o.classes);
        let loc = rng.random_range(0..n);
        let mut put = |token: usize, glyph: &[f32], frame: bool| {
            let (y0, x0) = ((token / gw) * p, (token % gw) * p);
            for py in 0..p {
                for px in 0..p {
                    let border = py == 0 || px == 0 || py == p - 1 || px == p - 1;
                    let v = if border {
                        if frame { 1.0 } else { 0.0 }
                    } else {
                        glyph[(py - 1) * g + px - 1]
                    };
                    img[(y0 + py) * o.width + x0 + px] = v;
                }
            }
        };
        put(loc, &shapes[y], true);
        let others: Vec<usize> = (0..n).filter(|&t| t != loc).collect();
        let wrong: Vec<usize> = (0..o.classes).filter(|&c| c != y).collect();
        for &t in others.choose_multiple(&mut rng, o.distractors) {
            let c = *wrong.choose(&mut rng).expect("at least two classes");
            put(t, &shapes[c], false);
        }
        if o.noise > 0.0 {
            img.iter_mut().for_each(|v| *v += noise.sample(&mut rng) as f32);
        }
        labels.push(y);
        planted.push(loc);
    }

    Ok(Dataset {
        height: o.height,
        width: o.width,
        channels: 1,
        classes: o.classes,
        images,
        labels,
        planted: Some(planted),
    })
}
