use super::text::dense;
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    pub image_size: usize,
    pub patch: usize,
    /// Offset between neighbouring patches; less than `patch` overlaps them.
    pub stride: usize,
    pub d_hidden: usize,
    pub d_embed: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 56,
            patch: 8,
            stride: 4,
            d_hidden: 96,
            d_embed: 64,
        }
    }
}

impl ImageEncoderConfig {
    pub fn per_side(&self) -> usize {
        (self.image_size - self.patch) / self.stride + 1
    }

    pub fn patches(&self) -> usize {
        self.per_side().pow(2)
    }

    /// Patch positions along one axis that overlap `[start, start + len)`.
    fn touching(&self, start: usize, len: usize) -> std::ops::RangeInclusive<usize> {
        let first = if start < self.patch {
            0
        } else {
            (start - self.patch) / self.stride + 1
        };
        let last = ((start + len - 1) / self.stride).min(self.per_side() - 1);
        first..=last
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size * CHANNELS
    }
}

/// f(·): non-overlapping patches → colour-invariant contrast map plus mean
/// colour → two ReLU layers per patch → mean and max pool → two-layer head →
/// unit norm.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub config: ImageEncoderConfig,
    pub w_patch: Tensor,
    pub b_patch: Tensor,
    pub w_color: Tensor,
    pub w_local: Tensor,
    pub b_local: Tensor,
    pub w1: Tensor,
    pub w1_max: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    patch_index: Vec<usize>,
    stats: PatchStats,
}

fn patch_index(cfg: &ImageEncoderConfig) -> Vec<usize> {
    let per_side = cfg.per_side();
    let mut idx = Vec::with_capacity(cfg.patches() * cfg.patch_dim());
    for py in 0..per_side {
        for px in 0..per_side {
            for dy in 0..cfg.patch {
                for dx in 0..cfg.patch {
                    let (r, c) = (py * cfg.stride + dy, px * cfg.stride + dx);
                    for ch in 0..CHANNELS {
                        idx.push((r * cfg.image_size + c) * CHANNELS + ch);
                    }
                }
            }
        }
    }
    idx
}

/// Smoothing inside the per-pixel colour distance.
const DIST_EPS: f64 = 1e-4;
/// Variance floor for the per-patch standardization; keeps flat patches flat.
const PATCH_EPS: f64 = 0.01;

/// Constant matrices that turn raw patch rows into colour statistics.
#[derive(Debug, Clone)]
struct PatchStats {
    /// patch_dim × 3: per-channel mean.
    pool: Tensor,
    /// 3 × patch_dim: broadcasts a colour back to every pixel.
    spread: Tensor,
    /// 3 × 1 ones: sums the channels of each pixel.
    channel_sum: Tensor,
}

impl PatchStats {
    fn new(cfg: &ImageEncoderConfig) -> Self {
        let pd = cfg.patch_dim();
        let px = cfg.patch * cfg.patch;
        let mut pool = vec![0.0; pd * CHANNELS];
        let mut spread = vec![0.0; CHANNELS * pd];
        for i in 0..pd {
            let ch = i % CHANNELS;
            pool[i * CHANNELS + ch] = 1.0 / px as f64;
            spread[ch * pd + i] = 1.0;
        }
        Self {
            pool: Tensor::matrix(pd, CHANNELS, pool).expect("pool"),
            spread: Tensor::matrix(CHANNELS, pd, spread).expect("spread"),
            channel_sum: Tensor::full(&[CHANNELS, 1], 1.0),
        }
    }
}

impl ImageEncoder {
    pub fn init(config: ImageEncoderConfig, rng: &mut crate::rng::Rng) -> Result<Self> {
        if config.patch == 0
            || config.stride == 0
            || config.stride > config.patch
            || config.patch > config.image_size
            || !(config.image_size - config.patch).is_multiple_of(config.stride)
        {
            return Err(Error::config(
                "patch",
                format!(
                    "patch {} with stride {} does not tile image size {}",
                    config.patch, config.stride, config.image_size
                ),
            ));
        }
        let (h, e) = (config.d_hidden, config.d_embed);
        Ok(Self {
            config,
            w_patch: dense(config.patch * config.patch, h, rng),
            b_patch: Tensor::full(&[h], 0.01),
            w_color: dense(CHANNELS, h, rng),
            w_local: dense(h, h, rng),
            b_local: Tensor::full(&[h], 0.01),
            w1: dense(h, h, rng),
            w1_max: dense(h, h, rng),
            b1: Tensor::zeros(&[h]),
            w2: dense(h, e, rng),
            b2: Tensor::zeros(&[e]),
            patch_index: patch_index(&config),
            stats: PatchStats::new(&config),
        })
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("image.w_patch", &self.w_patch),
            ("image.b_patch", &self.b_patch),
            ("image.w_color", &self.w_color),
            ("image.w_local", &self.w_local),
            ("image.b_local", &self.b_local),
            ("image.w1", &self.w1),
            ("image.w1_max", &self.w1_max),
            ("image.b1", &self.b1),
            ("image.w2", &self.w2),
            ("image.b2", &self.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_patch,
            &mut self.b_patch,
            &mut self.w_color,
            &mut self.w_local,
            &mut self.b_local,
            &mut self.w1,
            &mut self.w1_max,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub fn check_image(&self, image: &Image) -> Result<()> {
        let s = self.config.image_size;
        if image.height() != s || image.width() != s {
            return Err(Error::Shape(format!(
                "encoder expects {s}×{s} images, got {}×{}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    pub fn bind<'a>(&'a self, tape: &'a Tape<'a>) -> BoundImage<'a> {
        BoundImage {
            encoder: self,
            w_patch: tape.leaf(&self.w_patch),
            b_patch: tape.leaf(&self.b_patch),
            w_color: tape.leaf(&self.w_color),
            pool: tape.leaf(&self.stats.pool),
            spread: tape.leaf(&self.stats.spread),
            channel_sum: tape.leaf(&self.stats.channel_sum),
            w_local: tape.leaf(&self.w_local),
            b_local: tape.leaf(&self.b_local),
            w1: tape.leaf(&self.w1),
            w1_max: tape.leaf(&self.w1_max),
            b1: tape.leaf(&self.b1),
            w2: tape.leaf(&self.w2),
            b2: tape.leaf(&self.b2),
        }
    }

    /// Stacks images into an N × (H·W·3) constant.
    pub fn stack(&self, images: &[&Image]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(images.len() * self.config.pixels());
        for img in images {
            self.check_image(img)?;
            data.extend_from_slice(img.data());
        }
        Tensor::matrix(images.len(), self.config.pixels(), data)
    }

    /// Gradient-free embeddings, one unit vector per image.
    pub fn encode_images(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        images.iter().map(|img| self.encode_image(img)).collect()
    }

    pub fn encode_image(&self, image: &Image) -> Result<Vec<f64>> {
        self.head(&self.patch_features(image)?)
    }

    /// Per-patch features before pooling, patches × d_hidden row-major.
    pub fn patch_features(&self, image: &Image) -> Result<Vec<f64>> {
        self.check_image(image)?;
        let per_side = self.config.per_side();
        let mut out = Vec::with_capacity(self.config.patches() * self.config.d_hidden);
        let mut scratch = Scratch::new(&self.config);
        for py in 0..per_side {
            for px in 0..per_side {
                self.patch_feature(image, (py, px), &mut scratch);
                out.extend_from_slice(&scratch.local);
            }
        }
        Ok(out)
    }

    /// Embedding of `pasted`, which equals `base` outside the h×w window at
    /// `origin`. Only patches touching the window are recomputed.
    pub fn encode_pasted(
        &self,
        base_features: &[f64],
        pasted: &Image,
        origin: (usize, usize),
        block_hw: (usize, usize),
    ) -> Result<Vec<f64>> {
        self.check_image(pasted)?;
        let h = self.config.d_hidden;
        if base_features.len() != self.config.patches() * h {
            return Err(Error::Dimension {
                op: "encode_pasted",
                lhs: vec![base_features.len()],
                rhs: vec![self.config.patches() * h],
            });
        }
        let (bh, bw) = block_hw;
        let s = self.config.image_size;
        if bh == 0 || bw == 0 || origin.0 + bh > s || origin.1 + bw > s {
            return Err(Error::config("prompt_size", "block outside the image"));
        }
        let per_side = self.config.per_side();
        let mut feats = base_features.to_vec();
        let mut scratch = Scratch::new(&self.config);
        for py in self.config.touching(origin.0, bh) {
            for px in self.config.touching(origin.1, bw) {
                self.patch_feature(pasted, (py, px), &mut scratch);
                let row = py * per_side + px;
                feats[row * h..(row + 1) * h].copy_from_slice(&scratch.local);
            }
        }
        self.head(&feats)
    }

    /// Per-patch features → unit embedding.
    pub fn head(&self, features: &[f64]) -> Result<Vec<f64>> {
        let (h, e) = (self.config.d_hidden, self.config.d_embed);
        if features.len() != self.config.patches() * h {
            return Err(Error::Dimension {
                op: "head",
                lhs: vec![features.len()],
                rhs: vec![self.config.patches() * h],
            });
        }
        let mut mean = vec![0.0; h];
        let mut max = features[..h].to_vec();
        for row in features.chunks_exact(h) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            max.iter_mut().zip(row).for_each(|(m, v)| *m = m.max(*v));
        }
        let inv = 1.0 / self.config.patches() as f64;
        mean.iter_mut().for_each(|v| *v *= inv);
        let mut hidden = self.b1.data().to_vec();
        affine_acc(&mean, self.w1.data(), h, &mut hidden);
        affine_acc(&max, self.w1_max.data(), h, &mut hidden);
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut out = self.b2.data().to_vec();
        affine_acc(&hidden, self.w2.data(), e, &mut out);
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Numeric(format!("cannot normalize a vector of norm {norm}")));
        }
        out.iter_mut().for_each(|v| *v /= norm);
        Ok(out)
    }

    /// Features of patch (py, px) into `scratch.local`; mirrors the taped path.
    fn patch_feature(&self, image: &Image, (py, px): (usize, usize), scratch: &mut Scratch) {
        let cfg = &self.config;
        let p = cfg.patch;
        let n_px = p * p;
        let data = image.data();
        let mut mean = [0.0; CHANNELS];
        for dy in 0..p {
            let row = ((py * cfg.stride + dy) * cfg.image_size + px * cfg.stride) * CHANNELS;
            for dx in 0..p {
                for ch in 0..CHANNELS {
                    mean[ch] += (data[row + dx * CHANNELS + ch] - 0.5) / n_px as f64;
                }
            }
        }
        for dy in 0..p {
            let row = ((py * cfg.stride + dy) * cfg.image_size + px * cfg.stride) * CHANNELS;
            for dx in 0..p {
                let mut d2 = 0.0;
                for ch in 0..CHANNELS {
                    let c = (data[row + dx * CHANNELS + ch] - 0.5) - mean[ch];
                    d2 += c * c;
                }
                scratch.dist[dy * p + dx] = (d2 + DIST_EPS).sqrt();
            }
        }
        let mu = scratch.dist.iter().sum::<f64>() / n_px as f64;
        scratch.dist.iter_mut().for_each(|v| *v -= mu);
        let sigma = (scratch.dist.iter().map(|v| v * v).sum::<f64>() / n_px as f64 + PATCH_EPS).sqrt();
        scratch.dist.iter_mut().for_each(|v| *v /= sigma);

        let h = cfg.d_hidden;
        scratch.first.copy_from_slice(self.b_patch.data());
        affine_acc(&scratch.dist, self.w_patch.data(), h, &mut scratch.first);
        affine_acc(&mean, self.w_color.data(), h, &mut scratch.first);
        scratch.first.iter_mut().for_each(|v| *v = v.max(0.0));
        scratch.local.copy_from_slice(self.b_local.data());
        affine_acc(&scratch.first, self.w_local.data(), h, &mut scratch.local);
        scratch.local.iter_mut().for_each(|v| *v = v.max(0.0));
    }
}

struct Scratch {
    dist: Vec<f64>,
    first: Vec<f64>,
    local: Vec<f64>,
}

impl Scratch {
    fn new(cfg: &ImageEncoderConfig) -> Self {
        Self {
            dist: vec![0.0; cfg.patch * cfg.patch],
            first: vec![0.0; cfg.d_hidden],
            local: vec![0.0; cfg.d_hidden],
        }
    }
}

/// `out += x · W` for a row-major W with `cols` columns.
fn affine_acc(x: &[f64], w: &[f64], cols: usize, out: &mut [f64]) {
    for (xi, wrow) in x.iter().zip(w.chunks_exact(cols)) {
        if *xi == 0.0 {
            continue;
        }
        out.iter_mut().zip(wrow).for_each(|(o, wv)| *o += xi * wv);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundImage<'a> {
    encoder: &'a ImageEncoder,
    w_patch: Var<'a>,
    b_patch: Var<'a>,
    w_color: Var<'a>,
    pool: Var<'a>,
    spread: Var<'a>,
    channel_sum: Var<'a>,
    w_local: Var<'a>,
    b_local: Var<'a>,
    w1: Var<'a>,
    w1_max: Var<'a>,
    b1: Var<'a>,
    w2: Var<'a>,
    b2: Var<'a>,
}

impl<'a> BoundImage<'a> {
    pub fn vars(&self) -> Vec<Var<'a>> {
        vec![
            self.w_patch,
            self.b_patch,
            self.w_color,
            self.w_local,
            self.b_local,
            self.w1,
            self.w1_max,
            self.b1,
            self.w2,
            self.b2,
        ]
    }

    /// Encodes an N × (H·W·3) batch to N × d_embed unit rows.
    pub fn encode(&self, images: Var<'a>) -> Result<Var<'a>> {
        let cfg = &self.encoder.config;
        let shape = images.shape();
        let n = match shape.as_slice() {
            &[n, p] if p == cfg.pixels() => n,
            _ => {
                return Err(Error::Dimension {
                    op: "encode_image",
                    lhs: shape,
                    rhs: vec![0, cfg.pixels()],
                })
            }
        };
        let per = &self.encoder.patch_index;
        let mut idx = Vec::with_capacity(n * per.len());
        for i in 0..n {
            let off = i * cfg.pixels();
            idx.extend(per.iter().map(|&j| j + off));
        }
        let feats = self.patch_features(images.reshape(vec![n * cfg.pixels()])?, idx)?;
        let segments = vec![cfg.patches(); n];
        let mean = feats.segment_mean(&segments)?;
        let max = feats.segment_max(&segments)?;
        self.head(mean, max)
    }

    /// Embedding (1 × d_embed) of an H×W×3 image that equals the image behind
    /// `base_features` outside the h×w window at `origin`. Only the patches
    /// touching the window go through the tape.
    pub fn encode_pasted(
        &self,
        base_features: &[f64],
        pasted: Var<'a>,
        origin: (usize, usize),
        block_hw: (usize, usize),
    ) -> Result<Var<'a>> {
        let cfg = &self.encoder.config;
        let h = cfg.d_hidden;
        let s = cfg.image_size;
        if pasted.shape() != [s, s, CHANNELS] || base_features.len() != cfg.patches() * h {
            return Err(Error::Dimension {
                op: "encode_pasted",
                lhs: pasted.shape(),
                rhs: vec![s, s, CHANNELS],
            });
        }
        let (bh, bw) = block_hw;
        if bh == 0 || bw == 0 || origin.0 + bh > s || origin.1 + bw > s {
            return Err(Error::config("prompt_size", "block outside the image"));
        }
        let per_side = cfg.per_side();
        let pd = cfg.patch_dim();
        let mut touched = Vec::new();
        for py in cfg.touching(origin.0, bh) {
            for px in cfg.touching(origin.1, bw) {
                touched.push(py * per_side + px);
            }
        }
        let idx: Vec<usize> = touched
            .iter()
            .flat_map(|&t| self.encoder.patch_index[t * pd..(t + 1) * pd].iter().copied())
            .collect();
        let feats = self.patch_features(pasted.reshape(vec![cfg.pixels()])?, idx)?;

        let tape = pasted.tape_ref();
        let mut rest_sum = vec![0.0; h];
        let mut rest_max = vec![f64::NEG_INFINITY; h];
        for (row, f) in base_features.chunks_exact(h).enumerate() {
            if touched.contains(&row) {
                continue;
            }
            rest_sum.iter_mut().zip(f).for_each(|(a, v)| *a += v);
            rest_max.iter_mut().zip(f).for_each(|(a, v)| *a = a.max(*v));
        }
        let t = touched.len();
        let ones = tape.constant(Tensor::full(&[1, t], 1.0));
        let sum = ones.matmul(feats)?;
        let (mean, max) = if t == cfg.patches() {
            (sum.scale(1.0 / t as f64), feats.segment_max(&[t])?)
        } else {
            let sum = sum.add(tape.constant(Tensor::matrix(1, h, rest_sum)?))?;
            let rows = tape.concat(&[tape.constant(Tensor::matrix(1, h, rest_max)?), feats])?;
            (sum.scale(1.0 / cfg.patches() as f64), rows.segment_max(&[t + 1])?)
        };
        self.head(mean, max)
    }

    /// Gathers patch rows of a flat pixel vector at `idx` and runs the
    /// per-patch layers.
    fn patch_features(&self, pixels: Var<'a>, idx: Vec<usize>) -> Result<Var<'a>> {
        let cfg = &self.encoder.config;
        let rows = idx.len() / cfg.patch_dim();
        let patches = pixels.add_scalar(-0.5).gather(idx, vec![rows, cfg.patch_dim()])?;
        // Each pixel's distance from the patch's mean colour, standardized
        // over the patch, carries the shape; the mean colour carries hue.
        let mean_color = patches.matmul(self.pool)?;
        let centered = patches.sub(mean_color.matmul(self.spread)?)?;
        let px = cfg.patch * cfg.patch;
        let dist = centered
            .mul(centered)?
            .reshape(vec![rows * px, CHANNELS])?
            .matmul(self.channel_sum)?
            .reshape(vec![rows, px])?
            .add_scalar(DIST_EPS)
            .sqrt()?
            .standardize_rows(PATCH_EPS)?;
        let shape = dist.matmul(self.w_patch)?;
        let color = mean_color.matmul(self.w_color)?;
        let feats = shape.add(color)?.add_row(self.b_patch)?.relu();
        Ok(feats.matmul(self.w_local)?.add_row(self.b_local)?.relu())
    }

    fn head(&self, mean: Var<'a>, max: Var<'a>) -> Result<Var<'a>> {
        let hidden = mean
            .matmul(self.w1)?
            .add(max.matmul(self.w1_max)?)?
            .add_row(self.b1)?
            .relu();
        hidden.matmul(self.w2)?.add_row(self.b2)?.normalize_rows()
    }
}
