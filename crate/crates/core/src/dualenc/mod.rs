//! Frozen toy dual encoder: image encoder f(·), text encoder g(·), and
//! temperature-scaled cosine softmax over classes.

mod image;
pub mod pretrain;
mod text;

pub use image::{BoundImage, ImageEncoder, ImageEncoderConfig};
pub use pretrain::{pretrain_surrogate, CorpusManifest, PretrainConfig, PretrainCorpus, PretrainReport};
pub use text::{tokenize, vocab_size, BoundText, TextEncoder, TextEncoderConfig, VOCAB};

use crate::checkpoint::TensorDump;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;
use crate::tensor::{checksum_all, Tape, Tensor, Var};
use serde_json::json;
use std::path::Path;

/// Prefix of the hand-written prompt "a photo of a <class>.".
pub const CONTEXT_TEMPLATE: &str = "a photo of a ";

pub fn handcraft_prompt(class_name: &str) -> String {
    format!("{CONTEXT_TEMPLATE}{class_name}.")
}

/// Tokens that follow the context in a learned prompt: the class name and
/// the closing period.
pub fn class_suffix(class_name: &str) -> String {
    format!("{class_name}.")
}

/// Positive softmax temperature τ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub const CLIP_INIT: f64 = 0.07;

    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::config("temperature", format!("τ must be positive, got {tau}")));
        }
        Ok(Self(tau))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(Self::CLIP_INIT)
    }
}

/// Softmax over `cos(image_i, text_c) / τ` for every row of `image_emb`
/// (N × d) against every row of `text_emb` (C × d). Inputs need not be unit
/// norm; rows are normalized here.
pub fn class_probabilities<'a>(image_emb: Var<'a>, text_emb: Var<'a>, temperature: Temperature) -> Result<Var<'a>> {
    let c = text_emb.shape()[0];
    if c < 2 {
        return Err(Error::Contract(format!("need at least 2 classes, got {c}")));
    }
    let img = image_emb.normalize_rows()?;
    let txt = text_emb.normalize_rows()?;
    img.matmul(txt.transpose()?)?.scale(1.0 / temperature.value()).softmax()
}

/// Numeric convenience wrapper around [`class_probabilities`].
pub fn probs_from_embeddings(image_emb: &[f64], text_embs: &[Vec<f64>], temperature: Temperature) -> Result<Vec<f64>> {
    let d = image_emb.len();
    let tape = Tape::new();
    let img = tape.constant(Tensor::matrix(1, d, image_emb.to_vec())?);
    let txt = tape.constant(Tensor::matrix(text_embs.len(), d, text_embs.concat())?);
    Ok(class_probabilities(img, txt, temperature)?.to_vec())
}

#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub temperature: Temperature,
}

impl DualEncoder {
    pub fn init(image: ImageEncoderConfig, text: TextEncoderConfig, seed: u64) -> Result<Self> {
        if image.d_embed != text.d_embed {
            return Err(Error::config(
                "d_embed",
                format!("image ({}) and text ({}) embeddings differ", image.d_embed, text.d_embed),
            ));
        }
        let mut r = rng::rng(seed);
        Ok(Self {
            image: ImageEncoder::init(image, &mut r)?,
            text: TextEncoder::init(text, &mut r),
            temperature: Temperature::default(),
        })
    }

    pub fn d_embed(&self) -> usize {
        self.image.config.d_embed
    }

    pub fn d_word(&self) -> usize {
        self.text.config.d_word
    }

    pub fn image_size(&self) -> usize {
        self.image.config.image_size
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = self.image.named_tensors();
        v.extend(self.text.named_tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.image.tensors_mut();
        v.extend(self.text.tensors_mut());
        v
    }

    /// Marks every weight as constant.
    pub fn freeze(&mut self) {
        for t in self.tensors_mut() {
            t.requires_grad = false;
            t.grad = None;
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| !t.requires_grad)
    }

    /// Digest of all weights plus τ.
    pub fn checksum(&self) -> String {
        let tau = Tensor::scalar(self.temperature.value());
        checksum_all(self.named_tensors().into_iter().map(|(_, t)| t).chain([&tau]))
    }

    pub fn encode_image(&self, image: &Image) -> Result<Vec<f64>> {
        self.image.encode_image(image)
    }

    pub fn encode_images(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        self.image.encode_images(images)
    }

    /// g(·) on an explicit token-vector sequence (L × d_word).
    pub fn encode_text(&self, tokens: &Tensor) -> Result<Vec<f64>> {
        self.text.encode(tokens)
    }

    pub fn encode_strings(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let tape = Tape::new();
        let bound = self.text.bind(&tape);
        let seqs = texts
            .iter()
            .map(|t| bound.lookup(&tokenize(t)))
            .collect::<Result<Vec<_>>>()?;
        let emb = bound.encode(&seqs)?;
        Ok(emb.to_vec().chunks(self.d_embed()).map(<[f64]>::to_vec).collect())
    }

    /// g("a photo of a <class>.") for each class, stacked C × d_embed.
    pub fn handcraft_embeddings(&self, class_names: &[String]) -> Result<Tensor> {
        let texts: Vec<String> = class_names.iter().map(|n| handcraft_prompt(n)).collect();
        let rows = self.encode_strings(&texts)?;
        Tensor::matrix(rows.len(), self.d_embed(), rows.concat())
    }

    /// p(ŷ = c | x) for prompts given as token-vector sequences.
    pub fn class_probs(&self, image: &Image, prompts: &[Tensor]) -> Result<Vec<f64>> {
        let img = self.encode_image(image)?;
        let texts = prompts.iter().map(|p| self.encode_text(p)).collect::<Result<Vec<_>>>()?;
        probs_from_embeddings(&img, &texts, self.temperature)
    }

    /// Zero-shot argmax with hand-written prompts.
    pub fn zero_shot_predict(&self, images: &[&Image], class_names: &[String]) -> Result<Vec<usize>> {
        let text = self.handcraft_embeddings(class_names)?;
        let embs = self.encode_images(images)?;
        let mut out = Vec::with_capacity(embs.len());
        for e in &embs {
            // unit vectors: the largest dot product is the largest cosine
            let scores: Vec<f64> = (0..text.rows()).map(|c| dot(e, text.row(c))).collect();
            out.push(argmax(&scores));
        }
        Ok(out)
    }

    pub fn to_dump(&self) -> TensorDump {
        let mut dump = TensorDump::new("surrogate");
        dump.set_meta("image", json!(self.image.config));
        dump.set_meta("text", json!(self.text.config));
        dump.set_meta("temperature", self.temperature.value());
        for (name, t) in self.named_tensors() {
            dump.push(name, t);
        }
        dump
    }

    pub fn from_dump(dump: &TensorDump) -> Result<Self> {
        if dump.kind != "surrogate" {
            return Err(Error::Format(format!("expected a surrogate checkpoint, got `{}`", dump.kind)));
        }
        let parse = |key: &str| {
            dump.meta
                .get(key)
                .cloned()
                .ok_or_else(|| Error::Format(format!("missing meta `{key}`")))
        };
        let image_cfg: ImageEncoderConfig =
            serde_json::from_value(parse("image")?).map_err(|e| Error::Format(e.to_string()))?;
        let text_cfg: TextEncoderConfig =
            serde_json::from_value(parse("text")?).map_err(|e| Error::Format(e.to_string()))?;
        let mut enc = Self::init(image_cfg, text_cfg, 0)?;
        enc.temperature = Temperature::new(dump.meta_f64("temperature")?)?;
        let names: Vec<&str> = enc.named_tensors().into_iter().map(|(n, _)| n).collect();
        let stored = names
            .iter()
            .map(|n| dump.get(n).cloned())
            .collect::<Result<Vec<_>>>()?;
        for (slot, t) in enc.tensors_mut().into_iter().zip(stored) {
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "stored shape {:?} does not match {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        enc.freeze();
        Ok(enc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_dump().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_dump(&TensorDump::load(path)?)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
