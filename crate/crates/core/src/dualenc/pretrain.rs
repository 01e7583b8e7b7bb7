//! Toy-scale contrastive pretraining of the surrogate encoders.
//!
//! The corpus mixes natural-style scenes with images that carry the class
//! name as text, so text-rendered images end up scoring high for their class.

use super::{argmax, dot, DualEncoder, ImageEncoderConfig, Temperature, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::glyph::{self, Placement};
use crate::image::Image;
use crate::rng::{self, derive, tag};
use crate::synth;
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, Var};
use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

/// Caption templates used for text-side pairs.
pub const CAPTION_TEMPLATES: [&str; 4] = ["a photo of a {}.", "a picture of the {}.", "{}", "an image of a {}."];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExemplarKind {
    Natural,
    /// Class name rendered over the whole frame.
    TextRender,
    /// Prompt-sized block on a noise background.
    TextBlock,
    /// Wide strip of text on a noise background.
    TextStrip,
    /// Natural scene with its own class prompt pasted in.
    PromptMatched,
    /// Natural scene with another class's prompt; captioned with the scene.
    PromptMismatched,
}

/// Pixels of an exemplar: stored, or rendered on demand from a seed.
#[derive(Debug, Clone)]
pub enum Source {
    Image(Image),
    Procedural { kind: ExemplarKind, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct Exemplar {
    pub class_id: usize,
    pub source: Source,
}

impl Exemplar {
    pub fn stored(image: Image, class_id: usize) -> Self {
        Self {
            class_id,
            source: Source::Image(image),
        }
    }

    pub fn kind(&self) -> Option<ExemplarKind> {
        match self.source {
            Source::Image(_) => None,
            Source::Procedural { kind, .. } => Some(kind),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainCorpus {
    pub class_names: Vec<String>,
    pub items: Vec<Exemplar>,
    image_size: usize,
    by_class: Vec<Vec<usize>>,
}

/// Share of each exemplar kind in a synthetic corpus.
const MIX: [(ExemplarKind, f64); 6] = [
    (ExemplarKind::Natural, 0.25),
    (ExemplarKind::TextRender, 0.05),
    (ExemplarKind::TextBlock, 0.10),
    (ExemplarKind::TextStrip, 0.05),
    (ExemplarKind::PromptMatched, 0.25),
    (ExemplarKind::PromptMismatched, 0.30),
];

/// Full-frame rendering of a class name, the "pure text" image.
pub fn text_render(class_name: &str, size: usize, seed: u64) -> Result<Image> {
    Ok(glyph::render_prompt(class_name, size, size, seed)?.pixels)
}

impl PretrainCorpus {
    /// `image_size` applies to procedural exemplars; stored images must match it.
    pub fn new(class_names: Vec<String>, items: Vec<Exemplar>, image_size: usize) -> Result<Self> {
        if class_names.len() < 2 {
            return Err(Error::Data("pretraining needs at least 2 classes".into()));
        }
        let mut by_class = vec![Vec::new(); class_names.len()];
        for (i, item) in items.iter().enumerate() {
            let slot = by_class.get_mut(item.class_id).ok_or(Error::Index {
                what: "class",
                index: item.class_id,
                len: class_names.len(),
            })?;
            slot.push(i);
        }
        if let Some((c, ids)) = by_class.iter().enumerate().find(|(_, ids)| ids.len() < 2) {
            return Err(Error::Data(format!(
                "class `{}` has {} exemplar(s); at least 2 are required",
                class_names[c],
                ids.len()
            )));
        }
        let wrong_size = items.iter().any(|e| match &e.source {
            Source::Image(img) => img.height() != image_size || img.width() != image_size,
            Source::Procedural { .. } => false,
        });
        if wrong_size {
            return Err(Error::Data(format!("corpus images must be {image_size}×{image_size}")));
        }
        Ok(Self {
            class_names,
            items,
            image_size,
            by_class,
        })
    }

    /// Procedural corpus with `per_class` exemplars per class in the
    /// standard kind mix.
    pub fn synthetic(class_names: &[String], image_size: usize, per_class: usize, seed: u64) -> Result<Self> {
        let mut items = Vec::with_capacity(class_names.len() * per_class);
        for class_id in 0..class_names.len() {
            let mut start = 0.0;
            for (kind, share) in MIX {
                let end = start + share * per_class as f64;
                let n = end.round() as usize - (start.round() as usize);
                for i in 0..n {
                    let seed = derive(seed, &[class_id as u64, kind as u64, i as u64]);
                    items.push(Exemplar {
                        class_id,
                        source: Source::Procedural { kind, seed },
                    });
                }
                start = end;
            }
        }
        Self::new(class_names.to_vec(), items, image_size)
    }

    /// Pixels of item `index`.
    pub fn image(&self, index: usize) -> Result<std::borrow::Cow<'_, Image>> {
        Ok(self.sample(index)?.0)
    }

    /// Pixels of item `index` and the class of any foreign prompt in it.
    pub fn sample(&self, index: usize) -> Result<(std::borrow::Cow<'_, Image>, Option<usize>)> {
        let item = self.items.get(index).ok_or(Error::Index {
            what: "exemplar",
            index,
            len: self.items.len(),
        })?;
        Ok(match &item.source {
            Source::Image(img) => (std::borrow::Cow::Borrowed(img), None),
            Source::Procedural { kind, seed } => {
                let (img, foreign) = exemplar(*kind, item.class_id, &self.class_names, self.image_size, *seed)?;
                (std::borrow::Cow::Owned(img), foreign)
            }
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn of_class(&self, class_id: usize) -> &[usize] {
        &self.by_class[class_id]
    }

    /// Per-kind counts and a digest of every exemplar's recipe.
    pub fn manifest(&self) -> CorpusManifest {
        let mut hasher = Sha256::new();
        let mut kinds: BTreeMap<String, usize> = BTreeMap::new();
        for item in &self.items {
            hasher.update((item.class_id as u64).to_le_bytes());
            let name = match &item.source {
                Source::Procedural { kind, seed } => {
                    hasher.update([*kind as u8]);
                    hasher.update(seed.to_le_bytes());
                    serde_json::to_value(kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
                }
                Source::Image(img) => {
                    hasher.update([u8::MAX]);
                    for v in img.data() {
                        hasher.update(v.to_le_bytes());
                    }
                    "stored".to_string()
                }
            };
            *kinds.entry(name).or_default() += 1;
        }
        CorpusManifest {
            class_names: self.class_names.clone(),
            image_size: self.image_size,
            exemplars: self.items.len(),
            kinds,
            digest: hasher.finalize().iter().map(|b| format!("{b:02x}")).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub class_names: Vec<String>,
    pub image_size: usize,
    pub exemplars: usize,
    pub kinds: BTreeMap<String, usize>,
    pub digest: String,
}

/// Pixels of a procedural exemplar plus the class of a foreign prompt it
/// carries, if any.
fn exemplar(kind: ExemplarKind, class_id: usize, names: &[String], size: usize, seed: u64) -> Result<(Image, Option<usize>)> {
    let mut r = rng::rng(seed);
    let name = &names[class_id];
    let block = glyph::default_prompt_size(size);
    let on_noise = |text: &str, h: usize, w: usize, r: &mut rng::Rng| -> Result<Image> {
        let mut img = synth::noise_background(size, r);
        let prompt = glyph::render_prompt(text, h, w, r.random())?;
        let origin = glyph::placement_origin((size, size), (h, w), Placement::Rand, r.random())?;
        img.paste(&prompt.pixels, origin)?;
        Ok(img)
    };
    let with_other_prompt = |prompt_class: usize, r: &mut rng::Rng| -> Result<Image> {
        let scene = synth::render_scene(class_id, size, r.random());
        let prompt = glyph::render_prompt(&names[prompt_class], block, block, r.random())?;
        Ok(glyph::apply_prompt(&scene, &prompt, Placement::Rand, r.random())?.pixels)
    };
    let image = match kind {
        ExemplarKind::Natural => Ok(synth::render_scene(class_id, size, r.random())),
        ExemplarKind::TextRender => text_render(name, size, r.random()),
        ExemplarKind::TextBlock => on_noise(name, block, block, &mut r),
        ExemplarKind::TextStrip => {
            let h = (2 * block).min(size);
            on_noise(name, h, size, &mut r)
        }
        ExemplarKind::PromptMatched => {
            // half of these carry only one scene cue, so the text is needed
            let scene = match r.random_range(0..4u32) {
                0 => synth::render_partial_scene(class_id, size, synth::Cue::ShapeOnly, r.random()),
                1 => synth::render_partial_scene(class_id, size, synth::Cue::HueOnly, r.random()),
                _ => synth::render_scene(class_id, size, r.random()),
            };
            let prompt = glyph::render_prompt(name, block, block, r.random())?;
            Ok(glyph::apply_prompt(&scene, &prompt, Placement::Rand, r.random())?.pixels)
        }
        ExemplarKind::PromptMismatched => {
            // mostly a class that shares a cue with this one
            let confusable: Vec<usize> = (0..names.len())
                .filter(|&k| k != class_id && synth::shares_cue(k, class_id))
                .collect();
            let other = if !confusable.is_empty() && r.random_bool(0.7) {
                confusable[r.random_range(0..confusable.len())]
            } else {
                (class_id + r.random_range(1..names.len())) % names.len()
            };
            return Ok((with_other_prompt(other, &mut r)?, Some(other)));
        }
    };
    Ok((image?, None))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub per_class: usize,
    pub adam: AdamConfig,
    pub image: ImageEncoderConfig,
    pub text: TextEncoderConfig,
    /// Held-out exemplars per class for the post-training check.
    pub eval_per_class: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 6000,
            per_class: 4000,
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            image: ImageEncoderConfig::default(),
            text: TextEncoderConfig::default(),
            eval_per_class: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    /// Mean loss over the last tenth of training.
    pub final_loss: f64,
    /// Mean loss over each tenth of training.
    pub loss_curve: Vec<f64>,
    pub temperature: f64,
    pub natural_accuracy: f64,
    pub text_accuracy: f64,
    pub checksum: String,
}

/// ln(100): CLIP's cap on the learned logit scale.
const MAX_LOGIT_SCALE: f64 = 4.605170185988092;

/// Symmetric InfoNCE over an N × N logit matrix with matches on the diagonal.
pub fn info_nce<'a>(logits: Var<'a>) -> Result<Var<'a>> {
    let n = logits.shape()[0];
    info_nce_soft(logits, &Tensor::eye(n))
}

/// Symmetric InfoNCE against a non-negative N × N match matrix; rows and
/// columns are normalized into target distributions.
pub fn info_nce_soft<'a>(logits: Var<'a>, matches: &Tensor) -> Result<Var<'a>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != shape[1] || matches.shape() != shape.as_slice() {
        return Err(Error::Shape(format!(
            "InfoNCE needs square logits and matches, got {shape:?} and {:?}",
            matches.shape()
        )));
    }
    let n = shape[0];
    let m = matches.data();
    let normalized = |transpose: bool| -> Result<Tensor> {
        let at = |i: usize, j: usize| if transpose { m[j * n + i] } else { m[i * n + j] };
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            let total: f64 = (0..n).map(|j| at(i, j)).sum();
            if !(total > 0.0) {
                return Err(Error::Contract(format!("row {i} of the match matrix has no mass")));
            }
            out.extend((0..n).map(|j| at(i, j) / total));
        }
        Tensor::matrix(n, n, out)
    };
    let tape = logits.tape_ref();
    let ce = |l: Var<'a>, target: Tensor| -> Result<Var<'a>> {
        Ok(l.softmax()?.log()?.mul(tape.constant(target))?.sum().scale(-1.0 / n as f64))
    };
    Ok(ce(logits, normalized(false)?)?
        .add(ce(logits.transpose()?, normalized(true)?)?)?
        .scale(0.5))
}

/// Trains both encoders with symmetric InfoNCE. Each step draws one
/// exemplar and one caption per class. Returns frozen weights.
pub fn pretrain_surrogate(corpus: &PretrainCorpus, config: &PretrainConfig) -> Result<(DualEncoder, PretrainReport)> {
    if config.steps == 0 {
        return Err(Error::config("steps", "must be positive"));
    }
    if corpus.image_size() != config.image.image_size {
        return Err(Error::config(
            "image_size",
            format!(
                "corpus images are {} px, encoder expects {}",
                corpus.image_size(),
                config.image.image_size
            ),
        ));
    }
    let mut enc = DualEncoder::init(config.image, config.text, derive(config.seed, &[tag("init")]))?;
    for t in enc.tensors_mut() {
        t.requires_grad = true;
    }
    let mut logit_scale = Tensor::scalar((1.0 / Temperature::CLIP_INIT).ln()).with_grad();
    let mut adam = Adam::new(config.adam);
    let mut r = rng::rng(derive(config.seed, &[tag("batches")]));
    let c = corpus.num_classes();
    let mut losses = Vec::with_capacity(config.steps);

    for _ in 0..config.steps {
        let samples = (0..c)
            .map(|k| corpus.image(*corpus.of_class(k).choose(&mut r).expect("non-empty class")))
            .collect::<Result<Vec<_>>>()?;
        let picks: Vec<&Image> = samples.iter().map(|p| p.as_ref()).collect();
        let captions: Vec<String> = corpus
            .class_names
            .iter()
            .map(|name| CAPTION_TEMPLATES.choose(&mut r).expect("templates").replace("{}", name))
            .collect();
        let batch = enc.image.stack(&picks)?;

        let grads = {
            let tape = Tape::new();
            let img_b = enc.image.bind(&tape);
            let txt_b = enc.text.bind(&tape);
            let scale = tape.leaf(&logit_scale);
            let img = img_b.encode(tape.leaf(&batch))?;
            let seqs = captions
                .iter()
                .map(|t| txt_b.lookup(&super::tokenize(t)))
                .collect::<Result<Vec<_>>>()?;
            let txt = txt_b.encode(&seqs)?;
            let logits = img.matmul(txt.transpose()?)?.mul_scalar(scale.exp())?;
            let loss = info_nce(logits)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("pretraining loss became {value}")));
            }
            losses.push(value);
            let grads = tape.backward(loss)?;
            let mut vars = img_b.vars();
            vars.extend(txt_b.vars());
            vars.push(scale);
            vars.iter().map(|v| grads.get(*v)).collect::<Vec<_>>()
        };
        let mut params = enc.tensors_mut();
        params.push(&mut logit_scale);
        for (p, g) in params.iter_mut().zip(grads) {
            if let Some(g) = g {
                p.accumulate_grad(g.data());
            }
        }
        adam.step(&mut params);
        let ls = logit_scale.data_mut();
        ls[0] = ls[0].min(MAX_LOGIT_SCALE);
    }

    enc.temperature = Temperature::new((-logit_scale.item()).exp())?;
    enc.freeze();
    let (natural_accuracy, text_accuracy) = evaluate(&enc, &corpus.class_names, config)?;
    let tail = (config.steps / 10).max(1);
    let report = PretrainReport {
        steps: config.steps,
        final_loss: losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64,
        loss_curve: losses
            .chunks(tail)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect(),
        temperature: enc.temperature.value(),
        natural_accuracy,
        text_accuracy,
        checksum: enc.checksum(),
    };
    Ok((enc, report))
}

/// Zero-shot accuracy on fresh natural scenes and on full-frame text renders.
fn evaluate(enc: &DualEncoder, names: &[String], config: &PretrainConfig) -> Result<(f64, f64)> {
    let size = config.image.image_size;
    let mut natural = Vec::new();
    let mut text = Vec::new();
    let mut labels = Vec::new();
    for (c, name) in names.iter().enumerate() {
        for i in 0..config.eval_per_class {
            let s = derive(config.seed, &[tag("heldout"), c as u64, i as u64]);
            natural.push(synth::render_scene(c, size, s));
            text.push(text_render(name, size, s)?);
            labels.push(c);
        }
    }
    let acc = |images: &[Image]| -> Result<f64> {
        let refs: Vec<&Image> = images.iter().collect();
        let pred = enc.zero_shot_predict(&refs, names)?;
        Ok(pred.iter().zip(&labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
    };
    Ok((acc(&natural)?, acc(&text)?))
}

/// Cosine-based nearest class under hand-written prompts for one embedding.
pub fn nearest_class(embedding: &[f64], class_embeddings: &Tensor) -> usize {
    let scores: Vec<f64> = (0..class_embeddings.rows())
        .map(|c| dot(embedding, class_embeddings.row(c)))
        .collect();
    argmax(&scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        synth::CLASS_NAMES[..n].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn thin_class_is_a_data_error() {
        let img = Image::filled(16, 16, [0.0; 3]);
        let items = vec![
            Exemplar::stored(img.clone(), 0),
            Exemplar::stored(img.clone(), 0),
            Exemplar::stored(img.clone(), 1),
        ];
        assert!(matches!(PretrainCorpus::new(names(2), items.clone(), 16), Err(Error::Data(_))));
        assert!(matches!(PretrainCorpus::new(names(2), items, 20), Err(Error::Data(_))));
    }

    #[test]
    fn synthetic_corpus_has_the_full_mix() {
        let corpus = PretrainCorpus::synthetic(&names(3), 56, 20, 1).unwrap();
        assert_eq!(corpus.items.len(), 60);
        for kind in MIX.map(|(k, _)| k) {
            assert!(corpus.items.iter().any(|e| e.kind() == Some(kind)), "{kind:?} missing");
        }
        let a = corpus.image(5).unwrap().into_owned();
        assert_eq!(a, corpus.image(5).unwrap().into_owned());
        assert!(a.in_unit_range());
    }

    #[test]
    fn tiny_run_is_reproducible() {
        let corpus = PretrainCorpus::synthetic(&names(3), 56, 8, 2).unwrap();
        let config = PretrainConfig {
            steps: 5,
            image: ImageEncoderConfig {
                image_size: 56,
                patch: 8,
                stride: 8,
                d_hidden: 8,
                d_embed: 8,
            },
            text: TextEncoderConfig {
                d_word: 8,
                d_hidden: 8,
                d_embed: 8,
                max_len: 32,
            },
            eval_per_class: 2,
            ..PretrainConfig::default()
        };
        let (a, ra) = pretrain_surrogate(&corpus, &config).unwrap();
        let (b, rb) = pretrain_surrogate(&corpus, &config).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(ra, rb);
        assert!(a.is_frozen());
    }
}
