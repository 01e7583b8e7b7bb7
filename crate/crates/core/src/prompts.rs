//! Learnable prompt parameters: context vectors, the class-specific prompt
//! generator, and tunable visual prompts.

use crate::checkpoint::TensorDump;
use crate::dualenc::{class_suffix, tokenize, DualEncoder, CONTEXT_TEMPLATE};
use crate::error::{Error, Result};
use crate::glyph::{self, VisualPrompt};
use crate::image::Image;
use crate::rng::{self, derive};
use crate::tensor::{checksum_all, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::fmt;
use std::str::FromStr;

/// Context length used for few-shot runs.
pub const FEW_SHOT_CONTEXT_LEN: usize = 16;
/// Context length for every other setting.
pub const DEFAULT_CONTEXT_LEN: usize = 4;
pub const CONTEXT_INIT_STD: f64 = 0.02;
pub const GENERATOR_HIDDEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Shared,
    ClassSpecific,
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptMode::Shared => "shared",
            PromptMode::ClassSpecific => "class_specific",
        })
    }
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(PromptMode::Shared),
            "class_specific" => Ok(PromptMode::ClassSpecific),
            other => Err(Error::config("mode", format!("unknown prompt mode `{other}`"))),
        }
    }
}

/// How context vectors start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextInit {
    /// N(0, 0.02²) per entry.
    #[default]
    Random,
    /// Word vectors of "a photo of a "; requires M to equal its length.
    Template,
}

impl FromStr for ContextInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(ContextInit::Random),
            "template" => Ok(ContextInit::Template),
            other => Err(Error::config("ctx_init", format!("unknown context init `{other}`"))),
        }
    }
}

/// Length of the hand-written context in tokens.
pub fn template_context_len() -> usize {
    tokenize(CONTEXT_TEMPLATE).len()
}

/// Context vectors `u` and frozen class-name vectors `e_c`.
///
/// In shared mode `context` holds one M × d_word tensor; in class-specific
/// mode it holds one per class. With M = 0 it is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct TextPromptParams {
    pub mode: PromptMode,
    pub m: usize,
    pub context: Vec<Tensor>,
    pub class_tokens: Vec<Tensor>,
}

impl TextPromptParams {
    pub fn new(
        encoder: &DualEncoder,
        class_names: &[String],
        mode: PromptMode,
        m: usize,
        init: ContextInit,
        seed: u64,
    ) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::config("classes", "no classes"));
        }
        let class_tokens = class_names
            .iter()
            .map(|n| encoder.text.token_vectors(&tokenize(&class_suffix(n))).map(Tensor::frozen))
            .collect::<Result<Vec<_>>>()?;
        let copies = match mode {
            PromptMode::Shared => 1,
            PromptMode::ClassSpecific => class_names.len(),
        };
        let context = if m == 0 {
            Vec::new()
        } else {
            match init {
                ContextInit::Random => {
                    let mut r = rng::rng(seed);
                    (0..copies)
                        .map(|_| Tensor::randn(&[m, encoder.d_word()], CONTEXT_INIT_STD, &mut r).with_grad())
                        .collect()
                }
                ContextInit::Template => {
                    let ids = tokenize(CONTEXT_TEMPLATE);
                    if ids.len() != m {
                        return Err(Error::config(
                            "m",
                            format!("template init needs M = {}, got {m}", ids.len()),
                        ));
                    }
                    let t = encoder.text.token_vectors(&ids)?.with_grad();
                    vec![t; copies]
                }
            }
        };
        Ok(Self {
            mode,
            m,
            context,
            class_tokens,
        })
    }

    /// Class-specific parameters from explicit per-class contexts.
    pub fn class_specific(context: Vec<Tensor>, class_tokens: Vec<Tensor>) -> Result<Self> {
        if context.len() != class_tokens.len() {
            return Err(Error::Shape(format!(
                "{} contexts for {} classes",
                context.len(),
                class_tokens.len()
            )));
        }
        let m = context.first().map_or(0, |t| t.shape()[0]);
        if context.iter().any(|t| t.shape()[0] != m) {
            return Err(Error::Shape("contexts differ in length".into()));
        }
        Ok(Self {
            mode: PromptMode::ClassSpecific,
            m,
            context: context.into_iter().map(Tensor::with_grad).collect(),
            class_tokens,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_tokens.len()
    }

    fn context_index(&self, class_id: usize) -> Result<Option<usize>> {
        if class_id >= self.num_classes() {
            return Err(Error::Index {
                what: "class",
                index: class_id,
                len: self.num_classes(),
            });
        }
        Ok(match (self.m, self.mode) {
            (0, _) => None,
            (_, PromptMode::Shared) => Some(0),
            (_, PromptMode::ClassSpecific) => Some(class_id),
        })
    }

    pub fn context_checksum(&self) -> String {
        checksum_all(&self.context)
    }

    pub fn class_token_checksum(&self) -> String {
        checksum_all(&self.class_tokens)
    }

    pub fn bind<'a>(&'a self, tape: &'a Tape<'a>) -> BoundPrompts<'a> {
        BoundPrompts {
            params: self,
            context: self.context.iter().map(|t| tape.leaf(t)).collect(),
            class_tokens: self.class_tokens.iter().map(|t| tape.leaf(t)).collect(),
        }
    }

    /// Embeddings g(p_c) for all classes, C × d_embed, without gradients.
    pub fn text_embeddings(&self, encoder: &DualEncoder) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let emb = bound.embed(encoder, &tape)?;
        Ok(emb.value())
    }

    pub fn to_dump(&self) -> TensorDump {
        let mut dump = TensorDump::new("text_prompts");
        dump.set_meta("mode", self.mode.to_string());
        dump.set_meta("m", self.m as u64);
        dump.set_meta("classes", self.num_classes() as u64);
        for (i, t) in self.context.iter().enumerate() {
            dump.push(format!("context.{i}"), t);
        }
        for (i, t) in self.class_tokens.iter().enumerate() {
            dump.push(format!("class_tokens.{i}"), t);
        }
        dump
    }

    pub fn from_dump(dump: &TensorDump) -> Result<Self> {
        if dump.kind != "text_prompts" {
            return Err(Error::Format(format!("expected text prompts, got `{}`", dump.kind)));
        }
        let mode: PromptMode = dump.meta_str("mode")?.parse()?;
        let m = dump.meta_u64("m")? as usize;
        let classes = dump.meta_u64("classes")? as usize;
        let copies = match (m, mode) {
            (0, _) => 0,
            (_, PromptMode::Shared) => 1,
            (_, PromptMode::ClassSpecific) => classes,
        };
        let context = (0..copies)
            .map(|i| dump.get(&format!("context.{i}")).map(|t| t.clone().with_grad()))
            .collect::<Result<Vec<_>>>()?;
        let class_tokens = (0..classes)
            .map(|i| dump.get(&format!("class_tokens.{i}")).map(|t| t.clone().frozen()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mode,
            m,
            context,
            class_tokens,
        })
    }
}

/// Token-vector sequence `[u_1, …, u_M, e_c]` for class `class_id`.
pub fn assemble_prompt(params: &TextPromptParams, class_id: usize) -> Result<Tensor> {
    let e = &params.class_tokens[class_id.min(params.num_classes().saturating_sub(1))];
    match params.context_index(class_id)? {
        None => Ok(e.clone().frozen()),
        Some(i) => {
            let u = &params.context[i];
            let d = u.shape()[1];
            let data = [u.data(), e.data()].concat();
            Tensor::matrix(data.len() / d, d, data)
        }
    }
}

/// [`TextPromptParams`] recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundPrompts<'a> {
    params: &'a TextPromptParams,
    pub context: Vec<Var<'a>>,
    pub class_tokens: Vec<Var<'a>>,
}

impl<'a> BoundPrompts<'a> {
    pub fn assemble(&self, class_id: usize) -> Result<Var<'a>> {
        let e = self.class_tokens[class_id.min(self.class_tokens.len().saturating_sub(1))];
        match self.params.context_index(class_id)? {
            None => Ok(e),
            Some(i) => e.tape_ref().concat(&[self.context[i], e]),
        }
    }

    /// g(p_c) for every class, C × d_embed.
    pub fn embed(&self, encoder: &'a DualEncoder, tape: &'a Tape<'a>) -> Result<Var<'a>> {
        let text = encoder.text.bind(tape);
        let seqs = (0..self.class_tokens.len())
            .map(|c| self.assemble(c))
            .collect::<Result<Vec<_>>>()?;
        text.encode(&seqs)
    }
}

/// Two-layer tanh MLP mapping a handcraft-prompt embedding to M context vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGeneratorMLP {
    pub m: usize,
    pub d_word: usize,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl PromptGeneratorMLP {
    pub fn init(d_embed: usize, hidden: usize, m: usize, d_word: usize, seed: u64) -> Result<Self> {
        if m == 0 {
            return Err(Error::config("m", "the generator needs at least one context vector"));
        }
        let mut r = rng::rng(seed);
        Ok(Self {
            m,
            d_word,
            w1: Tensor::randn(&[d_embed, hidden], (1.0 / d_embed as f64).sqrt(), &mut r).with_grad(),
            b1: Tensor::zeros(&[hidden]).with_grad(),
            // small output layer so generated contexts start near the random-init scale
            w2: Tensor::randn(&[hidden, m * d_word], CONTEXT_INIT_STD, &mut r).with_grad(),
            b2: Tensor::zeros(&[m * d_word]).with_grad(),
        })
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn checksum(&self) -> String {
        checksum_all([&self.w1, &self.b1, &self.w2, &self.b2])
    }

    pub fn freeze(&mut self) {
        for t in self.tensors_mut() {
            t.requires_grad = false;
            t.grad = None;
        }
    }

    pub fn bind<'a>(&'a self, tape: &'a Tape<'a>) -> BoundGenerator<'a> {
        BoundGenerator {
            gen: self,
            w1: tape.leaf(&self.w1),
            b1: tape.leaf(&self.b1),
            w2: tape.leaf(&self.w2),
            b2: tape.leaf(&self.b2),
        }
    }

    /// Numeric contexts, one M × d_word tensor per row of `handcraft`.
    pub fn generate(&self, handcraft: &Tensor) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        bound
            .generate(tape.leaf(handcraft))?
            .into_iter()
            .map(|v| Ok(v.value()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundGenerator<'a> {
    gen: &'a PromptGeneratorMLP,
    pub w1: Var<'a>,
    pub b1: Var<'a>,
    pub w2: Var<'a>,
    pub b2: Var<'a>,
}

impl<'a> BoundGenerator<'a> {
    pub fn vars(&self) -> Vec<Var<'a>> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }

    /// Per-class contexts from a C × d_embed matrix of handcraft embeddings.
    pub fn generate(&self, handcraft: Var<'a>) -> Result<Vec<Var<'a>>> {
        let c = handcraft.shape()[0];
        let out = handcraft
            .matmul(self.w1)?
            .add_row(self.b1)?
            .tanh()
            .matmul(self.w2)?
            .add_row(self.b2)?;
        let (m, d) = (self.gen.m, self.gen.d_word);
        (0..c)
            .map(|i| out.gather((i * m * d..(i + 1) * m * d).collect(), vec![m, d]))
            .collect()
    }

    /// g(p_c) for all classes with generated contexts, C × d_embed.
    pub fn embed(
        &self,
        encoder: &'a DualEncoder,
        tape: &'a Tape<'a>,
        handcraft: Var<'a>,
        class_tokens: &[Var<'a>],
    ) -> Result<Var<'a>> {
        let contexts = self.generate(handcraft)?;
        if contexts.len() != class_tokens.len() {
            return Err(Error::Shape(format!(
                "{} handcraft rows for {} classes",
                contexts.len(),
                class_tokens.len()
            )));
        }
        let seqs = contexts
            .iter()
            .zip(class_tokens)
            .map(|(u, e)| tape.concat(&[*u, *e]))
            .collect::<Result<Vec<_>>>()?;
        encoder.text.bind(tape).encode(&seqs)
    }
}

/// Two-stage class-specific prompt learning: a generator trained on all
/// seen classes (stage 1), then its outputs fine-tuned directly (stage 2).
#[derive(Debug, Clone)]
pub struct TwoStagePrompts {
    pub generator: PromptGeneratorMLP,
    pub handcraft: Tensor,
    pub class_tokens: Vec<Tensor>,
    stage1: Option<TextPromptParams>,
}

impl TwoStagePrompts {
    pub fn new(encoder: &DualEncoder, class_names: &[String], m: usize, seed: u64) -> Result<Self> {
        let handcraft = encoder.handcraft_embeddings(class_names)?.frozen();
        let class_tokens = class_names
            .iter()
            .map(|n| encoder.text.token_vectors(&tokenize(&class_suffix(n))).map(Tensor::frozen))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            generator: PromptGeneratorMLP::init(encoder.d_embed(), GENERATOR_HIDDEN, m, encoder.d_word(), seed)?,
            handcraft,
            class_tokens,
            stage1: None,
        })
    }

    /// Ends stage 1: materializes the generator's current outputs.
    pub fn stage1_generate(&mut self) -> Result<&TextPromptParams> {
        let params = stage1_generate(&self.generator, &self.handcraft, &self.class_tokens)?;
        Ok(self.stage1.insert(params))
    }

    pub fn stage1_output(&self) -> Option<&TextPromptParams> {
        self.stage1.as_ref()
    }

    /// Detached, directly trainable copy of the stage-1 contexts; freezes
    /// the generator.
    pub fn stage2_finetune_init(&mut self) -> Result<TextPromptParams> {
        let params = stage2_finetune_init(self.stage1.as_ref())?;
        self.generator.freeze();
        Ok(params)
    }
}

/// Class-specific contexts produced by `gen` from per-class handcraft embeddings.
pub fn stage1_generate(
    gen: &PromptGeneratorMLP,
    handcraft: &Tensor,
    class_tokens: &[Tensor],
) -> Result<TextPromptParams> {
    TextPromptParams::class_specific(gen.generate(handcraft)?, class_tokens.to_vec())
}

pub fn stage2_finetune_init(stage1_output: Option<&TextPromptParams>) -> Result<TextPromptParams> {
    let params = stage1_output.ok_or_else(|| Error::State("stage 2 requested before stage 1 finished".into()))?;
    let mut out = params.clone();
    for t in &mut out.context {
        t.requires_grad = true;
        t.grad = None;
    }
    Ok(out)
}

/// Per-class pixel blocks initialized from rendered class names.
#[derive(Debug, Clone, PartialEq)]
pub struct TunableVisualPrompt {
    pub blocks: Vec<Tensor>,
    pub height: usize,
    pub width: usize,
}

impl TunableVisualPrompt {
    pub fn from_render(class_names: &[String], height: usize, width: usize, seed: u64) -> Result<Self> {
        let blocks = class_names
            .iter()
            .enumerate()
            .map(|(c, n)| {
                glyph::render_prompt(n, height, width, derive(seed, &[c as u64]))
                    .map(|vp| vp.pixels.to_tensor().with_grad())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks, height, width })
    }

    pub fn block(&self, class_id: usize) -> Result<Image> {
        let t = self.blocks.get(class_id).ok_or(Error::Index {
            what: "class",
            index: class_id,
            len: self.blocks.len(),
        })?;
        Image::from_tensor(t)
    }

    pub fn checksum(&self) -> String {
        checksum_all(&self.blocks)
    }

    /// Projects every block back onto [0, 1].
    pub fn clamp(&mut self) {
        for b in &mut self.blocks {
            clamp_unit(b.data_mut());
        }
    }

    pub fn to_dump(&self) -> TensorDump {
        let mut dump = TensorDump::new("visual_prompts");
        dump.set_meta("height", self.height as u64);
        dump.set_meta("width", self.width as u64);
        dump.set_meta("classes", json!(self.blocks.len()));
        for (i, t) in self.blocks.iter().enumerate() {
            dump.push(format!("block.{i}"), t);
        }
        dump
    }

    pub fn from_dump(dump: &TensorDump) -> Result<Self> {
        if dump.kind != "visual_prompts" {
            return Err(Error::Format(format!("expected visual prompts, got `{}`", dump.kind)));
        }
        let classes = dump.meta_u64("classes")? as usize;
        Ok(Self {
            height: dump.meta_u64("height")? as usize,
            width: dump.meta_u64("width")? as usize,
            blocks: (0..classes)
                .map(|i| dump.get(&format!("block.{i}")).map(|t| t.clone().with_grad()))
                .collect::<Result<Vec<_>>>()?,
        })
    }
}

/// Clamps to [0, 1]; in-range values are left bit-identical.
pub fn clamp_unit(values: &mut [f64]) {
    for v in values {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Where visual prompts V_c come from.
#[derive(Debug, Clone, Copy)]
pub enum PromptSource<'p> {
    /// A fresh rendering of the class name; colours derive from `seed` and the salt.
    Rendered {
        class_names: &'p [String],
        height: usize,
        width: usize,
        seed: u64,
    },
    Tunable(&'p TunableVisualPrompt),
}

impl PromptSource<'_> {
    pub fn block_hw(&self) -> (usize, usize) {
        match self {
            PromptSource::Rendered { height, width, .. } => (*height, *width),
            PromptSource::Tunable(vp) => (vp.height, vp.width),
        }
    }

    /// V_c for `class_id`; `salt` varies the colours of rendered prompts.
    pub fn prompt(&self, class_id: usize, salt: u64) -> Result<VisualPrompt> {
        match self {
            PromptSource::Rendered {
                class_names,
                height,
                width,
                seed,
            } => {
                let name = class_names.get(class_id).ok_or(Error::Index {
                    what: "class",
                    index: class_id,
                    len: class_names.len(),
                })?;
                Ok(glyph::render_prompt(name, *height, *width, derive(*seed, &[class_id as u64, salt]))?
                    .for_class(class_id))
            }
            PromptSource::Tunable(vp) => {
                let pixels = vp.block(class_id)?;
                Ok(VisualPrompt {
                    fg_color: [f64::NAN; 3],
                    bg_color: [f64::NAN; 3],
                    pixels,
                    class_id: Some(class_id),
                    seed: 0,
                    shown: String::new(),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dualenc::{ImageEncoderConfig, TextEncoderConfig};

    fn encoder() -> DualEncoder {
        let mut enc = DualEncoder::init(
            ImageEncoderConfig {
                image_size: 16,
                patch: 8,
                stride: 8,
                d_hidden: 8,
                d_embed: 8,
            },
            TextEncoderConfig {
                d_word: 6,
                d_hidden: 8,
                d_embed: 8,
                max_len: 40,
            },
            1,
        )
        .unwrap();
        enc.freeze();
        enc
    }

    fn names() -> Vec<String> {
        vec!["kiwi".into(), "fig".into(), "lemon".into()]
    }

    #[test]
    fn zero_context_is_class_tokens_alone() {
        let enc = encoder();
        let p = TextPromptParams::new(&enc, &names(), PromptMode::Shared, 0, ContextInit::Random, 0).unwrap();
        assert_eq!(assemble_prompt(&p, 1).unwrap().data(), p.class_tokens[1].data());
    }

    #[test]
    fn shared_context_is_common() {
        let enc = encoder();
        let p = TextPromptParams::new(&enc, &names(), PromptMode::Shared, 4, ContextInit::Random, 0).unwrap();
        let (a, b) = (assemble_prompt(&p, 0).unwrap(), assemble_prompt(&p, 2).unwrap());
        assert_eq!(&a.data()[..24], &b.data()[..24]);
        assert_eq!(a.shape(), &[4 + 5, 6]);
        assert!(matches!(assemble_prompt(&p, 3), Err(Error::Index { .. })));
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let s0 = bound.assemble(0).unwrap();
        let s2 = bound.assemble(2).unwrap();
        assert_eq!(s0.to_vec(), a.data());
        assert_eq!(s2.to_vec(), b.data());
    }

    #[test]
    fn gradient_reaches_context_only() {
        let enc = encoder();
        let p = TextPromptParams::new(&enc, &names(), PromptMode::ClassSpecific, 2, ContextInit::Random, 3).unwrap();
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let emb = bound.embed(&enc, &tape).unwrap();
        let grads = tape.backward(emb.at(0).unwrap()).unwrap();
        assert!(grads.wrt(bound.context[0]).is_some());
        assert!(grads.wrt(bound.class_tokens[0]).is_none());
    }

    #[test]
    fn template_init_reproduces_handcraft_prompt() {
        let enc = encoder();
        let m = template_context_len();
        let p = TextPromptParams::new(&enc, &names(), PromptMode::Shared, m, ContextInit::Template, 0).unwrap();
        let hand = enc.handcraft_embeddings(&names()).unwrap();
        assert_eq!(p.text_embeddings(&enc).unwrap().data(), hand.data());
        assert!(TextPromptParams::new(&enc, &names(), PromptMode::Shared, 4, ContextInit::Template, 0).is_err());
    }

    #[test]
    fn generator_contracts() {
        let enc = encoder();
        let mut two = TwoStagePrompts::new(&enc, &names(), 3, 5).unwrap();
        assert!(matches!(two.stage2_finetune_init(), Err(Error::State(_))));
        // identical inputs give identical contexts
        let same = Tensor::matrix(2, 8, [two.handcraft.row(0), two.handcraft.row(0)].concat()).unwrap();
        let ctx = two.generator.generate(&same).unwrap();
        assert_eq!(ctx[0], ctx[1]);
        // zero weights give zero contexts
        let mut zero = two.generator.clone();
        for t in zero.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        assert!(zero.generate(&two.handcraft).unwrap().iter().all(|t| t.data().iter().all(|v| *v == 0.0)));

        let stage1 = two.stage1_generate().unwrap().clone();
        let before = two.generator.checksum();
        let stage2 = two.stage2_finetune_init().unwrap();
        assert_eq!(stage1.context, stage2.context);
        assert_eq!(stage2.mode, PromptMode::ClassSpecific);
        assert_eq!(before, two.generator.checksum());
        assert!(stage2.context.iter().all(|t| t.requires_grad));
    }

    #[test]
    fn clamp_examples() {
        let mut v = vec![1.5, -0.2, 0.3, 1.0, 0.0];
        clamp_unit(&mut v);
        assert_eq!(v, vec![1.0, 0.0, 0.3, 1.0, 0.0]);
        let mut vp = TunableVisualPrompt::from_render(&names(), 8, 8, 2).unwrap();
        let before = vp.checksum();
        vp.clamp();
        assert_eq!(before, vp.checksum());
    }

    #[test]
    fn prompt_dumps_round_trip() {
        let enc = encoder();
        let p = TextPromptParams::new(&enc, &names(), PromptMode::ClassSpecific, 2, ContextInit::Random, 3).unwrap();
        let back = TextPromptParams::from_dump(&TensorDump::from_json(&p.to_dump().to_json()).unwrap()).unwrap();
        assert_eq!(p.context_checksum(), back.context_checksum());
        assert_eq!(p.mode, back.mode);
        let vp = TunableVisualPrompt::from_render(&names(), 8, 8, 2).unwrap();
        let back = TunableVisualPrompt::from_dump(&vp.to_dump()).unwrap();
        assert_eq!(vp.checksum(), back.checksum());
    }

    #[test]
    fn rendered_source_is_deterministic() {
        let n = names();
        let src = PromptSource::Rendered {
            class_names: &n,
            height: 8,
            width: 8,
            seed: 4,
        };
        assert_eq!(src.prompt(1, 7).unwrap(), src.prompt(1, 7).unwrap());
        assert_ne!(src.prompt(1, 7).unwrap().fg_color, src.prompt(1, 8).unwrap().fg_color);
        assert!(src.prompt(5, 0).is_err());
    }
}
