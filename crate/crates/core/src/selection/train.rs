use super::{conditional_image, mine_hard_negatives, minmax_loss_tape, predict, predict_argmax};
use crate::dualenc::DualEncoder;
use crate::error::{Error, Result};
use crate::glyph::{self, Placement};
use crate::image::Image;
use crate::prompts::{PromptSource, TextPromptParams, TunableVisualPrompt, TwoStagePrompts};
use crate::rng::{derive, tag};
use crate::tensor::{checksum_all, Adam, AdamConfig, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Number of hard negatives (and inference candidates).
pub const DEFAULT_K: usize = 5;

/// An image with its frozen-encoder statistics cached.
#[derive(Debug, Clone)]
pub struct EncodedImage<'d> {
    pub image: &'d Image,
    pub patch_features: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl<'d> EncodedImage<'d> {
    pub fn new(encoder: &DualEncoder, image: &'d Image) -> Result<Self> {
        let patch_features = encoder.image.patch_features(image)?;
        let embedding = encoder.image.head(&patch_features)?;
        Ok(Self {
            image,
            patch_features,
            embedding,
        })
    }

    pub fn encode_all(encoder: &DualEncoder, images: &'d [Image]) -> Result<Vec<Self>> {
        images.iter().map(|img| Self::new(encoder, img)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Cross-entropy on p(y|x).
    CrossEntropy,
    MinMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inference {
    Argmax,
    Selection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerConfig {
    pub k: usize,
    pub placement: Placement,
    /// Edge length of the square visual prompt.
    pub prompt_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            placement: Placement::Rand,
            prompt_size: glyph::default_prompt_size(56),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Trainable text side.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum TextLearner {
    Direct(TextPromptParams),
    /// Generator-driven until stage 2 starts, then the detached contexts.
    TwoStage {
        prompts: TwoStagePrompts,
        stage2: Option<TextPromptParams>,
    },
}

pub struct Learner<'e> {
    pub encoder: &'e DualEncoder,
    pub class_names: Vec<String>,
    pub text: TextLearner,
    pub visual: Option<TunableVisualPrompt>,
    pub objective: Objective,
    pub inference: Inference,
    pub config: LearnerConfig,
    adam: Adam,
    steps: u64,
}

impl<'e> Learner<'e> {
    pub fn new(
        encoder: &'e DualEncoder,
        class_names: Vec<String>,
        text: TextLearner,
        visual: Option<TunableVisualPrompt>,
        objective: Objective,
        inference: Inference,
        config: LearnerConfig,
    ) -> Result<Self> {
        if config.k == 0 {
            return Err(Error::config("k", "K must be at least 1"));
        }
        if class_names.len() < 2 {
            return Err(Error::config("classes", "need at least 2 classes"));
        }
        if let Some(vp) = &visual {
            if vp.blocks.len() != class_names.len() {
                return Err(Error::Shape(format!(
                    "{} visual prompts for {} classes",
                    vp.blocks.len(),
                    class_names.len()
                )));
            }
        }
        let adam = Adam::new(config.adam);
        Ok(Self {
            encoder,
            class_names,
            text,
            visual,
            objective,
            inference,
            config,
            adam,
            steps: 0,
        })
    }

    /// Optimizer steps taken so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Switches a two-stage learner to direct fine-tuning of its contexts.
    pub fn start_stage2(&mut self) -> Result<()> {
        match &mut self.text {
            TextLearner::TwoStage { prompts, stage2 } => {
                if stage2.is_some() {
                    return Err(Error::State("stage 2 already started".into()));
                }
                prompts.stage1_generate()?;
                *stage2 = Some(prompts.stage2_finetune_init()?);
                self.adam = Adam::new(self.config.adam);
                Ok(())
            }
            TextLearner::Direct(_) => Err(Error::State("learner has no stage 1".into())),
        }
    }

    /// An untrained-step learner for a disjoint class set that reuses what
    /// was learned here: the shared context, or the prompt generator applied
    /// to the new classes. Tunable visual prompts restart from renderings.
    pub fn transfer(&self, class_names: Vec<String>) -> Result<Learner<'e>> {
        let text = match &self.text {
            TextLearner::Direct(p) => {
                if p.mode != crate::prompts::PromptMode::Shared {
                    return Err(Error::State("class-specific contexts cannot transfer to unseen classes".into()));
                }
                let mut fresh =
                    TextPromptParams::new(self.encoder, &class_names, p.mode, 0, Default::default(), 0)?;
                fresh.m = p.m;
                fresh.context = p.context.clone();
                TextLearner::Direct(fresh)
            }
            TextLearner::TwoStage { prompts, .. } => {
                let mut fresh = TwoStagePrompts::new(self.encoder, &class_names, prompts.generator.m, 0)?;
                fresh.generator = prompts.generator.clone();
                fresh.stage1_generate()?;
                let stage2 = fresh.stage2_finetune_init()?;
                TextLearner::TwoStage {
                    prompts: fresh,
                    stage2: Some(stage2),
                }
            }
        };
        let visual = match &self.visual {
            Some(vp) => Some(TunableVisualPrompt::from_render(
                &class_names,
                vp.height,
                vp.width,
                derive(self.config.seed, &[tag("transfer-vp")]),
            )?),
            None => None,
        };
        Learner::new(
            self.encoder,
            class_names,
            text,
            visual,
            self.objective,
            self.inference,
            self.config.clone(),
        )
    }

    /// Digest of every trainable tensor.
    pub fn trainable_checksum(&self) -> String {
        let mut tensors: Vec<&Tensor> = match &self.text {
            TextLearner::Direct(p) => p.context.iter().collect(),
            TextLearner::TwoStage { prompts, stage2: None } => {
                let g = &prompts.generator;
                vec![&g.w1, &g.b1, &g.w2, &g.b2]
            }
            TextLearner::TwoStage { stage2: Some(p), .. } => p.context.iter().collect(),
        };
        if let Some(vp) = &self.visual {
            tensors.extend(&vp.blocks);
        }
        checksum_all(tensors)
    }

    /// Current g(p_c) for all classes, C × d_embed.
    pub fn text_embeddings(&self) -> Result<Tensor> {
        let tape = Tape::new();
        let (emb, _) = self.bind_text(&tape)?;
        Ok(emb.value())
    }

    fn bind_text<'a>(&'a self, tape: &'a Tape<'a>) -> Result<(Var<'a>, Vec<Var<'a>>)> {
        match &self.text {
            TextLearner::Direct(p) | TextLearner::TwoStage { stage2: Some(p), .. } => {
                let bound = p.bind(tape);
                Ok((bound.embed(self.encoder, tape)?, bound.context.clone()))
            }
            TextLearner::TwoStage { prompts, stage2: None } => {
                let gen = prompts.generator.bind(tape);
                let tokens: Vec<Var<'a>> = prompts.class_tokens.iter().map(|t| tape.leaf(t)).collect();
                let emb = gen.embed(self.encoder, tape, tape.leaf(&prompts.handcraft), &tokens)?;
                Ok((emb, gen.vars()))
            }
        }
    }

    fn trainable_mut<'s>(text: &'s mut TextLearner, visual: &'s mut Option<TunableVisualPrompt>) -> Vec<&'s mut Tensor> {
        let mut out: Vec<&mut Tensor> = match text {
            TextLearner::Direct(p) | TextLearner::TwoStage { stage2: Some(p), .. } => p.context.iter_mut().collect(),
            TextLearner::TwoStage { prompts, stage2: None } => prompts.generator.tensors_mut(),
        };
        if let Some(vp) = visual {
            out.extend(vp.blocks.iter_mut());
        }
        out
    }

    fn train_source(&self) -> PromptSource<'_> {
        match &self.visual {
            Some(vp) => PromptSource::Tunable(vp),
            None => PromptSource::Rendered {
                class_names: &self.class_names,
                height: self.config.prompt_size,
                width: self.config.prompt_size,
                seed: derive(self.config.seed, &[tag("train-colors")]),
            },
        }
    }

    fn eval_source(&self) -> PromptSource<'_> {
        match &self.visual {
            Some(vp) => PromptSource::Tunable(vp),
            None => PromptSource::Rendered {
                class_names: &self.class_names,
                height: self.config.prompt_size,
                width: self.config.prompt_size,
                seed: derive(self.config.seed, &[tag("eval-colors")]),
            },
        }
    }

    /// Batch loss without an update.
    pub fn loss(&self, batch: &[(&EncodedImage<'_>, usize)]) -> Result<f64> {
        let tape = Tape::new();
        let (loss, _, _) = self.forward(&tape, batch, self.steps)?;
        Ok(loss.item())
    }

    /// Batch loss and its gradient for every trainable tensor, in the order
    /// of `params_mut`, without an update.
    pub fn gradients(&self, batch: &[(&EncodedImage<'_>, usize)]) -> Result<(f64, Vec<Vec<f64>>)> {
        let tape = Tape::new();
        let (loss, text_vars, vp_vars) = self.forward(&tape, batch, self.steps)?;
        let value = loss.item();
        let vars: Vec<(Var<'_>, usize)> = text_vars.iter().chain(&vp_vars).map(|v| (*v, v.value().numel())).collect();
        let grads = tape.backward(loss)?;
        let collected = vars
            .into_iter()
            .map(|(v, n)| grads.wrt(v).map_or_else(|| vec![0.0; n], <[f64]>::to_vec))
            .collect();
        Ok((value, collected))
    }

    /// Every trainable tensor.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        Self::trainable_mut(&mut self.text, &mut self.visual)
    }

    /// One optimizer step on `batch` (image, label) pairs. Returns the loss
    /// before the update.
    pub fn train_step(&mut self, batch: &[(&EncodedImage<'_>, usize)]) -> Result<f64> {
        let (value, grads) = self.gradients(batch)?;
        let mut params = Self::trainable_mut(&mut self.text, &mut self.visual);
        for (p, g) in params.iter_mut().zip(grads) {
            p.accumulate_grad(&g);
        }
        self.adam.step(&mut params);
        if let Some(vp) = &mut self.visual {
            vp.clamp();
        }
        self.steps += 1;
        Ok(value)
    }

    #[allow(clippy::type_complexity)]
    fn forward<'a>(
        &'a self,
        tape: &'a Tape<'a>,
        batch: &[(&EncodedImage<'_>, usize)],
        step: u64,
    ) -> Result<(Var<'a>, Vec<Var<'a>>, Vec<Var<'a>>)> {
        if batch.is_empty() {
            return Err(Error::Contract("empty training batch".into()));
        }
        let c = self.num_classes();
        if let Some(&(_, y)) = batch.iter().find(|(_, y)| *y >= c) {
            return Err(Error::Index {
                what: "label",
                index: y,
                len: c,
            });
        }
        let (text, text_vars) = self.bind_text(tape)?;
        let vp_vars: Vec<Var<'a>> = self
            .visual
            .as_ref()
            .map(|vp| vp.blocks.iter().map(|b| tape.leaf(b)).collect())
            .unwrap_or_default();
        let inv_tau = 1.0 / self.encoder.temperature.value();
        let text_t = text.transpose()?;
        let d = self.encoder.d_embed();
        let emb: Vec<f64> = batch.iter().flat_map(|(x, _)| x.embedding.iter().copied()).collect();
        let img = tape.constant(Tensor::matrix(batch.len(), d, emb)?);
        let p_orig = img.matmul(text_t)?.scale(inv_tau).softmax()?;

        let loss = match self.objective {
            Objective::CrossEntropy => {
                let idx = batch.iter().enumerate().map(|(i, (_, y))| i * c + y).collect();
                p_orig.gather(idx, vec![batch.len()])?.log()?.mean().neg()
            }
            Objective::MinMax => self.minmax_batch(tape, batch, step, p_orig, text_t, &vp_vars, inv_tau)?,
        };
        if !loss.item().is_finite() {
            return Err(Error::Numeric(format!("training loss is {} at step {step}", loss.item())));
        }
        Ok((loss, text_vars, vp_vars))
    }

    #[allow(clippy::too_many_arguments)]
    fn minmax_batch<'a>(
        &'a self,
        tape: &'a Tape<'a>,
        batch: &[(&EncodedImage<'_>, usize)],
        step: u64,
        p_orig: Var<'a>,
        text_t: Var<'a>,
        vp_vars: &[Var<'a>],
        inv_tau: f64,
    ) -> Result<Var<'a>> {
        let c = self.num_classes();
        let probs = p_orig.to_vec();
        let source = self.train_source();
        let seed = derive(self.config.seed, &[tag("train-placement"), step]);
        let block_hw = source.block_hw();
        let bound_image = self.visual.as_ref().map(|_| self.encoder.image.bind(tape));

        // per image: [y, c_1, …, c_K]
        let mut groups: Vec<Vec<usize>> = Vec::with_capacity(batch.len());
        let mut cond_rows: Vec<Var<'a>> = Vec::new();
        let mut cond_numeric: Vec<f64> = Vec::new();
        for (i, (x, y)) in batch.iter().enumerate() {
            let mined = mine_hard_negatives(&probs[i * c..(i + 1) * c], Some(*y), self.config.k)?;
            let classes: Vec<usize> = std::iter::once(*y).chain(mined.classes).collect();
            for &k in &classes {
                // colours and placement are fresh every step
                let salt = derive(step, &[i as u64]);
                let cond = conditional_image(x, &source, k, self.config.placement, seed, salt)?;
                match bound_image {
                    Some(bound) => {
                        let base = tape.constant(x.image.to_tensor());
                        let pasted = base.paste(vp_vars[k], cond.block_origin)?;
                        cond_rows.push(bound.encode_pasted(&x.patch_features, pasted, cond.block_origin, block_hw)?);
                    }
                    None => cond_numeric.extend(self.encoder.image.encode_pasted(
                        &x.patch_features,
                        &cond.pixels,
                        cond.block_origin,
                        block_hw,
                    )?),
                }
            }
            groups.push(classes);
        }
        let rows: usize = groups.iter().map(Vec::len).sum();
        let cond_emb = match bound_image {
            Some(_) => tape.concat(&cond_rows)?,
            None => tape.constant(Tensor::matrix(rows, self.encoder.d_embed(), cond_numeric)?),
        };
        let p_cond = cond_emb.matmul(text_t)?.scale(inv_tau).softmax()?;

        let mut total: Option<Var<'a>> = None;
        let mut row = 0;
        for (i, classes) in groups.iter().enumerate() {
            let pick = |m: Var<'a>, r: usize, k: usize| m.gather(vec![r * c + k], vec![1]);
            let y = classes[0];
            let real = (pick(p_orig, i, y)?, pick(p_cond, row, y)?);
            let negatives = classes[1..]
                .iter()
                .enumerate()
                .map(|(j, &k)| Ok((pick(p_orig, i, k)?, pick(p_cond, row + 1 + j, k)?)))
                .collect::<Result<Vec<_>>>()?;
            let loss = minmax_loss_tape(real, &negatives).map_err(|e| diagnose(e, classes, real, &negatives))?;
            if !loss.item().is_finite() {
                return Err(diagnose(
                    Error::Numeric(format!("min-max loss is {}", loss.item())),
                    classes,
                    real,
                    &negatives,
                ));
            }
            total = Some(match total {
                None => loss,
                Some(t) => t.add(loss)?,
            });
            row += classes.len();
        }
        Ok(total.expect("non-empty batch").scale(1.0 / batch.len() as f64))
    }

    /// Predicted class for `image`; `salt` fixes inference-time prompt
    /// colours and placement.
    pub fn predict_with(&self, image: &EncodedImage<'_>, text: &Tensor, salt: u64) -> Result<usize> {
        match self.inference {
            Inference::Argmax => predict_argmax(image, text, self.encoder.temperature),
            Inference::Selection => Ok(predict(
                self.encoder,
                image,
                self.config.k,
                &self.eval_source(),
                text,
                self.config.placement,
                derive(self.config.seed, &[tag("eval-placement")]),
                salt,
            )?
            .class_id),
        }
    }

    /// Predictions for a test set; image `i` uses salt `i`.
    pub fn predict_all(&self, images: &[EncodedImage<'_>]) -> Result<Vec<usize>> {
        let text = self.text_embeddings()?;
        images
            .iter()
            .enumerate()
            .map(|(i, x)| self.predict_with(x, &text, i as u64))
            .collect()
    }
}

fn diagnose(err: Error, classes: &[usize], real: (Var<'_>, Var<'_>), negatives: &[(Var<'_>, Var<'_>)]) -> Error {
    let neg: Vec<String> = negatives
        .iter()
        .zip(&classes[1..])
        .map(|((a, b), k)| format!("class {k}: ({:.6e}, {:.6e})", a.item(), b.item()))
        .collect();
    Error::Numeric(format!(
        "{err}; real class {}: ({:.6e}, {:.6e}); negatives: [{}]",
        classes[0],
        real.0.item(),
        real.1.item(),
        neg.join(", ")
    ))
}
