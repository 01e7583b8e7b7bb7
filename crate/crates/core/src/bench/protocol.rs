use super::dataset::{corrupt, sample_few_shot, Corruption, LabeledImage, SyntheticDataset};
use super::metrics::{percent, MetricsReport, SeedResult};
use crate::dualenc::DualEncoder;
use crate::error::{Error, Result};
use crate::glyph::{self, Placement};
use crate::prompts::{template_context_len, DEFAULT_CONTEXT_LEN, FEW_SHOT_CONTEXT_LEN, ContextInit, PromptMode, TextPromptParams, TunableVisualPrompt, TwoStagePrompts};
use crate::rng::{self, derive, tag};
use crate::selection::{EncodedImage, Inference, Learner, LearnerConfig, Objective, TextLearner, DEFAULT_K};
use crate::tensor::AdamConfig;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const SHOT_CHOICES: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Hand-written prompts, argmax, no training.
    Zeroshot,
    /// Shared learned context, cross-entropy, argmax.
    CoopBaseline,
    /// Shared learned context, min-max loss over rendered prompts, selection.
    Logoprompt,
    /// Logoprompt with two-stage class-specific contexts and pixel-tunable prompts.
    LogopromptTunableVp,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Zeroshot,
        Method::CoopBaseline,
        Method::Logoprompt,
        Method::LogopromptTunableVp,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Zeroshot => "zeroshot",
            Method::CoopBaseline => "coop_baseline",
            Method::Logoprompt => "logoprompt",
            Method::LogopromptTunableVp => "logoprompt_tunable_vp",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("method", format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    /// Even class indices are base, odd ones new.
    #[default]
    EvenOdd,
    /// The first ⌈C/2⌉ classes are base.
    FirstHalf,
}

impl FromStr for SplitRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "even_odd" => Ok(SplitRule::EvenOdd),
            "first_half" => Ok(SplitRule::FirstHalf),
            other => Err(Error::config("split_rule", format!("unknown split rule `{other}`"))),
        }
    }
}

/// Base and new class indices. The base set has ⌈C/2⌉ classes.
pub fn base_new_split(num_classes: usize, rule: SplitRule) -> (Vec<usize>, Vec<usize>) {
    let is_base = |c: usize| match rule {
        SplitRule::EvenOdd => c.is_multiple_of(2),
        SplitRule::FirstHalf => c < num_classes.div_ceil(2),
    };
    (0..num_classes).partition(|&c| is_base(c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitPlan {
    FewShot {
        shots: usize,
    },
    /// Train on base classes only, evaluate base and new separately.
    BaseToNew {
        shots: usize,
        #[serde(default)]
        rule: SplitRule,
    },
    /// Train on clean images, evaluate on corrupted test images.
    DomainShift {
        shots: usize,
        corruption: Corruption,
    },
}

impl SplitPlan {
    pub fn name(&self) -> &'static str {
        match self {
            SplitPlan::FewShot { .. } => "few_shot",
            SplitPlan::BaseToNew { .. } => "base_to_new",
            SplitPlan::DomainShift { .. } => "domain_shift",
        }
    }

    pub fn shots(&self) -> usize {
        match self {
            SplitPlan::FewShot { shots } | SplitPlan::BaseToNew { shots, .. } | SplitPlan::DomainShift { shots, .. } => *shots,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !SHOT_CHOICES.contains(&self.shots()) {
            return Err(Error::config("shots", format!("must be one of {SHOT_CHOICES:?}, got {}", self.shots())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingBudget {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Share of `steps` spent training the prompt generator before its
    /// outputs are fine-tuned directly (two-stage methods only).
    pub stage1_fraction: f64,
}

impl Default for TrainingBudget {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 32,
            lr: 2e-3,
            stage1_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodConfig {
    pub method: Method,
    /// Context length M; unset means 16 for few-shot protocols and 4
    /// otherwise. Ignored by zeroshot, which uses the template.
    pub m: Option<usize>,
    pub ctx_init: ContextInit,
    /// Hard negatives during training and candidates at inference.
    pub k: usize,
    /// Prompt edge length as a fraction of the image edge.
    pub prompt_ratio: f64,
    pub placement: Placement,
    /// Makes `logoprompt` learn its visual prompts as pixels.
    pub tunable_vp: bool,
    pub budget: TrainingBudget,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            method: Method::Logoprompt,
            m: None,
            ctx_init: ContextInit::Random,
            k: DEFAULT_K,
            prompt_ratio: glyph::DEFAULT_PROMPT_RATIO,
            placement: Placement::Rand,
            tunable_vp: false,
            budget: TrainingBudget::default(),
        }
    }
}

impl MethodConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    /// Copy with M filled in for `plan`.
    pub fn resolved(&self, plan: &SplitPlan) -> Self {
        let m = self.m.unwrap_or(match (self.ctx_init, plan) {
            (ContextInit::Template, _) => template_context_len(),
            (_, SplitPlan::FewShot { .. }) => FEW_SHOT_CONTEXT_LEN,
            _ => DEFAULT_CONTEXT_LEN,
        });
        Self {
            m: Some(m),
            ..self.clone()
        }
    }

    fn context_len(&self) -> usize {
        self.m.unwrap_or(DEFAULT_CONTEXT_LEN)
    }

    /// `logoprompt` with `tunable_vp` is the same as `logoprompt_tunable_vp`.
    pub fn effective_method(&self) -> Method {
        match (self.method, self.tunable_vp) {
            (Method::Logoprompt, true) => Method::LogopromptTunableVp,
            (m, _) => m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tunable_vp && matches!(self.method, Method::Zeroshot | Method::CoopBaseline) {
            return Err(Error::config("tunable_vp", format!("{} has no visual prompts", self.method)));
        }
        if self.k == 0 {
            return Err(Error::config("k", "K must be at least 1"));
        }
        if !(self.prompt_ratio > 0.0 && self.prompt_ratio <= 1.0) {
            return Err(Error::config("prompt_ratio", format!("must be in (0, 1], got {}", self.prompt_ratio)));
        }
        if self.ctx_init == ContextInit::Template && self.m.is_some_and(|m| m != template_context_len()) {
            return Err(Error::config(
                "m",
                format!("template init needs M = {}, got {}", template_context_len(), self.context_len()),
            ));
        }
        if self.m == Some(0) && self.effective_method() == Method::LogopromptTunableVp {
            return Err(Error::config("m", "two-stage prompts need M > 0"));
        }
        let b = &self.budget;
        if b.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(b.lr.is_finite() && b.lr > 0.0) {
            return Err(Error::config("lr", format!("must be positive, got {}", b.lr)));
        }
        if !(0.0..=1.0).contains(&b.stage1_fraction) {
            return Err(Error::config("stage1_fraction", "must be in [0, 1]"));
        }
        Ok(())
    }

    /// Optimizer steps this method takes.
    pub fn steps(&self) -> usize {
        match self.method {
            Method::Zeroshot => 0,
            _ => self.budget.steps,
        }
    }

    /// A fresh learner over `class_names`.
    pub fn learner<'e>(&self, encoder: &'e DualEncoder, class_names: &[String], seed: u64) -> Result<Learner<'e>> {
        self.validate()?;
        let names = class_names.to_vec();
        let init_seed = derive(seed, &[tag("context-init")]);
        let m = match self.ctx_init {
            ContextInit::Template => template_context_len(),
            ContextInit::Random => self.context_len(),
        };
        let config = LearnerConfig {
            k: self.k,
            placement: self.placement,
            prompt_size: glyph::prompt_size(encoder.image_size(), self.prompt_ratio),
            adam: AdamConfig {
                lr: self.budget.lr,
                ..AdamConfig::default()
            },
            seed: derive(seed, &[tag("learner")]),
        };
        let direct = |m: usize, init: ContextInit| -> Result<TextLearner> {
            Ok(TextLearner::Direct(TextPromptParams::new(encoder, &names, PromptMode::Shared, m, init, init_seed)?))
        };
        let (text, visual, objective, inference) = match self.effective_method() {
            Method::Zeroshot => (
                direct(template_context_len(), ContextInit::Template)?,
                None,
                Objective::CrossEntropy,
                Inference::Argmax,
            ),
            Method::CoopBaseline => (direct(m, self.ctx_init)?, None, Objective::CrossEntropy, Inference::Argmax),
            Method::Logoprompt => (direct(m, self.ctx_init)?, None, Objective::MinMax, Inference::Selection),
            Method::LogopromptTunableVp => (
                TextLearner::TwoStage {
                    prompts: TwoStagePrompts::new(encoder, &names, m, init_seed)?,
                    stage2: None,
                },
                Some(TunableVisualPrompt::from_render(
                    &names,
                    config.prompt_size,
                    config.prompt_size,
                    derive(seed, &[tag("vp-init")]),
                )?),
                Objective::MinMax,
                Inference::Selection,
            ),
        };
        Learner::new(encoder, names, text, visual, objective, inference, config)
    }
}

/// Runs the method's training budget on `(image, label)` pairs. Returns the
/// per-step losses.
pub fn train(learner: &mut Learner<'_>, data: &[(&EncodedImage<'_>, usize)], config: &MethodConfig, seed: u64) -> Result<Vec<f64>> {
    let steps = config.steps();
    if steps > 0 && data.is_empty() {
        return Err(Error::Data("no training images".into()));
    }
    let bs = config.budget.batch_size.min(data.len().max(1));
    let per_epoch = (data.len() / bs).max(1);
    let stage1_steps = (config.budget.stage1_fraction * steps as f64).round() as usize;
    let two_stage = matches!(learner.text, TextLearner::TwoStage { .. });
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        if two_stage && step == stage1_steps {
            learner.start_stage2()?;
        }
        if step % per_epoch == 0 {
            order.sort_unstable();
            order.shuffle(&mut rng::rng(derive(seed, &[tag("batches"), (step / per_epoch) as u64])));
        }
        let off = (step % per_epoch) * bs;
        let batch: Vec<(&EncodedImage<'_>, usize)> = order[off..off + bs].iter().map(|&i| data[i]).collect();
        losses.push(learner.train_step(&batch)?);
    }
    if two_stage && steps > 0 && stage1_steps >= steps {
        learner.start_stage2()?;
    }
    Ok(losses)
}

/// Percent of `images` whose prediction matches `labels`.
pub fn evaluate(learner: &Learner<'_>, images: &[EncodedImage<'_>], labels: &[usize]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let pred = learner.predict_all(images)?;
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(percent(correct, images.len()))
}

/// Test images restricted to `classes`, relabelled to positions in `classes`.
fn subset<'a>(images: &'a [LabeledImage], classes: &[usize]) -> (Vec<&'a LabeledImage>, Vec<usize>) {
    images
        .iter()
        .filter_map(|li| classes.iter().position(|&c| c == li.label).map(|p| (li, p)))
        .unzip()
}

fn encode<'d>(encoder: &DualEncoder, images: &[&'d LabeledImage]) -> Result<Vec<EncodedImage<'d>>> {
    images.iter().map(|li| EncodedImage::new(encoder, &li.image)).collect()
}

/// Trains and evaluates `method` under `plan` once per seed. The seed drives
/// the few-shot draw, prompt initialization, batching and prompt colours;
/// the dataset is shared.
pub fn run_protocol(
    encoder: Option<&DualEncoder>,
    dataset: &SyntheticDataset,
    plan: &SplitPlan,
    method: &MethodConfig,
    seeds: &[u64],
) -> Result<MetricsReport> {
    let encoder = encoder.ok_or_else(|| {
        Error::State("no pretrained encoder checkpoint; run `logoprompt pretrain` first or pass --checkpoint".into())
    })?;
    plan.validate()?;
    let method = &method.resolved(plan);
    method.validate()?;
    if seeds.is_empty() {
        return Err(Error::config("seeds", "need at least one seed"));
    }
    if encoder.image_size() != dataset.test[0].image.height() {
        return Err(Error::config(
            "image_size",
            format!("encoder expects {} px images, dataset has {}", encoder.image_size(), dataset.test[0].image.height()),
        ));
    }
    let checksum = encoder.checksum();
    let c = dataset.num_classes();
    let all: Vec<usize> = (0..c).collect();
    let train_classes = match plan {
        SplitPlan::BaseToNew { rule, .. } => base_new_split(c, *rule).0,
        _ => all.clone(),
    };
    let train_names: Vec<String> = train_classes.iter().map(|&k| dataset.classes[k].clone()).collect();

    // evaluation sets are seed-independent, so they are encoded once
    let shifted;
    let (eval_a, eval_b) = match plan {
        SplitPlan::FewShot { .. } => (subset(&dataset.test, &all), None),
        SplitPlan::DomainShift { corruption, .. } => {
            shifted = corrupt(
                &SyntheticDataset {
                    train: Vec::new(),
                    ..dataset.clone()
                },
                *corruption,
            )?;
            (subset(&dataset.test, &all), Some((subset(&shifted.test, &all), all.clone())))
        }
        SplitPlan::BaseToNew { rule, .. } => {
            let (base, new) = base_new_split(c, *rule);
            (subset(&dataset.test, &base), Some((subset(&dataset.test, &new), new)))
        }
    };
    let enc_a = encode(encoder, &eval_a.0)?;
    let enc_b = match &eval_b {
        Some(((imgs, _), _)) => Some(encode(encoder, imgs)?),
        None => None,
    };

    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let idx = sample_few_shot(dataset, &train_classes, plan.shots(), derive(seed, &[tag("shots")]))?;
        let train_imgs: Vec<&LabeledImage> = idx.iter().map(|&i| &dataset.train[i]).collect();
        let train_enc = encode(encoder, &train_imgs)?;
        let data: Vec<(&EncodedImage<'_>, usize)> = train_enc
            .iter()
            .zip(&train_imgs)
            .map(|(e, li)| (e, train_classes.iter().position(|&k| k == li.label).expect("sampled from train classes")))
            .collect();
        let mut learner = method.learner(encoder, &train_names, seed)?;
        let losses = train(&mut learner, &data, method, derive(seed, &[tag("train")]))?;
        let acc_a = evaluate(&learner, &enc_a, &eval_a.1)?;
        let mut row = SeedResult::new(seed, learner.steps(), &checksum, learner.trainable_checksum());
        row.final_loss = losses.last().copied();
        match (plan, &eval_b, &enc_b) {
            (SplitPlan::FewShot { .. }, _, _) => row.accuracy = Some(acc_a),
            (SplitPlan::DomainShift { .. }, Some(((_, labels), _)), Some(enc)) => {
                row.accuracy_source = Some(acc_a);
                row.accuracy = Some(evaluate(&learner, enc, labels)?);
            }
            (SplitPlan::BaseToNew { .. }, Some(((_, labels), new)), Some(enc)) => {
                let new_names = new.iter().map(|&k| dataset.classes[k].clone()).collect();
                let transferred = learner.transfer(new_names)?;
                row.set_base_new(acc_a, evaluate(&transferred, enc, labels)?);
            }
            _ => unreachable!("evaluation sets match the plan"),
        }
        per_seed.push(row);
    }
    if encoder.checksum() != checksum {
        return Err(Error::State("encoder weights changed during prompt tuning".into()));
    }
    MetricsReport::new(plan, method, dataset, per_seed)
}
