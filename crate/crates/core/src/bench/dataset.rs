use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, derive, tag};
use crate::synth::{self, CLASS_NAMES};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub image_size: usize,
    /// Pool that few-shot training sets are drawn from.
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 16,
            image_size: 56,
            train_per_class: 32,
            test_per_class: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub classes: Vec<String>,
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub seed: u64,
}

impl SyntheticDataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split(&self, split: Split) -> &[LabeledImage] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

/// Natural-style scenes of the first `num_classes` catalog classes. Train
/// and test images come from disjoint seed streams.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<SyntheticDataset> {
    if spec.num_classes < 2 || spec.num_classes > CLASS_NAMES.len() {
        return Err(Error::config(
            "num_classes",
            format!("must be in 2..={}, got {}", CLASS_NAMES.len(), spec.num_classes),
        ));
    }
    if spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(Error::config("train_per_class", "train and test splits need at least one image per class"));
    }
    if spec.image_size < 8 {
        return Err(Error::config("image_size", format!("{} px is too small", spec.image_size)));
    }
    let render = |split: Split, per_class: usize| -> Vec<LabeledImage> {
        let stream = derive(seed, &[tag(match split {
            Split::Train => "train",
            Split::Test => "test",
        })]);
        (0..spec.num_classes)
            .flat_map(|label| {
                (0..per_class).map(move |i| LabeledImage {
                    image: synth::render_scene(label, spec.image_size, derive(stream, &[label as u64, i as u64])),
                    label,
                })
            })
            .collect()
    };
    Ok(SyntheticDataset {
        classes: CLASS_NAMES[..spec.num_classes].iter().map(|s| s.to_string()).collect(),
        train: render(Split::Train, spec.train_per_class),
        test: render(Split::Test, spec.test_per_class),
        seed,
    })
}

/// Indices of exactly `shots` distinct training images for each class in
/// `classes`, in class order.
pub fn sample_few_shot(dataset: &SyntheticDataset, classes: &[usize], shots: usize, seed: u64) -> Result<Vec<usize>> {
    if shots == 0 {
        return Err(Error::config("shots", "must be positive"));
    }
    let mut out = Vec::with_capacity(classes.len() * shots);
    for &c in classes {
        let mut pool: Vec<usize> = (0..dataset.train.len()).filter(|&i| dataset.train[i].label == c).collect();
        if pool.len() < shots {
            return Err(Error::config(
                "shots",
                format!("{shots} shots requested but class `{}` has {} training images", dataset.classes[c], pool.len()),
            ));
        }
        pool.shuffle(&mut rng::rng(derive(seed, &[tag("few-shot"), c as u64])));
        out.extend_from_slice(&pool[..shots]);
    }
    Ok(out)
}

/// Pixelwise distribution shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    /// Additive N(0, σ²) per channel.
    GaussianNoise(f64),
    /// Rotates hue by Δ (fraction of a full turn).
    HueShift(f64),
    /// Scales deviations from mid-grey by γ.
    Contrast(f64),
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Corruption::GaussianNoise(v) => write!(f, "gaussian_noise({v})"),
            Corruption::HueShift(v) => write!(f, "hue_shift({v})"),
            Corruption::Contrast(v) => write!(f, "contrast({v})"),
        }
    }
}

impl FromStr for Corruption {
    type Err = Error;

    /// Parses `name(value)`, e.g. `gaussian_noise(0.1)`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config("corruption", format!("unknown corruption `{s}`; expected gaussian_noise(σ), hue_shift(Δ) or contrast(γ)"));
        let (name, rest) = s.trim().split_once('(').ok_or_else(bad)?;
        let value: f64 = rest.strip_suffix(')').ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
        if !value.is_finite() {
            return Err(bad());
        }
        match name.trim() {
            "gaussian_noise" if value >= 0.0 => Ok(Corruption::GaussianNoise(value)),
            "hue_shift" => Ok(Corruption::HueShift(value)),
            "contrast" if value >= 0.0 => Ok(Corruption::Contrast(value)),
            _ => Err(bad()),
        }
    }
}

/// Applies `corruption` to every image (both splits), clamping to [0, 1].
/// Labels are unchanged.
pub fn corrupt(dataset: &SyntheticDataset, corruption: Corruption) -> Result<SyntheticDataset> {
    let stream = derive(dataset.seed, &[tag("corrupt")]);
    let apply = |images: &[LabeledImage], split: u64| -> Result<Vec<LabeledImage>> {
        images
            .iter()
            .enumerate()
            .map(|(i, li)| {
                let mut image = li.image.clone();
                corrupt_image(&mut image, corruption, derive(stream, &[split, i as u64]))?;
                Ok(LabeledImage { image, label: li.label })
            })
            .collect()
    };
    Ok(SyntheticDataset {
        classes: dataset.classes.clone(),
        train: apply(&dataset.train, 0)?,
        test: apply(&dataset.test, 1)?,
        seed: dataset.seed,
    })
}

fn corrupt_image(image: &mut Image, corruption: Corruption, seed: u64) -> Result<()> {
    match corruption {
        Corruption::GaussianNoise(sigma) => {
            if sigma == 0.0 {
                return Ok(());
            }
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::config("corruption", e.to_string()))?;
            let mut r = rng::rng(seed);
            for v in image.data_mut() {
                *v += normal.sample(&mut r);
            }
        }
        Corruption::HueShift(delta) => {
            for px in image.data_mut().chunks_exact_mut(3) {
                let (h, s, v) = synth::rgb_to_hsv([px[0], px[1], px[2]]);
                px.copy_from_slice(&synth::hsv_to_rgb(h + delta, s, v));
            }
        }
        Corruption::Contrast(gamma) => {
            for v in image.data_mut() {
                *v = 0.5 + gamma * (*v - 0.5);
            }
        }
    }
    image.clamp_unit();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            num_classes: 3,
            image_size: 24,
            train_per_class: 5,
            test_per_class: 2,
        }
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let a = generate_dataset(&small(), 3).unwrap();
        assert_eq!(a, generate_dataset(&small(), 3).unwrap());
        assert_ne!(a.train[0].image, generate_dataset(&small(), 4).unwrap().train[0].image);
        for c in 0..3 {
            assert_eq!(a.test.iter().filter(|x| x.label == c).count(), 2);
        }
        assert!(a.train.iter().chain(&a.test).all(|x| x.image.in_unit_range()));
    }

    #[test]
    fn impossible_specs_are_rejected() {
        for spec in [
            DatasetSpec { num_classes: 1, ..small() },
            DatasetSpec { num_classes: 17, ..small() },
            DatasetSpec { test_per_class: 0, ..small() },
        ] {
            assert!(matches!(generate_dataset(&spec, 0), Err(Error::Config { .. })));
        }
    }

    #[test]
    fn few_shot_draws_distinct_images() {
        let d = generate_dataset(&small(), 1).unwrap();
        let idx = sample_few_shot(&d, &[0, 2], 4, 9).unwrap();
        assert_eq!(idx.len(), 8);
        let mut u = idx.clone();
        u.sort();
        u.dedup();
        assert_eq!(u.len(), 8);
        assert!(idx[..4].iter().all(|&i| d.train[i].label == 0));
        assert!(sample_few_shot(&d, &[0], 6, 9).is_err());
    }

    #[test]
    fn corruption_parsing() {
        assert_eq!("gaussian_noise(0.1)".parse::<Corruption>().unwrap(), Corruption::GaussianNoise(0.1));
        assert_eq!("hue_shift(-0.2)".parse::<Corruption>().unwrap(), Corruption::HueShift(-0.2));
        for bad in ["blur(1)", "contrast", "contrast(x)", "gaussian_noise(-1)"] {
            assert!(matches!(bad.parse::<Corruption>(), Err(Error::Config { .. })), "{bad}");
        }
        let c = Corruption::Contrast(0.5);
        assert_eq!(c.to_string().parse::<Corruption>().unwrap(), c);
    }

    #[test]
    fn zero_noise_is_identity_and_outputs_are_clamped() {
        let d = generate_dataset(&small(), 2).unwrap();
        assert_eq!(corrupt(&d, Corruption::GaussianNoise(0.0)).unwrap(), d);
        for c in [Corruption::GaussianNoise(0.5), Corruption::Contrast(3.0), Corruption::HueShift(0.3)] {
            let out = corrupt(&d, c).unwrap();
            assert!(out.test.iter().all(|x| x.image.in_unit_range()));
            assert_eq!(
                out.test.iter().map(|x| x.label).collect::<Vec<_>>(),
                d.test.iter().map(|x| x.label).collect::<Vec<_>>()
            );
        }
    }
}
