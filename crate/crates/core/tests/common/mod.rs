#![allow(dead_code)]

use logoprompt_core::dualenc::{pretrain_surrogate, DualEncoder, PretrainConfig, PretrainCorpus};
use logoprompt_core::rng::{derive, tag};
use logoprompt_core::synth::CLASS_NAMES;
use sha2::{Digest, Sha256};
use std::path::PathBuf;
use std::sync::OnceLock;

pub fn class_names() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

/// Untrained encoder; fine wherever quality does not matter.
pub fn random_encoder(seed: u64) -> DualEncoder {
    let mut enc = DualEncoder::init(Default::default(), Default::default(), seed).unwrap();
    enc.freeze();
    enc
}

fn cache_path(config: &PretrainConfig) -> PathBuf {
    let key = Sha256::digest(serde_json::to_vec(config).unwrap());
    let hex: String = key[..8].iter().map(|b| format!("{b:02x}")).collect();
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("encoder-{hex}.json"))
}

/// Encoder pretrained with `config`, cached on disk by config hash.
pub fn pretrained_with(config: &PretrainConfig) -> DualEncoder {
    let path = cache_path(config);
    if let Ok(enc) = DualEncoder::load(&path) {
        return enc;
    }
    let corpus = PretrainCorpus::synthetic(
        &class_names(),
        config.image.image_size,
        config.per_class,
        derive(config.seed, &[tag("corpus")]),
    )
    .unwrap();
    let (enc, report) = pretrain_surrogate(&corpus, config).unwrap();
    eprintln!(
        "pretrained encoder: natural {:.3} text {:.3} checksum {}",
        report.natural_accuracy, report.text_accuracy, report.checksum
    );
    enc.save(&path).unwrap();
    enc
}

/// The default-config encoder, shared across a test binary.
pub fn pretrained() -> &'static DualEncoder {
    static ENC: OnceLock<DualEncoder> = OnceLock::new();
    ENC.get_or_init(|| pretrained_with(&PretrainConfig::default()))
}
