use super::dataset::SyntheticDataset;
use super::metrics::percent;
use crate::dualenc::{argmax, DualEncoder};
use crate::error::{Error, Result};

/// Test accuracy (percent) of a softmax-regression probe trained by full-batch
/// gradient descent on frozen image embeddings of the train split.
pub fn linear_probe_accuracy(encoder: &DualEncoder, dataset: &SyntheticDataset, epochs: usize, lr: f64) -> Result<f64> {
    let c = dataset.num_classes();
    let d = encoder.d_embed();
    let embed = |set: &[super::LabeledImage]| -> Result<Vec<(Vec<f64>, usize)>> {
        set.iter().map(|li| Ok((encoder.encode_image(&li.image)?, li.label))).collect()
    };
    let train = embed(&dataset.train)?;
    let test = embed(&dataset.test)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data("linear probe needs both splits".into()));
    }
    // weights: c × (d + 1), last column is the bias
    let mut w = vec![0.0; c * (d + 1)];
    let logits = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..c)
            .map(|k| {
                let row = &w[k * (d + 1)..(k + 1) * (d + 1)];
                row[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + row[d]
            })
            .collect()
    };
    for _ in 0..epochs {
        let mut grad = vec![0.0; w.len()];
        for (x, y) in &train {
            let z = logits(&w, x);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for k in 0..c {
                let g = e[k] / s - f64::from(k == *y);
                let row = &mut grad[k * (d + 1)..(k + 1) * (d + 1)];
                for (r, xi) in row[..d].iter_mut().zip(x) {
                    *r += g * xi;
                }
                row[d] += g;
            }
        }
        let scale = lr / train.len() as f64;
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= scale * gi;
        }
    }
    let correct = test.iter().filter(|(x, y)| argmax(&logits(&w, x)) == *y).count();
    Ok(percent(correct, test.len()))
}
