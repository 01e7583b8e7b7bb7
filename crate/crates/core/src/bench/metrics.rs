use super::dataset::SyntheticDataset;
use super::protocol::{MethodConfig, SplitPlan};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Bumped whenever CSV columns or JSON fields change.
pub const SCHEMA_VERSION: u32 = 1;

/// H = 2ab / (a + b), or 0 when a + b = 0.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// `correct / total` in percent, two decimals.
pub fn percent(correct: usize, total: usize) -> f64 {
    round2(100.0 * correct as f64 / total as f64)
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Stat {
            mean: round2(mean),
            std: round2(std),
        })
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

/// One seed's outcome. Accuracies are percentages with two decimals; which
/// ones are set depends on the protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Few-shot test accuracy, or target-domain accuracy under a shift.
    pub accuracy: Option<f64>,
    /// Clean-domain accuracy under a shift.
    pub accuracy_source: Option<f64>,
    pub accuracy_base: Option<f64>,
    pub accuracy_new: Option<f64>,
    pub harmonic_mean: Option<f64>,
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub encoder_checksum: String,
    pub trainable_checksum: String,
}

impl SeedResult {
    pub fn new(seed: u64, steps: u64, encoder_checksum: &str, trainable_checksum: String) -> Self {
        Self {
            seed,
            accuracy: None,
            accuracy_source: None,
            accuracy_base: None,
            accuracy_new: None,
            harmonic_mean: None,
            steps,
            final_loss: None,
            encoder_checksum: encoder_checksum.to_string(),
            trainable_checksum,
        }
    }

    /// Sets base/new accuracy and H, computed from the rounded values.
    pub fn set_base_new(&mut self, base: f64, new: f64) {
        let (base, new) = (round2(base), round2(new));
        self.accuracy_base = Some(base);
        self.accuracy_new = Some(new);
        self.harmonic_mean = Some(round2(harmonic_mean(base, new)));
    }
}

/// Flat CSV record; one per seed × protocol × method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub schema_version: u32,
    pub protocol: String,
    pub method: String,
    pub shots: usize,
    pub condition: String,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub accuracy_source: Option<f64>,
    pub accuracy_base: Option<f64>,
    pub accuracy_new: Option<f64>,
    pub harmonic_mean: Option<f64>,
    pub steps: u64,
    pub final_loss: Option<String>,
    pub encoder_checksum: String,
    pub trainable_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub plan: SplitPlan,
    pub method: MethodConfig,
    pub num_classes: usize,
    pub dataset_seed: u64,
    pub train_images: usize,
    pub test_images: usize,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub protocol: String,
    pub method: String,
    pub accuracy: Option<Stat>,
    pub accuracy_source: Option<Stat>,
    pub accuracy_base: Option<Stat>,
    pub accuracy_new: Option<Stat>,
    /// H of the mean base and mean new accuracies.
    pub harmonic_mean: Option<f64>,
    pub per_seed: Vec<SeedResult>,
    pub config: ConfigEcho,
}

fn column(rows: &[SeedResult], f: impl Fn(&SeedResult) -> Option<f64>) -> Option<Stat> {
    let v: Option<Vec<f64>> = rows.iter().map(f).collect();
    v.and_then(|v| Stat::of(&v))
}

impl MetricsReport {
    pub fn new(plan: &SplitPlan, method: &MethodConfig, dataset: &SyntheticDataset, per_seed: Vec<SeedResult>) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(Error::Data("no seed results".into()));
        }
        let accuracy_base = column(&per_seed, |r| r.accuracy_base);
        let accuracy_new = column(&per_seed, |r| r.accuracy_new);
        let harmonic = match (accuracy_base, accuracy_new) {
            (Some(b), Some(n)) => Some(round2(harmonic_mean(b.mean, n.mean))),
            _ => None,
        };
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            protocol: plan.name().into(),
            method: method.effective_method().name().into(),
            accuracy: column(&per_seed, |r| r.accuracy),
            accuracy_source: column(&per_seed, |r| r.accuracy_source),
            accuracy_base,
            accuracy_new,
            harmonic_mean: harmonic,
            config: ConfigEcho {
                plan: plan.clone(),
                method: method.clone(),
                num_classes: dataset.num_classes(),
                dataset_seed: dataset.seed,
                train_images: dataset.train.len(),
                test_images: dataset.test.len(),
                seeds: per_seed.iter().map(|r| r.seed).collect(),
            },
            per_seed,
        })
    }

    pub fn csv_rows(&self) -> Vec<CsvRow> {
        let condition = match &self.config.plan {
            SplitPlan::DomainShift { corruption, .. } => corruption.to_string(),
            SplitPlan::BaseToNew { rule, .. } => serde_json::to_value(rule)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            SplitPlan::FewShot { .. } => String::new(),
        };
        self.per_seed
            .iter()
            .map(|r| CsvRow {
                schema_version: self.schema_version,
                protocol: self.protocol.clone(),
                method: self.method.clone(),
                shots: self.config.plan.shots(),
                condition: condition.clone(),
                seed: r.seed,
                accuracy: r.accuracy,
                accuracy_source: r.accuracy_source,
                accuracy_base: r.accuracy_base,
                accuracy_new: r.accuracy_new,
                harmonic_mean: r.harmonic_mean,
                steps: r.steps,
                final_loss: r.final_loss.map(|l| format!("{l:.6}")),
                encoder_checksum: r.encoder_checksum.clone(),
                trainable_checksum: r.trainable_checksum.clone(),
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        write_csv(&self.csv_rows())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Writes `<stem>.csv` and `<stem>.json` under `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        std::fs::write(&json_path, self.to_json()? + "\n").map_err(|e| Error::io(&json_path, e))?;
        Ok((csv_path, json_path))
    }
}

pub fn write_csv(rows: &[CsvRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<CsvRow>, _>>()
        .map_err(|e| Error::Format(format!("bad results CSV: {e}")))?;
    if let Some(row) = rows.iter().find(|r| r.schema_version != SCHEMA_VERSION) {
        return Err(Error::Format(format!(
            "results CSV has schema version {}, expected {SCHEMA_VERSION}",
            row.schema_version
        )));
    }
    Ok(rows)
}

/// Mean ± std per (protocol, condition, shots, method) over all rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub protocol: String,
    pub condition: String,
    pub shots: usize,
    pub method: String,
    pub seeds: usize,
    pub accuracy: Option<Stat>,
    pub accuracy_base: Option<Stat>,
    pub accuracy_new: Option<Stat>,
    pub harmonic_mean: Option<f64>,
}

pub fn aggregate(rows: &[CsvRow]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(String, String, usize, String), Vec<&CsvRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.protocol.clone(), r.condition.clone(), r.shots, r.method.clone()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((protocol, condition, shots, method), rs)| {
            let stat = |f: fn(&CsvRow) -> Option<f64>| -> Option<Stat> {
                rs.iter().map(|r| f(r)).collect::<Option<Vec<f64>>>().and_then(|v| Stat::of(&v))
            };
            let accuracy_base = stat(|r| r.accuracy_base);
            let accuracy_new = stat(|r| r.accuracy_new);
            Aggregate {
                protocol,
                condition,
                shots,
                method,
                seeds: rs.len(),
                accuracy: stat(|r| r.accuracy),
                harmonic_mean: accuracy_base
                    .zip(accuracy_new)
                    .map(|(b, n)| round2(harmonic_mean(b.mean, n.mean))),
                accuracy_base,
                accuracy_new,
            }
        })
        .collect()
}

/// Human-readable table of aggregates.
pub fn format_aggregates(aggs: &[Aggregate]) -> String {
    let fmt = |s: Option<Stat>| s.map_or("-".to_string(), |s| s.to_string());
    let mut out = format!(
        "{:<13} {:<22} {:>5} {:<22} {:>5} {:>15} {:>15} {:>15} {:>7}\n",
        "protocol", "condition", "shots", "method", "seeds", "accuracy", "base", "new", "H"
    );
    for a in aggs {
        out += &format!(
            "{:<13} {:<22} {:>5} {:<22} {:>5} {:>15} {:>15} {:>15} {:>7}\n",
            a.protocol,
            if a.condition.is_empty() { "-" } else { &a.condition },
            a.shots,
            a.method,
            a.seeds,
            fmt(a.accuracy),
            fmt(a.accuracy_base),
            fmt(a.accuracy_new),
            a.harmonic_mean.map_or("-".to_string(), |h| format!("{h:.2}")),
        );
    }
    out
}
