//! Test-time throughput and critical-path harness.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, TaggedSequence, PAD};
use crate::error::{Error, Result};
use crate::model::Model;

/// Speed multipliers over a Bi-LSTM-CRF reported for GPU sentence models,
/// kept for reference next to desk-scale measurements.
pub mod reference {
    pub const IDCNN: f64 = 14.10;
    pub const BILSTM: f64 = 9.92;
    pub const IDCNN_CRF: f64 = 1.28;
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub batch_sizes: Vec<usize>,
    pub repeats: usize,
    /// Name of the model the multipliers are measured against.
    pub baseline: String,
    /// Batches whose estimated activation memory exceeds this are skipped.
    pub memory_budget_bytes: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            batch_sizes: vec![1, 10, 100, 1000, 10000],
            repeats: 20,
            baseline: String::new(),
            memory_budget_bytes: 4 << 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    pub batch_size: usize,
    pub mean_s: f64,
    pub std_s: f64,
    pub tokens_per_s: f64,
    /// Sequential steps for the longest sequence in the data.
    pub critical_path: usize,
    pub multiplier: Option<f64>,
    pub multiplier_std: Option<f64>,
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub baseline: String,
    pub tokens: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let mut s = String::from(
            "model\tbatch_size\tmean_s\tstd_s\ttokens_per_s\tcritical_path\tmultiplier\tmultiplier_std\tnote\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.1}\t{}\t{}\t{}\t{}\n",
                r.model,
                r.batch_size,
                r.mean_s,
                r.std_s,
                r.tokens_per_s,
                r.critical_path,
                opt(r.multiplier),
                opt(r.multiplier_std),
                r.skipped.as_deref().unwrap_or(""),
            ));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// The fastest measured row of `model`.
    pub fn best(&self, model: &str) -> Option<&BenchRow> {
        self.rows
            .iter()
            .filter(|r| r.model == model && r.skipped.is_none())
            .max_by(|a, b| a.tokens_per_s.total_cmp(&b.tokens_per_s))
    }
}

/// Rough activation footprint of decoding `tokens` tokens at once.
pub fn estimated_bytes(model: &Model, tokens: usize) -> usize {
    let m = &model.config.model;
    let per_token = m.input_dim() + m.hidden * (m.layers + 2) * m.blocks + model.num_labels() * (m.blocks + 1);
    tokens.saturating_mul(per_token).saturating_mul(8)
}

/// Decodes every row of every batch. The timed region starts from integer ids.
fn decode_all(model: &Model, batches: &[crate::data::Batch]) -> Result<()> {
    for b in batches {
        for r in 0..b.rows() {
            std::hint::black_box(model.predict(b.row_word_ids(r), b.row_shapes(r))?);
        }
    }
    Ok(())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Times each model at each batch size: one untimed burn-in pass, then
/// `repeats` timed passes over its data. Each model gets the same corpus
/// encoded with its own vocabulary.
pub fn bench(models: &[(String, &Model, &[TaggedSequence])], cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.repeats == 0 {
        return Err(Error::Usage("repeats must be at least 1".into()));
    }
    let Some(&(_, _, first)) = models.first() else {
        return Err(Error::Usage("no models to benchmark".into()));
    };
    let tokens: usize = first.iter().map(|s| s.len()).sum();
    if tokens == 0 {
        return Err(Error::Usage("no benchmark data".into()));
    }
    let mut rows = Vec::new();
    for &(ref name, model, data) in models {
        if data.iter().map(|s| s.len()).sum::<usize>() != tokens {
            return Err(Error::Mismatch(format!("{name}: benchmark data differs in size")));
        }
        let longest = data.iter().map(|s| s.len()).max().unwrap_or(0);
        for &bs in &cfg.batch_sizes {
            if bs == 0 {
                return Err(Error::Usage("batch size must be at least 1".into()));
            }
            let batches = make_batches(data, bs, PAD);
            let widest = batches.iter().map(|b| b.rows() * b.width).max().unwrap_or(0);
            let mut row = BenchRow {
                model: name.clone(),
                batch_size: bs,
                mean_s: f64::NAN,
                std_s: f64::NAN,
                tokens_per_s: 0.0,
                critical_path: model.critical_path(longest),
                multiplier: None,
                multiplier_std: None,
                skipped: None,
            };
            let need = estimated_bytes(model, widest);
            if need > cfg.memory_budget_bytes {
                row.skipped = Some(format!(
                    "skipped: needs ~{need} bytes, budget {}",
                    cfg.memory_budget_bytes
                ));
                rows.push(row);
                continue;
            }
            decode_all(model, &batches)?;
            let mut times = Vec::with_capacity(cfg.repeats);
            for _ in 0..cfg.repeats {
                let start = Instant::now();
                decode_all(model, &batches)?;
                times.push(start.elapsed().as_secs_f64());
            }
            let (mean, std) = mean_std(&times);
            row.mean_s = mean;
            row.std_s = std;
            row.tokens_per_s = tokens as f64 / mean;
            log::info!("{name} batch {bs}: {mean:.4}s +- {std:.4}s");
            rows.push(row);
        }
    }

    let mut report = BenchReport {
        baseline: cfg.baseline.clone(),
        tokens,
        rows,
    };
    if let Some(base) = report.best(&cfg.baseline).cloned() {
        let base_rel = base.std_s / base.mean_s;
        for r in report.rows.iter_mut().filter(|r| r.skipped.is_none()) {
            let m = base.mean_s / r.mean_s;
            let rel = r.std_s / r.mean_s;
            r.multiplier = Some(m);
            r.multiplier_std = Some(m * (rel * rel + base_rel * base_rel).sqrt());
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
