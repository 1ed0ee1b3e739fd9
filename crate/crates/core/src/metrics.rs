//! Evaluation and diagnostics: unbiased pass@k, entropy bucketed by
//! advantage sign, zero-advantage sparsity, and the per-run CSV/JSON sinks.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::{AdvantageVector, MetricsRecord};

fn binomial_exact(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step
        acc = acc.checked_mul((n - i) as u128)? / (i + 1) as u128;
    }
    Some(acc)
}

/// Unbiased pass@k estimate `1 - C(n-c, k) / C(n, k)` from `n` samples of
/// which `c` are correct.
///
/// Uses exact integer binomials while they fit in 128 bits, so the result
/// is a single correctly rounded division; larger `n` falls back to the
/// product form `1 - prod_{i=n-c+1}^{n} (1 - k/i)`.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64> {
    if c > n || k == 0 || k > n {
        return Err(Error::InvalidCounts { n, c, k });
    }
    if n - c < k {
        return Ok(1.0);
    }
    if let (Some(total), Some(miss)) = (binomial_exact(n, k), binomial_exact(n - c, k)) {
        return Ok((total - miss) as f64 / total as f64);
    }
    let miss: f64 = ((n - c + 1)..=n)
        .map(|i| 1.0 - k as f64 / i as f64)
        .product();
    Ok(1.0 - miss)
}

/// Mean of one advantage-sign bucket.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Bucket {
    pub mean: f64,
    pub count: usize,
}

impl Bucket {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EntropyBySign {
    pub positive: Bucket,
    pub negative: Bucket,
    pub zero: Bucket,
}

/// Mean per-response sampled-token entropy, bucketed by the sign of each
/// response's advantage. Empty buckets report a mean of 0.
pub fn entropy_by_sign(advantages: &[f64], entropies: &[f64]) -> Result<EntropyBySign> {
    if advantages.len() != entropies.len() {
        return Err(Error::LengthMismatch {
            expected: advantages.len(),
            got: entropies.len(),
        });
    }
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for (&a, &h) in advantages.iter().zip(entropies) {
        let idx = if a > 0.0 {
            0
        } else if a < 0.0 {
            1
        } else {
            2
        };
        sums[idx] += h;
        counts[idx] += 1;
    }
    let bucket = |i: usize| Bucket {
        mean: if counts[i] == 0 {
            0.0
        } else {
            sums[i] / counts[i] as f64
        },
        count: counts[i],
    };
    Ok(EntropyBySign {
        positive: bucket(0),
        negative: bucket(1),
        zero: bucket(2),
    })
}

/// Fraction of entries with `|A| <= tol`.
pub fn zero_fraction(adv: &AdvantageVector, tol: f64) -> f64 {
    if adv.is_empty() {
        return 0.0;
    }
    adv.values.iter().filter(|a| a.abs() <= tol).count() as f64 / adv.len() as f64
}

/// `(positive, negative, zero)` fractions of an advantage vector.
///
/// The zero fraction is taken as the complement, so
/// `(positive + negative) + zero` is exactly 1 for any non-empty vector.
pub fn sign_fractions(adv: &AdvantageVector) -> (f64, f64, f64) {
    let n = adv.len();
    if n == 0 {
        return (0.0, 0.0, 0.0);
    }
    let n = n as f64;
    let pos = adv.num_positive() as f64 / n;
    let neg = adv.num_negative() as f64 / n;
    (pos, neg, 1.0 - (pos + neg))
}

/// Mean entropy over the last quarter of a run (at least one record).
pub fn final_quartile_mean_entropy(history: &[MetricsRecord]) -> Option<f64> {
    if history.is_empty() {
        return None;
    }
    let tail = history.len().div_ceil(4);
    let slice = &history[history.len() - tail..];
    Some(slice.iter().map(|m| m.entropy_total).sum::<f64>() / slice.len() as f64)
}

/// Streaming CSV sink for [`MetricsRecord`]s. The header is written with
/// the first row and every row is flushed immediately.
pub struct MetricsSink<W: Write> {
    writer: csv::Writer<W>,
    rows: usize,
}

impl<W: Write> MetricsSink<W> {
    pub fn new(inner: W) -> Self {
        Self {
            writer: csv::Writer::from_writer(inner),
            rows: 0,
        }
    }

    pub fn rows_written(&self) -> usize {
        self.rows
    }

    pub fn write_metrics(&mut self, record: &MetricsRecord) -> Result<()> {
        record.validate()?;
        self.writer
            .serialize(record)
            .map_err(|e| Error::Sink(e.to_string()))?;
        self.writer
            .flush()
            .map_err(|e| Error::Sink(e.to_string()))?;
        self.rows += 1;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.writer
            .into_inner()
            .map_err(|e| Error::Sink(e.to_string()))
    }
}

/// Reads a metrics CSV written by [`MetricsSink`].
pub fn read_metrics<R: std::io::Read>(reader: R) -> Result<Vec<MetricsRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Sink(e.to_string()))?
        .clone();
    if headers.iter().ne(MetricsRecord::COLUMNS.iter().copied()) {
        return Err(Error::Sink(format!("unexpected header {:?}", headers)));
    }
    rdr.deserialize()
        .map(|row| row.map_err(|e| Error::Sink(e.to_string())))
        .collect()
}

/// Run manifest written next to `metrics.csv`.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest<'a, C: Serialize> {
    pub version: &'static str,
    pub seed: u64,
    pub config: &'a C,
}

pub const ARTIFACT_VERSION: &str = concat!("qae-lab ", env!("CARGO_PKG_VERSION"));
