//! Character-level corpus BLEU, CER, parameter counts and decode latency.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{component, Model};
use crate::raster::Image;

pub const MAX_ORDER: usize = 4;
pub const WARMUP_DECODES: usize = 3;

fn ngram_counts(chars: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut m = HashMap::new();
    if chars.len() >= n {
        for w in chars.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 over characters, in `[0, 100]`.
///
/// Without smoothing the score is 0 as soon as one order has no match. With
/// `smooth`, orders 2 to 4 use add-one counts. Orders for which no hypothesis
/// is long enough are skipped.
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R], smooth: bool) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch {
            hypotheses: hypotheses.len(),
            references: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let h: Vec<char> = h.as_ref().chars().collect();
        let r: Vec<char> = r.as_ref().chars().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            for (g, c) in &hc {
                matches[n - 1] += (*c).min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    // Orders longer than every hypothesis have no n-grams at all and are left
    // out of the mean, so a corpus of short sentences can still score 100.
    let orders = totals.iter().take_while(|&&t| t > 0).count();
    let mut log_p = 0.0;
    for n in 0..orders {
        let (m, t) = if smooth && n > 0 {
            (matches[n] + 1, totals[n] + 1)
        } else {
            (matches[n], totals[n])
        };
        if m == 0 {
            return Ok(0.0);
        }
        log_p += (m as f64 / t as f64).ln() / orders as f64;
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}

/// Unit-cost Levenshtein distance over characters.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `edit_distance(hypothesis, reference) / len(reference)`.
pub fn cer(hypothesis: &str, reference: &str) -> Result<f64> {
    let n = reference.chars().count();
    if n == 0 {
        return Err(Error::EmptyReference);
    }
    Ok(edit_distance(hypothesis, reference) as f64 / n as f64)
}

/// Total edits over total reference characters.
pub fn corpus_cer<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch {
            hypotheses: hypotheses.len(),
            references: references.len(),
        });
    }
    let total: usize = references.iter().map(|r| r.as_ref().chars().count()).sum();
    if total == 0 {
        return Err(Error::EmptyReference);
    }
    let edits: usize = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| edit_distance(h.as_ref(), r.as_ref()))
        .sum();
    Ok(edits as f64 / total as f64)
}

/// Parameter counts per component.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamTable {
    pub rows: Vec<(String, usize)>,
}

impl ParamTable {
    pub fn total(&self) -> usize {
        self.rows.iter().map(|r| r.1).sum()
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.rows.iter().find(|r| r.0 == name).map(|r| r.1)
    }

    /// Rows of `other` appended with a name prefix.
    pub fn merged(&self, prefix: &str, other: &ParamTable) -> ParamTable {
        let mut rows = self.rows.clone();
        rows.extend(other.rows.iter().map(|(n, c)| (format!("{prefix}{n}"), *c)));
        ParamTable { rows }
    }
}

/// All parameters of `model`, one row per present component.
pub fn count_parameters(model: &Model) -> ParamTable {
    count_components(model, &component::ALL)
}

pub fn count_components(model: &Model, components: &[&str]) -> ParamTable {
    ParamTable {
        rows: components
            .iter()
            .map(|c| (c.to_string(), model.component_params(c)))
            .filter(|r| r.1 > 0)
            .collect(),
    }
}

/// The image-to-target inference path: TPS, image encoder, shared encoder, target decoder.
pub const E2E_INFERENCE: [&str; 4] = [
    component::TPS,
    component::IMAGE,
    component::ENCODER,
    component::TARGET_DECODER,
];
pub const OCR_INFERENCE: [&str; 4] = [
    component::TPS,
    component::IMAGE,
    component::ENCODER,
    component::SOURCE_DECODER,
];
pub const MT_INFERENCE: [&str; 3] = [component::TEXT, component::ENCODER, component::TARGET_DECODER];

/// Anything that turns text images into target-language strings.
pub trait ImageTranslator {
    /// Translations plus the number of greedy decode steps taken.
    fn translate_batch(&self, images: &[&Image]) -> Result<(Vec<String>, usize)>;
}

impl ImageTranslator for Model {
    fn translate_batch(&self, images: &[&Image]) -> Result<(Vec<String>, usize)> {
        let ids = self.translate_image_ids(images, 1)?;
        let steps = ids.iter().map(|s| s.len() + 1).sum();
        let vocab = self.target_vocab()?;
        let text = ids.iter().map(|s| crate::corpus::decode(s, vocab)).collect::<Result<_>>()?;
        Ok((text, steps))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub sentences: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    /// Total greedy decode steps over the timed runs; deterministic.
    pub decode_steps: usize,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-sentence latency at batch size 1, `repeats` passes over `images`,
/// after [`WARMUP_DECODES`] untimed decodes.
pub fn benchmark_decode(translator: &dyn ImageTranslator, images: &[&Image], repeats: usize) -> Result<LatencyReport> {
    if repeats == 0 || images.is_empty() {
        return Err(Error::EmptyBenchmark);
    }
    for i in 0..WARMUP_DECODES {
        translator.translate_batch(&[images[i % images.len()]])?;
    }
    let mut times = Vec::with_capacity(repeats * images.len());
    let mut steps = 0;
    for _ in 0..repeats {
        for img in images {
            let t = Instant::now();
            let (_, s) = translator.translate_batch(&[*img])?;
            times.push(t.elapsed().as_secs_f64() * 1e3);
            steps += s;
        }
    }
    times.sort_by(f64::total_cmp);
    Ok(LatencyReport {
        sentences: times.len(),
        mean_ms: times.iter().sum::<f64>() / times.len() as f64,
        p50_ms: percentile(&times, 0.5),
        p95_ms: percentile(&times, 0.95),
        decode_steps: steps,
    })
}

/// Parameter counts of one system: every component, and the total over them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub components: BTreeMap<String, usize>,
    pub total: usize,
}

impl From<&ParamTable> for ParamSummary {
    fn from(t: &ParamTable) -> Self {
        Self {
            components: t.rows.iter().cloned().collect(),
            total: t.total(),
        }
    }
}

/// The JSON report written by `eval` and `bench`. Every key is always
/// present; values that were not measured are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub bleu: Option<f64>,
    pub cer: Option<f64>,
    /// Keyed by system: `e2e` and/or `cascade`.
    pub params: BTreeMap<String, ParamSummary>,
    /// Keyed by system. Cascade timings include re-encoding between the stages.
    pub latency: BTreeMap<String, LatencyReport>,
    /// `100 * (cascade - e2e) / cascade` over inference parameters, when both are known.
    pub param_reduction_pct: Option<f64>,
    /// Same over median latency.
    pub latency_reduction_pct: Option<f64>,
}

pub fn reduction_pct(e2e: f64, cascade: f64) -> f64 {
    100.0 * (cascade - e2e) / cascade
}

impl Report {
    pub fn empty() -> Self {
        Self {
            bleu: None,
            cer: None,
            params: BTreeMap::new(),
            latency: BTreeMap::new(),
            param_reduction_pct: None,
            latency_reduction_pct: None,
        }
    }

    /// Fills the two reduction fields from `e2e` and `cascade` entries.
    pub fn compare(&mut self) {
        if let (Some(e), Some(c)) = (self.params.get("e2e"), self.params.get("cascade")) {
            self.param_reduction_pct = Some(reduction_pct(e.total as f64, c.total as f64));
        }
        if let (Some(e), Some(c)) = (self.latency.get("e2e"), self.latency.get("cascade")) {
            self.latency_reduction_pct = Some(reduction_pct(e.p50_ms, c.p50_ms));
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Inference-path parameters of an end-to-end bundle.
pub fn e2e_params(model: &Model) -> ParamTable {
    count_components(model, &E2E_INFERENCE)
}

/// Inference-path parameters of a cascade: the OCR path plus the MT path,
/// rows prefixed `ocr.` and `mt.`.
pub fn cascade_params(ocr: &Model, mt: &Model) -> ParamTable {
    ParamTable::default()
        .merged("ocr.", &count_components(ocr, &OCR_INFERENCE))
        .merged("mt.", &count_components(mt, &MT_INFERENCE))
}

/// Translates `images` in batches of `batch`.
pub fn translate_all(translator: &dyn ImageTranslator, images: &[&Image], batch: usize) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        out.extend(translator.translate_batch(chunk)?.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu_edge_cases() {
        assert_eq!(corpus_bleu(&["abcdef"], &["abcdef"], false).unwrap(), 100.0);
        assert_eq!(corpus_bleu(&["abcd"], &["wxyz"], false).unwrap(), 0.0);
        assert!(matches!(
            corpus_bleu(&["a"], &["a", "b"], false),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn bleu_single_pair_by_hand() {
        // "abcd" vs "abce": p1 = 3/4, p2 = 2/3, p3 = 1/2, p4 = 0/1.
        assert_eq!(corpus_bleu(&["abcd"], &["abce"], false).unwrap(), 0.0);
        let smoothed = corpus_bleu(&["abcd"], &["abce"], true).unwrap();
        let expect = 100.0 * (0.75f64 * (3.0 / 4.0) * (2.0 / 3.0) * (1.0 / 2.0)).powf(0.25);
        assert!((smoothed - expect).abs() < 1e-9);
    }

    #[test]
    fn cer_examples() {
        assert_eq!(cer("abc", "abc").unwrap(), 0.0);
        assert!((cer("axc", "abc").unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(cer("", "abc").unwrap(), 1.0);
        assert!(matches!(cer("a", ""), Err(Error::EmptyReference)));
    }

    #[test]
    fn percentiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.5), 3.0);
        assert_eq!(percentile(&v, 1.0), 5.0);
    }
}
