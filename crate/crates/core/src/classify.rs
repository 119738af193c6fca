//! Long-input segmentation and the end-to-end classify entry point the
//! service and CLI share.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffmath::Real;
use crate::encoder::{byte_id, tokenize, TokenSequence, CLS_ID};
use crate::error::{Error, Result};
use crate::labels::{Label, PerLabel};
use crate::model::{predict, GuardModel};

/// How per-segment probabilities combine into one score per label. A single
/// flagged segment must be able to flag the whole prompt, so the only
/// supported rule is the per-label maximum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentPolicy {
    pub max_tokens: usize,
    pub overlap_tokens: usize,
    #[serde(default)]
    pub aggregation: Aggregation,
}

impl SegmentPolicy {
    pub fn new(max_tokens: usize, overlap_tokens: usize) -> Self {
        SegmentPolicy { max_tokens, overlap_tokens, aggregation: Aggregation::Max }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(Error::config("segment max_tokens must be at least 1"));
        }
        if self.overlap_tokens >= self.max_tokens {
            return Err(Error::config(format!(
                "segment overlap {} must be smaller than max_tokens {}",
                self.overlap_tokens, self.max_tokens
            )));
        }
        Ok(())
    }
}

/// Windows of at most `max_tokens` content tokens, consecutive windows
/// sharing `overlap_tokens`, each prefixed with its own CLS. Every content
/// token lands in at least one window; empty text yields one CLS-only
/// window.
pub fn segment(text: &str, policy: &SegmentPolicy) -> Result<Vec<TokenSequence>> {
    policy.validate()?;
    let content: Vec<usize> = text.as_bytes().iter().map(|&b| byte_id(b)).collect();
    let chunk = |span: &[usize]| {
        let mut ids = Vec::with_capacity(span.len() + 1);
        ids.push(CLS_ID);
        ids.extend_from_slice(span);
        TokenSequence::unpadded(ids)
    };
    if content.len() <= policy.max_tokens {
        return Ok(vec![chunk(&content)?]);
    }
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + policy.max_tokens).min(content.len());
        out.push(chunk(&content[start..end])?);
        if end == content.len() {
            return Ok(out);
        }
        start = end - policy.overlap_tokens;
    }
}

#[derive(Clone, Debug, Deserialize)]
pub struct ClassifyRequest {
    pub text: String,
    /// Replaces both labels' decision thresholds for this request only.
    #[serde(default)]
    pub threshold_override: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub jailbreak: f64,
    pub prompt_injection: f64,
    pub malicious: bool,
    pub segments_used: usize,
    pub latency_ms: f64,
}

pub fn classify<E: Real>(
    model: &GuardModel<E>,
    text: &str,
    policy: Option<&SegmentPolicy>,
) -> Result<ClassifyResponse> {
    classify_with(model, text, policy, None)
}

/// End-to-end classification: tokenize (segmenting when a policy is given),
/// run every segment, take the per-label max, then threshold the aggregate.
pub fn classify_with<E: Real>(
    model: &GuardModel<E>,
    text: &str,
    policy: Option<&SegmentPolicy>,
    thresholds: Option<&PerLabel<f64>>,
) -> Result<ClassifyResponse> {
    let start = Instant::now();
    let seqs = match policy {
        Some(p) => {
            p.validate()?;
            let max_len = model.max_len();
            if max_len != usize::MAX && p.max_tokens + 1 > max_len {
                return Err(Error::config(format!(
                    "segment max_tokens {} plus CLS exceeds the model's {} token window",
                    p.max_tokens, max_len
                )));
            }
            segment(text, p)?
        }
        None => vec![tokenize(text, model.max_len())],
    };
    let mut probs = predict(model, &seqs[0])?.probs;
    for seq in &seqs[1..] {
        let p = predict(model, seq)?.probs;
        probs = PerLabel::from_fn(|l| probs.get(l).max(*p.get(l)));
    }
    let th = thresholds.unwrap_or(&model.thresholds);
    let malicious = Label::ALL.iter().any(|&l| *probs.get(l) >= *th.get(l));
    Ok(ClassifyResponse {
        jailbreak: probs.jailbreak,
        prompt_injection: probs.prompt_injection,
        malicious,
        segments_used: seqs.len(),
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}
