//! N-best rescoring with a trained joint model.
//!
//! Entries are `id ||| tokens ||| alignment ||| features ||| score`, where the
//! alignment holds `i-j` pairs (hypothesis word `i`, source word `j`). The
//! four-field form without alignment is accepted for archs that do not need
//! one. Scoring appends `NAME= value` to the features field and leaves every
//! other byte of the line untouched.

use rayon::prelude::*;

use crate::artifact::ModelArtifact;
use crate::corpus::{
    compute_affiliation, guide_positions, history_at, map_tokens, pad_source, parse_alignment_line,
    AlignmentLinkSet, TrainingSample, EOS_ID,
};
use crate::encoder::Arch;
use crate::error::{Error, Result};

pub const DEFAULT_FEATURE: &str = "CNNJM";
const SEP: &str = "|||";

#[derive(Clone, Debug, PartialEq)]
pub struct NBestEntry {
    pub sentence_id: String,
    pub tokens: Vec<String>,
    /// Links as (source, hypothesis) pairs.
    pub alignment: Option<AlignmentLinkSet>,
    fields: Vec<String>,
    features_index: usize,
}

impl NBestEntry {
    pub fn parse(line: &str) -> Result<Self> {
        let fields: Vec<String> = line.split(SEP).map(str::to_owned).collect();
        let sentence_id = fields[0].trim().to_owned();
        let bad = |message: String| Error::NBest {
            sentence_id: sentence_id.clone(),
            message,
        };
        let (alignment, features_index) = match fields.len() {
            4 => (None, 2),
            5 => {
                let links = parse_alignment_line(&fields[2])
                    .map_err(|e| bad(e.to_string()))?
                    .transposed();
                (Some(links), 3)
            }
            n => return Err(bad(format!("expected 4 or 5 fields, found {n}"))),
        };
        if sentence_id.is_empty() {
            return Err(bad("empty sentence id".into()));
        }
        Ok(NBestEntry {
            tokens: fields[1].split_whitespace().map(str::to_owned).collect(),
            sentence_id,
            alignment,
            fields,
            features_index,
        })
    }

    /// The original line with `name= value` appended to the features field.
    pub fn with_feature(&self, name: &str, value: f64) -> String {
        let mut fields = self.fields.clone();
        let f = &mut fields[self.features_index];
        let body_end = f.trim_end().len();
        let trailing = f[body_end..].to_owned();
        f.truncate(body_end);
        f.push_str(&format!(" {name}= {value}"));
        f.push_str(if trailing.is_empty() { " " } else { &trailing });
        fields.join(SEP)
    }
}

/// Prediction events for one hypothesis. Hypothesis words without any
/// aligned neighbour get an empty affiliated set.
pub fn hypothesis_samples(
    artifact: &ModelArtifact,
    source_tokens: &[String],
    heads: Option<&[i32]>,
    hypothesis: &[String],
    alignment: Option<&AlignmentLinkSet>,
) -> Result<Vec<TrainingSample>> {
    let enc = &artifact.model.config.encoder;
    let arch = enc.arch;
    if arch == Arch::TagDep && heads.is_none() {
        return Err(Error::MissingGuide {
            arch: arch.name(),
            what: "dependency heads",
        });
    }
    if let Some(h) = heads {
        if h.len() != source_tokens.len() {
            return Err(Error::Heads(format!(
                "{} heads for {} source words",
                h.len(),
                source_tokens.len()
            )));
        }
    }
    let source_ids = pad_source(&map_tokens(source_tokens, &artifact.src_vocab), enc.maxlen)?;
    let offset = enc.maxlen - source_tokens.len();
    let target_ids = map_tokens(hypothesis, &artifact.tgt_vocab);
    let m = target_ids.len();
    let empty = AlignmentLinkSet::new();
    let alignment = alignment.unwrap_or(&empty);
    alignment.check_bounds(source_tokens.len(), m)?;

    let n_events = m + artifact.emit_eos as usize;
    let mut out = Vec::with_capacity(n_events);
    for n in 0..n_events {
        let affiliation = if m == 0 {
            Vec::new()
        } else {
            match compute_affiliation(n.min(m - 1), alignment, m) {
                Ok(a) => a,
                Err(Error::Unalignable) => Vec::new(),
                Err(e) => return Err(e),
            }
        };
        let (affiliated, head_positions) = guide_positions(&affiliation, heads, offset);
        out.push(TrainingSample {
            source_ids: source_ids.clone(),
            affiliated,
            head_positions,
            history: history_at(&target_ids, n, enc.history),
            target: if n < m { target_ids[n] } else { EOS_ID },
        });
    }
    Ok(out)
}

/// Sum of natural-log probabilities of the hypothesis words, plus EOS when
/// the model was trained with sentence ends.
pub fn score_hypothesis(
    artifact: &ModelArtifact,
    source_tokens: &[String],
    heads: Option<&[i32]>,
    hypothesis: &[String],
    alignment: Option<&AlignmentLinkSet>,
) -> Result<f64> {
    hypothesis_samples(artifact, source_tokens, heads, hypothesis, alignment)?
        .iter()
        .map(|s| artifact.model.sample_log_prob(s))
        .sum()
}

/// Scores every n-best line and returns the annotated lines in input order.
/// Sentence ids are 0-based indexes into `sources`.
pub fn score_nbest(
    artifact: &ModelArtifact,
    sources: &[Vec<String>],
    heads: Option<&[Vec<i32>]>,
    lines: &[String],
    feature: &str,
) -> Result<Vec<String>> {
    let needs_alignment = artifact.model.arch().needs_affiliation();
    lines
        .par_iter()
        .map(|line| {
            let entry = NBestEntry::parse(line)?;
            let id = &entry.sentence_id;
            let wrap = |e: Error| match e {
                e @ (Error::NBest { .. } | Error::MissingAlignment { .. }) => e,
                e => Error::NBest {
                    sentence_id: id.clone(),
                    message: e.to_string(),
                },
            };
            let index: usize = id.parse().map_err(|_| Error::NBest {
                sentence_id: id.clone(),
                message: "sentence id is not a non-negative integer".into(),
            })?;
            let source = sources.get(index).ok_or_else(|| Error::NBest {
                sentence_id: id.clone(),
                message: format!("only {} source sentences provided", sources.len()),
            })?;
            if needs_alignment && entry.alignment.is_none() {
                return Err(Error::MissingAlignment {
                    sentence_id: id.clone(),
                    arch: artifact.model.arch().name(),
                });
            }
            let h = heads.and_then(|h| h.get(index)).map(Vec::as_slice);
            let score = score_hypothesis(artifact, source, h, &entry.tokens, entry.alignment.as_ref())
                .map_err(wrap)?;
            Ok(entry.with_feature(feature, score))
        })
        .collect()
}
