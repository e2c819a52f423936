//! Parallel-corpus ingestion: vocabularies, alignments, dependency heads,
//! target-word affiliation and per-target-word training samples.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK_ID: u32 = 0;
pub const PAD_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const RESERVED: [&str; 4] = ["<unk>", "<pad>", "<s>", "</s>"];

/// Bidirectional token/id map. The four reserved tokens always occupy ids 0..4.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    limit: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    limit: usize,
    tokens: Vec<String>,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(r: VocabularyRepr) -> Self {
        Vocabulary::from_tokens(r.tokens, r.limit)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            limit: v.limit,
            tokens: v.tokens,
        }
    }
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, limit: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            tokens,
            index,
            limit,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn unk_id(&self) -> u32 {
        UNK_ID
    }
    pub fn pad_id(&self) -> u32 {
        PAD_ID
    }
    pub fn bos_id(&self) -> u32 {
        BOS_ID
    }
    pub fn eos_id(&self) -> u32 {
        EOS_ID
    }
}

/// Keeps the `limit` most frequent tokens; ties at the cutoff go to the
/// token seen first in the stream.
pub fn build_vocabulary<I, S, T>(sentences: I, limit: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: IntoIterator<Item = T>,
    T: AsRef<str>,
{
    if limit == 0 {
        return Err(Error::Config("vocabulary limit must be at least 1".into()));
    }
    // token -> (count, first occurrence)
    let mut counts: HashMap<String, (u64, usize)> = HashMap::new();
    let mut seen_sentence = false;
    let mut order = 0usize;
    for sentence in sentences {
        seen_sentence = true;
        for tok in sentence {
            let tok = tok.as_ref();
            if RESERVED.contains(&tok) {
                continue;
            }
            match counts.get_mut(tok) {
                Some(e) => e.0 += 1,
                None => {
                    counts.insert(tok.to_owned(), (1, order));
                    order += 1;
                }
            }
        }
    }
    if !seen_sentence {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(String, u64, usize)> =
        counts.into_iter().map(|(t, (c, o))| (t, c, o)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    ranked.truncate(limit);

    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _, _)| t))
        .collect();
    Ok(Vocabulary::from_tokens(tokens, limit))
}

pub fn map_tokens<T: AsRef<str>>(tokens: &[T], vocab: &Vocabulary) -> Vec<u32> {
    tokens
        .iter()
        .map(|t| vocab.id(t.as_ref()).unwrap_or(UNK_ID))
        .collect()
}

/// Left-pads with `PAD_ID` to exactly `maxlen` entries.
pub fn pad_source(ids: &[u32], maxlen: usize) -> Result<Vec<u32>> {
    if ids.len() > maxlen {
        return Err(Error::ExceedsMaxlen {
            len: ids.len(),
            maxlen,
        });
    }
    let mut out = vec![PAD_ID; maxlen - ids.len()];
    out.extend_from_slice(ids);
    Ok(out)
}

/// Set of 0-based `(source, target)` links.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AlignmentLinkSet {
    links: BTreeSet<(usize, usize)>,
}

impl AlignmentLinkSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, source: usize, target: usize) {
        self.links.insert((source, target));
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.links.iter().copied()
    }

    /// Swaps the roles of the two sides.
    pub fn transposed(&self) -> Self {
        self.links.iter().map(|&(s, t)| (t, s)).collect()
    }

    pub fn check_bounds(&self, source_len: usize, target_len: usize) -> Result<()> {
        for (s, t) in self.iter() {
            if s >= source_len || t >= target_len {
                return Err(Error::Config(format!(
                    "alignment link {s}-{t} out of bounds for {source_len}x{target_len} pair"
                )));
            }
        }
        Ok(())
    }

    /// Source indices aligned to each target position.
    pub(crate) fn by_target(&self, target_len: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); target_len];
        for (s, t) in self.iter() {
            if t < target_len {
                out[t].push(s);
            }
        }
        out
    }
}

impl FromIterator<(usize, usize)> for AlignmentLinkSet {
    fn from_iter<I: IntoIterator<Item = (usize, usize)>>(iter: I) -> Self {
        AlignmentLinkSet {
            links: iter.into_iter().collect(),
        }
    }
}

/// Parses whitespace-separated `i-j` pairs.
pub fn parse_alignment_line(line: &str) -> Result<AlignmentLinkSet> {
    let mut set = AlignmentLinkSet::new();
    let mut column = 0;
    for piece in line.split(|c: char| c.is_whitespace()) {
        if !piece.is_empty() {
            let (s, t) = piece
                .split_once('-')
                .ok_or_else(|| Error::AlignmentParse {
                    column,
                    message: format!("missing '-' in {piece:?}"),
                })?;
            let parse = |v: &str| {
                v.parse::<usize>().map_err(|_| Error::AlignmentParse {
                    column,
                    message: format!("non-integer index in {piece:?}"),
                })
            };
            set.insert(parse(s)?, parse(t)?);
        }
        column += piece.len() + 1;
    }
    Ok(set)
}

/// Affiliated source words of target position `t`: its own links if it has
/// any, otherwise those of the closest aligned target word, preferring the
/// right neighbour on ties. Result is sorted.
pub fn compute_affiliation(
    t: usize,
    alignment: &AlignmentLinkSet,
    target_len: usize,
) -> Result<Vec<usize>> {
    if t >= target_len {
        return Err(Error::Config(format!(
            "target index {t} out of range for length {target_len}"
        )));
    }
    let by_target = alignment.by_target(target_len);
    affiliation_from_table(t, &by_target)
}

fn affiliation_from_table(t: usize, by_target: &[Vec<usize>]) -> Result<Vec<usize>> {
    let n = by_target.len();
    for d in 0..n {
        if t + d < n && !by_target[t + d].is_empty() {
            return Ok(by_target[t + d].clone());
        }
        if d <= t && !by_target[t - d].is_empty() {
            return Ok(by_target[t - d].clone());
        }
    }
    Err(Error::Unalignable)
}

/// Parses one line of dependency heads (`-1` = root) and validates the tree.
pub fn parse_heads_line(line: &str, source_len: usize) -> Result<Vec<i32>> {
    let heads = line
        .split_whitespace()
        .map(|v| {
            // accept the unicode minus some tools emit
            let v = v.replace('\u{2212}', "-");
            v.parse::<i32>()
                .map_err(|_| Error::Heads(format!("non-integer head {v:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    validate_heads(&heads, source_len)?;
    Ok(heads)
}

pub fn validate_heads(heads: &[i32], source_len: usize) -> Result<()> {
    if heads.len() != source_len {
        return Err(Error::Heads(format!(
            "expected {source_len} heads, found {}",
            heads.len()
        )));
    }
    let roots = heads.iter().filter(|&&h| h == -1).count();
    if roots != 1 {
        return Err(Error::Heads(format!("expected exactly one root, found {roots}")));
    }
    for (i, &h) in heads.iter().enumerate() {
        if h != -1 && (h < 0 || h as usize >= source_len) {
            return Err(Error::Heads(format!("head {h} of token {i} out of range")));
        }
    }
    // every chain must reach the root within source_len steps
    for start in 0..source_len {
        let mut cur = start as i32;
        let mut steps = 0;
        while cur != -1 {
            cur = heads[cur as usize];
            steps += 1;
            if steps > source_len {
                return Err(Error::Heads(format!("cycle through token {start}")));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignedSentencePair {
    pub source_tokens: Vec<String>,
    pub target_tokens: Vec<String>,
    pub alignment: AlignmentLinkSet,
    pub heads: Option<Vec<i32>>,
}

impl AlignedSentencePair {
    pub fn validate(&self) -> Result<()> {
        self.alignment
            .check_bounds(self.source_tokens.len(), self.target_tokens.len())?;
        if let Some(h) = &self.heads {
            validate_heads(h, self.source_tokens.len())?;
        }
        Ok(())
    }
}

/// One prediction event: padded source, guide positions, history and gold word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingSample {
    pub source_ids: Vec<u32>,
    /// Sorted positions in the padded source.
    pub affiliated: Vec<usize>,
    /// Sorted padded positions of the dependency heads of affiliated words.
    pub head_positions: Vec<usize>,
    pub history: Vec<u32>,
    pub target: u32,
}

/// Shifts source indices by the padding offset and collects the heads of
/// the affiliated words.
pub fn guide_positions(
    affiliation: &[usize],
    heads: Option<&[i32]>,
    offset: usize,
) -> (Vec<usize>, Vec<usize>) {
    let affiliated = affiliation.iter().map(|&s| s + offset).collect();
    let head_positions = match heads {
        Some(h) => affiliation
            .iter()
            .filter_map(|&s| (h[s] >= 0).then(|| h[s] as usize + offset))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
        None => Vec::new(),
    };
    (affiliated, head_positions)
}

/// History of the `k` ids preceding position `n`, left-filled with BOS.
pub fn history_at(target_ids: &[u32], n: usize, k: usize) -> Vec<u32> {
    (0..k)
        .map(|j| {
            let back = k - j;
            if n >= back {
                target_ids[n - back]
            } else {
                BOS_ID
            }
        })
        .collect()
}

pub fn extract_samples(
    pair: &AlignedSentencePair,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    k: usize,
    maxlen: usize,
    emit_eos: bool,
) -> Result<Vec<TrainingSample>> {
    let source_ids = pad_source(&map_tokens(&pair.source_tokens, src_vocab), maxlen)?;
    let offset = maxlen - pair.source_tokens.len();
    let target_ids = map_tokens(&pair.target_tokens, tgt_vocab);
    let m = target_ids.len();
    let by_target = pair.alignment.by_target(m);
    let heads = pair.heads.as_deref();

    let mut out = Vec::with_capacity(m + emit_eos as usize);
    for n in 0..m + emit_eos as usize {
        // the EOS event inherits the final target word's affiliation
        let aff_index = n.min(m.saturating_sub(1));
        if m == 0 {
            return Err(Error::Unalignable);
        }
        let affiliation = affiliation_from_table(aff_index, &by_target)?;
        let (affiliated, head_positions) = guide_positions(&affiliation, heads, offset);
        out.push(TrainingSample {
            source_ids: source_ids.clone(),
            affiliated,
            head_positions,
            history: history_at(&target_ids, n, k),
            target: if n < m { target_ids[n] } else { EOS_ID },
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractStats {
    pub pairs: usize,
    pub skipped_unalignable: usize,
    pub skipped_too_long: usize,
}

/// Extracts samples from a whole corpus, skipping (and counting) over-long
/// and unalignable pairs.
pub fn extract_corpus(
    pairs: &[AlignedSentencePair],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    k: usize,
    maxlen: usize,
    emit_eos: bool,
) -> (Vec<TrainingSample>, ExtractStats) {
    let mut stats = ExtractStats {
        pairs: pairs.len(),
        ..Default::default()
    };
    let mut samples = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        match extract_samples(pair, src_vocab, tgt_vocab, k, maxlen, emit_eos) {
            Ok(s) => samples.extend(s),
            Err(Error::ExceedsMaxlen { .. }) => stats.skipped_too_long += 1,
            Err(_) => {
                log::warn!("skipping unalignable sentence pair {}", i + 1);
                stats.skipped_unalignable += 1;
            }
        }
    }
    (samples, stats)
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_owned).collect()
}

pub(crate) fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// Reads source, target, alignment and optional heads files into sentence
/// pairs. All files must have the same number of lines.
pub fn read_parallel_corpus(
    source: &Path,
    target: &Path,
    alignment: &Path,
    heads: Option<&Path>,
) -> Result<Vec<AlignedSentencePair>> {
    let src = read_lines(source)?;
    let tgt = read_lines(target)?;
    let ali = read_lines(alignment)?;
    let hds = heads.map(read_lines).transpose()?;

    let mut files = vec![(target, tgt.len()), (alignment, ali.len())];
    if let (Some(p), Some(h)) = (heads, &hds) {
        files.push((p, h.len()));
    }
    for (path, n) in files {
        if n != src.len() {
            return Err(Error::LineCountMismatch {
                file: path.display().to_string(),
                line: n.min(src.len()) + 1,
            });
        }
    }

    let mut pairs = Vec::with_capacity(src.len());
    for i in 0..src.len() {
        let wrap = |e: Error| Error::Input {
            line: i + 1,
            message: e.to_string(),
        };
        let source_tokens = tokenize(&src[i]);
        let heads = match &hds {
            Some(h) => Some(parse_heads_line(&h[i], source_tokens.len()).map_err(wrap)?),
            None => None,
        };
        let pair = AlignedSentencePair {
            target_tokens: tokenize(&tgt[i]),
            alignment: parse_alignment_line(&ali[i]).map_err(wrap)?,
            source_tokens,
            heads,
        };
        pair.validate().map_err(wrap)?;
        pairs.push(pair);
    }
    Ok(pairs)
}
