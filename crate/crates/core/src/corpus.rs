//! Tokenization, vocabulary building, dataset ingestion and the
//! synthetic knowledge-copy corpus generator.
//!
//! Dataset files are newline-delimited JSON records with fields
//! `utterance` (string), `response` (string), `knowledge` (list of
//! strings) and optional `gold_knowledge_idx` (integer); see
//! `dataset-format.md` at the repository root.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_rng;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Lowercase, separate `. , ! ? ' ’` into standalone tokens, split on
/// whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() + 8);
    for ch in text.to_lowercase().chars() {
        match ch {
            '.' | ',' | '!' | '?' | '\'' | '’' => {
                spaced.push(' ');
                spaced.push(ch);
                spaced.push(' ');
            }
            _ => spaced.push(ch),
        }
    }
    spaced.split_whitespace().map(|s| s.to_string()).collect()
}

/// Token/id bijection with four reserved ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Build from token frequency counts: the four reserved tokens plus
    /// the `max_size - 4` most frequent tokens, ties broken
    /// lexicographically.
    pub fn build<'a>(token_seqs: impl Iterator<Item = &'a [String]>, max_size: usize) -> Self {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for seq in token_seqs {
            for token in seq {
                *counts.entry(token.as_str()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED_TOKENS.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

        let budget = max_size.saturating_sub(RESERVED_TOKENS.len());
        let mut id_to_token: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(ranked.into_iter().take(budget).map(|(t, _)| t.to_string()));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    /// Rebuild from a stored token list (checkpoint loading).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED_TOKENS.len() || tokens[..4] != RESERVED_TOKENS.map(String::from)
        {
            return Err(Error::Checkpoint(
                "vocabulary does not start with the reserved tokens".into(),
            ));
        }
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token: tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    /// Id of a token; unknown tokens map to UNK.
    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn decode_joined(&self, ids: &[u32]) -> String {
        self.decode(ids).join(" ")
    }
}

/// One id-mapped training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogueTurn {
    pub utterance: Vec<u32>,
    pub response: Vec<u32>,
    pub knowledge: Vec<Vec<u32>>,
    /// Only populated by the synthetic generator.
    pub gold_knowledge_idx: Option<usize>,
}

/// Raw text record as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RawTurn {
    pub utterance: String,
    pub response: String,
    pub knowledge: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold_knowledge_idx: Option<usize>,
}

/// Sequence-length limits applied during ingestion.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CorpusLimits {
    pub max_utterance_len: usize,
    pub max_response_len: usize,
    pub max_knowledge_len: usize,
}

impl Default for CorpusLimits {
    fn default() -> Self {
        CorpusLimits {
            max_utterance_len: 50,
            max_response_len: 50,
            max_knowledge_len: 50,
        }
    }
}

/// Counts reported by ingestion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestionReport {
    pub loaded: usize,
    pub dropped: usize,
    pub truncated_sequences: usize,
}

/// Read raw records, enforcing per-line syntax and bounds on
/// `gold_knowledge_idx`. Errors carry 1-based line numbers.
pub fn read_raw_jsonl(path: &Path) -> Result<Vec<RawTurn>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut turns = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let turn: RawTurn = serde_json::from_str(&line).map_err(|e| Error::Dataset {
            line: line_no,
            msg: format!("malformed record: {e}"),
        })?;
        if let Some(idx) = turn.gold_knowledge_idx {
            if !turn.knowledge.is_empty() && idx >= turn.knowledge.len() {
                return Err(Error::Dataset {
                    line: line_no,
                    msg: format!(
                        "gold_knowledge_idx {idx} out of range for {} knowledge entries",
                        turn.knowledge.len()
                    ),
                });
            }
        }
        turns.push(turn);
    }
    Ok(turns)
}

/// Build a vocabulary from the raw training split (utterances,
/// responses and knowledge all count).
pub fn build_vocab(turns: &[RawTurn], max_size: usize) -> Vocabulary {
    let mut seqs: Vec<Vec<String>> = Vec::with_capacity(turns.len() * 3);
    for t in turns {
        seqs.push(tokenize(&t.utterance));
        seqs.push(tokenize(&t.response));
        for k in &t.knowledge {
            seqs.push(tokenize(k));
        }
    }
    Vocabulary::build(seqs.iter().map(|s| s.as_slice()), max_size)
}

/// Tokenize and id-map raw turns. Turns violating the invariants
/// (empty utterance, response, knowledge list or any empty knowledge
/// sentence after tokenization) are dropped and counted; over-long
/// sequences are clipped and counted.
pub fn ingest(
    turns: &[RawTurn],
    vocab: &Vocabulary,
    limits: &CorpusLimits,
) -> (Vec<DialogueTurn>, IngestionReport) {
    let mut report = IngestionReport::default();
    let mut out = Vec::with_capacity(turns.len());
    for raw in turns {
        let mut truncated = 0usize;
        let mut clip = |tokens: Vec<u32>, max: usize| -> Vec<u32> {
            if tokens.len() > max {
                truncated += 1;
                tokens[..max].to_vec()
            } else {
                tokens
            }
        };
        let utterance = clip(
            vocab.encode(&tokenize(&raw.utterance)),
            limits.max_utterance_len,
        );
        let response = clip(
            vocab.encode(&tokenize(&raw.response)),
            limits.max_response_len,
        );
        let knowledge: Vec<Vec<u32>> = raw
            .knowledge
            .iter()
            .map(|k| clip(vocab.encode(&tokenize(k)), limits.max_knowledge_len))
            .collect();
        let valid = !utterance.is_empty()
            && !response.is_empty()
            && !knowledge.is_empty()
            && knowledge.iter().all(|k| !k.is_empty());
        if !valid {
            report.dropped += 1;
            continue;
        }
        report.loaded += 1;
        report.truncated_sequences += truncated;
        out.push(DialogueTurn {
            utterance,
            response,
            knowledge,
            gold_knowledge_idx: raw.gold_knowledge_idx,
        });
    }
    (out, report)
}

/// Read, tokenize and id-map a dataset file in one go.
pub fn load_jsonl(
    path: &Path,
    vocab: &Vocabulary,
    limits: &CorpusLimits,
) -> Result<(Vec<DialogueTurn>, IngestionReport)> {
    let raw = read_raw_jsonl(path)?;
    Ok(ingest(&raw, vocab, limits))
}

pub fn save_jsonl(path: &Path, turns: &[RawTurn]) -> Result<()> {
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    for turn in turns {
        let line = serde_json::to_string(turn).expect("raw turn serializes");
        writeln!(file, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Parameters of the synthetic knowledge-copy task.
///
/// The content vocabulary is partitioned into `knowledge_count` token
/// buckets. Each turn draws one knowledge sentence per bucket, picks a
/// gold bucket, plants that bucket's cue token in the utterance and
/// copies a `copy_rate` fraction of the response tokens from the gold
/// sentence, so selection accuracy is directly measurable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Number of distinct content word types.
    pub vocab_size: usize,
    /// Knowledge collection size N.
    pub knowledge_count: usize,
    pub knowledge_len: (usize, usize),
    pub utterance_len: (usize, usize),
    pub response_len: (usize, usize),
    /// Fraction of response tokens copied from the gold knowledge.
    pub copy_rate: f64,
    pub turns: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            vocab_size: 120,
            knowledge_count: 4,
            knowledge_len: (4, 8),
            utterance_len: (4, 8),
            response_len: (5, 10),
            copy_rate: 0.8,
            turns: 1000,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.copy_rate) {
            return Err(Error::Config(format!(
                "copy-rate must lie in [0, 1], got {}",
                self.copy_rate
            )));
        }
        if self.knowledge_count == 0 {
            return Err(Error::Config("knowledge count must be positive".into()));
        }
        if self.vocab_size < 2 * self.knowledge_count {
            return Err(Error::Config(format!(
                "vocab size {} too small for {} knowledge buckets",
                self.vocab_size, self.knowledge_count
            )));
        }
        for (name, (lo, hi)) in [
            ("knowledge-len", self.knowledge_len),
            ("utterance-len", self.utterance_len),
            ("response-len", self.response_len),
        ] {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) is empty")));
            }
        }
        if self.turns == 0 {
            return Err(Error::Config("turns must be positive".into()));
        }
        Ok(())
    }

    fn token(&self, index: usize) -> String {
        let width = (self.vocab_size.max(10) - 1).to_string().len();
        let mut s = String::new();
        write!(s, "w{index:0width$}").unwrap();
        s
    }

    fn bucket_range(&self, bucket: usize) -> std::ops::Range<usize> {
        let per = self.vocab_size / self.knowledge_count;
        let start = bucket * per;
        let end = if bucket + 1 == self.knowledge_count {
            self.vocab_size
        } else {
            start + per
        };
        start..end
    }

    /// The cue token for a bucket is its first token.
    fn cue(&self, bucket: usize) -> usize {
        self.bucket_range(bucket).start
    }
}

/// Generate the synthetic corpus; deterministic given the spec's seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<RawTurn>> {
    spec.validate()?;
    let n = spec.knowledge_count;
    let cues: Vec<usize> = (0..n).map(|b| spec.cue(b)).collect();
    let non_cue: Vec<usize> = (0..spec.vocab_size).filter(|i| !cues.contains(i)).collect();

    let mut turns = Vec::with_capacity(spec.turns);
    for t in 0..spec.turns {
        let mut rng = derive_rng(spec.seed, &format!("synth/{t}"));
        let gold_bucket = rng.gen_range(0..n);

        // one sentence per bucket, then shuffle the collection order
        let mut sentences: Vec<(usize, Vec<usize>)> = (0..n)
            .map(|bucket| {
                let len = rng.gen_range(spec.knowledge_len.0..=spec.knowledge_len.1);
                let range = spec.bucket_range(bucket);
                let tokens = (0..len)
                    .map(|_| rng.gen_range(range.clone()))
                    .collect::<Vec<_>>();
                (bucket, tokens)
            })
            .collect();
        sentences.shuffle(&mut rng);
        let gold_idx = sentences
            .iter()
            .position(|(b, _)| *b == gold_bucket)
            .expect("gold bucket present");
        let gold_tokens = sentences[gold_idx].1.clone();

        let utt_len = rng.gen_range(spec.utterance_len.0..=spec.utterance_len.1);
        let cue_pos = rng.gen_range(0..utt_len);
        let utterance: Vec<usize> = (0..utt_len)
            .map(|p| {
                if p == cue_pos {
                    cues[gold_bucket]
                } else {
                    non_cue[rng.gen_range(0..non_cue.len())]
                }
            })
            .collect();

        let resp_len = rng.gen_range(spec.response_len.0..=spec.response_len.1);
        let response: Vec<usize> = (0..resp_len)
            .map(|_| {
                if rng.gen::<f64>() < spec.copy_rate {
                    gold_tokens[rng.gen_range(0..gold_tokens.len())]
                } else {
                    non_cue[rng.gen_range(0..non_cue.len())]
                }
            })
            .collect();

        let render = |tokens: &[usize]| {
            tokens
                .iter()
                .map(|&i| spec.token(i))
                .collect::<Vec<_>>()
                .join(" ")
        };
        turns.push(RawTurn {
            utterance: render(&utterance),
            response: render(&response),
            knowledge: sentences.iter().map(|(_, s)| render(s)).collect(),
            gold_knowledge_idx: Some(gold_idx),
        });
    }
    Ok(turns)
}

/// Deterministic 80/10/10 split by position.
pub fn split_turns<T: Clone>(turns: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let train_n = turns.len() * 8 / 10;
    let valid_n = turns.len() / 10;
    let train = turns[..train_n].to_vec();
    let valid = turns[train_n..train_n + valid_n].to_vec();
    let test = turns[train_n + valid_n..].to_vec();
    (train, valid, test)
}
