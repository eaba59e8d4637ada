//! Newline-delimited JSON token corpora.
//!
//! One record per line:
//! `{"ids":[...],"spans":[[start,end,"TEXT"],...],"prompt_len":N}`.
//! `spans` may be omitted (derived from the ids) and `prompt_len` defaults
//! to 0. Records may carry an explicit `"id"`; otherwise the line index is
//! used.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Modality, ModalitySpan, TokenId, TokenSequence, TokenVocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    pub ids: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spans: Option<Vec<(usize, usize, Modality)>>,
    #[serde(default)]
    pub prompt_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub tokens: TokenSequence,
    pub prompt_len: usize,
}

impl CorpusRecord {
    pub fn from_sample(sample: &Sample) -> Self {
        Self {
            id: Some(sample.id),
            ids: sample.tokens.ids().to_vec(),
            spans: Some(sample.tokens.spans().iter().map(|s| (s.start, s.end, s.modality)).collect()),
            prompt_len: sample.prompt_len,
        }
    }

    pub fn into_sample(self, line: usize, vocab: &TokenVocabulary, block_size: usize) -> Result<Sample> {
        let tokens = match self.spans {
            Some(spans) => TokenSequence::new(
                vocab,
                self.ids,
                spans.into_iter().map(|(s, e, m)| ModalitySpan::new(s, e, m)).collect(),
                block_size,
            )?,
            None => TokenSequence::from_ids(vocab, self.ids, block_size)?,
        };
        if self.prompt_len > tokens.len() {
            return Err(Error::Sequence(format!(
                "line {line}: prompt_len {} exceeds length {}",
                self.prompt_len,
                tokens.len()
            )));
        }
        Ok(Sample { id: self.id.unwrap_or(line as u64), tokens, prompt_len: self.prompt_len })
    }
}

/// Parses every non-blank line; errors name the 0-based line.
pub fn read<R: BufRead>(reader: R, vocab: &TokenVocabulary, block_size: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (line, text) in reader.lines().enumerate() {
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&text).map_err(|e| Error::Format(format!("line {line}: {e}")))?;
        out.push(rec.into_sample(line, vocab, block_size).map_err(|e| match e {
            Error::Sequence(m) if !m.starts_with("line") => Error::Sequence(format!("line {line}: {m}")),
            other => other,
        })?);
    }
    Ok(out)
}

pub fn write<W: Write>(mut w: W, samples: &[Sample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, &CorpusRecord::from_sample(s))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
