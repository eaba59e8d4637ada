//! Extended vocabulary (text + visual codebook + special tokens) and
//! modality-annotated token sequences.
//!
//! Id layout is fixed: text ids `[0, text_size)`, then visual ids, then the
//! special tokens in registry order. `MASK` is always the first special.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const MASK: &str = "MASK";
pub const BOS: &str = "BOS";
pub const EOS: &str = "EOS";
pub const IMG_START: &str = "IMG_START";
pub const IMG_END: &str = "IMG_END";

const FIXED_SPECIALS: [&str; 5] = [MASK, BOS, EOS, IMG_START, IMG_END];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Modality {
    Text,
    Image,
    Special,
}

/// Serialized form of a vocabulary; the special list is derived.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSpec {
    pub text_size: usize,
    pub visual_size: usize,
    #[serde(default)]
    pub resolutions: Vec<u32>,
}

impl TryFrom<VocabSpec> for TokenVocabulary {
    type Error = Error;

    fn try_from(s: VocabSpec) -> Result<Self> {
        Self::build(s.text_size, s.visual_size, &s.resolutions)
    }
}

impl From<TokenVocabulary> for VocabSpec {
    fn from(v: TokenVocabulary) -> Self {
        Self { text_size: v.text_size, visual_size: v.visual_size, resolutions: v.resolutions }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabSpec", into = "VocabSpec")]
pub struct TokenVocabulary {
    text_size: usize,
    visual_size: usize,
    special: Vec<String>,
    resolutions: Vec<u32>,
}

impl TokenVocabulary {
    /// Builds the id map. Resolutions register one `imgsize_<px>` token each,
    /// in the order given.
    pub fn build(text_size: usize, visual_size: usize, resolutions: &[u32]) -> Result<Self> {
        if text_size < 2 {
            return Err(Error::Vocabulary(format!("text_size must be >= 2, got {text_size}")));
        }
        let mut seen = std::collections::HashSet::new();
        for r in resolutions {
            if !seen.insert(*r) {
                return Err(Error::Vocabulary(format!("duplicate resolution {r}")));
            }
        }
        let mut special: Vec<String> = FIXED_SPECIALS.iter().map(|s| s.to_string()).collect();
        special.extend(resolutions.iter().map(|r| size_token_name(*r)));
        Ok(Self { text_size, visual_size, special, resolutions: resolutions.to_vec() })
    }

    pub fn text_size(&self) -> usize {
        self.text_size
    }

    pub fn visual_size(&self) -> usize {
        self.visual_size
    }

    pub fn total_size(&self) -> usize {
        self.text_size + self.visual_size + self.special.len()
    }

    pub fn specials(&self) -> &[String] {
        &self.special
    }

    pub fn resolutions(&self) -> &[u32] {
        &self.resolutions
    }

    fn special_base(&self) -> usize {
        self.text_size + self.visual_size
    }

    pub fn special_id(&self, name: &str) -> Option<TokenId> {
        self.special.iter().position(|s| s == name).map(|i| (self.special_base() + i) as TokenId)
    }

    pub fn mask_id(&self) -> TokenId {
        self.special_base() as TokenId
    }

    pub fn bos_id(&self) -> TokenId {
        self.mask_id() + 1
    }

    pub fn eos_id(&self) -> TokenId {
        self.mask_id() + 2
    }

    pub fn img_start_id(&self) -> TokenId {
        self.mask_id() + 3
    }

    pub fn img_end_id(&self) -> TokenId {
        self.mask_id() + 4
    }

    pub fn size_token(&self, resolution: u32) -> Option<TokenId> {
        self.special_id(&size_token_name(resolution))
    }

    pub fn is_size_token(&self, id: TokenId) -> bool {
        let first = self.mask_id() as usize + FIXED_SPECIALS.len();
        (first..self.total_size()).contains(&(id as usize))
    }

    pub fn visual_id(&self, code: usize) -> Option<TokenId> {
        (code < self.visual_size).then(|| (self.text_size + code) as TokenId)
    }

    /// Modality class of a raw id, or `None` when out of range.
    pub fn modality_of(&self, id: TokenId) -> Option<Modality> {
        let id = id as usize;
        if id < self.text_size {
            Some(Modality::Text)
        } else if id < self.special_base() {
            Some(Modality::Image)
        } else if id < self.total_size() {
            Some(Modality::Special)
        } else {
            None
        }
    }

    /// Ids whose prediction is never committed by the decoder.
    pub fn is_uncommittable(&self, id: TokenId) -> bool {
        id == self.mask_id() || self.is_size_token(id)
    }
}

fn size_token_name(resolution: u32) -> String {
    format!("imgsize_{resolution}")
}

/// Half-open `[start, end)` run of one modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpan {
    pub start: usize,
    pub end: usize,
    pub modality: Modality,
}

impl ModalitySpan {
    pub fn new(start: usize, end: usize, modality: Modality) -> Self {
        Self { start, end, modality }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    spans: Vec<ModalitySpan>,
    block_size: usize,
}

impl TokenSequence {
    /// Validates span tiling and id range.
    pub fn new(
        vocab: &TokenVocabulary,
        ids: Vec<TokenId>,
        spans: Vec<ModalitySpan>,
        block_size: usize,
    ) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::Sequence("block_size must be >= 1".into()));
        }
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= vocab.total_size()) {
            return Err(Error::Sequence(format!(
                "token id {bad} out of range for vocabulary of {}",
                vocab.total_size()
            )));
        }
        check_tiling(&spans, ids.len())?;
        Ok(Self { ids, spans: normalize_spans(spans), block_size })
    }

    /// Spans derived from each id's vocabulary class.
    pub fn from_ids(vocab: &TokenVocabulary, ids: Vec<TokenId>, block_size: usize) -> Result<Self> {
        let mut modalities = Vec::with_capacity(ids.len());
        for &id in &ids {
            modalities.push(
                vocab
                    .modality_of(id)
                    .ok_or_else(|| Error::Sequence(format!("token id {id} out of range for vocabulary")))?,
            );
        }
        let spans = spans_from_modalities(&modalities);
        Self::new(vocab, ids, spans, block_size)
    }

    /// Same spans and block size with ids substituted position by position.
    pub(crate) fn replace_ids(&mut self, ids: Vec<TokenId>) {
        assert_eq!(ids.len(), self.ids.len());
        self.ids = ids;
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn spans(&self) -> &[ModalitySpan] {
        &self.spans
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `ceil(len / block_size)`.
    pub fn num_blocks(&self) -> usize {
        self.ids.len().div_ceil(self.block_size)
    }

    /// Per-position modality, expanded from the spans.
    pub fn modalities(&self) -> Vec<Modality> {
        let mut out = Vec::with_capacity(self.ids.len());
        for span in &self.spans {
            out.extend(std::iter::repeat_n(span.modality, span.len()));
        }
        out
    }

    pub fn modality_at(&self, position: usize) -> Option<Modality> {
        self.spans.iter().find(|s| s.start <= position && position < s.end).map(|s| s.modality)
    }

    /// Appends ids, classifying them by vocabulary.
    pub fn extend_from_ids(&mut self, vocab: &TokenVocabulary, ids: &[TokenId]) -> Result<()> {
        let mut mods = self.modalities();
        for &id in ids {
            mods.push(
                vocab
                    .modality_of(id)
                    .ok_or_else(|| Error::Sequence(format!("token id {id} out of range for vocabulary")))?,
            );
        }
        self.ids.extend_from_slice(ids);
        self.spans = spans_from_modalities(&mods);
        Ok(())
    }

    /// Inserts the `<height>` and `<width>` size tokens at `start`, ahead of a
    /// flattened image. Inserting strictly inside an IMAGE span is rejected.
    pub fn annotate_image_block(
        &self,
        vocab: &TokenVocabulary,
        start: usize,
        height_tok: TokenId,
        width_tok: TokenId,
    ) -> Result<Self> {
        if start > self.ids.len() {
            return Err(Error::Sequence(format!("insertion point {start} beyond sequence length {}", self.ids.len())));
        }
        for tok in [height_tok, width_tok] {
            if !vocab.is_size_token(tok) {
                return Err(Error::Sequence(format!("token {tok} is not a size token")));
            }
        }
        if self.spans.iter().any(|s| s.modality == Modality::Image && s.start < start && start < s.end) {
            return Err(Error::Sequence(format!("insertion at {start} splits an image span")));
        }
        let mut mods = self.modalities();
        mods.splice(start..start, [Modality::Special, Modality::Special]);
        let mut ids = self.ids.clone();
        ids.splice(start..start, [height_tok, width_tok]);
        Self::new(vocab, ids, spans_from_modalities(&mods), self.block_size)
    }

    /// True when every block is full except possibly the last block of the
    /// first `prompt_len` tokens.
    pub fn is_block_aligned(&self, prompt_len: usize) -> bool {
        prompt_len <= self.ids.len() && (self.ids.len() - prompt_len).is_multiple_of(self.block_size)
    }
}

fn check_tiling(spans: &[ModalitySpan], len: usize) -> Result<()> {
    let mut cursor = 0;
    for s in spans {
        if s.start != cursor || s.end < s.start {
            return Err(Error::Sequence(format!(
                "spans do not tile: expected start {cursor}, got [{}, {})",
                s.start, s.end
            )));
        }
        cursor = s.end;
    }
    if cursor != len {
        return Err(Error::Sequence(format!("spans cover {cursor} of {len} positions")));
    }
    Ok(())
}

/// Drops empty spans and merges adjacent spans of the same modality.
fn normalize_spans(spans: Vec<ModalitySpan>) -> Vec<ModalitySpan> {
    let mut out: Vec<ModalitySpan> = Vec::with_capacity(spans.len());
    for s in spans.into_iter().filter(|s| !s.is_empty()) {
        match out.last_mut() {
            Some(last) if last.modality == s.modality && last.end == s.start => last.end = s.end,
            _ => out.push(s),
        }
    }
    out
}

pub fn spans_from_modalities(mods: &[Modality]) -> Vec<ModalitySpan> {
    let mut out: Vec<ModalitySpan> = Vec::new();
    for (i, &m) in mods.iter().enumerate() {
        match out.last_mut() {
            Some(last) if last.modality == m => last.end = i + 1,
            _ => out.push(ModalitySpan::new(i, i + 1, m)),
        }
    }
    out
}
