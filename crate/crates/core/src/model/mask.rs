//! Block-wise attention masks over original sequence positions.

use serde::{Deserialize, Serialize};

/// Block assignment: the prompt is cut into `block_size` chunks from position
/// 0 (its last chunk may be short); generated blocks start at `prompt_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub block_size: usize,
    pub prompt_len: usize,
}

impl BlockLayout {
    pub fn new(block_size: usize, prompt_len: usize) -> Self {
        assert!(block_size >= 1, "block_size must be >= 1");
        Self { block_size, prompt_len }
    }

    pub fn prompt_blocks(&self) -> usize {
        self.prompt_len.div_ceil(self.block_size)
    }

    pub fn block_of(&self, pos: usize) -> usize {
        if pos < self.prompt_len {
            pos / self.block_size
        } else {
            self.prompt_blocks() + (pos - self.prompt_len) / self.block_size
        }
    }

    /// Position range of generated block `k` (0-based, after the prompt).
    pub fn generated_block(&self, k: usize) -> std::ops::Range<usize> {
        let start = self.prompt_len + k * self.block_size;
        start..start + self.block_size
    }
}

/// Dense `len × len` visibility matrix: `allows(q, k)` means query position
/// `q` may attend to key position `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(len: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(len * len);
        for q in 0..len {
            for k in 0..len {
                allowed.push(f(q, k));
            }
        }
        Self { len, allowed }
    }

    pub fn full(len: usize) -> Self {
        Self { len, allowed: vec![true; len * len] }
    }

    pub fn block(layout: BlockLayout, len: usize) -> Self {
        Self::from_fn(len, |q, k| layout.block_of(k) <= layout.block_of(q))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.len + k]
    }

    pub fn intersect(&self, other: &AttentionMask) -> AttentionMask {
        assert_eq!(self.len, other.len, "mask sizes differ");
        let allowed = self.allowed.iter().zip(&other.allowed).map(|(a, b)| *a && *b).collect();
        AttentionMask { len: self.len, allowed }
    }

    /// Number of enabled query/key pairs.
    pub fn count(&self) -> u64 {
        self.allowed.iter().filter(|&&a| a).count() as u64
    }

    /// Rows as `"1100"`-style strings, for tests and debugging.
    pub fn rows(&self) -> Vec<String> {
        (0..self.len).map(|q| (0..self.len).map(|k| if self.allows(q, k) { '1' } else { '0' }).collect()).collect()
    }
}

/// Full attention within a block, visibility of every earlier block; the
/// prompt acts as preceding context.
pub fn build_block_mask(seq_len: usize, block_size: usize, prompt_len: usize) -> AttentionMask {
    assert!(prompt_len <= seq_len, "prompt longer than sequence");
    AttentionMask::block(BlockLayout::new(block_size, prompt_len), seq_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_blocks_of_two() {
        assert_eq!(build_block_mask(4, 2, 0).rows(), ["1100", "1100", "1111", "1111"]);
    }

    #[test]
    fn single_block_is_bidirectional() {
        assert_eq!(build_block_mask(5, 5, 0), AttentionMask::full(5));
    }

    #[test]
    fn unit_blocks_are_causal() {
        let m = build_block_mask(6, 1, 0);
        for q in 0..6 {
            for k in 0..6 {
                assert_eq!(m.allows(q, k), k <= q);
            }
        }
    }

    #[test]
    fn short_prompt_block_then_aligned_generation() {
        // prompt of 3 with block size 2: prompt blocks {0,1},{2}; generation {3,4},{5,6}
        let l = BlockLayout::new(2, 3);
        let blocks: Vec<usize> = (0..7).map(|p| l.block_of(p)).collect();
        assert_eq!(blocks, [0, 0, 1, 2, 2, 3, 3]);
        assert_eq!(l.generated_block(1), 5..7);
        let m = build_block_mask(7, 2, 3);
        assert!(m.allows(3, 4) && m.allows(3, 2) && !m.allows(2, 3));
    }
}
