//! Offline sequence packing: first-fit-decreasing bin packing of
//! variable-length samples into fixed-capacity sequences, with a segment
//! mask that keeps packed samples from attending to each other.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionMask, BlockLayout};
use crate::vocab::{TokenId, TokenSequence, TokenVocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub sample_id: u64,
    pub offset: usize,
    pub length: usize,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.offset + self.length
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub capacity: usize,
    pub segments: Vec<Segment>,
    /// Trailing pad count.
    pub pad: usize,
}

impl PackedSequence {
    pub fn used(&self) -> usize {
        self.capacity - self.pad
    }

    /// Segment index per position; trailing padding maps to `segments.len()`.
    pub fn segment_ids(&self) -> Vec<usize> {
        let mut out = vec![self.segments.len(); self.capacity];
        for (i, s) in self.segments.iter().enumerate() {
            out[s.offset..s.end()].fill(i);
        }
        out
    }
}

/// First-fit-decreasing: samples sorted by length descending (stable, so
/// equal lengths keep input order), each placed into the first sequence
/// with room.
pub fn pack(samples: &[(u64, usize)], capacity: usize) -> Result<Vec<PackedSequence>> {
    if capacity == 0 {
        return Err(Error::Config("packing capacity must be >= 1".into()));
    }
    if let Some(&(id, length)) = samples.iter().find(|s| s.1 > capacity) {
        return Err(Error::SampleTooLong { id, length, capacity });
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[b].1.cmp(&samples[a].1));
    let mut bins: Vec<PackedSequence> = Vec::new();
    for i in order {
        let (sample_id, length) = samples[i];
        let bin = match bins.iter_mut().find(|b| b.pad >= length) {
            Some(b) => b,
            None => {
                bins.push(PackedSequence { capacity, segments: Vec::new(), pad: capacity });
                bins.last_mut().unwrap()
            }
        };
        bin.segments.push(Segment { sample_id, offset: bin.capacity - bin.pad, length });
        bin.pad -= length;
    }
    Ok(bins)
}

/// Length rounded up to a multiple of `block_size`.
pub fn aligned_length(length: usize, block_size: usize) -> usize {
    length.div_ceil(block_size) * block_size
}

pub fn total_padding(packed: &[PackedSequence]) -> usize {
    packed.iter().map(|p| p.pad).sum()
}

/// Padding when every sample gets its own sequence padded to `capacity`.
pub fn naive_padding(lengths: &[usize], capacity: usize) -> usize {
    lengths.iter().map(|&l| capacity.saturating_sub(l)).sum()
}

/// Padding when consecutive groups of `batch_size` samples are padded to the
/// longest member of their group.
pub fn batch_max_padding(lengths: &[usize], batch_size: usize) -> usize {
    lengths
        .chunks(batch_size.max(1))
        .map(|c| {
            let max = c.iter().copied().max().unwrap_or(0);
            c.iter().map(|&l| max - l).sum::<usize>()
        })
        .sum()
}

/// Block mask intersected with a same-segment indicator. Trailing padding
/// forms its own segment.
pub fn segment_mask(packed: &PackedSequence, block_size: usize) -> AttentionMask {
    let seg = packed.segment_ids();
    let block = AttentionMask::block(BlockLayout::new(block_size, 0), packed.capacity);
    let same = AttentionMask::from_fn(packed.capacity, |q, k| seg[q] == seg[k]);
    block.intersect(&same)
}

/// Packed ids for one sequence: each sample followed by `pad_id` up to its
/// segment length, then trailing `pad_id`.
pub fn materialize(
    packed: &PackedSequence,
    samples: &std::collections::HashMap<u64, &TokenSequence>,
    vocab: &TokenVocabulary,
    pad_id: TokenId,
) -> Result<TokenSequence> {
    let mut ids = Vec::with_capacity(packed.capacity);
    for s in &packed.segments {
        let seq =
            samples.get(&s.sample_id).ok_or_else(|| Error::Sequence(format!("unknown sample id {}", s.sample_id)))?;
        ids.extend_from_slice(seq.ids());
        ids.resize(s.end(), pad_id);
    }
    ids.resize(packed.capacity, pad_id);
    let block = samples.values().next().map_or(1, |s| s.block_size());
    TokenSequence::from_ids(vocab, ids, block)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lengths(p: &PackedSequence) -> Vec<usize> {
        p.segments.iter().map(|s| s.length).collect()
    }

    #[test]
    fn ffd_examples() {
        let packed = pack(&[(0, 5), (1, 3), (2, 4), (3, 2)], 8).unwrap();
        assert_eq!(packed.iter().map(lengths).collect::<Vec<_>>(), vec![vec![5, 3], vec![4, 2]]);
        // 14 tokens in two 8-slot sequences: the 2 trailing slots are unavoidable
        assert_eq!(packed.iter().map(|p| p.pad).collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(packed[0].segments[1], Segment { sample_id: 1, offset: 5, length: 3 });

        let one = pack(&[(9, 8)], 8).unwrap();
        assert_eq!((one.len(), one[0].pad), (1, 0));

        let halves = pack(&[(0, 4), (1, 4), (2, 4), (3, 4)], 8).unwrap();
        assert_eq!(halves.len(), 2);
        assert_eq!(total_padding(&halves), 0);
    }

    #[test]
    fn rejects_oversized_sample() {
        assert!(matches!(pack(&[(0, 3), (7, 9)], 8), Err(Error::SampleTooLong { id: 7, length: 9, capacity: 8 })));
    }

    #[test]
    fn batch_max_baseline_can_beat_bins() {
        // two equal samples that do not share a bin
        let packed = pack(&[(0, 5), (1, 5)], 8).unwrap();
        assert_eq!(total_padding(&packed), 6);
        assert_eq!(batch_max_padding(&[5, 5], 2), 0);
        assert_eq!(naive_padding(&[5, 5], 8), 6);
    }

    #[test]
    fn segment_masks() {
        let packed = pack(&[(0, 4), (1, 2)], 8).unwrap();
        let m = segment_mask(&packed[0], 2);
        for q in 0..8 {
            for k in 0..8 {
                let seg = |p: usize| {
                    if p < 4 {
                        0
                    } else if p < 6 {
                        1
                    } else {
                        2
                    }
                };
                if seg(q) != seg(k) {
                    assert!(!m.allows(q, k));
                }
            }
        }
        let single = pack(&[(0, 8)], 8).unwrap();
        assert_eq!(segment_mask(&single[0], 2), crate::model::build_block_mask(8, 2, 0));
    }

    proptest! {
        #[test]
        fn ffd_invariants(lens in proptest::collection::vec(1usize..=32, 1..60), cap in 32usize..64) {
            let samples: Vec<(u64, usize)> = lens.iter().enumerate().map(|(i, &l)| (i as u64, l)).collect();
            let packed = pack(&samples, cap).unwrap();
            let mut ids: Vec<u64> = packed.iter().flat_map(|p| p.segments.iter().map(|s| s.sample_id)).collect();
            ids.sort_unstable();
            prop_assert_eq!(ids, (0..lens.len() as u64).collect::<Vec<_>>());
            for p in &packed {
                prop_assert_eq!(p.segments.iter().map(|s| s.length).sum::<usize>() + p.pad, cap);
                let mut at = 0;
                for s in &p.segments {
                    prop_assert_eq!(s.offset, at);
                    prop_assert_eq!(s.length, lens[s.sample_id as usize]);
                    at = s.end();
                }
            }
            prop_assert!(total_padding(&packed) <= naive_padding(&lens, cap));
            prop_assert_eq!(pack(&samples, cap).unwrap(), packed);
        }
    }
}
