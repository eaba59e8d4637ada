use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Post-rotary keys and values of one layer, one row per cached position.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    pub keys: Matrix,
    pub values: Matrix,
}

/// Per-layer key/value rows for the positions in `retained`, slot `i`
/// holding original position `retained[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixCache {
    layers: Vec<LayerKv>,
    retained: Vec<usize>,
}

impl PrefixCache {
    pub fn empty(n_layers: usize, d_model: usize) -> Self {
        let layer = LayerKv { keys: Matrix::zeros(0, d_model), values: Matrix::zeros(0, d_model) };
        Self { layers: vec![layer; n_layers], retained: Vec::new() }
    }

    pub fn layers(&self) -> &[LayerKv] {
        &self.layers
    }

    pub fn retained(&self) -> &[usize] {
        &self.retained
    }

    pub fn len(&self) -> usize {
        self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }

    pub fn last_position(&self) -> Option<usize> {
        self.retained.last().copied()
    }

    /// Appends rows for `positions`, which must all follow the cached ones.
    pub fn append(&mut self, positions: &[usize], kv: Vec<LayerKv>) -> Result<()> {
        if kv.len() != self.layers.len() {
            return Err(Error::Shape(format!("{} layers of kv for a {}-layer cache", kv.len(), self.layers.len())));
        }
        check_increasing(positions)?;
        if let (Some(last), Some(&first)) = (self.last_position(), positions.first()) {
            if first <= last {
                return Err(Error::PositionCollision { position: first, last_cached: last });
            }
        }
        for (layer, new) in self.layers.iter_mut().zip(kv) {
            if new.keys.rows() != positions.len() || new.values.rows() != positions.len() {
                return Err(Error::Shape("kv rows do not match positions".into()));
            }
            layer.keys = Matrix::vstack(&[&layer.keys, &new.keys]);
            layer.values = Matrix::vstack(&[&layer.values, &new.values]);
        }
        self.retained.extend_from_slice(positions);
        Ok(())
    }

    /// Keeps only slots whose original position is below `end`.
    pub fn truncated(&self, end: usize) -> PrefixCache {
        let slots: Vec<usize> = (0..self.retained.len()).filter(|&s| self.retained[s] < end).collect();
        self.select_slots(&slots)
    }

    /// Keeps the given slots (strictly increasing), physically dropping the rest.
    pub fn select_slots(&self, slots: &[usize]) -> PrefixCache {
        debug_assert!(slots.windows(2).all(|w| w[0] < w[1]));
        PrefixCache {
            layers: self
                .layers
                .iter()
                .map(|l| LayerKv { keys: l.keys.select_rows(slots), values: l.values.select_rows(slots) })
                .collect(),
            retained: slots.iter().map(|&s| self.retained[s]).collect(),
        }
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        check_increasing(&self.retained)?;
        for l in &self.layers {
            if l.keys.rows() != self.retained.len() || l.values.rows() != self.retained.len() {
                return Err(Error::Shape("cache rows do not match retained positions".into()));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_increasing(positions: &[usize]) -> Result<()> {
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Shape("positions must be strictly increasing".into()));
    }
    Ok(())
}
