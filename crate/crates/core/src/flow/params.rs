//! Flat parameter storage with a stable layer → slice index map.

use std::ops::Range;

use serde::{Deserialize, Serialize};

/// The six parameter blocks of one coupling-layer conditioner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    W1,
    B1,
    W2,
    B2,
    W3,
    B3,
}

impl Block {
    pub const ALL: [Block; 6] = [Block::W1, Block::B1, Block::W2, Block::B2, Block::W3, Block::B3];
}

/// Offsets of one layer's blocks inside the flat parameter array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub n_in: usize,
    pub n_out: usize,
    pub hidden: usize,
    start: usize,
}

impl LayerLayout {
    pub fn new(start: usize, n_in: usize, n_out: usize, hidden: usize) -> Self {
        Self {
            n_in,
            n_out,
            hidden,
            start,
        }
    }

    pub fn shape(&self, block: Block) -> (usize, usize) {
        let h = self.hidden;
        match block {
            Block::W1 => (self.n_in, h),
            Block::B1 | Block::B2 => (1, h),
            Block::W2 => (h, h),
            Block::W3 => (h, 2 * self.n_out),
            Block::B3 => (1, 2 * self.n_out),
        }
    }

    pub fn range(&self, block: Block) -> Range<usize> {
        let mut off = self.start;
        for b in Block::ALL {
            let (r, c) = self.shape(b);
            if b == block {
                return off..off + r * c;
            }
            off += r * c;
        }
        unreachable!()
    }

    pub fn len(&self) -> usize {
        Block::ALL
            .iter()
            .map(|&b| {
                let (r, c) = self.shape(b);
                r * c
            })
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn span(&self) -> Range<usize> {
        self.start..self.start + self.len()
    }
}

/// All trainable parameters of a flow, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector<T> {
    values: Vec<T>,
    layout: Vec<LayerLayout>,
}

impl<T: Copy> ParameterVector<T> {
    pub fn new(values: Vec<T>, layout: Vec<LayerLayout>) -> Self {
        debug_assert_eq!(values.len(), layout.iter().map(LayerLayout::len).sum::<usize>());
        Self { values, layout }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn layout(&self) -> &[LayerLayout] {
        &self.layout
    }

    /// Parameters of one layer block.
    pub fn block(&self, layer: usize, block: Block) -> &[T] {
        &self.values[self.layout[layer].range(block)]
    }

    pub fn block_mut(&mut self, layer: usize, block: Block) -> &mut [T] {
        let r = self.layout[layer].range(block);
        &mut self.values[r]
    }

    /// Per-layer views, in layer order.
    pub fn unflatten(&self) -> Vec<&[T]> {
        self.layout.iter().map(|l| &self.values[l.span()]).collect()
    }

    /// Inverse of [`unflatten`](Self::unflatten).
    pub fn flatten(layers: &[&[T]], layout: Vec<LayerLayout>) -> Self {
        let values = layers.iter().flat_map(|s| s.iter().copied()).collect();
        Self::new(values, layout)
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout(hidden: usize) -> Vec<LayerLayout> {
        let a = LayerLayout::new(0, 1, 1, hidden);
        let b = LayerLayout::new(a.len(), 1, 1, hidden);
        vec![a, b]
    }

    #[test]
    fn blocks_tile_the_layer() {
        let l = LayerLayout::new(10, 2, 3, 4);
        let mut end = 10;
        for b in Block::ALL {
            let r = l.range(b);
            assert_eq!(r.start, end);
            end = r.end;
        }
        assert_eq!(end, 10 + l.len());
        assert_eq!(l.len(), 2 * 4 + 4 + 16 + 4 + 4 * 6 + 6);
    }

    proptest! {
        #[test]
        fn flatten_unflatten_roundtrip(hidden in 1usize..6, seed in any::<u64>()) {
            let lay = layout(hidden);
            let n: usize = lay.iter().map(LayerLayout::len).sum();
            let values: Vec<f64> = (0..n).map(|i| ((seed.wrapping_add(i as u64)) % 1000) as f64 * 0.1).collect();
            let pv = ParameterVector::new(values, lay.clone());
            let back = ParameterVector::flatten(&pv.unflatten(), lay);
            prop_assert_eq!(back, pv);
        }
    }
}
