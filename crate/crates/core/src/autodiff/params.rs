use std::ops::Range;

use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use super::AutodiffError;

/// Index of a named block inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockId(pub(crate) usize);

impl BlockId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter vector with a layout of named row-major blocks.
///
/// `trainable[i] == false` marks entries an optimizer must never move.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    blocks: Vec<ParamBlock>,
    values: Vec<f64>,
    trainable: Vec<bool>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a fully trainable block.
    pub fn add_block(&mut self, name: impl Into<String>, init: Array2<f64>) -> BlockId {
        let mask = vec![true; init.len()];
        self.add_masked_block(name, init, mask)
    }

    pub fn add_masked_block(
        &mut self,
        name: impl Into<String>,
        init: Array2<f64>,
        trainable: Vec<bool>,
    ) -> BlockId {
        assert_eq!(trainable.len(), init.len(), "mask length must match block size");
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter block `{name}`");
        let (rows, cols) = init.dim();
        let offset = self.values.len();
        self.values.extend(init.iter().copied());
        self.trainable.extend(trainable);
        self.blocks.push(ParamBlock { name, rows, cols, offset });
        BlockId(self.blocks.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn find(&self, name: &str) -> Option<BlockId> {
        self.blocks.iter().position(|b| b.name == name).map(BlockId)
    }

    pub fn info(&self, id: BlockId) -> &ParamBlock {
        &self.blocks[id.0]
    }

    pub fn range(&self, id: BlockId) -> Range<usize> {
        self.blocks[id.0].range()
    }

    pub fn block(&self, id: BlockId) -> ArrayView2<'_, f64> {
        let b = &self.blocks[id.0];
        ArrayView2::from_shape((b.rows, b.cols), &self.values[b.range()]).expect("block layout")
    }

    pub fn block_mut(&mut self, id: BlockId) -> ArrayViewMut2<'_, f64> {
        let b = self.blocks[id.0].clone();
        ArrayViewMut2::from_shape((b.rows, b.cols), &mut self.values[b.range()]).expect("block layout")
    }

    pub fn scalar(&self, id: BlockId) -> f64 {
        self.values[self.blocks[id.0].offset]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    /// Copy of the flat value vector.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.clone()
    }

    /// Overwrites every value from a flat vector with the same layout.
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<(), AutodiffError> {
        if flat.len() != self.values.len() {
            return Err(AutodiffError::LayoutMismatch { expected: self.values.len(), got: flat.len() });
        }
        self.values.copy_from_slice(flat);
        Ok(())
    }

    /// True when `other` has the same block names and shapes.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.blocks == other.blocks
    }
}
