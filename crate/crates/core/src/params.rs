//! Layout of per-parameter data: a prefix, a list of identical blocks, a suffix.
//!
//! Model weights, gradients and optimizer buffers all share this layout, so
//! duplicating the block list keeps every buffer aligned with its weight.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamTree<T> {
    pub prefix: Vec<T>,
    pub blocks: Vec<Vec<T>>,
    pub suffix: Vec<T>,
}

impl<T> ParamTree<T> {
    pub fn len(&self) -> usize {
        self.prefix.len() + self.blocks.iter().map(Vec::len).sum::<usize>() + self.suffix.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat iteration order: prefix, blocks in order, suffix.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.prefix
            .iter()
            .chain(self.blocks.iter().flatten())
            .chain(self.suffix.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.prefix
            .iter_mut()
            .chain(self.blocks.iter_mut().flatten())
            .chain(self.suffix.iter_mut())
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ParamTree<U> {
        ParamTree {
            prefix: self.prefix.iter().map(&mut f).collect(),
            blocks: self.blocks.iter().map(|b| b.iter().map(&mut f).collect()).collect(),
            suffix: self.suffix.iter().map(&mut f).collect(),
        }
    }

    /// Rebuilds a tree with the same layout from flat values.
    pub fn with_layout_of<U>(&self, flat: impl IntoIterator<Item = U>) -> Option<ParamTree<U>> {
        let mut it = flat.into_iter();
        let mut take = |n: usize| -> Option<Vec<U>> { (0..n).map(|_| it.next()).collect() };
        let prefix = take(self.prefix.len())?;
        let blocks = self.blocks.iter().map(|b| take(b.len())).collect::<Option<Vec<_>>>()?;
        let suffix = take(self.suffix.len())?;
        if it.next().is_some() {
            return None;
        }
        Some(ParamTree { prefix, blocks, suffix })
    }
}

impl<T: Clone> ParamTree<T> {
    /// Appends a copy of the block list to itself.
    pub fn stacked(&self) -> Self {
        let mut blocks = self.blocks.clone();
        blocks.extend(self.blocks.iter().cloned());
        Self {
            prefix: self.prefix.clone(),
            blocks,
            suffix: self.suffix.clone(),
        }
    }
}
