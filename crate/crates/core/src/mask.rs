//! Per-layer sub-tree attention visibility.
//!
//! At layer `l` (1-based) leaf `i` may attend to leaf `j` iff their lowest
//! common ancestor has height `<= l`: layer 1 is the identity, and each later
//! layer opens up one more level of phrase structure. Memory columns sit in
//! front of the caption block and are always visible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::ConstituencyTree;

/// Dense row-major boolean matrix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoolMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl BoolMatrix {
    pub fn new(rows: usize, cols: usize, value: bool) -> Self {
        BoolMatrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.cols + j] = v;
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::new(n, n, false);
        for i in 0..n {
            m.set(i, i, true);
        }
        m
    }

    /// 0/1 text grid, one row per line.
    pub fn to_grid(&self) -> String {
        let mut out = String::with_capacity(self.rows * (2 * self.cols + 1));
        for i in 0..self.rows {
            let line: Vec<&str> = (0..self.cols)
                .map(|j| if self.get(i, j) { "1" } else { "0" })
                .collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Visibility rule used to build the caption block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MaskRule {
    /// `lca_height(i, j) <= l`.
    #[default]
    Subtree,
    /// Deliberately wrong rule (`<` instead of `<=`) used to prove that the
    /// mask oracle in `storyvis check` can fail.
    Corrupted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskOptions {
    /// Open the whole caption block at the last layer.
    pub final_layer_full: bool,
    pub rule: MaskRule,
}

impl Default for MaskOptions {
    fn default() -> Self {
        MaskOptions {
            final_layer_full: true,
            rule: MaskRule::Subtree,
        }
    }
}

/// All pairwise LCA heights, `n x n`, computed in one pass over the nodes.
pub fn lca_heights(tree: &ConstituencyTree) -> Vec<usize> {
    let n = tree.leaf_count();
    let mut out = vec![0; n * n];
    // Nodes sorted by increasing height: the first node that covers a pair
    // is its lowest common ancestor.
    let mut order: Vec<usize> = (0..tree.nodes().len()).collect();
    order.sort_by_key(|&i| tree.nodes()[i].height);
    for id in order {
        let node = &tree.nodes()[id];
        let (lo, hi) = node.span;
        for i in lo..=hi {
            for j in lo..=hi {
                if out[i * n + j] == 0 {
                    out[i * n + j] = node.height;
                }
            }
        }
    }
    out
}

/// Height of the lowest common ancestor of leaves `i` and `j`.
pub fn lca_height(tree: &ConstituencyTree, i: usize, j: usize) -> Result<usize> {
    tree.lca_height(i, j)
}

/// Caption-block visibility at layer `layer` of `total_layers` (both 1-based).
pub fn layer_mask(
    tree: &ConstituencyTree,
    layer: usize,
    total_layers: usize,
    opts: MaskOptions,
) -> Result<BoolMatrix> {
    if layer == 0 {
        return Err(Error::Invalid("mask layers are 1-based".into()));
    }
    let n = tree.leaf_count();
    if opts.final_layer_full && layer == total_layers {
        return Ok(BoolMatrix::new(n, n, true));
    }
    let heights = lca_heights(tree);
    let data = heights
        .iter()
        .map(|&h| match opts.rule {
            MaskRule::Subtree => h <= layer,
            MaskRule::Corrupted => h < layer,
        })
        .collect();
    Ok(BoolMatrix {
        rows: n,
        cols: n,
        data,
    })
}

/// Per-layer masks of shape `T_c x (T_m + T_c)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskStack {
    pub memory_slots: usize,
    pub caption_len: usize,
    pub layers: Vec<BoolMatrix>,
}

impl MaskStack {
    pub fn build(tree: &ConstituencyTree, layers: usize, memory_slots: usize, opts: MaskOptions) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Invalid("mask stack needs at least one layer".into()));
        }
        let n = tree.leaf_count();
        let mut out = Vec::with_capacity(layers);
        for l in 1..=layers {
            let block = layer_mask(tree, l, layers, opts)?;
            let mut m = BoolMatrix::new(n, memory_slots + n, true);
            for i in 0..n {
                for j in 0..n {
                    m.set(i, memory_slots + j, block.get(i, j));
                }
            }
            out.push(m);
        }
        Ok(MaskStack {
            memory_slots,
            caption_len: n,
            layers: out,
        })
    }

    /// Every row fully visible; used for flat (structure-free) encoding.
    pub fn full(caption_len: usize, layers: usize, memory_slots: usize) -> Self {
        MaskStack {
            memory_slots,
            caption_len,
            layers: vec![BoolMatrix::new(caption_len, memory_slots + caption_len, true); layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Caption block (memory columns stripped) of layer `l` (0-based).
    pub fn caption_block(&self, l: usize) -> BoolMatrix {
        let n = self.caption_len;
        let mut m = BoolMatrix::new(n, n, false);
        for i in 0..n {
            for j in 0..n {
                m.set(i, j, self.layers[l].get(i, self.memory_slots + j));
            }
        }
        m
    }

    /// Checks the structural invariants; returns the first violation.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let (n, tm) = (self.caption_len, self.memory_slots);
        for (l, m) in self.layers.iter().enumerate() {
            if m.rows != n || m.cols != tm + n {
                return Err(format!("layer {l}: shape {}x{}", m.rows, m.cols));
            }
            for i in 0..n {
                if (0..tm).any(|j| !m.get(i, j)) {
                    return Err(format!("layer {l}: memory column hidden in row {i}"));
                }
                if !m.get(i, tm + i) {
                    return Err(format!("layer {l}: diagonal ({i},{i}) hidden"));
                }
                for j in 0..n {
                    if m.get(i, tm + j) != m.get(j, tm + i) {
                        return Err(format!("layer {l}: asymmetric at ({i},{j})"));
                    }
                    if l > 0 && self.layers[l - 1].get(i, tm + j) && !m.get(i, tm + j) {
                        return Err(format!("layer {l}: not monotone at ({i},{j})"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (l, m) in self.layers.iter().enumerate() {
            out.push_str(&format!(
                "# layer {} ({} memory + {} caption columns)\n",
                l + 1,
                self.memory_slots,
                self.caption_len
            ));
            out.push_str(&m.to_grid());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = "(S (NP (NNP Pororo)) (VP (VP (VBZ says) (UH hi)) (CC and) (VP (VBZ smiles))))";

    fn strict() -> MaskOptions {
        MaskOptions {
            final_layer_full: false,
            ..Default::default()
        }
    }

    #[test]
    fn first_layer_is_identity() {
        let t = ConstituencyTree::parse(EXAMPLE).unwrap();
        assert_eq!(layer_mask(&t, 1, 4, strict()).unwrap(), BoolMatrix::identity(5));
    }

    #[test]
    fn example_second_layer() {
        let t = ConstituencyTree::parse(EXAMPLE).unwrap();
        let m = layer_mask(&t, 2, 4, strict()).unwrap();
        assert!(m.get(1, 2) && m.get(2, 1));
        assert!(!m.get(0, 1));
    }

    #[test]
    fn at_tree_height_everything_visible() {
        let t = ConstituencyTree::parse(EXAMPLE).unwrap();
        let m = layer_mask(&t, t.height(), 10, strict()).unwrap();
        assert!(m.data.iter().all(|&b| b));
    }

    #[test]
    fn stack_shapes_and_memory_columns() {
        let t = ConstituencyTree::parse(EXAMPLE).unwrap();
        let s = MaskStack::build(&t, 4, 3, MaskOptions::default()).unwrap();
        assert_eq!(s.layers.len(), 4);
        for m in &s.layers {
            assert_eq!((m.rows, m.cols), (5, 8));
            for i in 0..5 {
                assert!((0..3).all(|j| m.get(i, j)));
            }
        }
        s.validate().unwrap();
    }

    #[test]
    fn no_memory_is_pure_caption_mask() {
        let t = ConstituencyTree::parse(EXAMPLE).unwrap();
        let s = MaskStack::build(&t, 4, 0, strict()).unwrap();
        for l in 0..4 {
            assert_eq!(s.layers[l], layer_mask(&t, l + 1, 4, strict()).unwrap());
        }
    }

    #[test]
    fn deep_chain_needs_override() {
        let t = ConstituencyTree::parse("(A (P a) (B (P b) (C (P c) (D (P d) (P e)))))").unwrap();
        assert_eq!(t.lca_height(0, 4).unwrap(), 5);
        let strict_top = layer_mask(&t, 4, 4, strict()).unwrap();
        assert!(!strict_top.get(0, 4));
        let top = layer_mask(&t, 4, 4, MaskOptions::default()).unwrap();
        assert!(top.get(0, 4));
    }

    #[test]
    fn lca_table_matches_pairwise() {
        let t = ConstituencyTree::parse(EXAMPLE).unwrap();
        let h = lca_heights(&t);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(h[i * 5 + j], t.lca_height(i, j).unwrap());
            }
        }
    }
}
