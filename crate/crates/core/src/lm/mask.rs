use std::ops::Range;

/// Attention pattern over absolute token indices `[0, len)`.
///
/// Indices cover the KV cache span first, then the tokens of the current pass.
pub trait AttentionMask {
    /// Number of indices the mask is defined for.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rotary position of the token at `index`.
    fn position(&self, index: usize) -> usize;

    /// Writes the key ranges visible to `query`, ascending and disjoint.
    fn key_ranges(&self, query: usize, out: &mut Vec<Range<usize>>);
}

/// Pure causal mask over `len` positions.
#[derive(Clone, Copy, Debug)]
pub struct CausalMask {
    pub len: usize,
}

impl CausalMask {
    pub fn new(len: usize) -> Self {
        CausalMask { len }
    }
}

impl AttentionMask for CausalMask {
    fn len(&self) -> usize {
        self.len
    }

    fn position(&self, index: usize) -> usize {
        index
    }

    fn key_ranges(&self, query: usize, out: &mut Vec<Range<usize>>) {
        out.clear();
        out.push(0..query + 1);
    }
}

/// Expands any mask into a dense boolean matrix `[query][key]`. Debug/test helper.
pub fn densify(mask: &dyn AttentionMask) -> Vec<Vec<bool>> {
    let n = mask.len();
    let mut ranges = Vec::new();
    (0..n)
        .map(|q| {
            mask.key_ranges(q, &mut ranges);
            let mut row = vec![false; n];
            for r in &ranges {
                for k in r.clone() {
                    row[k] = true;
                }
            }
            row
        })
        .collect()
}
