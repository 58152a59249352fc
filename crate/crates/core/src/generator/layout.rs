use std::ops::Range;

use crate::pyramid::ScaleSchedule;

/// One sequence slot: `scale == 0` is the start/class token, scales are 1-based after it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Position {
    pub scale: usize,
    pub row: usize,
    pub col: usize,
}

/// Flattened token order: start token, then every scale in raster order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    positions: Vec<Position>,
    /// `offsets[s]` is the first slot of scale `s` (1-based); `offsets[N + 1]` is the length.
    offsets: Vec<usize>,
}

impl SequenceLayout {
    pub fn new(schedule: &ScaleSchedule) -> Self {
        let mut positions = vec![Position {
            scale: 0,
            row: 0,
            col: 0,
        }];
        let mut offsets = vec![0];
        for (i, &h) in schedule.resolutions().iter().enumerate() {
            offsets.push(positions.len());
            for row in 0..h {
                for col in 0..h {
                    positions.push(Position {
                        scale: i + 1,
                        row,
                        col,
                    });
                }
            }
        }
        offsets.push(positions.len());
        Self { positions, offsets }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    pub fn scales(&self) -> usize {
        self.offsets.len() - 2
    }

    /// Slots of scale `s` (1-based).
    pub fn scale_range(&self, s: usize) -> Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }

    /// Sequence length covering the start token and scales `1..=s`.
    pub fn prefix_len(&self, s: usize) -> usize {
        self.offsets[s + 1]
    }

    /// Exclusive end of the keys slot `q` may attend to: everything up to the end of its own scale.
    pub fn key_end(&self, q: usize) -> usize {
        self.offsets[self.positions[q].scale + 1]
    }
}

/// Dense allow-matrix view of the block-causal structure.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn new(layout: &SequenceLayout) -> Self {
        let len = layout.len();
        let p = layout.positions();
        let allow = (0..len * len)
            .map(|i| p[i % len].scale <= p[i / len].scale)
            .collect();
        Self { len, allow }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allow[query * self.len + key]
    }
}
