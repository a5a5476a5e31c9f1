//! Parameter, FLOP and memory accounting.
//!
//! FLOP rules (a specification of the counter, not a measurement):
//! - linear layer over `T` tokens: `2·T·in·out` (bias included)
//! - attention: both `w²×w²×D` products (`QKᵀ` and `A·V`), `2·w²·w²·D` each,
//!   per window per head
//! - per element: layer norm 5, GeLU 8, softmax 5
//!
//! Residual additions, scaling, bias-table lookups, masking, embedding
//! lookups, fusion and pooling are not counted.

use serde::{Deserialize, Serialize};

use super::{BlockId, Model};

/// Persistent non-parameter buffers held by the model. Shift masks and the
/// relative-position index are derived from the config on every forward.
pub const BUFFER_COUNT: usize = 0;

/// FLOPs per component for one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    pub patch_embed: u64,
    pub attention: u64,
    pub mlp: u64,
    pub norms: u64,
    pub merge: u64,
    pub head: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.patch_embed + self.attention + self.mlp + self.norms + self.merge + self.head
    }
}

const LN_PER_ELEM: u64 = 5;
const GELU_PER_ELEM: u64 = 8;
const SOFTMAX_PER_ELEM: u64 = 5;

fn linear(tokens: u64, inp: u64, out: u64) -> u64 {
    2 * tokens * inp * out
}

impl Model {
    pub fn count_params(&self) -> usize {
        self.params().values().map(|t| t.numel()).sum()
    }

    pub fn buffer_count(&self) -> usize {
        BUFFER_COUNT
    }

    /// `4 · (parameters + buffers)` bytes.
    pub fn memory_footprint_bytes(&self) -> usize {
        4 * (self.count_params() + self.buffer_count())
    }

    pub fn count_flops(&self, batch: usize) -> u64 {
        self.flop_breakdown(batch).total()
    }

    pub fn flop_breakdown(&self, batch: usize) -> FlopBreakdown {
        let cfg = self.config();
        let batch = batch as u64;
        let mut fb = FlopBreakdown::default();

        let t0 = (cfg.grid(0) * cfg.grid(0)) as u64;
        let e0 = cfg.embed_dim as u64;
        let patch_in = (cfg.in_channels * cfg.patch_size * cfg.patch_size) as u64;
        fb.patch_embed = linear(t0, patch_in, e0);
        fb.norms += LN_PER_ELEM * t0 * e0;

        let w2 = cfg.tokens_per_window() as u64;
        for s in 0..cfg.num_stages() {
            let tokens = (cfg.grid(s) * cfg.grid(s)) as u64;
            let e = cfg.stage_dim(s) as u64;
            let d = cfg.head_dim(s) as u64;
            let windows = cfg.windows_per_image(s) as u64;
            for b in 0..cfg.depths[s] {
                let st = self
                    .prune_state(BlockId::new(s, b))
                    .expect("block exists for config");
                fb.norms += 2 * LN_PER_ELEM * tokens * e;
                if !st.msa_is_identity {
                    let h = st.num_heads() as u64;
                    fb.attention += 3 * linear(tokens, e, h * d);
                    fb.attention += windows * h * 2 * (2 * w2 * w2 * d);
                    fb.attention += SOFTMAX_PER_ELEM * windows * h * w2 * w2;
                    fb.attention += linear(tokens, h * d, e);
                }
                if !st.mlp_is_identity {
                    let c = st.num_channels() as u64;
                    fb.mlp += linear(tokens, e, c) + GELU_PER_ELEM * tokens * c + linear(tokens, c, e);
                }
            }
            if s + 1 < cfg.num_stages() {
                let merged = tokens / 4;
                fb.merge += LN_PER_ELEM * merged * 4 * e + linear(merged, 4 * e, 2 * e);
            }
        }
        let last = cfg.num_stages() - 1;
        let tl = (cfg.grid(last) * cfg.grid(last)) as u64;
        let f = cfg.final_dim() as u64;
        fb.norms += LN_PER_ELEM * tl * f;
        fb.head = linear(1, f, cfg.num_classes as u64);

        FlopBreakdown {
            patch_embed: fb.patch_embed * batch,
            attention: fb.attention * batch,
            mlp: fb.mlp * batch,
            norms: fb.norms * batch,
            merge: fb.merge * batch,
            head: fb.head * batch,
        }
    }
}
