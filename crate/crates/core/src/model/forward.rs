use std::collections::BTreeMap;

use super::window;
use super::{names, BlockId, Model, TabularInput};
use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var};

/// Graph handles for every model parameter.
pub type ParamVars = BTreeMap<String, Var>;

/// Activations recorded during a forward pass.
///
/// `msa[id]` is the per-head attention output (before the output
/// projection), shaped `[window_instances, w², heads, head_dim]`. `mlp[id]`
/// is the post-GeLU intermediate, shaped `[window_instances, w², channels]`.
/// Window instances enumerate `(batch element, window)` in row-major order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Captures {
    pub msa: BTreeMap<BlockId, Tensor>,
    pub mlp: BTreeMap<BlockId, Tensor>,
}

struct Ctx<'a> {
    pv: &'a ParamVars,
    batch: usize,
    capture: &'a [BlockId],
    captures: Captures,
}

fn lookup(pv: &ParamVars, name: &str) -> Result<Var> {
    pv.get(name)
        .copied()
        .ok_or_else(|| Error::State(format!("parameter {name} not bound")))
}

impl Ctx<'_> {
    fn p(&self, name: &str) -> Result<Var> {
        lookup(self.pv, name)
    }
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_broadcast(y, b),
        None => Ok(y),
    }
}

/// Unfolds `[B, C, H, W]` images into `[B·patches, C·p·p]` patch rows with
/// feature order `(channel, dy, dx)`.
fn unfold_patches(images: &Tensor, p: usize) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4()?;
    let (gh, gw) = (h / p, w / p);
    let src = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for bi in 0..b {
        for pr in 0..gh {
            for pc in 0..gw {
                for ch in 0..c {
                    for dy in 0..p {
                        let row = ((bi * c + ch) * h + pr * p + dy) * w + pc * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b * gh * gw, c * p * p], out)
}

impl Model {
    /// Registers every parameter in `g`. Parameters of frozen stages become
    /// constants so they never receive gradients.
    pub fn bind(&self, g: &mut Graph) -> ParamVars {
        self.params()
            .iter()
            .map(|(name, t)| {
                let v = if self.is_frozen(name) {
                    g.constant(t.clone())
                } else {
                    g.param(t.clone())
                };
                (name.clone(), v)
            })
            .collect()
    }

    /// Inference forward pass. Returns `[B, num_classes]` logits and the
    /// activations of the blocks listed in `capture`.
    pub fn forward(&self, images: &Tensor, tab: &[TabularInput], capture: &[BlockId]) -> Result<(Tensor, Captures)> {
        let mut g = Graph::inference();
        let pv = self.bind(&mut g);
        let (logits, caps) = self.forward_graph(&mut g, &pv, images, tab, capture)?;
        Ok((g.take_value(logits), caps))
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        images: &Tensor,
        tab: &[TabularInput],
        capture: &[BlockId],
    ) -> Result<(Var, Captures)> {
        let cfg = self.config();
        let (b, c, h, w) = images.dims4()?;
        if c != cfg.in_channels || h != cfg.image_size || w != cfg.image_size {
            return Err(Error::Dimension(format!(
                "images {:?} do not match configured {}×{}×{}",
                images.shape(),
                cfg.in_channels,
                cfg.image_size,
                cfg.image_size
            )));
        }
        if tab.len() != b {
            return Err(Error::Dimension(format!(
                "{b} images but {} tabular rows",
                tab.len()
            )));
        }
        for (i, t) in tab.iter().enumerate() {
            for (id, vocab, field) in [
                (t.sex_id, cfg.sex_vocab, "sex"),
                (t.age_bucket_id, cfg.age_vocab, "age bucket"),
                (t.localization_id, cfg.loc_vocab, "localization"),
            ] {
                if id >= vocab {
                    return Err(Error::Index(format!(
                        "row {i}: {field} id {id} outside vocabulary of {vocab}"
                    )));
                }
            }
        }
        if let Some(bad) = capture.iter().find(|id| self.prune_state(**id).is_err()) {
            return Err(Error::Index(format!("cannot capture {bad}: no such block")));
        }

        let mut ctx = Ctx {
            pv,
            batch: b,
            capture,
            captures: Captures::default(),
        };

        let patches = g.constant(unfold_patches(images, cfg.patch_size)?);
        let x = linear(g, patches, ctx.p(names::PATCH_W)?, Some(ctx.p(names::PATCH_B)?))?;
        let mut x = g.layer_norm(x, ctx.p(names::PATCH_NORM_W)?, ctx.p(names::PATCH_NORM_B)?, cfg.layer_norm_eps)?;

        for s in 0..cfg.num_stages() {
            for blk in 0..cfg.depths[s] {
                x = self.block_forward(g, &mut ctx, x, BlockId::new(s, blk))?;
            }
            if s + 1 < cfg.num_stages() {
                x = self.merge_forward(g, &ctx, x, s)?;
            }
        }

        let f = cfg.final_dim();
        let last = cfg.num_stages() - 1;
        let tokens = cfg.grid(last) * cfg.grid(last);
        let x = g.layer_norm(x, ctx.p(names::NORM_W)?, ctx.p(names::NORM_B)?, cfg.layer_norm_eps)?;
        let x = g.reshape(x, &[b, tokens, f])?;
        let img = g.mean_axis1(x)?;

        let [w_img, w_sex, w_age, w_loc] = cfg.fusion_weights;
        let mut fused = g.scale(img, w_img as f32)?;
        let ids: [(Vec<usize>, &str, f64); 3] = [
            (tab.iter().map(|t| t.sex_id).collect(), names::SEX_EMB, w_sex),
            (tab.iter().map(|t| t.age_bucket_id).collect(), names::AGE_EMB, w_age),
            (tab.iter().map(|t| t.localization_id).collect(), names::LOC_EMB, w_loc),
        ];
        for (idx, table, weight) in ids {
            let e = g.gather_rows(ctx.p(table)?, &idx, &[b, f])?;
            let e = g.scale(e, weight as f32)?;
            fused = g.add(fused, e)?;
        }
        let logits = linear(g, fused, ctx.p(names::HEAD_W)?, Some(ctx.p(names::HEAD_B)?))?;
        Ok((logits, ctx.captures))
    }

    fn block_forward(&self, g: &mut Graph, ctx: &mut Ctx<'_>, x: Var, id: BlockId) -> Result<Var> {
        let cfg = self.config();
        let st = self.prune_state(id)?;
        let s = id.stage;
        let (e, grid, w) = (cfg.stage_dim(s), cfg.grid(s), cfg.window_size);
        let t = w * w;
        let shift = cfg.shift(s, id.block);
        let batch = ctx.batch;
        let n_tok = batch * grid * grid;
        let nwin = batch * cfg.windows_per_image(s);
        let eps = cfg.layer_norm_eps;
        let want = ctx.capture.contains(&id);
        let pv = ctx.pv;
        let p = |leaf: &str| lookup(pv, &names::block(id, leaf));

        if g.shape(x) != [n_tok, e] {
            return Err(Error::Dimension(format!(
                "{id} expects {n_tok}×{e} tokens, got {:?}",
                g.shape(x)
            )));
        }
        let part = window::partition_index(batch, grid, w, shift)?;

        let h = g.layer_norm(x, p(names::NORM1_W)?, p(names::NORM1_B)?, eps)?;
        let attn_out = if st.msa_is_identity {
            h
        } else {
            let heads = st.num_heads();
            let d = cfg.head_dim(s);
            let hw = g.gather_rows(h, &part, &[n_tok, e])?;
            let q = linear(g, hw, p(names::Q_W)?, Some(p(names::Q_B)?))?;
            let q = g.scale(q, 1.0 / (d as f32).sqrt())?;
            let k = linear(g, hw, p(names::K_W)?, Some(p(names::K_B)?))?;
            let v = linear(g, hw, p(names::V_W)?, Some(p(names::V_B)?))?;
            let split = |g: &mut Graph, m: Var| -> Result<Var> {
                let m = g.reshape(m, &[nwin, t, heads, d])?;
                let m = g.permute(m, &[0, 2, 1, 3])?;
                g.reshape(m, &[nwin * heads, t, d])
            };
            let (qh, kh, vh) = (split(g, q)?, split(g, k)?, split(g, v)?);
            let mut scores = g.bmm(qh, kh, true)?;
            if cfg.use_rel_pos_bias {
                let table = p(names::REL_POS)?;
                let rel = g.gather_rows(table, &window::relative_position_index(w), &[t * t, heads])?;
                let rel = g.permute(rel, &[1, 0])?;
                let rel = g.reshape(rel, &[heads, t, t])?;
                let sc = g.reshape(scores, &[nwin, heads, t, t])?;
                scores = g.add_broadcast(sc, rel)?;
            }
            if shift > 0 {
                let mask = window::shift_mask(grid, w, shift);
                let mut full = Vec::with_capacity(nwin * heads * t * t);
                for _ in 0..batch {
                    for win in mask.chunks_exact(t * t) {
                        for _ in 0..heads {
                            full.extend_from_slice(win);
                        }
                    }
                }
                let m = g.constant(Tensor::new(vec![nwin, heads, t, t], full)?);
                let sc = g.reshape(scores, &[nwin, heads, t, t])?;
                scores = g.add(sc, m)?;
            }
            let scores = g.reshape(scores, &[nwin * heads, t, t])?;
            let attn = g.softmax(scores)?;
            let ctx_h = g.bmm(attn, vh, false)?;
            let ctx_h = g.reshape(ctx_h, &[nwin, heads, t, d])?;
            let ctx_h = g.permute(ctx_h, &[0, 2, 1, 3])?;
            if want {
                ctx.captures.msa.insert(id, g.value(ctx_h).clone());
            }
            let merged = g.reshape(ctx_h, &[n_tok, heads * d])?;
            let out = linear(g, merged, p(names::PROJ_W)?, Some(p(names::PROJ_B)?))?;
            g.gather_rows(out, &window::invert(&part), &[n_tok, e])?
        };
        let z_hat = g.add(attn_out, x)?;

        let h2 = g.layer_norm(z_hat, p(names::NORM2_W)?, p(names::NORM2_B)?, eps)?;
        let mlp_out = if st.mlp_is_identity {
            h2
        } else {
            let z1 = linear(g, h2, p(names::FC1_W)?, Some(p(names::FC1_B)?))?;
            let a = g.gelu(z1)?;
            if want {
                let ch = st.num_channels();
                let arranged = window::gather(g.value(a).data(), ch, &part);
                ctx.captures.mlp.insert(id, Tensor::new(vec![nwin, t, ch], arranged)?);
            }
            linear(g, a, p(names::FC2_W)?, Some(p(names::FC2_B)?))?
        };
        g.add(mlp_out, z_hat)
    }

    fn merge_forward(&self, g: &mut Graph, ctx: &Ctx<'_>, x: Var, s: usize) -> Result<Var> {
        let cfg = self.config();
        let (e, grid) = (cfg.stage_dim(s), cfg.grid(s));
        let out_tokens = ctx.batch * (grid / 2) * (grid / 2);
        let idx = window::merge_index(ctx.batch, grid);
        let cat = g.gather_rows(x, &idx, &[out_tokens, 4 * e])?;
        let cat = g.layer_norm(
            cat,
            ctx.p(&names::merge(s, "norm.weight"))?,
            ctx.p(&names::merge(s, "norm.bias"))?,
            cfg.layer_norm_eps,
        )?;
        linear(g, cat, ctx.p(&names::merge(s, "reduction.weight"))?, None)
    }

    /// Output of one encoder block for `[B·grid², stage_dim]` tokens, run
    /// outside the full model.
    pub fn block_output(&self, id: BlockId, tokens: &Tensor, batch: usize) -> Result<Tensor> {
        let mut g = Graph::inference();
        let pv = self.bind(&mut g);
        let mut ctx = Ctx {
            pv: &pv,
            batch,
            capture: &[],
            captures: Captures::default(),
        };
        let x = g.constant(tokens.clone());
        let y = self.block_forward(&mut g, &mut ctx, x, id)?;
        Ok(g.take_value(y))
    }
}
