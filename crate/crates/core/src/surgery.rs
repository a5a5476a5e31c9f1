//! Structural edits: removing attention heads and MLP channel groups.
//!
//! Every edit materializes new, smaller tensors. Kept indices stay in
//! ascending original order. A sublayer whose keep-set becomes empty is
//! replaced by the identity on its input: its tensors are deleted and the
//! block computes `LN(x) + x` for that branch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{names, BlockId, Model};
use crate::nn::Tensor;
use crate::skew::PruneDecision;

fn keep_complement(total: usize, drop: &[usize], what: &str, id: BlockId) -> Result<Vec<usize>> {
    if let Some(&bad) = drop.iter().find(|&&i| i >= total) {
        return Err(Error::Index(format!("{what} {bad} out of range: {id} has {total}")));
    }
    Ok((0..total).filter(|i| !drop.contains(i)).collect())
}

fn select_entries(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let data = idx.iter().map(|&i| t.data()[i]).collect();
    Tensor::new(vec![idx.len()], data)
}

/// Removes the listed heads (current indices) from block `id`.
pub fn prune_heads(model: &mut Model, id: BlockId, heads_to_prune: &[usize]) -> Result<()> {
    let st = model.prune_state(id)?.clone();
    let keep = keep_complement(st.num_heads(), heads_to_prune, "head", id)?;
    if keep.len() == st.num_heads() {
        return Ok(());
    }
    let d = model.config().head_dim(id.stage);
    let params = model.params_mut();
    if keep.is_empty() {
        for leaf in names::MSA_LEAVES {
            params.remove(&names::block(id, leaf));
        }
    } else {
        let cols: Vec<usize> = keep.iter().flat_map(|&h| h * d..(h + 1) * d).collect();
        let mut edit = |leaf: &str, f: &dyn Fn(&Tensor) -> Result<Tensor>| -> Result<()> {
            let name = names::block(id, leaf);
            if let Some(t) = params.get_mut(&name) {
                *t = f(t)?;
            }
            Ok(())
        };
        for w in [names::Q_W, names::K_W, names::V_W] {
            edit(w, &|t| t.select_columns(&cols))?;
        }
        for b in [names::Q_B, names::K_B, names::V_B] {
            edit(b, &|t| select_entries(t, &cols))?;
        }
        edit(names::PROJ_W, &|t| t.select_rows(&cols))?;
        edit(names::REL_POS, &|t| t.select_columns(&keep))?;
    }
    let st_mut = model.prune_state_mut(id)?;
    st_mut.kept_heads = keep.iter().map(|&h| st.kept_heads[h]).collect();
    st_mut.msa_is_identity = st_mut.kept_heads.is_empty();
    Ok(())
}

/// Removes the listed MLP groups (current indices, `group_size` contiguous
/// channels each) from block `id`. `b₂` is kept unless every group goes.
pub fn prune_mlp(model: &mut Model, id: BlockId, groups_to_prune: &[usize], group_size: usize) -> Result<()> {
    let groups = model.mlp_group_count(id, group_size)?;
    let st = model.prune_state(id)?.clone();
    let keep_groups = keep_complement(groups, groups_to_prune, "group", id)?;
    if keep_groups.len() == groups {
        return Ok(());
    }
    let keep: Vec<usize> = keep_groups
        .iter()
        .flat_map(|&g| g * group_size..(g + 1) * group_size)
        .collect();
    let params = model.params_mut();
    if keep.is_empty() {
        for leaf in names::MLP_LEAVES {
            params.remove(&names::block(id, leaf));
        }
    } else {
        let w1 = names::block(id, names::FC1_W);
        let b1 = names::block(id, names::FC1_B);
        let w2 = names::block(id, names::FC2_W);
        let t = params[&w1].select_columns(&keep)?;
        params.insert(w1, t);
        let t = select_entries(&params[&b1], &keep)?;
        params.insert(b1, t);
        let t = params[&w2].select_rows(&keep)?;
        params.insert(w2, t);
    }
    let st_mut = model.prune_state_mut(id)?;
    st_mut.kept_channels = keep.iter().map(|&c| st.kept_channels[c]).collect();
    st_mut.mlp_is_identity = st_mut.kept_channels.is_empty();
    Ok(())
}

/// Before/after record of one applied decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneAudit {
    pub block: BlockId,
    pub heads_before: usize,
    pub heads_after: usize,
    pub channels_before: usize,
    pub channels_after: usize,
    /// Original ids of the heads removed by this edit.
    pub pruned_heads: Vec<usize>,
    pub pruned_channel_count: usize,
    pub msa_is_identity: bool,
    pub mlp_is_identity: bool,
    pub params_before: usize,
    pub params_after: usize,
    pub param_delta: usize,
    pub flops_before: u64,
    pub flops_after: u64,
    pub flop_delta: u64,
}

/// Applies a decision: heads first, then MLP groups.
///
/// The decision must have been made against the block's current structure;
/// a decision whose basis no longer matches is rejected as stale.
pub fn apply_decision(model: &mut Model, decision: &PruneDecision) -> Result<PruneAudit> {
    let id = decision.block;
    let st = model.prune_state(id)?.clone();
    if st.kept_heads != decision.basis_heads || st.kept_channels != decision.basis_channels {
        return Err(Error::State(format!(
            "stale decision for {id}: block structure changed since it was made"
        )));
    }
    let params_before = model.count_params();
    let flops_before = model.count_flops(1);
    prune_heads(model, id, &decision.heads_to_prune)?;
    prune_mlp(model, id, &decision.groups_to_prune, decision.group_size)?;
    let after = model.prune_state(id)?;
    let params_after = model.count_params();
    let flops_after = model.count_flops(1);
    Ok(PruneAudit {
        block: id,
        heads_before: st.num_heads(),
        heads_after: after.num_heads(),
        channels_before: st.num_channels(),
        channels_after: after.num_channels(),
        pruned_heads: st
            .kept_heads
            .iter()
            .filter(|h| !after.kept_heads.contains(h))
            .copied()
            .collect(),
        pruned_channel_count: st.num_channels() - after.num_channels(),
        msa_is_identity: after.msa_is_identity,
        mlp_is_identity: after.mlp_is_identity,
        params_before,
        params_after,
        param_delta: params_before - params_after,
        flops_before,
        flops_after,
        flop_delta: flops_before - flops_after,
    })
}
