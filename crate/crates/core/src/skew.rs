//! Activation-norm distributions, their skewness, and prune decisions.
//!
//! For every head (or MLP channel group) the L2 norm of its activation at
//! each of the `w²` window positions forms a distribution. A head whose
//! distribution is right-skewed (a few positions with unusually large norms)
//! is kept; a head with skewness `≤ 0` is pruned.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockId, Captures, Model};
use crate::nn::Tensor;

/// Which window instance(s) of the calibration batch feed the statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    /// Batch element 0, window 0.
    #[default]
    First,
    /// Per-position norms averaged over every window instance.
    Mean,
}

/// How the MLP intermediate channels are grouped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// `r` contiguous groups of `stage_dim` channels each.
    #[default]
    HeadLike,
    /// `stage_dim` contiguous groups of `r` channels each.
    PerRatio,
}

impl Grouping {
    pub fn group_size(self, stage_dim: usize, mlp_ratio: usize) -> usize {
        match self {
            Grouping::HeadLike => stage_dim,
            Grouping::PerRatio => mlp_ratio,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkewConfig {
    pub selector: Selector,
    pub grouping: Grouping,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Head,
    Group,
}

/// Norm distribution of one head or group over the window positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormVector {
    pub values: Vec<f64>,
    pub kind: UnitKind,
    /// Current (post-previous-pruning) index of the head or group.
    pub index: usize,
}

fn l2(xs: impl Iterator<Item = f32>) -> f64 {
    xs.map(|v| {
        let v = v as f64;
        v * v
    })
    .sum::<f64>()
    .sqrt()
}

fn select_instances(n: usize, selector: Selector) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::State("capture holds no window instances".into()));
    }
    Ok(match selector {
        Selector::First => vec![0],
        Selector::Mean => (0..n).collect(),
    })
}

/// Per-head norm vectors from an attention capture `[instances, w², H, D]`.
pub fn extract_norms_msa(capture: &Tensor, selector: Selector) -> Result<Vec<NormVector>> {
    let (n, t, h, d) = capture.dims4()?;
    let inst = select_instances(n, selector)?;
    let data = capture.data();
    Ok((0..h)
        .map(|head| {
            let values = (0..t)
                .map(|pos| {
                    inst.iter()
                        .map(|&i| {
                            let off = ((i * t + pos) * h + head) * d;
                            l2(data[off..off + d].iter().copied())
                        })
                        .sum::<f64>()
                        / inst.len() as f64
                })
                .collect();
            NormVector {
                values,
                kind: UnitKind::Head,
                index: head,
            }
        })
        .collect())
}

/// Per-group norm vectors from an MLP capture `[instances, w², C]`, with
/// channels split into contiguous groups of `group_size`.
pub fn extract_norms_mlp(capture: &Tensor, group_size: usize, selector: Selector) -> Result<Vec<NormVector>> {
    let (n, t, c) = capture.dims3()?;
    if group_size == 0 || c % group_size != 0 {
        return Err(Error::Config(format!(
            "{c} intermediate channels do not split into groups of {group_size}"
        )));
    }
    let inst = select_instances(n, selector)?;
    let data = capture.data();
    Ok((0..c / group_size)
        .map(|g| {
            let values = (0..t)
                .map(|pos| {
                    inst.iter()
                        .map(|&i| {
                            let off = (i * t + pos) * c + g * group_size;
                            l2(data[off..off + group_size].iter().copied())
                        })
                        .sum::<f64>()
                        / inst.len() as f64
                })
                .collect();
            NormVector {
                values,
                kind: UnitKind::Group,
                index: g,
            }
        })
        .collect())
}

/// Population skewness `m₃ / m₂^{3/2}`; 0 for a constant vector.
pub fn skewness(v: &[f64]) -> Result<f64> {
    if v.len() < 2 {
        return Err(Error::Argument(format!(
            "skewness needs at least 2 values, got {}",
            v.len()
        )));
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let max_abs = v.iter().fold(0f64, |a, x| a.max(x.abs()));
    let (mut m2, mut m3, mut m3_abs) = (0.0, 0.0, 0.0);
    for &x in v {
        let c = x - mean;
        m2 += c * c;
        m3 += c * c * c;
        m3_abs += (c * c * c).abs();
    }
    m2 /= n;
    m3 /= n;
    m3_abs /= n;
    // Bound on the rounding error of each deviation `x - mean`. Moments that
    // are indistinguishable from it are zero, so constant and symmetric
    // inputs score exactly 0.
    let noise = n * f64::EPSILON * max_abs;
    if m2.sqrt() <= noise {
        return Ok(0.0);
    }
    if m3.abs() <= 3.0 * noise * m2 + n * f64::EPSILON * m3_abs {
        return Ok(0.0);
    }
    Ok(m3 / m2.powf(1.5))
}

/// Skewness scores of one block's heads and MLP groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewReport {
    pub block: BlockId,
    /// `(current head index, s_h)`.
    pub head_skews: Vec<(usize, f64)>,
    /// `(current group index, s_g)`.
    pub group_skews: Vec<(usize, f64)>,
    pub calibration_batch: usize,
    pub group_count: usize,
    pub group_size: usize,
    pub selector: Selector,
    /// Keep-sets of the block when the activations were captured.
    pub basis_heads: Vec<usize>,
    pub basis_channels: Vec<usize>,
}

impl SkewReport {
    /// Line-oriented rendering with scores to 6 decimals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "block stage={} block={} calibration_batch={} selector={:?} heads={} groups={} group_size={}",
            self.block.stage,
            self.block.block,
            self.calibration_batch,
            self.selector,
            self.head_skews.len(),
            self.group_count,
            self.group_size
        );
        for (i, v) in &self.head_skews {
            let _ = writeln!(s, "head {i} original={} skew={v:.6}", self.basis_heads[*i]);
        }
        for (i, v) in &self.group_skews {
            let _ = writeln!(s, "group {i} skew={v:.6}");
        }
        s
    }
}

/// Builds the report for `block` from captured activations.
pub fn block_report(model: &Model, captures: &Captures, block: BlockId, calibration_batch: usize, cfg: &SkewConfig) -> Result<SkewReport> {
    let st = model.prune_state(block)?;
    let mc = model.config();
    let group_size = cfg.grouping.group_size(mc.stage_dim(block.stage), mc.mlp_ratio);
    let head_skews = if st.msa_is_identity {
        Vec::new()
    } else {
        let a = captures
            .msa
            .get(&block)
            .ok_or_else(|| Error::State(format!("no attention capture for {block}")))?;
        if a.shape()[2] != st.num_heads() {
            return Err(Error::State(format!("attention capture for {block} is stale")));
        }
        extract_norms_msa(a, cfg.selector)?
            .iter()
            .map(|nv| Ok((nv.index, skewness(&nv.values)?)))
            .collect::<Result<_>>()?
    };
    let group_skews: Vec<(usize, f64)> = if st.mlp_is_identity {
        Vec::new()
    } else {
        let z = captures
            .mlp
            .get(&block)
            .ok_or_else(|| Error::State(format!("no MLP capture for {block}")))?;
        if z.shape()[2] != st.num_channels() {
            return Err(Error::State(format!("MLP capture for {block} is stale")));
        }
        extract_norms_mlp(z, group_size, cfg.selector)?
            .iter()
            .map(|nv| Ok((nv.index, skewness(&nv.values)?)))
            .collect::<Result<_>>()?
    };
    Ok(SkewReport {
        block,
        group_count: group_skews.len(),
        head_skews,
        group_skews,
        calibration_batch,
        group_size,
        selector: cfg.selector,
        basis_heads: st.kept_heads.clone(),
        basis_channels: st.kept_channels.clone(),
    })
}

/// Heads and groups of one block selected for removal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneDecision {
    pub block: BlockId,
    pub heads_to_prune: Vec<usize>,
    pub groups_to_prune: Vec<usize>,
    pub group_size: usize,
    pub basis_heads: Vec<usize>,
    pub basis_channels: Vec<usize>,
}

impl PruneDecision {
    /// Every current head is pruned, so the attention branch becomes the
    /// identity map.
    pub fn replaces_msa(&self) -> bool {
        !self.basis_heads.is_empty() && self.heads_to_prune.len() == self.basis_heads.len()
    }

    pub fn replaces_mlp(&self) -> bool {
        !self.basis_channels.is_empty() && self.groups_to_prune.len() * self.group_size == self.basis_channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads_to_prune.is_empty() && self.groups_to_prune.is_empty()
    }
}

/// Prunes every head and group with skewness `≤ 0`.
pub fn decide(report: &SkewReport) -> PruneDecision {
    let non_positive = |v: &[(usize, f64)]| v.iter().filter(|(_, s)| *s <= 0.0).map(|(i, _)| *i).collect();
    PruneDecision {
        block: report.block,
        heads_to_prune: non_positive(&report.head_skews),
        groups_to_prune: non_positive(&report.group_skews),
        group_size: report.group_size,
        basis_heads: report.basis_heads.clone(),
        basis_channels: report.basis_channels.clone(),
    }
}
