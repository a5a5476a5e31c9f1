//! Multimodal classifier: a shifted-window attention image encoder whose
//! pooled feature is fused with lookup-embedded tabular metadata by a fixed
//! weighted sum, followed by a linear classifier.

mod config;
mod cost;
mod forward;
pub mod window;

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use config::{BlockId, ModelConfig};
pub use cost::{FlopBreakdown, BUFFER_COUNT};
pub use forward::{Captures, ParamVars};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng;

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// Metadata ids of one sample. Id 0 means unknown in every field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TabularInput {
    pub sex_id: usize,
    pub age_bucket_id: usize,
    pub localization_id: usize,
}

/// Structural state of one encoder block relative to its unpruned shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPruneState {
    /// Original indices of the surviving heads, ascending.
    pub kept_heads: Vec<usize>,
    /// Original indices of the surviving MLP intermediate channels, ascending.
    pub kept_channels: Vec<usize>,
    pub msa_is_identity: bool,
    pub mlp_is_identity: bool,
}

impl BlockPruneState {
    pub fn full(heads: usize, channels: usize) -> Self {
        BlockPruneState {
            kept_heads: (0..heads).collect(),
            kept_channels: (0..channels).collect(),
            msa_is_identity: false,
            mlp_is_identity: false,
        }
    }

    pub fn num_heads(&self) -> usize {
        self.kept_heads.len()
    }

    pub fn num_channels(&self) -> usize {
        self.kept_channels.len()
    }

    /// Checks ordering, bounds and the identity flags against the
    /// unpruned head and channel counts.
    pub fn validate(&self, heads: usize, channels: usize) -> Result<()> {
        let ascending = |v: &[usize], bound: usize| v.windows(2).all(|p| p[0] < p[1]) && v.iter().all(|&i| i < bound);
        if !ascending(&self.kept_heads, heads) || !ascending(&self.kept_channels, channels) {
            return Err(Error::State("kept indices must be strictly increasing and in range".into()));
        }
        if self.msa_is_identity != self.kept_heads.is_empty() || self.mlp_is_identity != self.kept_channels.is_empty() {
            return Err(Error::State("identity flags disagree with keep-sets".into()));
        }
        Ok(())
    }
}

/// How a named parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
    prune: Vec<Vec<BlockPruneState>>,
    frozen_stages: BTreeSet<usize>,
}

pub(crate) mod names {
    use super::BlockId;

    pub fn block(id: BlockId, leaf: &str) -> String {
        format!("{}.{leaf}", id.prefix())
    }

    pub const NORM1_W: &str = "norm1.weight";
    pub const NORM1_B: &str = "norm1.bias";
    pub const Q_W: &str = "attn.q.weight";
    pub const Q_B: &str = "attn.q.bias";
    pub const K_W: &str = "attn.k.weight";
    pub const K_B: &str = "attn.k.bias";
    pub const V_W: &str = "attn.v.weight";
    pub const V_B: &str = "attn.v.bias";
    pub const PROJ_W: &str = "attn.proj.weight";
    pub const PROJ_B: &str = "attn.proj.bias";
    pub const REL_POS: &str = "attn.rel_pos_bias";
    pub const NORM2_W: &str = "norm2.weight";
    pub const NORM2_B: &str = "norm2.bias";
    pub const FC1_W: &str = "mlp.fc1.weight";
    pub const FC1_B: &str = "mlp.fc1.bias";
    pub const FC2_W: &str = "mlp.fc2.weight";
    pub const FC2_B: &str = "mlp.fc2.bias";

    pub const MSA_LEAVES: [&str; 9] = [Q_W, Q_B, K_W, K_B, V_W, V_B, PROJ_W, PROJ_B, REL_POS];
    pub const MLP_LEAVES: [&str; 4] = [FC1_W, FC1_B, FC2_W, FC2_B];

    pub fn merge(stage: usize, leaf: &str) -> String {
        format!("stages.{stage}.merge.{leaf}")
    }

    pub const PATCH_W: &str = "patch_embed.proj.weight";
    pub const PATCH_B: &str = "patch_embed.proj.bias";
    pub const PATCH_NORM_W: &str = "patch_embed.norm.weight";
    pub const PATCH_NORM_B: &str = "patch_embed.norm.bias";
    pub const NORM_W: &str = "norm.weight";
    pub const NORM_B: &str = "norm.bias";
    pub const SEX_EMB: &str = "tabular.sex.weight";
    pub const AGE_EMB: &str = "tabular.age.weight";
    pub const LOC_EMB: &str = "tabular.localization.weight";
    pub const HEAD_W: &str = "head.weight";
    pub const HEAD_B: &str = "head.bias";
}

/// Shapes of every parameter of an unpruned model with `config`.
fn param_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    use names::*;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    let e0 = config.embed_dim;
    let patch_in = config.in_channels * config.patch_size * config.patch_size;
    push(PATCH_W.into(), vec![patch_in, e0], Init::TruncNormal);
    push(PATCH_B.into(), vec![e0], Init::Zeros);
    push(PATCH_NORM_W.into(), vec![e0], Init::Ones);
    push(PATCH_NORM_B.into(), vec![e0], Init::Zeros);
    for s in 0..config.num_stages() {
        let e = config.stage_dim(s);
        let hd = config.num_heads[s] * config.head_dim(s);
        let c = config.mlp_ratio * e;
        for b in 0..config.depths[s] {
            let id = BlockId::new(s, b);
            push(block(id, NORM1_W), vec![e], Init::Ones);
            push(block(id, NORM1_B), vec![e], Init::Zeros);
            for (w, bias) in [(Q_W, Q_B), (K_W, K_B), (V_W, V_B)] {
                push(block(id, w), vec![e, hd], Init::TruncNormal);
                push(block(id, bias), vec![hd], Init::Zeros);
            }
            push(block(id, PROJ_W), vec![hd, e], Init::TruncNormal);
            push(block(id, PROJ_B), vec![e], Init::Zeros);
            if config.use_rel_pos_bias {
                push(
                    block(id, REL_POS),
                    vec![config.rel_pos_table_len(), config.num_heads[s]],
                    Init::TruncNormal,
                );
            }
            push(block(id, NORM2_W), vec![e], Init::Ones);
            push(block(id, NORM2_B), vec![e], Init::Zeros);
            push(block(id, FC1_W), vec![e, c], Init::TruncNormal);
            push(block(id, FC1_B), vec![c], Init::Zeros);
            push(block(id, FC2_W), vec![c, e], Init::TruncNormal);
            push(block(id, FC2_B), vec![e], Init::Zeros);
        }
        if s + 1 < config.num_stages() {
            push(merge(s, "norm.weight"), vec![4 * e], Init::Ones);
            push(merge(s, "norm.bias"), vec![4 * e], Init::Zeros);
            push(merge(s, "reduction.weight"), vec![4 * e, 2 * e], Init::TruncNormal);
        }
    }
    let f = config.final_dim();
    push(NORM_W.into(), vec![f], Init::Ones);
    push(NORM_B.into(), vec![f], Init::Zeros);
    push(SEX_EMB.into(), vec![config.sex_vocab, f], Init::TruncNormal);
    push(AGE_EMB.into(), vec![config.age_vocab, f], Init::TruncNormal);
    push(LOC_EMB.into(), vec![config.loc_vocab, f], Init::TruncNormal);
    push(HEAD_W.into(), vec![f, config.num_classes], Init::TruncNormal);
    push(HEAD_B.into(), vec![config.num_classes], Init::Zeros);
    out
}

fn init_tensor(seed: u64, name: &str, shape: &[usize], init: Init) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, 1.0),
        Init::TruncNormal => {
            let mut rng = rng::stream(rng::derive_label(seed, name));
            let normal = Normal::new(0.0, INIT_STD).expect("valid std");
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| loop {
                    let v: f64 = normal.sample(&mut rng);
                    if v.abs() <= 2.0 * INIT_STD {
                        break v as f32;
                    }
                })
                .collect();
            Tensor::new(shape.to_vec(), data).expect("layout shape")
        }
    }
}

impl Model {
    /// A freshly initialized, unpruned model.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = param_layout(&config)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = init_tensor(config.seed, &name, &shape, init);
                (name, t)
            })
            .collect();
        let prune = (0..config.num_stages())
            .map(|s| {
                (0..config.depths[s])
                    .map(|_| BlockPruneState::full(config.num_heads[s], config.mlp_ratio * config.stage_dim(s)))
                    .collect()
            })
            .collect();
        Ok(Model {
            config,
            params,
            prune,
            frozen_stages: BTreeSet::new(),
        })
    }

    /// Assembles a model from parts, checking every tensor against the
    /// shapes implied by `config` and `prune`.
    pub fn from_parts(
        config: ModelConfig,
        params: BTreeMap<String, Tensor>,
        prune: Vec<Vec<BlockPruneState>>,
        frozen_stages: BTreeSet<usize>,
    ) -> Result<Self> {
        config.validate()?;
        let model = Model {
            config,
            params,
            prune,
            frozen_stages,
        };
        model.check_consistency()?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))
    }

    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn prune_state(&self, id: BlockId) -> Result<&BlockPruneState> {
        self.prune
            .get(id.stage)
            .and_then(|s| s.get(id.block))
            .ok_or_else(|| Error::Index(format!("no {id} in this model")))
    }

    pub(crate) fn prune_state_mut(&mut self, id: BlockId) -> Result<&mut BlockPruneState> {
        self.prune
            .get_mut(id.stage)
            .and_then(|s| s.get_mut(id.block))
            .ok_or_else(|| Error::Index(format!("no {id} in this model")))
    }

    pub fn prune_states(&self) -> &[Vec<BlockPruneState>] {
        &self.prune
    }

    pub fn frozen_stages(&self) -> &BTreeSet<usize> {
        &self.frozen_stages
    }

    pub fn freeze_stage(&mut self, stage: usize) -> Result<()> {
        if stage >= self.config.num_stages() {
            return Err(Error::Config(format!("no stage {stage} to freeze")));
        }
        self.frozen_stages.insert(stage);
        Ok(())
    }

    /// Whether the named parameter belongs to a frozen stage.
    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen_stages
            .iter()
            .any(|s| name.starts_with(&format!("stages.{s}.")))
    }

    pub fn block_ids(&self) -> Vec<BlockId> {
        self.config.block_ids()
    }

    /// Number of MLP groups of `group_size` channels the block currently has.
    pub fn mlp_group_count(&self, id: BlockId, group_size: usize) -> Result<usize> {
        let c = self.prune_state(id)?.num_channels();
        if group_size == 0 || c % group_size != 0 {
            return Err(Error::Config(format!(
                "{c} intermediate channels of {id} do not split into groups of {group_size}"
            )));
        }
        Ok(c / group_size)
    }

    /// Expected shape of every parameter under the current prune state.
    pub fn expected_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut shapes: BTreeMap<String, Vec<usize>> = param_layout(&self.config)
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        for id in self.block_ids() {
            let st = &self.prune[id.stage][id.block];
            let d = self.config.head_dim(id.stage);
            let hd = st.num_heads() * d;
            let c = st.num_channels();
            if st.msa_is_identity {
                for leaf in names::MSA_LEAVES {
                    shapes.remove(&names::block(id, leaf));
                }
            } else {
                for leaf in [names::Q_W, names::K_W, names::V_W] {
                    shapes.get_mut(&names::block(id, leaf)).expect("layout")[1] = hd;
                }
                for leaf in [names::Q_B, names::K_B, names::V_B] {
                    shapes.get_mut(&names::block(id, leaf)).expect("layout")[0] = hd;
                }
                shapes.get_mut(&names::block(id, names::PROJ_W)).expect("layout")[0] = hd;
                if let Some(t) = shapes.get_mut(&names::block(id, names::REL_POS)) {
                    t[1] = st.num_heads();
                }
            }
            if st.mlp_is_identity {
                for leaf in names::MLP_LEAVES {
                    shapes.remove(&names::block(id, leaf));
                }
            } else {
                shapes.get_mut(&names::block(id, names::FC1_W)).expect("layout")[1] = c;
                shapes.get_mut(&names::block(id, names::FC1_B)).expect("layout")[0] = c;
                shapes.get_mut(&names::block(id, names::FC2_W)).expect("layout")[0] = c;
            }
        }
        shapes
    }

    /// Verifies parameter names and shapes against config + prune state.
    pub fn check_consistency(&self) -> Result<()> {
        if self.prune.len() != self.config.num_stages()
            || self.prune.iter().zip(&self.config.depths).any(|(p, &d)| p.len() != d)
        {
            return Err(Error::State("prune state does not match the stage layout".into()));
        }
        for id in self.block_ids() {
            self.prune[id.stage][id.block].validate(
                self.config.num_heads[id.stage],
                self.config.mlp_ratio * self.config.stage_dim(id.stage),
            )?;
        }
        if let Some(&s) = self.frozen_stages.iter().find(|&&s| s >= self.config.num_stages()) {
            return Err(Error::State(format!("frozen stage {s} does not exist")));
        }
        let expected = self.expected_shapes();
        for (name, shape) in &expected {
            match self.params.get(name) {
                None => return Err(Error::State(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Dimension(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.params.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::State(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    /// True when both models have identical parameter names and shapes.
    pub fn same_structure(&self, other: &Model) -> bool {
        self.config == other.config
            && self.prune == other.prune
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape())
    }
}

/// Draws a tensor of independent `N(0, std²)` values; used by tests and
/// tooling that perturb models.
pub fn random_like(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng) as f32).collect()).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let a = Model::new(ModelConfig::default()).unwrap();
        let b = Model::new(ModelConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = Model::new(ModelConfig {
            seed: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        assert_ne!(a.params(), c.params());
        a.check_consistency().unwrap();
    }

    #[test]
    fn init_conventions() {
        let m = Model::new(ModelConfig::default()).unwrap();
        let w = m.param("stages.0.blocks.0.attn.q.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.04 + 1e-7));
        assert!(w.data().iter().any(|&v| v != 0.0));
        assert!(m.param("stages.0.blocks.0.attn.q.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(m.param("norm.weight").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn freezing_selects_stage_prefix() {
        let mut m = Model::new(ModelConfig::default()).unwrap();
        m.freeze_stage(0).unwrap();
        assert!(m.is_frozen("stages.0.blocks.1.mlp.fc1.weight"));
        assert!(m.is_frozen("stages.0.merge.reduction.weight"));
        assert!(!m.is_frozen("stages.1.blocks.0.norm1.weight"));
        assert!(!m.is_frozen("head.weight"));
        assert!(m.freeze_stage(5).is_err());
    }

    #[test]
    fn prune_state_validation() {
        let mut st = BlockPruneState::full(4, 8);
        st.validate(4, 8).unwrap();
        st.kept_heads = vec![2, 1];
        assert!(st.validate(4, 8).is_err());
        st.kept_heads = vec![];
        assert!(st.validate(4, 8).is_err());
        st.msa_is_identity = true;
        st.validate(4, 8).unwrap();
    }
}
