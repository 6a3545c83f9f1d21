//! Dual-branch multi-scale head.
//!
//! The primary branch pools the feature map and classifies it directly
//! (`y1`). Each scale branch merges `s×s` blocks of the map into larger
//! patches, projects them, runs a stack of message-passing modules and
//! classifies the pooled result (`y2` large, `y3` small). Inference averages
//! the logits and applies one softmax; training averages the per-branch
//! cross-entropies.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax, Graph, Scalar, Var};
use crate::error::{Error, Result};
use crate::nn::{block_order, join, mix_seed, LayerNorm, Linear, Parameterized};
use crate::pmp::{pmp_stack, GraphMode, PmpParams, DEFAULT_DROPOUT, DEFAULT_LEAKY_SLOPE};
use crate::tensor::Tensor;

/// Merge block side, neighbor count and stack depth for one branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchConfig {
    pub patch_size: usize,
    pub k: usize,
    pub n: usize,
}

impl BranchConfig {
    pub const fn new(patch_size: usize, k: usize, n: usize) -> Self {
        BranchConfig { patch_size, k, n }
    }

    /// Patch count after merging an `h×w` grid.
    pub fn patch_count(&self, h: usize, w: usize) -> usize {
        (h / self.patch_size) * (w / self.patch_size)
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let s = self.patch_size;
        if s == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(Error::Config(format!(
                "patch size {s} does not divide the {h}×{w} feature map"
            )));
        }
        let count = self.patch_count(h, w);
        if self.n > 0 && (self.k == 0 || self.k >= count) {
            return Err(Error::Config(format!(
                "k={} needs 1 <= k < patch count {count} ({h}×{w} map, patch size {s})",
                self.k
            )));
        }
        Ok(())
    }
}

/// Which parts of the head are active. `BackboneOnly`, `MonoPmp` and
/// `MlpSubstitute` are the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    #[default]
    DualPmp,
    MonoPmp,
    BackboneOnly,
    MlpSubstitute,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 4] = [
        HeadVariant::BackboneOnly,
        HeadVariant::MlpSubstitute,
        HeadVariant::MonoPmp,
        HeadVariant::DualPmp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadVariant::DualPmp => "dual_pmp",
            HeadVariant::MonoPmp => "mono_pmp",
            HeadVariant::BackboneOnly => "backbone_only",
            HeadVariant::MlpSubstitute => "mlp_substitute",
        }
    }

    fn has_large(self) -> bool {
        matches!(self, HeadVariant::DualPmp | HeadVariant::MlpSubstitute)
    }

    fn has_small(self) -> bool {
        !matches!(self, HeadVariant::BackboneOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub small: BranchConfig,
    pub large: BranchConfig,
    pub variant: HeadVariant,
    pub classes: usize,
    /// Projected patch width for both branches; `None` keeps the map width.
    pub branch_dim: Option<usize>,
    pub dropout: f32,
    pub leaky_slope: f32,
    pub graph_mode: GraphMode,
}

impl HeadConfig {
    pub fn new(small: BranchConfig, large: BranchConfig, classes: usize) -> Self {
        HeadConfig {
            small,
            large,
            variant: HeadVariant::DualPmp,
            classes,
            branch_dim: None,
            dropout: DEFAULT_DROPOUT,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            graph_mode: GraphMode::Dynamic,
        }
    }

    /// Checks every active branch against an `h×w` map.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.variant.has_large() {
            self.large.validate(h, w).map_err(|e| e.in_branch("large"))?;
        }
        if self.variant.has_small() {
            self.small.validate(h, w).map_err(|e| e.in_branch("small"))?;
        }
        Ok(())
    }
}

/// Per-patch `Dropout(LeakyReLU(LayerNorm(Linear(p))))`, `F → F`; stands in
/// for a message-passing module in the MLP ablation.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub linear: Linear,
    pub norm: LayerNorm,
    pub dropout_rate: f32,
    pub leaky_slope: f32,
}

impl Parameterized for MlpParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.linear.collect(&join(prefix, "linear"), out);
        self.norm.collect(&join(prefix, "norm"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.linear.collect_mut(out);
        self.norm.collect_mut(out);
    }
}

#[derive(Debug, Clone)]
pub enum Mixer {
    Pmp(Vec<PmpParams>),
    Mlp(Vec<MlpParams>),
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub config: BranchConfig,
    pub project: Linear,
    pub mixer: Mixer,
    pub classifier: Linear,
}

impl Branch {
    fn init<R: Rng>(
        config: BranchConfig,
        in_dim: usize,
        dim: usize,
        head: &HeadConfig,
        use_mlp: bool,
        rng: &mut R,
    ) -> Self {
        let s2 = config.patch_size * config.patch_size;
        let project = Linear::init(s2 * in_dim, dim, rng);
        let mixer = if use_mlp {
            Mixer::Mlp(
                (0..config.n)
                    .map(|_| MlpParams {
                        linear: Linear::init(dim, dim, rng),
                        norm: LayerNorm::new(dim),
                        dropout_rate: head.dropout,
                        leaky_slope: head.leaky_slope,
                    })
                    .collect(),
            )
        } else {
            Mixer::Pmp(
                (0..config.n)
                    .map(|_| {
                        let mut p = PmpParams::init(dim, rng);
                        p.dropout_rate = head.dropout;
                        p.leaky_slope = head.leaky_slope;
                        p
                    })
                    .collect(),
            )
        };
        Branch {
            config,
            project,
            mixer,
            classifier: Linear::init(dim, head.classes, rng),
        }
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        m: Var,
        h: usize,
        w: usize,
        mode: GraphMode,
        training: bool,
        seed: u64,
    ) -> Result<Var> {
        let merged = patch_merge(g, m, h, w, self.config.patch_size, &self.project)?;
        let mixed = match &self.mixer {
            Mixer::Pmp(mods) => pmp_stack(g, merged, mods, self.config.k, mode, training, seed)?,
            Mixer::Mlp(mods) => {
                let mut cur = merged;
                for (i, p) in mods.iter().enumerate() {
                    let y = p.linear.forward(g, cur)?;
                    let y = p.norm.forward(g, y)?;
                    let y = g.leaky_relu(y, p.leaky_slope)?;
                    cur = g.dropout(y, p.dropout_rate, training, mix_seed(seed, i as u64))?;
                }
                cur
            }
        };
        branch_logits(g, mixed, &self.classifier)
    }
}

impl Parameterized for Branch {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.project.collect(&join(prefix, "project"), out);
        match &self.mixer {
            Mixer::Pmp(m) => m.collect(&join(prefix, "pmp"), out),
            Mixer::Mlp(m) => m.collect(&join(prefix, "mlp"), out),
        }
        self.classifier.collect(&join(prefix, "classifier"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.project.collect_mut(out);
        match &mut self.mixer {
            Mixer::Pmp(m) => m.collect_mut(out),
            Mixer::Mlp(m) => m.collect_mut(out),
        }
        self.classifier.collect_mut(out);
    }
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub config: HeadConfig,
    pub primary: Linear,
    pub large: Option<Branch>,
    pub small: Option<Branch>,
}

impl HeadParams {
    pub fn init<R: Rng>(config: HeadConfig, in_dim: usize, rng: &mut R) -> Self {
        let dim = config.branch_dim.unwrap_or(in_dim);
        let use_mlp = config.variant == HeadVariant::MlpSubstitute;
        let primary = Linear::init(in_dim, config.classes, rng);
        let large = config
            .variant
            .has_large()
            .then(|| Branch::init(config.large, in_dim, dim, &config, use_mlp, rng));
        let small = config
            .variant
            .has_small()
            .then(|| Branch::init(config.small, in_dim, dim, &config, use_mlp, rng));
        HeadParams {
            config,
            primary,
            large,
            small,
        }
    }

    /// Sets every weight and bias to zero (norm gammas stay at one).
    pub fn zero_(&mut self) {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        for (t, name) in self.params_mut().into_iter().zip(&names) {
            if !name.ends_with("gamma") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

impl Parameterized for HeadParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.primary.collect(&join(prefix, "primary"), out);
        self.large.collect(&join(prefix, "large"), out);
        self.small.collect(&join(prefix, "small"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.primary.collect_mut(out);
        self.large.collect_mut(out);
        self.small.collect_mut(out);
    }
}

/// Concatenates each `s×s` block of an `h×w` patch grid (row-major inside
/// the block) and projects it, `[(h·w)×F] → [(h/s)(w/s)×D]`.
pub fn patch_merge<T: Scalar>(
    g: &mut Graph<T>,
    m: Var,
    h: usize,
    w: usize,
    s: usize,
    project: &Linear,
) -> Result<Var> {
    let f = match g.shape(m) {
        [rows, f] if *rows == h * w => *f,
        other => {
            return Err(Error::Dimension(format!(
                "patch_merge: expected [{}, F] for a {h}×{w} grid, got {other:?}",
                h * w
            )))
        }
    };
    if s == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
        return Err(Error::Config(format!("patch size {s} does not divide {h}×{w}")));
    }
    let count = (h / s) * (w / s);
    let merged = if s == 1 {
        m
    } else {
        let rows = g.gather_rows(m, block_order(h, w, s))?;
        g.reshape(rows, vec![count, s * s * f])?
    };
    project.forward(g, merged)
}

/// Mean-pools patches and maps them to class logits, shape `[1×C]`.
pub fn branch_logits<T: Scalar>(g: &mut Graph<T>, p: Var, classifier: &Linear) -> Result<Var> {
    let pooled = g.mean_rows(p)?;
    classifier.forward(g, pooled)
}

/// `softmax(mean(y…))` over equal-length logit vectors.
pub fn fuse_predict(logits: &[&[f32]]) -> Result<Vec<f32>> {
    let Some(first) = logits.first() else {
        return Err(Error::Dimension("fuse_predict: no logits".into()));
    };
    let c = first.len();
    if c == 0 {
        return Err(Error::Dimension("fuse_predict: empty logit vector".into()));
    }
    if let Some(bad) = logits.iter().find(|l| l.len() != c) {
        return Err(Error::Shape {
            op: "fuse_predict",
            left: vec![c],
            right: vec![bad.len()],
        });
    }
    let inv = 1.0 / logits.len() as f32;
    let mean: Vec<f32> = (0..c)
        .map(|j| logits.iter().map(|l| l[j]).sum::<f32>() * inv)
        .collect();
    Ok(softmax(&mean))
}

/// Mean of the per-branch cross-entropies; the one-hot expansion of
/// `−(1/B)·Σ_i y_i·log(Π_b p_b,i)`.
pub fn joint_loss<T: Scalar>(g: &mut Graph<T>, target: usize, logits: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = logits.split_first() else {
        return Err(Error::Dimension("joint_loss: no logits".into()));
    };
    let mut total = g.softmax_cross_entropy(first, target)?;
    for &y in rest {
        let ce = g.softmax_cross_entropy(y, target)?;
        total = g.add(total, ce)?;
    }
    Ok(g.scale(total, 1.0 / logits.len() as f64))
}

#[derive(Debug, Clone)]
pub struct HeadOutputs {
    /// Primary-branch logits.
    pub y1: Var,
    /// Large-branch logits.
    pub y2: Option<Var>,
    /// Small-branch logits.
    pub y3: Option<Var>,
    /// Mean of the active logits, `[1×C]`.
    pub fused_logits: Var,
    /// `softmax(fused_logits)`.
    pub fused: Vec<f32>,
}

impl HeadOutputs {
    pub fn logits(&self) -> Vec<Var> {
        std::iter::once(self.y1).chain(self.y2).chain(self.y3).collect()
    }
}

/// Runs the head on an `h×w` map stored `[(h·w)×F]`.
pub fn head_forward<T: Scalar>(
    g: &mut Graph<T>,
    m: Var,
    h: usize,
    w: usize,
    head: &HeadParams,
    training: bool,
    seed: u64,
) -> Result<HeadOutputs> {
    head.config.validate(h, w)?;
    let mode = head.config.graph_mode;
    let pooled = g.mean_rows(m)?;
    let y1 = head.primary.forward(g, pooled)?;
    let y2 = head
        .large
        .as_ref()
        .map(|b| {
            b.forward(g, m, h, w, mode, training, mix_seed(seed, 2))
                .map_err(|e| e.in_branch("large"))
        })
        .transpose()?;
    let y3 = head
        .small
        .as_ref()
        .map(|b| {
            b.forward(g, m, h, w, mode, training, mix_seed(seed, 3))
                .map_err(|e| e.in_branch("small"))
        })
        .transpose()?;
    let active: Vec<Var> = std::iter::once(y1).chain(y2).chain(y3).collect();
    let mut sum = active[0];
    for &y in &active[1..] {
        sum = g.add(sum, y)?;
    }
    let fused_logits = g.scale(sum, 1.0 / active.len() as f64);
    let fused = softmax(g.value(fused_logits)).into_iter().map(T::to_f32).collect();
    Ok(HeadOutputs {
        y1,
        y2,
        y3,
        fused_logits,
        fused,
    })
}
