//! Small hierarchical windowed-attention backbone.
//!
//! `patch_embed` (4×4 pixel patches → C channels), then four stages of
//! pre-norm attention blocks with three 2×2 merges between them, giving an
//! `(side/32)×(side/32)×8C` map. Windows do not shift and carry no position
//! bias. A final layer norm is applied to the map.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Scalar, Var};
use crate::error::{Error, FormatError, Result};
use crate::nn::{block_order, invert_permutation, join, LayerNorm, Linear, Parameterized};
use crate::tensor::Tensor;

pub const PATCH: usize = 4;
pub const STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub side: usize,
    pub base_channels: usize,
    pub window: usize,
    pub blocks_per_stage: [usize; STAGES],
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Per-channel pixel statistics; images are standardized with them
    /// before the patch embedding.
    #[serde(default = "default_input_mean")]
    pub input_mean: [f32; 3],
    #[serde(default = "default_input_std")]
    pub input_std: [f32; 3],
}

fn default_heads() -> usize {
    1
}

fn default_mlp_ratio() -> usize {
    2
}

fn default_input_mean() -> [f32; 3] {
    [0.5; 3]
}

fn default_input_std() -> [f32; 3] {
    [0.25; 3]
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            side: 192,
            base_channels: 16,
            window: 3,
            blocks_per_stage: [1; STAGES],
            heads: default_heads(),
            mlp_ratio: default_mlp_ratio(),
            input_mean: default_input_mean(),
            input_std: default_input_std(),
        }
    }
}

impl BackboneConfig {
    pub fn with_side(side: usize, base_channels: usize) -> Self {
        BackboneConfig {
            side,
            base_channels,
            ..Default::default()
        }
    }

    /// Grid side of stage `s` (0-based).
    pub fn stage_side(&self, s: usize) -> usize {
        self.side / (PATCH << s)
    }

    pub fn stage_channels(&self, s: usize) -> usize {
        self.base_channels << s
    }

    pub fn out_side(&self) -> usize {
        self.stage_side(STAGES - 1)
    }

    pub fn out_channels(&self) -> usize {
        self.stage_channels(STAGES - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || !self.side.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "backbone.side must be a positive multiple of 32, got {}",
                self.side
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("backbone.base_channels must be positive".into()));
        }
        if self.heads == 0 || !self.base_channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide base width {}",
                self.heads, self.base_channels
            )));
        }
        if self.input_std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!(
                "backbone.input_std must be positive, got {:?}",
                self.input_std
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("backbone.mlp_ratio must be positive".into()));
        }
        for s in 0..STAGES {
            let side = self.stage_side(s);
            if self.window == 0 || !side.is_multiple_of(self.window) {
                return Err(Error::Config(format!(
                    "backbone.window {} does not divide stage {s} grid side {side}",
                    self.window
                )));
            }
        }
        if self.out_side() * self.out_side() < 2 {
            return Err(Error::Config("feature map must have at least 2 patches".into()));
        }
        Ok(())
    }
}

/// Backbone output: an `h×w` grid of `channels`-wide patches, `[h, w, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Tensor,
}

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        match values.shape() {
            [h, w, _] if h * w >= 2 => Ok(FeatureMap { values }),
            [_, _, _] => Err(Error::Dimension("feature map must have at least 2 patches".into())),
            s => Err(Error::Dimension(format!("feature map must be [h, w, C], got {s:?}"))),
        }
    }

    pub fn h(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Patch at grid cell `(r, c)`.
    pub fn patch(&self, r: usize, c: usize) -> &[f32] {
        let ch = self.channels();
        let at = (r * self.w() + c) * ch;
        &self.values.data()[at..at + ch]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.values.save(path)
    }
}

/// Reads a rank-3 PMT1 map, optionally checking its channel count.
pub fn load_features(path: &Path, expected_channels: Option<usize>) -> Result<FeatureMap> {
    let t = Tensor::load(path)?;
    let fmt = |kind| Error::Format {
        path: path.to_path_buf(),
        kind,
    };
    if t.rank() != 3 {
        return Err(fmt(FormatError::RankMismatch {
            expected: 3,
            found: t.rank(),
        }));
    }
    if let Some(expected) = expected_channels {
        if t.shape()[2] != expected {
            return Err(fmt(FormatError::ChannelMismatch {
                expected,
                found: t.shape()[2],
            }));
        }
    }
    FeatureMap::new(t)
}

/// A grid of patches on a tape, stored `[(h·w)×d]` row-major.
#[derive(Debug, Clone, Copy)]
pub struct Grid {
    pub var: Var,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn to_feature_map<T: Scalar>(&self, g: &Graph<T>) -> FeatureMap {
        let d = g.shape(self.var)[1];
        let t = Tensor::new(vec![self.h, self.w, d], g.value_f32(self.var))
            .expect("grid shape is consistent");
        FeatureMap { values: t }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub norm1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl AttentionBlock {
    pub fn init<R: Rng>(d: usize, mlp_ratio: usize, rng: &mut R) -> Self {
        AttentionBlock {
            norm1: LayerNorm::new(d),
            query: Linear::init(d, d, rng),
            key: Linear::init(d, d, rng),
            value: Linear::init(d, d, rng),
            proj: Linear::init(d, d, rng),
            norm2: LayerNorm::new(d),
            fc1: Linear::init(d, d * mlp_ratio, rng),
            fc2: Linear::init(d * mlp_ratio, d, rng),
        }
    }
}

impl Parameterized for AttentionBlock {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.norm1.collect(&join(prefix, "norm1"), out);
        self.query.collect(&join(prefix, "query"), out);
        self.key.collect(&join(prefix, "key"), out);
        self.value.collect(&join(prefix, "value"), out);
        self.proj.collect(&join(prefix, "proj"), out);
        self.norm2.collect(&join(prefix, "norm2"), out);
        self.fc1.collect(&join(prefix, "fc1"), out);
        self.fc2.collect(&join(prefix, "fc2"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.norm1.collect_mut(out);
        self.query.collect_mut(out);
        self.key.collect_mut(out);
        self.value.collect_mut(out);
        self.proj.collect_mut(out);
        self.norm2.collect_mut(out);
        self.fc1.collect_mut(out);
        self.fc2.collect_mut(out);
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub blocks: Vec<AttentionBlock>,
    /// 2×2 merge after the stage; absent on the last stage.
    pub merge: Option<Linear>,
}

impl Parameterized for Stage {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.blocks.collect(&join(prefix, "blocks"), out);
        self.merge.collect(&join(prefix, "merge"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.blocks.collect_mut(out);
        self.merge.collect_mut(out);
    }
}

#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub embed: Linear,
    pub stages: Vec<Stage>,
    pub norm: LayerNorm,
}

impl BackboneParams {
    pub fn init<R: Rng>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let embed = Linear::init(PATCH * PATCH * 3, config.base_channels, rng);
        let stages = (0..STAGES)
            .map(|s| {
                let d = config.stage_channels(s);
                Stage {
                    blocks: (0..config.blocks_per_stage[s])
                        .map(|_| AttentionBlock::init(d, config.mlp_ratio, rng))
                        .collect(),
                    merge: (s + 1 < STAGES).then(|| Linear::init(4 * d, 2 * d, rng)),
                }
            })
            .collect();
        let norm = LayerNorm::new(config.out_channels());
        Ok(BackboneParams {
            config,
            embed,
            stages,
            norm,
        })
    }

    pub fn zero_(&mut self) {
        for t in self.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

impl Parameterized for BackboneParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.embed.collect(&join(prefix, "embed"), out);
        self.stages.collect(&join(prefix, "stages"), out);
        self.norm.collect(&join(prefix, "norm"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.embed.collect_mut(out);
        self.stages.collect_mut(out);
        self.norm.collect_mut(out);
    }
}

/// Flattens each 4×4×3 pixel block (row-major pixels, RGB inner) and
/// projects it, `[H, W, 3] → [(H/4)(W/4)×C]`.
pub fn patch_embed<T: Scalar>(g: &mut Graph<T>, image: &Tensor, embed: &Linear) -> Result<Grid> {
    let (h, w) = match image.shape() {
        [h, w, 3] => (*h, *w),
        s => return Err(Error::Dimension(format!("image must be [H, W, 3], got {s:?}"))),
    };
    if h % PATCH != 0 || w % PATCH != 0 {
        return Err(Error::Config(format!(
            "image {h}×{w} is not a multiple of the {PATCH}×{PATCH} patch"
        )));
    }
    let (gh, gw) = (h / PATCH, w / PATCH);
    let pixels = g.constant(vec![h * w, 3], image.data().to_vec())?;
    let blocks = g.gather_rows(pixels, block_order(h, w, PATCH))?;
    let flat = g.reshape(blocks, vec![gh * gw, PATCH * PATCH * 3])?;
    let var = embed.forward(g, flat)?;
    Ok(Grid { var, h: gh, w: gw })
}

/// Pre-norm block: window self-attention then a two-layer GELU
/// feed-forward, each added back to its input.
pub fn window_attention_block<T: Scalar>(
    g: &mut Graph<T>,
    grid: Grid,
    block: &AttentionBlock,
    window: usize,
    heads: usize,
) -> Result<Grid> {
    if window == 0 || !grid.h.is_multiple_of(window) || !grid.w.is_multiple_of(window) {
        return Err(Error::Config(format!(
            "window {window} does not divide the {}×{} grid",
            grid.h, grid.w
        )));
    }
    let order = block_order(grid.h, grid.w, window);
    let inverse = invert_permutation(&order);
    let x = grid.var;
    let normed = block.norm1.forward(g, x)?;
    let windows = g.gather_rows(normed, order)?;
    let q = block.query.forward(g, windows)?;
    let k = block.key.forward(g, windows)?;
    let v = block.value.forward(g, windows)?;
    let att = g.group_attention(q, k, v, window * window, heads)?;
    let att = block.proj.forward(g, att)?;
    let att = g.gather_rows(att, inverse)?;
    let x = g.add(x, att)?;
    let normed = block.norm2.forward(g, x)?;
    let hidden = block.fc1.forward(g, normed)?;
    let hidden = g.gelu(hidden);
    let ff = block.fc2.forward(g, hidden)?;
    let var = g.add(x, ff)?;
    Ok(Grid { var, ..grid })
}

/// Concatenates 2×2 neighborhoods and projects `4d → 2d`.
pub fn downsample_merge<T: Scalar>(g: &mut Graph<T>, grid: Grid, merge: &Linear) -> Result<Grid> {
    if !grid.h.is_multiple_of(2) || !grid.w.is_multiple_of(2) {
        return Err(Error::Dimension(format!(
            "downsample_merge needs even sides, got {}×{}",
            grid.h, grid.w
        )));
    }
    let d = g.shape(grid.var)[1];
    let (h, w) = (grid.h / 2, grid.w / 2);
    let rows = g.gather_rows(grid.var, block_order(grid.h, grid.w, 2))?;
    let flat = g.reshape(rows, vec![h * w, 4 * d])?;
    let var = merge.forward(g, flat)?;
    Ok(Grid { var, h, w })
}

/// `(pixel − mean[c]) / std[c]` per channel.
pub fn standardize(image: &Tensor, cfg: &BackboneConfig) -> Result<Tensor> {
    let data = image
        .data()
        .chunks_exact(3)
        .flat_map(|px| (0..3).map(move |c| (px[c] - cfg.input_mean[c]) / cfg.input_std[c]))
        .collect();
    Tensor::new(image.shape().to_vec(), data)
}

/// Image `[side, side, 3]` to the final `(side/32)²` grid of `8C` patches.
pub fn backbone_forward<T: Scalar>(g: &mut Graph<T>, image: &Tensor, params: &BackboneParams) -> Result<Grid> {
    let cfg = &params.config;
    if image.shape() != [cfg.side, cfg.side, 3] {
        return Err(Error::Config(format!(
            "image shape {:?} does not match backbone side {}",
            image.shape(),
            cfg.side
        )));
    }
    let mut grid = patch_embed(g, &standardize(image, cfg)?, &params.embed)?;
    for stage in &params.stages {
        for block in &stage.blocks {
            grid = window_attention_block(g, grid, block, cfg.window, cfg.heads)?;
        }
        if let Some(merge) = &stage.merge {
            grid = downsample_merge(g, grid, merge)?;
        }
    }
    let var = params.norm.forward(g, grid.var)?;
    Ok(Grid { var, ..grid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn image(side: usize, seed: u64) -> Tensor {
        Tensor::uniform(&[side, side, 3], 1.0, &mut rng(seed))
    }

    #[test]
    fn embed_shapes() {
        let mut r = rng(0);
        let lin = Linear::init(48, 8, &mut r);
        let mut g = Graph::new();
        let grid = patch_embed(&mut g, &image(32, 1), &lin).unwrap();
        assert_eq!((grid.h, grid.w), (8, 8));
        assert_eq!(g.shape(grid.var), &[64, 8]);

        let big = Tensor::zeros(&[384, 384, 3]);
        let grid = patch_embed(&mut g, &big, &lin).unwrap();
        assert_eq!((grid.h, grid.w), (96, 96));

        assert!(patch_embed(&mut g, &Tensor::zeros(&[30, 32, 3]), &lin).is_err());
    }

    #[test]
    fn constant_image_with_zero_weights_embeds_to_bias() {
        let mut lin = Linear::zeros(48, 4);
        lin.bias = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap().param();
        let mut g = Graph::new();
        let grid = patch_embed(&mut g, &Tensor::full(&[8, 8, 3], 0.7), &lin).unwrap();
        for row in g.value(grid.var).chunks(4) {
            assert_eq!(row, &[0.5, -1.0, 2.0, 0.0]);
        }
    }

    #[test]
    fn embed_flattens_pixels_row_major() {
        // one-hot weight picking pixel (1,2) green channel of each 4×4 block
        let pick = (4 + 2) * 3 + 1;
        let mut w = vec![0.0; 48];
        w[pick] = 1.0;
        let lin = Linear {
            weight: Tensor::new(vec![48, 1], w).unwrap(),
            bias: Tensor::zeros(&[1]),
        };
        let img = image(8, 3);
        let mut g = Graph::new();
        let grid = patch_embed(&mut g, &img, &lin).unwrap();
        for br in 0..2 {
            for bc in 0..2 {
                let (r, c) = (br * 4 + 1, bc * 4 + 2);
                let expect = img.data()[(r * 8 + c) * 3 + 1];
                assert_eq!(g.value(grid.var)[br * 2 + bc], expect);
            }
        }
    }

    #[test]
    fn window_one_is_per_patch() {
        let block = AttentionBlock::init(4, 2, &mut rng(5));
        let mut g = Graph::new();
        let x = g.constant(vec![4, 4], image(4, 2).data()[..16].to_vec()).unwrap();
        let out = window_attention_block(&mut g, Grid { var: x, h: 2, w: 2 }, &block, 1, 1).unwrap();

        // softmax over one key is 1, so attention returns the value row
        let mut h = Graph::new();
        let x2 = h.constant(vec![4, 4], image(4, 2).data()[..16].to_vec()).unwrap();
        let n = block.norm1.forward(&mut h, x2).unwrap();
        let v = block.value.forward(&mut h, n).unwrap();
        let a = block.proj.forward(&mut h, v).unwrap();
        let x3 = h.add(x2, a).unwrap();
        let n2 = block.norm2.forward(&mut h, x3).unwrap();
        let f = block.fc1.forward(&mut h, n2).unwrap();
        let f = h.gelu(f);
        let f = block.fc2.forward(&mut h, f).unwrap();
        let y = h.add(x3, f).unwrap();
        assert_eq!(g.value(out.var), h.value(y));
    }

    #[test]
    fn identical_patches_in_a_window_stay_identical() {
        let block = AttentionBlock::init(3, 2, &mut rng(6));
        let mut g = Graph::new();
        let mut vals = vec![0.1, 0.9, -0.4, 0.1, 0.9, -0.4];
        vals.extend([0.3, 0.3, 0.3, -0.2, 0.5, 0.0]);
        let x = g.constant(vec![4, 3], vals).unwrap();
        let out = window_attention_block(&mut g, Grid { var: x, h: 2, w: 2 }, &block, 2, 1).unwrap();
        let v = g.value(out.var);
        assert_eq!(v[0..3], v[3..6]);
    }

    #[test]
    fn window_attention_matches_dense_oracle() {
        let d = 4;
        let block = AttentionBlock::init(d, 2, &mut rng(7));
        let vals: Vec<f32> = image(4, 9).data()[..16].to_vec();
        let mut g = Graph::new();
        let x = g.constant(vec![4, d], vals.clone()).unwrap();
        let out = window_attention_block(&mut g, Grid { var: x, h: 2, w: 2 }, &block, 2, 1).unwrap();

        // dense attention over all 4 patches computed in f64
        let mut h = Graph::new();
        let x2 = h.constant(vec![4, d], vals.clone()).unwrap();
        let n = block.norm1.forward(&mut h, x2).unwrap();
        let q = block.query.forward(&mut h, n).unwrap();
        let k = block.key.forward(&mut h, n).unwrap();
        let v = block.value.forward(&mut h, n).unwrap();
        let (q, k, v) = (h.value(q).to_vec(), h.value(k).to_vec(), h.value(v).to_vec());
        let mut att = vec![0.0f32; 4 * d];
        for i in 0..4 {
            let s: Vec<f64> = (0..4)
                .map(|j| {
                    (0..d).map(|c| q[i * d + c] as f64 * k[j * d + c] as f64).sum::<f64>()
                        / (d as f64).sqrt()
                })
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..d {
                att[i * d + c] = (0..4).map(|j| e[j] / z * v[j * d + c] as f64).sum::<f64>() as f32;
            }
        }
        let a = h.constant(vec![4, d], att).unwrap();
        let a = block.proj.forward(&mut h, a).unwrap();
        let x3 = h.add(x2, a).unwrap();
        let n2 = block.norm2.forward(&mut h, x3).unwrap();
        let f = block.fc1.forward(&mut h, n2).unwrap();
        let f = h.gelu(f);
        let f = block.fc2.forward(&mut h, f).unwrap();
        let y = h.add(x3, f).unwrap();
        for (a, b) in g.value(out.var).iter().zip(h.value(y)) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn indivisible_window_is_rejected() {
        let block = AttentionBlock::init(2, 2, &mut rng(1));
        let mut g = Graph::new();
        let x = g.constant(vec![9, 2], vec![0.0; 18]).unwrap();
        assert!(matches!(
            window_attention_block(&mut g, Grid { var: x, h: 3, w: 3 }, &block, 2, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn merge_hand_computation() {
        // 2×2×1 grid [1,2;3,4]; projection 4→2: sum and first-minus-last
        let w = vec![1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, -1.0];
        let merge = Linear {
            weight: Tensor::new(vec![4, 2], w).unwrap(),
            bias: Tensor::zeros(&[2]),
        };
        let mut g = Graph::new();
        let x = g.constant(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = downsample_merge(&mut g, Grid { var: x, h: 2, w: 2 }, &merge).unwrap();
        assert_eq!((out.h, out.w), (1, 1));
        assert_eq!(g.value(out.var), &[10.0, -3.0]);

        let odd = g.constant(vec![6, 1], vec![0.0; 6]).unwrap();
        assert!(downsample_merge(&mut g, Grid { var: odd, h: 3, w: 2 }, &merge).is_err());
    }

    #[test]
    fn merge_schedule_shapes() {
        let mut r = rng(2);
        let mut g = Graph::new();
        let c = 2;
        let x = g.constant(vec![96 * 96, c], vec![0.1; 96 * 96 * c]).unwrap();
        let mut grid = Grid { var: x, h: 96, w: 96 };
        let mut d = c;
        for step in 0..3 {
            let merge = Linear::init(4 * d, 2 * d, &mut r);
            grid = downsample_merge(&mut g, grid, &merge).unwrap();
            d *= 2;
            if step == 0 {
                assert_eq!((grid.h, grid.w, g.shape(grid.var)[1]), (48, 48, 2 * c));
            }
        }
        assert_eq!((grid.h, grid.w, g.shape(grid.var)[1]), (12, 12, 8 * c));
    }

    #[test]
    fn forward_output_shapes() {
        for (side, c, out) in [(192, 16, 6), (96, 4, 3), (64, 2, 2)] {
            let params = BackboneParams::init(BackboneConfig::with_side(side, c), &mut rng(1));
            let params = match params {
                Ok(p) => p,
                Err(_) => {
                    let mut cfg = BackboneConfig::with_side(side, c);
                    cfg.window = 1;
                    BackboneParams::init(cfg, &mut rng(1)).unwrap()
                }
            };
            let mut g = Graph::new();
            let grid = backbone_forward(&mut g, &image(side, 4), &params).unwrap();
            assert_eq!((grid.h, grid.w), (out, out));
            assert_eq!(g.shape(grid.var), &[out * out, 8 * c]);
        }
    }

    #[test]
    fn zero_image_zero_weights_give_zero_map() {
        let mut params = BackboneParams::init(BackboneConfig::with_side(96, 4), &mut rng(1)).unwrap();
        params.zero_();
        let mut g = Graph::new();
        let grid = backbone_forward(&mut g, &Tensor::zeros(&[96, 96, 3]), &params).unwrap();
        assert!(g.value(grid.var).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let params = BackboneParams::init(BackboneConfig::with_side(96, 4), &mut rng(3)).unwrap();
        let img = image(96, 8);
        let run = || {
            let mut g = Graph::new();
            let grid = backbone_forward(&mut g, &img, &params).unwrap();
            grid.to_feature_map(&g)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::with_side(100, 4).validate().is_err());
        let mut cfg = BackboneConfig::with_side(96, 4);
        cfg.window = 2;
        assert!(cfg.validate().is_err());
        assert!(BackboneConfig::with_side(192, 16).validate().is_ok());
    }

    #[test]
    fn feature_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("m.pmt");
        let map = FeatureMap::new(Tensor::uniform(&[2, 3, 4], 1.0, &mut rng(1))).unwrap();
        map.save(&good).unwrap();
        assert_eq!(load_features(&good, Some(4)).unwrap(), map);
        assert!(matches!(
            load_features(&good, Some(5)),
            Err(Error::Format { kind: FormatError::ChannelMismatch { .. }, .. })
        ));

        let flat = dir.path().join("flat.pmt");
        Tensor::zeros(&[3, 4]).save(&flat).unwrap();
        let err = load_features(&flat, None).unwrap_err();
        assert!(err.to_string().contains("rank mismatch"), "{err}");

        let cut = dir.path().join("cut.pmt");
        let bytes = std::fs::read(&good).unwrap();
        std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_features(&cut, None).unwrap_err();
        assert!(err.to_string().contains("truncated payload"), "{err}");
    }
}
