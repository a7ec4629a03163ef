//! Toy-scale Swin-Unet with exact reverse-mode gradients and Adam.

mod checkpoint;
mod swin;
pub mod tape;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::keyed_prng;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use swin::{
    forward, forward_f64, relative_position_index, shifted_attention_mask, window_attention, window_partition,
    window_reverse, AttentionParams, MASK_VALUE,
};
pub use train::{
    adam_step, argmax_classes, loss_and_grad, loss_and_grad_f64, predict, train, train_steps, Adam, TrainConfig,
};

const INIT_STREAM: u64 = 0x1417;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub n_classes: usize,
    pub embed_dim: usize,
    pub patch_size: usize,
    pub window: usize,
    /// Encoder stage depths, each stage followed by patch merging. The
    /// decoder mirrors them.
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub bottleneck_depth: usize,
    pub bottleneck_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            in_channels: 28,
            n_classes: 9,
            embed_dim: 16,
            patch_size: 4,
            window: 4,
            depths: vec![2, 2],
            heads: vec![2, 4],
            bottleneck_depth: 2,
            bottleneck_heads: 8,
            mlp_ratio: 4,
        }
    }

    /// Four-stage layout at feature size 48 and window 7.
    pub fn full() -> Self {
        Self {
            in_channels: 28,
            n_classes: 9,
            embed_dim: 48,
            patch_size: 4,
            window: 7,
            depths: vec![2, 2, 2, 2],
            heads: vec![3, 6, 12, 24],
            bottleneck_depth: 2,
            bottleneck_heads: 48,
            mlp_ratio: 4,
        }
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.stage_dim(self.depths.len())
    }

    /// Input side lengths must be multiples of this.
    pub fn input_multiple(&self) -> usize {
        self.patch_size << self.depths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("model config: {m}")));
        if self.in_channels == 0 || self.n_classes < 2 || self.embed_dim == 0 {
            return bad("channels, classes and embedding width must be positive".into());
        }
        if self.patch_size == 0 || self.window == 0 || self.mlp_ratio == 0 {
            return bad("patch size, window and mlp ratio must be positive".into());
        }
        if self.depths.len() != self.heads.len() {
            return bad(format!("{} stage depths but {} head counts", self.depths.len(), self.heads.len()));
        }
        for (i, &h) in self.heads.iter().enumerate() {
            if h == 0 || self.stage_dim(i) % h != 0 {
                return bad(format!("stage {i} width {} not divisible by {h} heads", self.stage_dim(i)));
            }
        }
        if self.embed_dim % 2 != 0 && !self.depths.is_empty() {
            return bad("embedding width must be even for patch expanding".into());
        }
        let bh = self.bottleneck_heads;
        if bh == 0 || self.bottleneck_dim() % bh != 0 {
            return bad(format!("bottleneck width {} not divisible by {bh} heads", self.bottleneck_dim()));
        }
        Ok(())
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let m = self.input_multiple();
        if height == 0 || width == 0 || height % m != 0 || width % m != 0 {
            return Err(Error::Shape(format!(
                "input {height}x{width} is not a multiple of {m} (patch {} x 2^{} stages)",
                self.patch_size,
                self.depths.len()
            )));
        }
        let (mut h, mut w) = (height / self.patch_size, width / self.patch_size);
        for _ in 0..=self.depths.len() {
            for side in [h, w] {
                let win = self.window.min(side);
                if side % win != 0 {
                    return Err(Error::Shape(format!(
                        "token grid {h}x{w} is not divisible by window {win}"
                    )));
                }
            }
            h /= 2;
            w /= 2;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Zeros,
    Ones,
    /// Normal(0, 0.02) truncated at two standard deviations.
    TruncNormal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct Layout(Vec<ParamSpec>);

impl Layout {
    fn add(&mut self, name: String, shape: &[usize], init: Init) {
        self.0.push(ParamSpec { name, shape: shape.to_vec(), init });
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.add(format!("{prefix}.g"), &[d], Init::Ones);
        self.add(format!("{prefix}.b"), &[d], Init::Zeros);
    }

    fn linear(&mut self, prefix: &str, i: usize, o: usize, bias: bool) {
        self.add(format!("{prefix}.w"), &[i, o], Init::TruncNormal);
        if bias {
            self.add(format!("{prefix}.b"), &[o], Init::Zeros);
        }
    }

    fn block(&mut self, prefix: &str, d: usize, heads: usize, window: usize, mlp: usize) {
        self.norm(&format!("{prefix}.norm1"), d);
        self.linear(&format!("{prefix}.qkv"), d, 3 * d, true);
        let span = 2 * window - 1;
        self.add(format!("{prefix}.rel_bias"), &[span * span, heads], Init::TruncNormal);
        self.linear(&format!("{prefix}.proj"), d, d, true);
        self.norm(&format!("{prefix}.norm2"), d);
        self.linear(&format!("{prefix}.fc1"), d, mlp * d, true);
        self.linear(&format!("{prefix}.fc2"), mlp * d, d, true);
    }
}

/// Every trainable array in forward-pass order.
pub fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut l = Layout(Vec::new());
    let c = cfg.embed_dim;
    let p = cfg.patch_size;
    l.linear("patch_embed", p * p * cfg.in_channels, c, true);
    l.norm("patch_embed.norm", c);
    for (i, (&depth, &heads)) in cfg.depths.iter().zip(&cfg.heads).enumerate() {
        let d = cfg.stage_dim(i);
        for j in 0..depth {
            l.block(&format!("enc{i}.block{j}"), d, heads, cfg.window, cfg.mlp_ratio);
        }
        l.norm(&format!("enc{i}.merge.norm"), 4 * d);
        l.linear(&format!("enc{i}.merge"), 4 * d, 2 * d, false);
    }
    let bd = cfg.bottleneck_dim();
    for j in 0..cfg.bottleneck_depth {
        l.block(&format!("bottleneck.block{j}"), bd, cfg.bottleneck_heads, cfg.window, cfg.mlp_ratio);
    }
    l.norm("bottleneck.norm", bd);
    for i in (0..cfg.depths.len()).rev() {
        let d = cfg.stage_dim(i);
        l.linear(&format!("dec{i}.expand"), 2 * d, 4 * d, false);
        l.norm(&format!("dec{i}.expand.norm"), d);
        l.linear(&format!("dec{i}.reduce"), 2 * d, d, true);
        for j in 0..cfg.depths[i] {
            l.block(&format!("dec{i}.block{j}"), d, cfg.heads[i], cfg.window, cfg.mlp_ratio);
        }
    }
    l.norm("norm_up", c);
    l.linear("final_expand", c, 16 * c, false);
    l.norm("final_expand.norm", c);
    l.linear("head", c, cfg.n_classes, true);
    l.0
}

pub fn param_count(cfg: &ModelConfig) -> usize {
    layout(cfg).iter().map(ParamSpec::len).sum()
}

/// Weights plus Adam moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub specs: Vec<ParamSpec>,
    pub values: Vec<Vec<f32>>,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        use rand_distr::{Distribution, Normal};
        cfg.validate()?;
        let specs = layout(cfg);
        let normal = Normal::new(0.0f64, 0.02).unwrap();
        let values = specs
            .iter()
            .enumerate()
            .map(|(k, s)| match s.init {
                Init::Zeros => vec![0.0; s.len()],
                Init::Ones => vec![1.0; s.len()],
                Init::TruncNormal => {
                    let mut rng = keyed_prng(&[seed, INIT_STREAM, k as u64]);
                    (0..s.len())
                        .map(|_| loop {
                            let v = normal.sample(&mut rng);
                            if v.abs() <= 0.04 {
                                break v as f32;
                            }
                        })
                        .collect()
                }
            })
            .collect();
        Ok(Self::from_values(cfg.clone(), specs, values))
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let specs = layout(cfg);
        let values = specs.iter().map(|s| vec![0.0; s.len()]).collect();
        Ok(Self::from_values(cfg.clone(), specs, values))
    }

    fn from_values(config: ModelConfig, specs: Vec<ParamSpec>, values: Vec<Vec<f32>>) -> Self {
        let zeros: Vec<Vec<f32>> = specs.iter().map(|s| vec![0.0; s.len()]).collect();
        Self { config, specs, values, m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.index_of(name).map(|i| self.values[i].as_slice())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        self.index_of(name).map(|i| self.values[i].as_mut_slice())
    }
}
