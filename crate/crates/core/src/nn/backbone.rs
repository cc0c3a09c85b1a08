use rand::Rng;

use crate::error::{invalid, Result};
use crate::tensor::{Conv2dSpec, Graph, Init, ParamId, ParamStore, Var};

pub const NUM_LEVELS: usize = 4;
/// Output stride of each pyramid level relative to the input.
pub const LEVEL_STRIDES: [usize; NUM_LEVELS] = [4, 8, 16, 32];

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub level_channels: [usize; NUM_LEVELS],
    pub blocks_per_level: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            level_channels: [16, 32, 64, 128],
            blocks_per_level: 1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.level_channels[0] == 0 || self.level_channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid(
                "backbone",
                format!("channels must strictly increase: {:?}", self.level_channels),
            ));
        }
        Ok(())
    }
}

/// Four feature maps `[N, H/s, W/s, C_l]`, one per stride in [`LEVEL_STRIDES`].
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

impl FeaturePyramid {
    /// Per-level `(C, H, W)` of the first batch item.
    pub fn dims(&self, g: &Graph) -> Vec<(usize, usize, usize)> {
        self.levels
            .iter()
            .map(|&v| {
                let s = g.shape(v);
                (s[3], s[1], s[2])
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        ci: usize,
        co: usize,
        spec: Conv2dSpec,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(
                format!("{name}.weight"),
                &[k, k, ci, co],
                Init::FanIn {
                    fan_in: k * k * ci,
                    gain,
                },
                rng,
            )?,
            bias: store.add(format!("{name}.bias"), &[co], Init::Zeros, rng)?,
            spec,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, self.spec)
    }
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResidualBlock {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, store, x)?;
        let h = g.gelu(h);
        let h = self.conv2.forward(g, store, h)?;
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: Conv2d,
    blocks: Vec<ResidualBlock>,
}

/// Conv2d pyramid: a 4×4/4 patch stem, then 2×2/2 downsampling per level, each
/// followed by residual `conv3×3 → GELU → conv3×3` blocks.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    stages: Vec<Stage>,
}

const IN_CHANNELS: usize = 3;

impl Backbone {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let same = Conv2dSpec { stride: 1, padding: 1 };
        let mut stages = Vec::with_capacity(NUM_LEVELS);
        let mut prev = IN_CHANNELS;
        for (l, &c) in cfg.level_channels.iter().enumerate() {
            let (k, s) = if l == 0 { (4, 4) } else { (2, 2) };
            let down = Conv2d::new(
                store,
                &format!("{name}.level{l}.down"),
                k,
                prev,
                c,
                Conv2dSpec { stride: s, padding: 0 },
                1.0,
                rng,
            )?;
            let blocks = (0..cfg.blocks_per_level)
                .map(|b| {
                    Ok(ResidualBlock {
                        conv1: Conv2d::new(store, &format!("{name}.level{l}.block{b}.conv1"), 3, c, c, same, 2f64.sqrt(), rng)?,
                        conv2: Conv2d::new(store, &format!("{name}.level{l}.block{b}.conv2"), 3, c, c, same, 0.5, rng)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { down, blocks });
            prev = c;
        }
        Ok(Self {
            cfg: cfg.clone(),
            stages,
        })
    }

    /// `images[N, H, W, 3]` -> pyramid; H and W must be multiples of 32.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, images: Var) -> Result<FeaturePyramid> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[3] != IN_CHANNELS {
            return Err(invalid("backbone", format!("expected [N, H, W, 3], got {s:?}")));
        }
        if s[1] % 32 != 0 || s[2] % 32 != 0 || s[1] == 0 || s[2] == 0 {
            return Err(invalid("backbone", format!("H, W must be divisible by 32, got {}x{}", s[1], s[2])));
        }
        let mut x = images;
        let mut levels = Vec::with_capacity(NUM_LEVELS);
        for stage in &self.stages {
            x = stage.down.forward(g, store, x)?;
            for block in &stage.blocks {
                x = block.forward(g, store, x)?;
            }
            levels.push(x);
        }
        Ok(FeaturePyramid { levels })
    }
}
