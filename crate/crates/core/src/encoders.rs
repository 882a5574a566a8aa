//! Image and text encoders. Both produce a [`FeatureSequence`] of width `D`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use titkit_tensor::{ParamStore, Scalar, Var};

use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::nn::{component_seed, Conv2d, Ctx, Embedding, Init, LayerNorm, Linear};
use crate::tps::{Tps, TpsConfig};

/// `[B, L, D]` features with each item's valid length.
#[derive(Clone)]
pub struct FeatureSequence<'g, T: Scalar> {
    pub features: Var<'g, T>,
    pub lengths: Vec<usize>,
}

impl<'g, T: Scalar> FeatureSequence<'g, T> {
    pub fn batch(&self) -> usize {
        self.features.dim(0)
    }

    pub fn len(&self) -> usize {
        self.features.dim(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.dim(2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResNetStage {
    pub channels: usize,
    /// Residual blocks of two 3x3 convs each.
    pub blocks: usize,
    /// Plain 3x3 convs after the blocks.
    pub convs: usize,
    /// Max-pool window `(h, w)` applied at the end; `(1, 1)` for none.
    pub pool: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResNetConfig {
    /// One 3x3 conv per entry before the stages.
    pub stem: Vec<usize>,
    pub stem_pool: (usize, usize),
    pub stages: Vec<ResNetStage>,
}

impl ResNetConfig {
    /// The 29-layer recognition backbone: 2 stem convs, then stages of
    /// 1, 2, 5 and 3 residual blocks each closed by plain convs.
    pub fn paper() -> Self {
        let st = |channels, blocks, convs, pool| ResNetStage {
            channels,
            blocks,
            convs,
            pool,
        };
        Self {
            stem: vec![32, 64],
            stem_pool: (2, 2),
            stages: vec![
                st(128, 1, 1, (2, 2)),
                st(256, 2, 1, (2, 1)),
                st(512, 5, 1, (1, 1)),
                st(512, 3, 2, (2, 1)),
            ],
        }
    }

    /// Stem plus one residual block, then two plain convs that pool height
    /// only, leaving 2 rows for the column mean.
    pub fn desk() -> Self {
        let st = |channels, blocks, convs, pool| ResNetStage {
            channels,
            blocks,
            convs,
            pool,
        };
        Self {
            stem: vec![16],
            stem_pool: (2, 2),
            stages: vec![st(32, 1, 0, (2, 2)), st(64, 0, 1, (2, 1)), st(64, 0, 1, (2, 1))],
        }
    }

    pub fn width_downsample(&self) -> usize {
        self.stem_pool.1 * self.stages.iter().map(|s| s.pool.1).product::<usize>()
    }

    pub fn height_downsample(&self) -> usize {
        self.stem_pool.0 * self.stages.iter().map(|s| s.pool.0).product::<usize>()
    }

    pub fn out_channels(&self) -> usize {
        self.stages
            .last()
            .map(|s| s.channels)
            .or(self.stem.last().copied())
            .unwrap_or(3)
    }

    /// Number of 3x3 conv layers (1x1 shortcut projections excluded).
    pub fn conv_layers(&self) -> usize {
        self.stem.len() + self.stages.iter().map(|s| 2 * s.blocks + s.convs).sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub resnet: ResNetConfig,
    /// `None` skips rectification.
    pub tps: Option<TpsConfig>,
}

impl ImageEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let (dh, dw) = (self.resnet.height_downsample(), self.resnet.width_downsample());
        if self.image_width % dw != 0 {
            return Err(Error::Config(format!(
                "image width {} is not divisible by the width downsample {dw}",
                self.image_width
            )));
        }
        if self.image_height < dh {
            return Err(Error::Config(format!(
                "image height {} is smaller than the height downsample {dh}",
                self.image_height
            )));
        }
        if let Some(t) = &self.tps {
            crate::tps::check_fiducial_count(t.fiducials)?;
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.image_width / self.resnet.width_downsample()
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl Block {
    fn new<T: Scalar>(init: &mut Init<'_, T>, c_in: usize, c_out: usize) -> Self {
        Self {
            conv1: Conv2d::new(&mut init.scope("conv1"), c_in, c_out, 3, true),
            conv2: Conv2d::new(&mut init.scope("conv2"), c_out, c_out, 3, true),
            shortcut: (c_in != c_out).then(|| Conv2d::new(&mut init.scope("shortcut"), c_in, c_out, 1, false)),
        }
    }

    fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let y = self.conv2.forward(cx, self.conv1.forward(cx, x).relu());
        let skip = match &self.shortcut {
            Some(s) => s.forward(cx, x),
            None => x,
        };
        y.add(skip).relu()
    }
}

#[derive(Clone, Debug)]
pub struct ResNet {
    stem: Vec<Conv2d>,
    stem_pool: (usize, usize),
    stages: Vec<(Vec<Block>, Vec<Conv2d>, (usize, usize))>,
}

impl ResNet {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &ResNetConfig) -> Self {
        let mut c = 3;
        let mut stem = Vec::new();
        for (i, &out) in cfg.stem.iter().enumerate() {
            stem.push(Conv2d::new(&mut init.scope(&format!("stem{i}")), c, out, 3, true));
            c = out;
        }
        let mut stages = Vec::new();
        for (si, st) in cfg.stages.iter().enumerate() {
            let mut s = init.scope(&format!("stage{si}"));
            let mut blocks = Vec::new();
            for b in 0..st.blocks {
                blocks.push(Block::new(&mut s.scope(&format!("block{b}")), c, st.channels));
                c = st.channels;
            }
            let mut convs = Vec::new();
            for j in 0..st.convs {
                convs.push(Conv2d::new(&mut s.scope(&format!("conv{j}")), c, st.channels, 3, true));
                c = st.channels;
            }
            stages.push((blocks, convs, st.pool));
        }
        Self {
            stem,
            stem_pool: cfg.stem_pool,
            stages,
        }
    }

    /// `[B, 3, H, W]` to `[B, C, H', W']`.
    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let pool = |x: Var<'g, T>, p: (usize, usize)| if p == (1, 1) { x } else { x.max_pool2d(p.0, p.1) };
        let mut x = x;
        for conv in &self.stem {
            x = conv.forward(cx, x).relu();
        }
        x = pool(x, self.stem_pool);
        for (blocks, convs, p) in &self.stages {
            for b in blocks {
                x = b.forward(cx, x);
            }
            for conv in convs {
                x = conv.forward(cx, x).relu();
            }
            x = pool(x, *p);
        }
        x
    }
}

/// Optional TPS, ResNet, mean over height, projection to `D` when needed,
/// then LayerNorm so column features sit at the scale of the position codes.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub config: ImageEncoderConfig,
    pub tps: Option<Tps>,
    pub resnet: ResNet,
    pub proj: Option<Linear>,
    pub ln: LayerNorm,
}

impl ImageEncoder {
    /// Registers `tps.*` and `img.*` parameters, each seeded from `seed`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ImageEncoderConfig, d: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let tps = match &cfg.tps {
            Some(t) => {
                let mut rng = ChaCha8Rng::seed_from_u64(component_seed(seed, "tps"));
                let mut root = Init::new(store, &mut rng);
                Some(Tps::new(&mut root.scope("tps"), t, cfg.image_height, cfg.image_width)?)
            }
            None => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(component_seed(seed, "img"));
        let mut root = Init::new(store, &mut rng);
        let mut init = root.scope("img");
        let resnet = ResNet::new(&mut init.scope("resnet"), &cfg.resnet);
        let c = cfg.resnet.out_channels();
        let proj = (c != d).then(|| Linear::new(&mut init.scope("proj"), c, d, true));
        let ln = LayerNorm::new(&mut init.scope("ln"), d);
        Ok(Self {
            config: cfg.clone(),
            tps,
            resnet,
            proj,
            ln,
        })
    }

    /// The TPS-normalized images, or the input itself without TPS.
    pub fn normalize<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, images: Var<'g, T>) -> Var<'g, T> {
        match &self.tps {
            Some(t) => t.forward(cx, images),
            None => images,
        }
    }

    /// Encodes `[B, 3, H, W]` images, already at the configured size.
    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, images: Var<'g, T>) -> Result<FeatureSequence<'g, T>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != self.config.image_height || s[3] != self.config.image_width {
            return Err(Error::Shape(format!(
                "expected [B, 3, {}, {}] images, got {s:?}",
                self.config.image_height, self.config.image_width
            )));
        }
        // Pixels from [0, 1] to [-1, 1].
        let x = self.normalize(cx, images).scale(2.0).add_scalar(-1.0);
        let x = self.resnet.forward(cx, x);
        // [B, C, H', W'] -> mean over H' -> [B, W', C]
        let x = x.mean_axis(2).permute(&[0, 2, 1]);
        let features = match &self.proj {
            Some(p) => p.forward(cx, x),
            None => x,
        };
        let features = self.ln.forward(cx, features);
        let (b, l) = (features.dim(0), features.dim(1));
        Ok(FeatureSequence {
            features,
            lengths: vec![l; b],
        })
    }
}

/// Pads id sequences with PAD to a `[B, L]` row-major block.
pub fn pad_batch(seqs: &[&[usize]]) -> (Vec<usize>, usize, Vec<usize>) {
    let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut flat = Vec::with_capacity(seqs.len() * len);
    for s in seqs {
        flat.extend_from_slice(s);
        flat.extend(std::iter::repeat_n(PAD, len - s.len()));
    }
    (flat, len, seqs.iter().map(|s| s.len()).collect())
}

/// Embedding lookup scaled by `sqrt(D)`.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embed: Embedding,
}

impl TextEncoder {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, vocab: usize, d: usize) -> Self {
        Self {
            embed: Embedding::new(&mut init.scope("embed"), vocab, d),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, seqs: &[&[usize]]) -> Result<FeatureSequence<'g, T>> {
        if let Some(&bad) = seqs.iter().flat_map(|s| s.iter()).find(|&&id| id >= self.embed.vocab) {
            return Err(Error::IndexOutOfVocabulary {
                index: bad,
                size: self.embed.vocab,
            });
        }
        let (flat, len, lengths) = pad_batch(seqs);
        let features = self
            .embed
            .forward(cx, &flat, seqs.len(), len)
            .scale((self.embed.dim as f64).sqrt());
        Ok(FeatureSequence { features, lengths })
    }
}
