//! The model bundle: encoders, shared encoder and decoders over one parameter store.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use titkit_tensor::{log_softmax, Graph, ParamStore, Scalar, Tensor, Var};

use crate::corpus::{decode, encode, MtExample, OcrExample, TitExample, Vocabulary, PAD};
use crate::encoders::{FeatureSequence, ImageEncoder, ImageEncoderConfig, ResNetConfig, TextEncoder};
use crate::error::{Error, Result};
use crate::nn::{component_seed, Ctx, Init};
use crate::raster::Image;
use crate::tps::TpsConfig;
use crate::transformer::{BiLstm, Decoder, Encoder, SeqEncoder, SeqEncoderKind, TransformerConfig};

/// Parameter-name prefixes of the model components.
pub mod component {
    pub const TPS: &str = "tps";
    pub const IMAGE: &str = "img";
    pub const TEXT: &str = "txt";
    pub const ENCODER: &str = "enc";
    pub const TARGET_DECODER: &str = "tdec";
    pub const SOURCE_DECODER: &str = "sdec";
    pub const ALL: [&str; 6] = [TPS, IMAGE, TEXT, ENCODER, TARGET_DECODER, SOURCE_DECODER];
}

/// Which tasks a bundle is built and trained for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "tit")]
    TitOnly,
    #[serde(rename = "tit+mt")]
    TitMt,
    #[serde(rename = "tit+mt+ocr")]
    TitMtOcr,
    #[serde(rename = "tit+ocr")]
    TitOcr,
    #[serde(rename = "ocr")]
    OcrOnly,
    #[serde(rename = "mt")]
    MtOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Tit,
    Mt,
    Ocr,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Tit => "tit",
            Task::Mt => "mt",
            Task::Ocr => "ocr",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::TitOnly => "tit",
            Mode::TitMt => "tit+mt",
            Mode::TitMtOcr => "tit+mt+ocr",
            Mode::TitOcr => "tit+ocr",
            Mode::OcrOnly => "ocr",
            Mode::MtOnly => "mt",
        }
    }

    /// Tasks in round-robin order.
    pub fn tasks(self) -> &'static [Task] {
        match self {
            Mode::TitOnly => &[Task::Tit],
            Mode::TitMt => &[Task::Tit, Task::Mt],
            Mode::TitMtOcr => &[Task::Tit, Task::Mt, Task::Ocr],
            Mode::TitOcr => &[Task::Tit, Task::Ocr],
            Mode::OcrOnly => &[Task::Ocr],
            Mode::MtOnly => &[Task::Mt],
        }
    }

    pub fn has(self, task: Task) -> bool {
        self.tasks().contains(&task)
    }

    pub fn uses_image(self) -> bool {
        self.has(Task::Tit) || self.has(Task::Ocr)
    }

    pub fn uses_text(self) -> bool {
        self.has(Task::Mt)
    }

    pub fn target_decoder(self) -> bool {
        self.has(Task::Tit) || self.has(Task::Mt)
    }

    pub fn source_decoder(self) -> bool {
        self.has(Task::Ocr)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "tit" | "tit_only" => Mode::TitOnly,
            "tit+mt" | "tit_mt" => Mode::TitMt,
            "tit+mt+ocr" | "tit_mt_ocr" => Mode::TitMtOcr,
            "tit+ocr" | "tit_ocr" => Mode::TitOcr,
            "ocr" | "ocr_only" => Mode::OcrOnly,
            "mt" | "mt_only" => Mode::MtOnly,
            _ => return Err(Error::InvalidArgument(format!("unknown mode {s:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image: ImageEncoderConfig,
    pub transformer: TransformerConfig,
    pub seq_encoder: SeqEncoderKind,
    /// Token limits including EOS.
    pub max_src_len: usize,
    pub max_tgt_len: usize,
}

impl ModelConfig {
    /// 32x64 images, small ResNet and TPS, 2+2 layer D=64 transformer.
    pub fn desk() -> Self {
        Self {
            image: ImageEncoderConfig {
                image_height: 32,
                image_width: 64,
                resnet: ResNetConfig::desk(),
                tps: Some(TpsConfig::desk()),
            },
            transformer: TransformerConfig::desk(),
            seq_encoder: SeqEncoderKind::Transformer,
            max_src_len: 16,
            max_tgt_len: 16,
        }
    }

    /// 32 x `image_width` images, 29-layer ResNet, transformer_base sizes.
    pub fn paper(image_width: usize) -> Self {
        let max = image_width / 4;
        Self {
            image: ImageEncoderConfig {
                image_height: 32,
                image_width,
                resnet: ResNetConfig::paper(),
                tps: Some(TpsConfig::paper()),
            },
            transformer: TransformerConfig::paper(),
            seq_encoder: SeqEncoderKind::Transformer,
            max_src_len: 80,
            max_tgt_len: max,
        }
    }

    /// 8x16 images and a D=8 single-layer transformer, for numeric checks.
    pub fn tiny() -> Self {
        Self {
            image: ImageEncoderConfig {
                image_height: 8,
                image_width: 16,
                resnet: ResNetConfig {
                    stem: vec![2],
                    stem_pool: (2, 2),
                    stages: vec![crate::encoders::ResNetStage {
                        channels: 4,
                        blocks: 1,
                        convs: 0,
                        pool: (2, 2),
                    }],
                },
                tps: Some(TpsConfig {
                    fiducials: 6,
                    loc_channels: vec![2],
                    loc_hidden: 4,
                }),
            },
            transformer: TransformerConfig::tiny(),
            seq_encoder: SeqEncoderKind::Transformer,
            max_src_len: 6,
            max_tgt_len: 6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.transformer.validate()?;
        if self.max_src_len < 2 || self.max_tgt_len < 2 {
            return Err(Error::Config("maximum lengths must be at least 2".into()));
        }
        Ok(())
    }
}

/// Loss of one batch: the (label-smoothed) training objective plus the plain
/// per-token negative log-likelihood for logging.
pub struct BatchLoss<'g, T: Scalar> {
    pub loss: Var<'g, T>,
    pub nll: f64,
    pub tokens: usize,
}

/// Mean negative log-likelihood of `labels` under `[N, V]` logits, PAD skipped.
pub fn token_nll<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (f64, usize) {
    let v = *logits.shape().last().expect("logits have a vocabulary axis");
    let lp = log_softmax(&logits.clone().reshape(vec![labels.len(), v]));
    let mut total = 0.0;
    let mut n = 0;
    for (r, &y) in labels.iter().enumerate() {
        if y != PAD {
            total -= lp.data()[r * v + y].as_f64();
            n += 1;
        }
    }
    (total / n.max(1) as f64, n)
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub mode: Mode,
    pub src_vocab: Option<Vocabulary>,
    pub tgt_vocab: Option<Vocabulary>,
    pub store: ParamStore<f32>,
    pub image: Option<ImageEncoder>,
    pub text: Option<TextEncoder>,
    pub encoder: SeqEncoder,
    pub tgt_decoder: Option<Decoder>,
    pub src_decoder: Option<Decoder>,
}

fn need<'a, T>(v: &'a Option<T>, what: &str, mode: Mode) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("mode {mode} has no {what}")))
}

impl Model {
    /// Builds a freshly initialized bundle. Each component draws its initial
    /// values from its own seed, so shared components start identical across modes.
    pub fn new(
        config: ModelConfig,
        mode: Mode,
        src_vocab: Option<Vocabulary>,
        tgt_vocab: Option<Vocabulary>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let needs_src = mode.has(Task::Mt) || mode.has(Task::Ocr);
        if needs_src && src_vocab.is_none() {
            return Err(Error::Config(format!("mode {mode} needs a source vocabulary")));
        }
        if mode.target_decoder() && tgt_vocab.is_none() {
            return Err(Error::Config(format!("mode {mode} needs a target vocabulary")));
        }
        let d = config.transformer.d_model;
        let mut store = ParamStore::new();
        let image = if mode.uses_image() {
            Some(ImageEncoder::new(&mut store, &config.image, d, seed)?)
        } else {
            None
        };
        let rng_for = |name: &str| ChaCha8Rng::seed_from_u64(component_seed(seed, name));
        let text = if mode.uses_text() {
            let mut rng = rng_for(component::TEXT);
            let mut root = Init::new(&mut store, &mut rng);
            let vocab = src_vocab.as_ref().map_or(0, Vocabulary::len);
            Some(TextEncoder::new(&mut root.scope(component::TEXT), vocab, d))
        } else {
            None
        };
        let encoder = {
            let mut rng = rng_for(component::ENCODER);
            let mut root = Init::new(&mut store, &mut rng);
            let mut s = root.scope(component::ENCODER);
            match config.seq_encoder {
                SeqEncoderKind::Transformer => SeqEncoder::Transformer(Encoder::new(&mut s, &config.transformer)),
                SeqEncoderKind::Bilstm => SeqEncoder::BiLstm(BiLstm::new(&mut s, d)?),
            }
        };
        let tgt_decoder = if mode.target_decoder() {
            let mut rng = rng_for(component::TARGET_DECODER);
            let mut root = Init::new(&mut store, &mut rng);
            let v = tgt_vocab.as_ref().map_or(0, Vocabulary::len);
            Some(Decoder::new(
                &mut root.scope(component::TARGET_DECODER),
                &config.transformer,
                v,
                config.max_tgt_len,
            ))
        } else {
            None
        };
        let src_decoder = if mode.source_decoder() {
            let mut rng = rng_for(component::SOURCE_DECODER);
            let mut root = Init::new(&mut store, &mut rng);
            let v = src_vocab.as_ref().map_or(0, Vocabulary::len);
            Some(Decoder::new(
                &mut root.scope(component::SOURCE_DECODER),
                &config.transformer,
                v,
                config.max_src_len,
            ))
        } else {
            None
        };
        Ok(Self {
            config,
            mode,
            src_vocab,
            tgt_vocab,
            store,
            image,
            text,
            encoder,
            tgt_decoder,
            src_decoder,
        })
    }

    pub fn image_encoder(&self) -> Result<&ImageEncoder> {
        need(&self.image, "image encoder", self.mode)
    }

    pub fn text_encoder(&self) -> Result<&TextEncoder> {
        need(&self.text, "text encoder", self.mode)
    }

    pub fn target_decoder(&self) -> Result<&Decoder> {
        need(&self.tgt_decoder, "target decoder", self.mode)
    }

    pub fn source_decoder(&self) -> Result<&Decoder> {
        need(&self.src_decoder, "source decoder", self.mode)
    }

    pub fn source_vocab(&self) -> Result<&Vocabulary> {
        need(&self.src_vocab, "source vocabulary", self.mode)
    }

    pub fn target_vocab(&self) -> Result<&Vocabulary> {
        need(&self.tgt_vocab, "target vocabulary", self.mode)
    }

    pub fn image_batch<T: Scalar>(&self, images: &[&Image]) -> Result<Tensor<T>> {
        let (h, w) = (self.config.image.image_height, self.config.image.image_width);
        if images.is_empty() {
            return Err(Error::InvalidArgument("empty image batch".into()));
        }
        if let Some(img) = images.iter().find(|i| (i.height, i.width) != (h, w)) {
            return Err(Error::Shape(format!(
                "image is {}x{}, model expects {h}x{w}",
                img.height, img.width
            )));
        }
        Ok(Image::batch_nchw(images))
    }

    /// `H_I^E`: image features through the shared encoder.
    pub fn image_memory<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, images: &[&Image]) -> Result<FeatureSequence<'g, T>> {
        let x = cx.constant(self.image_batch(images)?);
        let feats = self.image_encoder()?.forward(cx, x)?;
        Ok(self.encoder.forward(cx, &feats))
    }

    /// `H_T^E`: source text features through the shared encoder.
    pub fn text_memory<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, sources: &[&[usize]]) -> Result<FeatureSequence<'g, T>> {
        let feats = self.text_encoder()?.forward(cx, sources)?;
        Ok(self.encoder.forward(cx, &feats))
    }

    fn batch_loss<'g, T: Scalar>(
        decoder: &Decoder,
        cx: &Ctx<'g, T>,
        memory: &FeatureSequence<'g, T>,
        targets: &[&[usize]],
        smoothing: f64,
    ) -> Result<BatchLoss<'g, T>> {
        let (logits, labels) = decoder.decode_train(cx, memory, targets)?;
        let v = decoder.vocab;
        let flat = logits.reshape(&[labels.len(), v]);
        let (nll, tokens) = token_nll(&flat.value(), &labels);
        Ok(BatchLoss {
            loss: flat.cross_entropy(&labels, Some(PAD), smoothing),
            nll,
            tokens,
        })
    }

    /// Image to target text through the target decoder.
    pub fn loss_tit<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, batch: &[&TitExample], smoothing: f64) -> Result<BatchLoss<'g, T>> {
        let images: Vec<&Image> = batch.iter().map(|e| &e.image).collect();
        let targets: Vec<&[usize]> = batch.iter().map(|e| e.target.as_slice()).collect();
        let memory = self.image_memory(cx, &images)?;
        Self::batch_loss(self.target_decoder()?, cx, &memory, &targets, smoothing)
    }

    /// Source text to target text, sharing the encoder and target decoder.
    pub fn loss_mt<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, batch: &[&MtExample], smoothing: f64) -> Result<BatchLoss<'g, T>> {
        let sources: Vec<&[usize]> = batch.iter().map(|e| e.source.as_slice()).collect();
        let targets: Vec<&[usize]> = batch.iter().map(|e| e.target.as_slice()).collect();
        let memory = self.text_memory(cx, &sources)?;
        Self::batch_loss(self.target_decoder()?, cx, &memory, &targets, smoothing)
    }

    /// Image to source text through the source decoder.
    pub fn loss_ocr<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, batch: &[&OcrExample], smoothing: f64) -> Result<BatchLoss<'g, T>> {
        let images: Vec<&Image> = batch.iter().map(|e| &e.image).collect();
        let targets: Vec<&[usize]> = batch.iter().map(|e| e.source.as_slice()).collect();
        let memory = self.image_memory(cx, &images)?;
        Self::batch_loss(self.source_decoder()?, cx, &memory, &targets, smoothing)
    }

    fn to_strings(ids: Vec<Vec<usize>>, vocab: &Vocabulary) -> Result<Vec<String>> {
        ids.iter().map(|s| decode(s, vocab)).collect()
    }

    /// Greedy (`beam <= 1`) or beam decoding of images into target ids.
    pub fn translate_image_ids(&self, images: &[&Image], beam: usize) -> Result<Vec<Vec<usize>>> {
        let dec = self.target_decoder()?;
        let g = Graph::inference();
        let cx = Ctx::eval(&g, &self.store);
        let memory = self.image_memory(&cx, images)?;
        Ok(dec.search(&cx, &memory, beam, self.config.max_tgt_len))
    }

    pub fn translate_images(&self, images: &[&Image], beam: usize) -> Result<Vec<String>> {
        Self::to_strings(self.translate_image_ids(images, beam)?, self.target_vocab()?)
    }

    /// OCR through the source decoder.
    pub fn recognize_images(&self, images: &[&Image], beam: usize) -> Result<Vec<String>> {
        let dec = self.source_decoder()?;
        let g = Graph::inference();
        let cx = Ctx::eval(&g, &self.store);
        let memory = self.image_memory(&cx, images)?;
        let ids = dec.search(&cx, &memory, beam, self.config.max_src_len);
        Self::to_strings(ids, self.source_vocab()?)
    }

    /// MT through the text encoder and target decoder.
    pub fn translate_texts(&self, texts: &[&str], beam: usize) -> Result<Vec<String>> {
        let vocab = self.source_vocab()?;
        let encoded: Vec<Vec<usize>> = texts.iter().map(|t| encode(t, vocab, self.config.max_src_len)).collect();
        let refs: Vec<&[usize]> = encoded.iter().map(Vec::as_slice).collect();
        let dec = self.target_decoder()?;
        let g = Graph::inference();
        let cx = Ctx::eval(&g, &self.store);
        let memory = self.text_memory(&cx, &refs)?;
        let ids = dec.search(&cx, &memory, beam, self.config.max_tgt_len);
        Self::to_strings(ids, self.target_vocab()?)
    }

    /// TPS-normalized versions of `images` (identity without TPS).
    pub fn normalize_images(&self, images: &[&Image]) -> Result<Vec<Image>> {
        let g = Graph::inference();
        let cx = Ctx::eval(&g, &self.store);
        let x = cx.constant(self.image_batch::<f32>(images)?);
        let y = self.image_encoder()?.normalize(&cx, x).value();
        Ok((0..images.len()).map(|i| Image::from_nchw(&y, i)).collect())
    }

    /// Parameters whose names start with `prefix.`.
    pub fn component_params(&self, prefix: &str) -> usize {
        self.store.numel_with_prefix(&format!("{prefix}."))
    }
}
