//! The two-stage baseline: an OCR model reads the source text, a separately
//! trained MT model translates it. The stages share no parameters.

use serde::{Deserialize, Serialize};

use crate::corpus::{decode, encode, MtExample, OcrExample, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::ImageTranslator;
use crate::model::{Mode, Model, ModelConfig};
use crate::raster::Image;
use crate::trainer::{train, TrainConfig, TrainData, TrainOutcome};

/// Trains an image-to-source recognizer in single-task OCR mode.
pub fn train_ocr_model(
    data: Vec<OcrExample>,
    model_config: ModelConfig,
    src_vocab: Vocabulary,
    config: &TrainConfig,
) -> Result<(Model, TrainOutcome)> {
    let mut model = Model::new(model_config, Mode::OcrOnly, Some(src_vocab), None, config.seed)?;
    let data = TrainData {
        ocr: data,
        ..TrainData::default()
    };
    let cfg = TrainConfig {
        mode: Mode::OcrOnly,
        ..config.clone()
    };
    let outcome = train(&mut model, &data, &cfg)?;
    Ok((model, outcome))
}

/// Trains a text-to-text translator in single-task MT mode.
pub fn train_mt_model(
    data: Vec<MtExample>,
    model_config: ModelConfig,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    config: &TrainConfig,
) -> Result<(Model, TrainOutcome)> {
    let mut model = Model::new(model_config, Mode::MtOnly, Some(src_vocab), Some(tgt_vocab), config.seed)?;
    let data = TrainData {
        mt: data,
        ..TrainData::default()
    };
    let cfg = TrainConfig {
        mode: Mode::MtOnly,
        ..config.clone()
    };
    let outcome = train(&mut model, &data, &cfg)?;
    Ok((model, outcome))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeOutput {
    pub recognized: String,
    pub translation: String,
}

#[derive(Clone, Debug)]
pub struct Cascade {
    pub ocr: Model,
    pub mt: Model,
}

impl Cascade {
    /// Every character the OCR stage can emit must be known to the MT stage.
    pub fn new(ocr: Model, mt: Model) -> Result<Self> {
        let ocr_vocab = ocr.source_vocab()?;
        let mt_vocab = mt.source_vocab()?;
        mt.target_vocab()?;
        if let Some(t) = ocr_vocab.tokens().iter().find(|t| mt_vocab.index(t).is_none()) {
            return Err(Error::VocabularyMismatch(format!(
                "OCR output token {t:?} is not in the MT source vocabulary"
            )));
        }
        Ok(Self { ocr, mt })
    }

    fn run(&self, images: &[&Image]) -> Result<(Vec<CascadeOutput>, usize)> {
        let ocr_ids = {
            let g = titkit_tensor::Graph::inference();
            let cx = crate::nn::Ctx::eval(&g, &self.ocr.store);
            let memory = self.ocr.image_memory(&cx, images)?;
            self.ocr
                .source_decoder()?
                .greedy(&cx, &memory, self.ocr.config.max_src_len)
        };
        let ocr_vocab = self.ocr.source_vocab()?;
        let recognized: Vec<String> = ocr_ids.iter().map(|s| decode(s, ocr_vocab)).collect::<Result<_>>()?;
        // Raw recognized text goes straight into MT, with no correction.
        let mt_vocab = self.mt.source_vocab()?;
        let src: Vec<Vec<usize>> = recognized
            .iter()
            .map(|t| encode(t, mt_vocab, self.mt.config.max_src_len))
            .collect();
        let refs: Vec<&[usize]> = src.iter().map(Vec::as_slice).collect();
        let mt_ids = {
            let g = titkit_tensor::Graph::inference();
            let cx = crate::nn::Ctx::eval(&g, &self.mt.store);
            let memory = self.mt.text_memory(&cx, &refs)?;
            self.mt
                .target_decoder()?
                .greedy(&cx, &memory, self.mt.config.max_tgt_len)
        };
        let steps = ocr_ids.iter().chain(&mt_ids).map(|s| s.len() + 1).sum();
        let tgt_vocab = self.mt.target_vocab()?;
        let out = recognized
            .into_iter()
            .zip(&mt_ids)
            .map(|(recognized, ids)| {
                Ok(CascadeOutput {
                    recognized,
                    translation: decode(ids, tgt_vocab)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok((out, steps))
    }

    /// Greedy OCR, re-encoding, greedy MT.
    pub fn translate(&self, images: &[&Image]) -> Result<Vec<CascadeOutput>> {
        Ok(self.run(images)?.0)
    }
}

impl ImageTranslator for Cascade {
    fn translate_batch(&self, images: &[&Image]) -> Result<(Vec<String>, usize)> {
        let (out, steps) = self.run(images)?;
        Ok((out.into_iter().map(|o| o.translation).collect(), steps))
    }
}
