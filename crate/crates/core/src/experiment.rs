//! The toy cipher task and the ablation grids run on it.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocab, encode, MtExample, OcrExample, TitExample, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{corpus_bleu, translate_all};
use crate::model::{Mode, Model, ModelConfig};
use crate::raster::Image;
use crate::synthesis::{make_toy_parallel, RenderConfig, ToyPairSpec};
use crate::trainer::{train, TaskWeights, TrainConfig, TrainData};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTaskConfig {
    pub toy: ToyPairSpec,
    pub n_train: usize,
    pub n_test: usize,
    /// Extra text-only pairs for the MT task, drawn independently.
    pub n_mt: usize,
    pub render: RenderConfig,
    pub seed: u64,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        Self {
            toy: ToyPairSpec::default(),
            n_train: 2000,
            n_test: 200,
            n_mt: 2000,
            render: RenderConfig::default(),
            seed: 1234,
        }
    }
}

/// In-memory train and test data for the toy cipher.
#[derive(Clone, Debug)]
pub struct ToyTask {
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub train: TrainData,
    pub test_images: Vec<Image>,
    pub test_sources: Vec<String>,
    pub test_targets: Vec<String>,
}

fn render_all(pairs: &[(String, String)], render: &RenderConfig, seed: u64) -> Result<Vec<Image>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, (s, _))| render.render(s, &render.sample_spec(seed.wrapping_add(i as u64))))
        .collect()
}

/// TIT and OCR examples share the same renders; MT pairs are a separate draw.
pub fn build_toy_task(cfg: &ToyTaskConfig, max_src_len: usize, max_tgt_len: usize) -> Result<ToyTask> {
    if cfg.toy.max_len + 1 > max_src_len.min(max_tgt_len) {
        return Err(Error::Config(format!(
            "toy sentences of up to {} characters do not fit the maximum lengths",
            cfg.toy.max_len
        )));
    }
    let src_vocab = build_vocab(&[cfg.toy.alphabet.as_str()])?;
    let tgt_vocab = build_vocab(&[cfg.toy.cipher.as_str()])?;
    let pairs = make_toy_parallel(&cfg.toy, cfg.n_train + cfg.n_test, cfg.seed)?;
    let images = render_all(&pairs, &cfg.render, cfg.seed.wrapping_mul(31).wrapping_add(7))?;
    let mt_pairs = if cfg.n_mt > 0 {
        make_toy_parallel(&cfg.toy, cfg.n_mt, cfg.seed.wrapping_add(1))?
    } else {
        Vec::new()
    };
    let mut train = TrainData::default();
    for ((s, t), img) in pairs.iter().zip(&images).take(cfg.n_train) {
        train.tit.push(TitExample {
            image: img.clone(),
            target: encode(t, &tgt_vocab, max_tgt_len),
        });
        train.ocr.push(OcrExample {
            image: img.clone(),
            source: encode(s, &src_vocab, max_src_len),
        });
    }
    for (s, t) in &mt_pairs {
        train.mt.push(MtExample {
            source: encode(s, &src_vocab, max_src_len),
            target: encode(t, &tgt_vocab, max_tgt_len),
        });
    }
    let test = &pairs[cfg.n_train..];
    Ok(ToyTask {
        src_vocab,
        tgt_vocab,
        train,
        test_images: images[cfg.n_train..].to_vec(),
        test_sources: test.iter().map(|p| p.0.clone()).collect(),
        test_targets: test.iter().map(|p| p.1.clone()).collect(),
    })
}

/// One cell of an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub name: String,
    pub mode: Mode,
    pub tps: bool,
    pub weights: TaskWeights,
}

impl RunSpec {
    /// Same training setup, ignoring the display name.
    pub fn same_setup(&self, other: &RunSpec) -> bool {
        self.mode == other.mode && self.tps == other.tps && self.weights == other.weights
    }

    pub fn new(name: &str, mode: Mode, tps: bool, lambda_mt: f64) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            mode,
            tps,
            weights: TaskWeights::with_mt(lambda_mt)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub name: String,
    pub spec: RunSpec,
    pub seed: u64,
    pub bleu: f64,
    /// Mean TIT training loss over the last 10% of TIT updates.
    pub final_tit_loss: f64,
    pub wall_s: f64,
}

/// Trains one configuration on the toy task and scores test BLEU (greedy).
pub fn run_toy(task: &ToyTask, model_cfg: &ModelConfig, train_cfg: &TrainConfig, run: &RunSpec, seed: u64) -> Result<RunResult> {
    let start = Instant::now();
    let mut cfg = model_cfg.clone();
    if !run.tps {
        cfg.image.tps = None;
    }
    let mut model = Model::new(
        cfg,
        run.mode,
        Some(task.src_vocab.clone()),
        Some(task.tgt_vocab.clone()),
        seed,
    )?;
    let tc = TrainConfig {
        mode: run.mode,
        weights: run.weights,
        seed,
        checkpoint_dir: None,
        ..train_cfg.clone()
    };
    let outcome = train(&mut model, &task.train, &tc)?;
    let images: Vec<&Image> = task.test_images.iter().collect();
    let hyps = translate_all(&model, &images, 50)?;
    let bleu = corpus_bleu(&hyps, &task.test_targets, false)?;
    let tit: Vec<f64> = outcome
        .log
        .iter()
        .filter(|e| e.task == crate::model::Task::Tit)
        .map(|e| e.loss)
        .collect();
    let tail = &tit[tit.len() - (tit.len() / 10).max(1)..];
    Ok(RunResult {
        name: run.name.clone(),
        spec: run.clone(),
        seed,
        bleu,
        final_tit_loss: tail.iter().sum::<f64>() / tail.len() as f64,
        wall_s: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grid {
    /// tit+mt+ocr, tit+mt, tit, and tit+mt+ocr without TPS.
    Default,
    /// tit+mt+ocr over lambda_mt in {0.2, 0.4, 0.6, 0.8, 1.0}.
    Lambda,
    /// Both of the above plus tit+ocr.
    Full,
}

impl std::str::FromStr for Grid {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Grid::Default),
            "lambda" => Ok(Grid::Lambda),
            "full" => Ok(Grid::Full),
            _ => Err(Error::InvalidArgument(format!("unknown grid {s:?}"))),
        }
    }
}

pub const LAMBDA_GRID: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

pub fn lambda_name(l: f64) -> String {
    format!("tit+mt+ocr lambda_mt={l:.1}")
}

pub fn grid_runs(grid: Grid) -> Vec<RunSpec> {
    let d = TaskWeights::default().lambda_mt;
    let base = || {
        vec![
            RunSpec::new("tit+mt+ocr", Mode::TitMtOcr, true, d),
            RunSpec::new("tit+mt", Mode::TitMt, true, d),
            RunSpec::new("tit", Mode::TitOnly, true, d),
            RunSpec::new("tit+mt+ocr no-tps", Mode::TitMtOcr, false, d),
        ]
    };
    let lambda = || LAMBDA_GRID.iter().map(|&l| RunSpec::new(&lambda_name(l), Mode::TitMtOcr, true, l));
    let runs: Vec<Result<RunSpec>> = match grid {
        Grid::Default => base(),
        Grid::Lambda => lambda().collect(),
        Grid::Full => {
            let mut v = base();
            v.push(RunSpec::new("tit+ocr", Mode::TitOcr, true, d));
            v.extend(lambda().filter(|r| r.as_ref().map_or(true, |r| r.weights.lambda_mt != d)));
            v
        }
    };
    runs.into_iter().map(|r| r.expect("grid weights are valid")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub name: String,
    pub median_bleu: f64,
    pub bleus: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<RunResult>,
    pub summary: Vec<AblationSummary>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationReport {
    pub fn from_runs(specs: &[RunSpec], runs: Vec<RunResult>) -> Self {
        let summary = specs
            .iter()
            .map(|s| {
                let bleus: Vec<f64> = runs.iter().filter(|r| r.name == s.name).map(|r| r.bleu).collect();
                AblationSummary {
                    name: s.name.clone(),
                    median_bleu: median(&bleus),
                    bleus,
                }
            })
            .collect();
        Self { runs, summary }
    }

    pub fn median_of(&self, name: &str) -> Option<f64> {
        self.summary.iter().find(|s| s.name == name).map(|s| s.median_bleu)
    }

    /// Markdown comparison table.
    pub fn table(&self) -> String {
        let mut s = String::from("| system | median BLEU | per-seed BLEU |\n|---|---|---|\n");
        for row in &self.summary {
            let seeds: Vec<String> = row.bleus.iter().map(|b| format!("{b:.2}")).collect();
            let _ = writeln!(s, "| {} | {:.2} | {} |", row.name, row.median_bleu, seeds.join(", "));
        }
        s
    }
}

/// Runs every cell of `grid` for every seed. A cell whose setup and seed
/// match an entry of `reuse` (trained with the same task and configs) is
/// taken from there instead of retrained. `progress` sees each result as it lands.
pub fn run_grid(
    task: &ToyTask,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    grid: Grid,
    seeds: &[u64],
    reuse: &[RunResult],
    mut progress: impl FnMut(&RunResult),
) -> Result<AblationReport> {
    let specs = grid_runs(grid);
    let mut runs = Vec::new();
    for &seed in seeds {
        for spec in &specs {
            let prior = reuse.iter().find(|r| r.seed == seed && r.spec.same_setup(spec));
            let r = match prior {
                Some(r) => RunResult {
                    name: spec.name.clone(),
                    spec: spec.clone(),
                    ..r.clone()
                },
                None => run_toy(task, model_cfg, train_cfg, spec, seed)?,
            };
            progress(&r);
            runs.push(r);
        }
    }
    Ok(AblationReport::from_runs(&specs, runs))
}
