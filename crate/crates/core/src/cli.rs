//! The `titkit` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::cascade::Cascade;
use crate::checkpoint::load_checkpoint;
use crate::config::{FlatConfig, RunManifest};
use crate::corpus::{build_vocab, load_dataset, Dataset, DatasetKind, MANIFEST};
use crate::error::{Error, Result};
use crate::eval::{
    benchmark_decode, cascade_params, corpus_bleu, corpus_cer, e2e_params, translate_all, ImageTranslator,
    ParamSummary, Report,
};
use crate::experiment::{build_toy_task, run_grid, Grid};
use crate::model::{Mode, Model, Task};
use crate::raster::{bilinear_resize, Image};
use crate::synthesis::{make_toy_parallel, synth_mt_dataset, synth_ocr_dataset, synth_tit_dataset};
use crate::trainer::{train, TrainData, CHECKPOINT_FILE, METRICS_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "titkit", version, about = "Text image translation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// Flat TOML config file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides one config key, e.g. `--set lr=0.001`. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    /// Dedicated flags over `--set` over the file.
    fn resolve(&self, flags: FlatConfig) -> Result<FlatConfig> {
        let mut cfg = match &self.config {
            Some(p) => FlatConfig::load(p)?,
            None => FlatConfig::default(),
        };
        for s in &self.set {
            cfg = cfg.overlay(&FlatConfig::from_assignment(s)?);
        }
        Ok(cfg.overlay(&flags))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SynthKind {
    Tit,
    Ocr,
    #[value(name = "toy-mt")]
    ToyMt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Metric {
    Bleu,
    Cer,
    Both,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generates a toy dataset: rendered images (tit, ocr) or text pairs (toy-mt).
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Trains a model and writes model.titk, metrics.csv and run.json to --out.
    Train {
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[arg(long, value_name = "DIR")]
        tit: Option<PathBuf>,
        /// MT manifest file or its directory.
        #[arg(long, value_name = "FILE")]
        mt: Option<PathBuf>,
        /// OCR dataset; defaults to the TIT images with their source text.
        #[arg(long, value_name = "DIR")]
        ocr: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rounds: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Scores a checkpoint (or a cascade directory) on a dataset; prints a JSON report.
    Eval {
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        metric: Metric,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        /// Also writes the report here, with a run.json beside it.
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
    /// Per-sentence decode latency of an end-to-end model and/or a cascade.
    Bench {
        #[arg(long, value_name = "PATH")]
        ckpt: Option<PathBuf>,
        /// Directory holding `ocr/` and `mt/` training outputs.
        #[arg(long, value_name = "DIR")]
        cascade_ckpt: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        /// Number of dataset images to time.
        #[arg(long, default_value_t = 100)]
        limit: usize,
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
    /// Translates one image and prints the target text.
    Translate {
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
        #[arg(long, value_name = "PNG")]
        image: PathBuf,
        /// Resizes images of the wrong shape instead of failing.
        #[arg(long)]
        resize: bool,
        /// Writes the TPS-normalized input into this directory.
        #[arg(long, value_name = "DIR")]
        dump_normalized: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        beam: usize,
    },
    /// OCR then MT on one image.
    CascadeTranslate {
        #[arg(long, value_name = "CKPT")]
        ocr: PathBuf,
        #[arg(long, value_name = "CKPT")]
        mt: PathBuf,
        #[arg(long, value_name = "PNG")]
        image: PathBuf,
        /// Also prints the recognized source text.
        #[arg(long)]
        show_intermediate: bool,
        #[arg(long)]
        resize: bool,
    },
    /// Trains an ablation grid on the toy task and prints a BLEU table.
    Ablate {
        #[arg(long, value_parser = parse_grid, default_value = "default")]
        grid: Grid,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_grid(s: &str) -> std::result::Result<Grid, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn main(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli.command, &argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("titkit: error: {e}");
            EXIT_FAILURE
        }
    }
}

fn run(command: Command, argv: &[String]) -> Result<()> {
    let argv = argv.to_vec();
    match command {
        Command::Synth {
            kind,
            n,
            seed,
            out,
            config,
        } => synth(kind, n, seed, &out, &config, argv),
        Command::Train {
            mode,
            tit,
            mt,
            ocr,
            out,
            seed,
            rounds,
            config,
        } => {
            let flags = FlatConfig {
                mode,
                seed,
                rounds,
                ..FlatConfig::default()
            };
            train_cmd(config.resolve(flags)?, tit, mt, ocr, &out, argv)
        }
        Command::Eval {
            ckpt,
            dataset,
            metric,
            beam,
            report,
        } => eval_cmd(&ckpt, &dataset, metric, beam, report.as_deref(), argv),
        Command::Bench {
            ckpt,
            cascade_ckpt,
            dataset,
            repeats,
            limit,
            report,
        } => bench_cmd(
            ckpt.as_deref(),
            cascade_ckpt.as_deref(),
            &dataset,
            repeats,
            limit,
            report.as_deref(),
            argv,
        ),
        Command::Translate {
            ckpt,
            image,
            resize,
            dump_normalized,
            beam,
        } => translate_cmd(&ckpt, &image, resize, dump_normalized.as_deref(), beam, argv),
        Command::CascadeTranslate {
            ocr,
            mt,
            image,
            show_intermediate,
            resize,
        } => {
            let cascade = Cascade::new(load_model(&ocr)?, load_model(&mt)?)?;
            let img = load_input(&image, &cascade.ocr, resize)?;
            let out = cascade.translate(&[&img])?.remove(0);
            if show_intermediate {
                println!("ocr: {}", out.recognized);
                println!("translation: {}", out.translation);
            } else {
                println!("{}", out.translation);
            }
            Ok(())
        }
        Command::Ablate {
            grid,
            seeds,
            out,
            config,
        } => {
            let flags = FlatConfig {
                seeds,
                ..FlatConfig::default()
            };
            ablate(config.resolve(flags)?, grid, out.as_deref(), argv)
        }
    }
}

fn checkpoint_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    }
}

/// A checkpoint file, or a training output directory holding one.
pub fn load_model(path: &Path) -> Result<Model> {
    load_checkpoint(&checkpoint_file(path))
}

fn is_cascade_dir(path: &Path) -> bool {
    path.join("ocr").is_dir() && path.join("mt").is_dir()
}

/// Loads `DIR/ocr` and `DIR/mt` as a cascade.
pub fn load_cascade(dir: &Path) -> Result<Cascade> {
    Cascade::new(load_model(&dir.join("ocr"))?, load_model(&dir.join("mt"))?)
}

/// Reads a PNG and brings it to the model's input shape, or fails.
fn load_input(path: &Path, model: &Model, resize: bool) -> Result<Image> {
    let img = Image::load_png(path)?;
    let (h, w) = (model.config.image.image_height, model.config.image.image_width);
    if (img.height, img.width) == (h, w) {
        Ok(img)
    } else if resize {
        Ok(bilinear_resize(&img, h, w))
    } else {
        Err(Error::Shape(format!(
            "{} is {}x{} but the model expects {h}x{w}; pass --resize to rescale it",
            path.display(),
            img.height,
            img.width
        )))
    }
}

fn write_manifest(dir: &Path, command: &str, argv: Vec<String>, cfg: &FlatConfig, outputs: &[&str]) -> Result<()> {
    let mut m = RunManifest::new(command, argv, cfg);
    m.outputs = outputs.iter().map(|s| s.to_string()).collect();
    m.write(dir)?;
    Ok(())
}

fn synth(kind: SynthKind, n: usize, seed: Option<u64>, out: &Path, config: &ConfigArgs, argv: Vec<String>) -> Result<()> {
    let cfg = config.resolve(FlatConfig {
        seed,
        ..FlatConfig::default()
    })?;
    let seed = cfg.seed.unwrap_or(0);
    let toy = cfg.toy()?;
    let pairs = make_toy_parallel(&toy, n, seed)?;
    let path = match kind {
        SynthKind::Tit => synth_tit_dataset(&pairs, &cfg.render()?, out, seed)?,
        SynthKind::Ocr => {
            let sources: Vec<&str> = pairs.iter().map(|p| p.0.as_str()).collect();
            synth_ocr_dataset(&sources, &cfg.render()?, out, seed)?
        }
        SynthKind::ToyMt => synth_mt_dataset(&pairs, out)?,
    };
    let outputs: &[&str] = if kind == SynthKind::ToyMt {
        &[MANIFEST]
    } else {
        &[MANIFEST, "images"]
    };
    write_manifest(out, "synth", argv, &cfg, outputs)?;
    println!("wrote {n} records to {}", path.display());
    Ok(())
}

fn train_cmd(
    mut cfg: FlatConfig,
    tit: Option<PathBuf>,
    mt: Option<PathBuf>,
    ocr: Option<PathBuf>,
    out: &Path,
    argv: Vec<String>,
) -> Result<()> {
    let tit = tit.map(|p| load_dataset(&p, DatasetKind::Tit)).transpose()?;
    let mt = mt.map(|p| load_dataset(&p, DatasetKind::Mt)).transpose()?;
    let mut ocr = ocr.map(|p| load_dataset(&p, DatasetKind::Ocr)).transpose()?;
    let mode = cfg.mode.unwrap_or(Mode::TitMtOcr);
    if ocr.is_none() && mode.has(Task::Ocr) {
        if let Some(t) = tit.as_ref().filter(|t| t.records.iter().all(|r| r.source.is_some())) {
            ocr = Some(Dataset {
                kind: DatasetKind::Ocr,
                records: t.records.clone(),
            });
        }
    }
    let shape = [&tit, &ocr].into_iter().flatten().find_map(Dataset::image_shape);
    if let Some((h, w)) = shape {
        cfg.image_height.get_or_insert(h);
        cfg.image_width.get_or_insert(w);
    }
    let model_cfg = cfg.model()?;
    let (h, w) = (model_cfg.image.image_height, model_cfg.image.image_width);
    let mut sources = Vec::new();
    let mut targets = Vec::new();
    for d in [&tit, &mt, &ocr].into_iter().flatten() {
        d.check_image_shape(h, w)?;
        sources.extend(d.sources());
        targets.extend(d.targets());
    }
    let src_vocab = if mode.has(Task::Mt) || mode.has(Task::Ocr) {
        Some(build_vocab(&sources)?)
    } else {
        None
    };
    let tgt_vocab = if mode.target_decoder() {
        Some(build_vocab(&targets)?)
    } else {
        None
    };
    let mut data = TrainData::default();
    if let (Some(d), Some(v), true) = (&tit, &tgt_vocab, mode.has(Task::Tit)) {
        data.tit = d.tit_examples(v, model_cfg.max_tgt_len)?;
    }
    if let (Some(d), Some(s), Some(t), true) = (&mt, &src_vocab, &tgt_vocab, mode.has(Task::Mt)) {
        data.mt = d.mt_examples(s, t, model_cfg.max_src_len, model_cfg.max_tgt_len)?;
    }
    if let (Some(d), Some(v), true) = (&ocr, &src_vocab, mode.has(Task::Ocr)) {
        data.ocr = d.ocr_examples(v, model_cfg.max_src_len)?;
    }
    let mut train_cfg = cfg.train()?;
    train_cfg.mode = mode;
    train_cfg.checkpoint_dir = Some(out.to_path_buf());
    let mut model = Model::new(model_cfg, mode, src_vocab, tgt_vocab, train_cfg.seed)?;
    let outcome = train(&mut model, &data, &train_cfg)?;
    write_manifest(out, "train", argv, &cfg, &[CHECKPOINT_FILE, METRICS_FILE])?;
    let last = outcome.log.last().map_or(f64::NAN, |e| e.loss);
    println!(
        "trained {mode} for {} updates, last loss {last:.4}; wrote {}",
        outcome.log.len(),
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

enum System {
    E2e(Box<Model>),
    Cascade(Box<Cascade>),
}

fn load_system(path: &Path) -> Result<System> {
    if path.is_dir() && is_cascade_dir(path) {
        Ok(System::Cascade(Box::new(load_cascade(path)?)))
    } else {
        Ok(System::E2e(Box::new(load_model(path)?)))
    }
}

fn finish_report(report: &Report, path: Option<&Path>, command: &str, argv: Vec<String>) -> Result<()> {
    let json = report.to_json();
    // A closed pipe downstream is not an error worth reporting.
    let _ = writeln!(std::io::stdout().lock(), "{json}");
    if let Some(p) = path {
        let dir = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        fs::write(p, &json).map_err(|e| Error::io(p, e))?;
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("report.json");
        write_manifest(dir, command, argv, &FlatConfig::default(), &[name])?;
    }
    Ok(())
}

fn eval_cmd(ckpt: &Path, dataset: &Path, metric: Metric, beam: usize, report_path: Option<&Path>, argv: Vec<String>) -> Result<()> {
    let system = load_system(ckpt)?;
    let kind = if metric == Metric::Cer {
        DatasetKind::Ocr
    } else {
        DatasetKind::Tit
    };
    let data = load_dataset(dataset, kind)?;
    let images: Vec<&Image> = data.records.iter().filter_map(|r| r.image.as_ref()).collect();
    let mut report = Report::empty();
    let want_bleu = metric != Metric::Cer;
    let want_cer = metric != Metric::Bleu;
    let sources = || -> Result<Vec<&str>> {
        let s = data.sources();
        if s.len() != data.len() {
            return Err(Error::InvalidArgument("CER needs a source text on every record".into()));
        }
        Ok(s)
    };
    match &system {
        System::E2e(model) => {
            if want_bleu {
                let hyps = if beam <= 1 {
                    translate_all(model.as_ref(), &images, 32)?
                } else {
                    model.translate_images(&images, beam)?
                };
                report.bleu = Some(corpus_bleu(&hyps, &data.targets(), false)?);
            }
            // `both` on a model without a source decoder reports BLEU only.
            if want_cer && (metric == Metric::Cer || model.src_decoder.is_some()) {
                let hyps = model.recognize_images(&images, beam)?;
                report.cer = Some(corpus_cer(&hyps, &sources()?)?);
            }
            report.params.insert("e2e".into(), ParamSummary::from(&e2e_params(model)));
        }
        System::Cascade(c) => {
            let out = c.translate(&images)?;
            if want_bleu {
                let hyps: Vec<&str> = out.iter().map(|o| o.translation.as_str()).collect();
                report.bleu = Some(corpus_bleu(&hyps, &data.targets(), false)?);
            }
            if want_cer {
                let hyps: Vec<&str> = out.iter().map(|o| o.recognized.as_str()).collect();
                report.cer = Some(corpus_cer(&hyps, &sources()?)?);
            }
            report
                .params
                .insert("cascade".into(), ParamSummary::from(&cascade_params(&c.ocr, &c.mt)));
        }
    }
    finish_report(&report, report_path, "eval", argv)
}

fn bench_cmd(
    ckpt: Option<&Path>,
    cascade_ckpt: Option<&Path>,
    dataset: &Path,
    repeats: usize,
    limit: usize,
    report_path: Option<&Path>,
    argv: Vec<String>,
) -> Result<()> {
    if ckpt.is_none() && cascade_ckpt.is_none() {
        return Err(Error::InvalidArgument("bench needs --ckpt and/or --cascade-ckpt".into()));
    }
    let data = load_dataset(dataset, DatasetKind::Tit)?;
    let images: Vec<&Image> = data.records.iter().filter_map(|r| r.image.as_ref()).take(limit).collect();
    let mut report = Report::empty();
    if let Some(p) = ckpt {
        let model = load_model(p)?;
        report
            .latency
            .insert("e2e".into(), benchmark_decode(&model as &dyn ImageTranslator, &images, repeats)?);
        report.params.insert("e2e".into(), ParamSummary::from(&e2e_params(&model)));
    }
    if let Some(p) = cascade_ckpt {
        let c = load_cascade(p)?;
        report.latency.insert("cascade".into(), benchmark_decode(&c, &images, repeats)?);
        report
            .params
            .insert("cascade".into(), ParamSummary::from(&cascade_params(&c.ocr, &c.mt)));
    }
    report.compare();
    finish_report(&report, report_path, "bench", argv)
}

fn translate_cmd(ckpt: &Path, image: &Path, resize: bool, dump: Option<&Path>, beam: usize, argv: Vec<String>) -> Result<()> {
    let model = load_model(ckpt)?;
    let img = load_input(image, &model, resize)?;
    let text = model.translate_images(&[&img], beam)?.remove(0);
    if let Some(dir) = dump {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let name = format!("{stem}.normalized.png");
        model.normalize_images(&[&img])?[0].save_png(&dir.join(&name))?;
        write_manifest(dir, "translate", argv, &FlatConfig::default(), &[&name])?;
    }
    println!("{text}");
    Ok(())
}

fn ablate(cfg: FlatConfig, grid: Grid, out: Option<&Path>, argv: Vec<String>) -> Result<()> {
    let model_cfg = cfg.model()?;
    let task_cfg = cfg.toy_task()?;
    let (h, w) = (task_cfg.render.image_height, task_cfg.render.image_width);
    if (h, w) != (model_cfg.image.image_height, model_cfg.image.image_width) {
        return Err(Error::Config(format!(
            "render size {h}x{w} does not match the model input {}x{}; set image_height and image_width",
            model_cfg.image.image_height, model_cfg.image.image_width
        )));
    }
    let train_cfg = cfg.train()?;
    let task = build_toy_task(&task_cfg, model_cfg.max_src_len, model_cfg.max_tgt_len)?;
    let seeds = cfg.seed_list();
    let report = run_grid(&task, &model_cfg, &train_cfg, grid, &seeds, &[], |r| {
        eprintln!("seed {} {}: BLEU {:.2} ({:.1}s)", r.seed, r.name, r.bleu, r.wall_s);
    })?;
    let table = report.table();
    print!("{table}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("ablation.json");
        fs::write(&p, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("table.md");
        fs::write(&p, &table).map_err(|e| Error::io(&p, e))?;
        write_manifest(dir, "ablate", argv, &cfg, &["ablation.json", "table.md"])?;
    }
    Ok(())
}
