use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use titkit::corpus::{build_vocab, encode, MtExample, OcrExample, TitExample, Vocabulary};
use titkit::experiment::{build_toy_task, ToyTaskConfig};
use titkit::model::{Mode, Model, ModelConfig, Task};
use titkit::nn::Ctx;
use titkit::raster::Image;
use titkit::trainer::{train, TaskWeights, TrainConfig, TrainData, Trainer};
use titkit_tensor::Graph;

fn vocabs() -> (Vocabulary, Vocabulary) {
    (build_vocab(&["ABC"]).unwrap(), build_vocab(&["xyz"]).unwrap())
}

fn data(cfg: &ModelConfig, n: usize, seed: u64) -> TrainData {
    let (s, t) = vocabs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.image.image_height, cfg.image.image_width);
    let mut d = TrainData::default();
    for i in 0..n {
        let src: String = (0..1 + i % 3).map(|_| ['A', 'B', 'C'][rng.random_range(0..3)]).collect();
        let tgt: String = src.chars().rev().map(|c| c.to_ascii_lowercase()).collect::<String>().replace('a', "x");
        let img = Image::new(h, w, (0..h * w * 3).map(|_| rng.random()).collect());
        d.tit.push(TitExample {
            image: img.clone(),
            target: encode(&tgt, &t, cfg.max_tgt_len),
        });
        d.ocr.push(OcrExample {
            image: img,
            source: encode(&src, &s, cfg.max_src_len),
        });
        d.mt.push(MtExample {
            source: encode(&src, &s, cfg.max_src_len),
            target: encode(&tgt, &t, cfg.max_tgt_len),
        });
    }
    d
}

fn model(mode: Mode, seed: u64) -> Model {
    let (s, t) = vocabs();
    Model::new(ModelConfig::tiny(), mode, Some(s), Some(t), seed).unwrap()
}

fn config(mode: Mode, rounds: u64) -> TrainConfig {
    TrainConfig {
        mode,
        batch_tit: 2,
        batch_mt: 2,
        batch_ocr: 2,
        lr: 1e-2,
        warmup: 5,
        rounds,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn tit_only_logs_one_entry_per_step() {
    let mut m = model(Mode::TitOnly, 0);
    let d = data(&m.config, 8, 1);
    let out = train(&mut m, &d, &config(Mode::TitOnly, 10)).unwrap();
    assert_eq!(out.log.len(), 10);
    assert!(out.log.iter().all(|e| e.task == Task::Tit));
    assert_eq!(out.log.iter().map(|e| e.step).collect::<Vec<_>>(), (1..=10).collect::<Vec<_>>());
    assert!(out.checkpoint.is_none());
}

#[test]
fn three_tasks_interleave_round_robin() {
    let mut m = model(Mode::TitMtOcr, 0);
    let d = data(&m.config, 8, 2);
    let out = train(&mut m, &d, &config(Mode::TitMtOcr, 9)).unwrap();
    assert_eq!(out.log.len(), 27);
    for (i, e) in out.log.iter().enumerate() {
        assert_eq!(e.task, [Task::Tit, Task::Mt, Task::Ocr][i % 3]);
    }
}

#[test]
fn zero_weight_task_is_skipped() {
    let mut m = model(Mode::TitMtOcr, 0);
    let d = data(&m.config, 8, 2);
    let cfg = TrainConfig {
        weights: TaskWeights::with_mt(1.0).unwrap(),
        ..config(Mode::TitMtOcr, 4)
    };
    let out = train(&mut m, &d, &cfg).unwrap();
    assert_eq!(out.log.len(), 8);
    assert!(out.log.iter().all(|e| e.task != Task::Ocr));
}

#[test]
fn same_seed_same_log() {
    let run = || {
        let mut m = model(Mode::TitMtOcr, 5);
        let d = data(&m.config, 8, 3);
        let out = train(&mut m, &d, &config(Mode::TitMtOcr, 4)).unwrap();
        let log: Vec<(u64, Task, u64, u64)> = out
            .log
            .iter()
            .map(|e| (e.step, e.task, e.loss.to_bits(), e.lr.to_bits()))
            .collect();
        (log, titkit::checkpoint::to_bytes(&m).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn mode_dataset_mismatch_is_rejected() {
    let m = model(Mode::TitMtOcr, 0);
    let mut d = data(&m.config, 4, 1);
    d.mt.clear();
    let err = Trainer::new(config(Mode::TitMtOcr, 1), &m, &d).err().unwrap();
    assert!(matches!(err, titkit::Error::DatasetMode(_)));
    let small = model(Mode::TitOnly, 0);
    assert!(Trainer::new(config(Mode::TitMt, 1), &small, &data(&small.config, 4, 1)).is_err());
}

fn snapshot(m: &Model, prefix: &str) -> Vec<Vec<f32>> {
    m.store
        .iter()
        .filter(|(_, name, _)| name.starts_with(&format!("{prefix}.")))
        .map(|(_, _, t)| t.data().to_vec())
        .collect()
}

fn tit_path_memory(m: &Model, d: &TrainData) -> Vec<f32> {
    let g = Graph::inference();
    let cx = Ctx::eval(&g, &m.store);
    let images: Vec<&Image> = d.tit.iter().take(2).map(|e| &e.image).collect();
    m.image_memory(&cx, &images).unwrap().features.value().data().to_vec()
}

/// One update of a single task on a full three-task bundle.
fn single_task_round(task_mode: Mode) -> (Model, Model, TrainData) {
    let before = model(Mode::TitMtOcr, 4);
    let mut after = before.clone();
    let d = data(&before.config, 8, 6);
    let mut t = Trainer::new(config(task_mode, 1), &after, &d).unwrap();
    t.round(&mut after, &d).unwrap();
    assert_eq!(t.steps(), 1);
    (before, after, d)
}

#[test]
fn mt_round_moves_shared_parts_but_not_the_image_encoder() {
    let (before, after, d) = single_task_round(Mode::MtOnly);
    for p in ["img", "tps", "sdec"] {
        assert_eq!(snapshot(&before, p), snapshot(&after, p), "{p} changed");
    }
    for p in ["enc", "tdec", "txt"] {
        assert_ne!(snapshot(&before, p), snapshot(&after, p), "{p} unchanged");
    }
    // The image path still sees the change through the shared encoder.
    assert_ne!(tit_path_memory(&before, &d), tit_path_memory(&after, &d));
}

#[test]
fn ocr_round_moves_image_encoder_but_not_the_target_decoder() {
    let (before, after, _) = single_task_round(Mode::OcrOnly);
    for p in ["tdec", "txt"] {
        assert_eq!(snapshot(&before, p), snapshot(&after, p), "{p} changed");
    }
    for p in ["img", "enc", "sdec"] {
        assert_ne!(snapshot(&before, p), snapshot(&after, p), "{p} unchanged");
    }
}

#[test]
fn checkpoints_and_metrics_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = model(Mode::TitMt, 0);
    let d = data(&m.config, 4, 1);
    let cfg = TrainConfig {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        checkpoint_every: 2,
        ..config(Mode::TitMt, 3)
    };
    let out = train(&mut m, &d, &cfg).unwrap();
    let csv = std::fs::read_to_string(out.metrics.unwrap()).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,task,loss,lr,wall_ms"));
    assert_eq!(lines.count(), 6);
    let loaded = titkit::checkpoint::load_checkpoint(&out.checkpoint.unwrap()).unwrap();
    assert_eq!(titkit::checkpoint::to_bytes(&loaded).unwrap(), titkit::checkpoint::to_bytes(&m).unwrap());
    assert!(!dir.path().join("model.tmp").exists());
}

/// The sanity run: 2000 TIT updates of the desk model on the toy cipher.
#[test]
fn toy_cipher_loss_falls_window_by_window() {
    let cfg = ModelConfig::desk();
    let task_cfg = ToyTaskConfig {
        n_mt: 0,
        ..ToyTaskConfig::default()
    };
    let task = build_toy_task(&task_cfg, cfg.max_src_len, cfg.max_tgt_len).unwrap();
    let mut model = Model::new(cfg, Mode::TitOnly, None, Some(task.tgt_vocab.clone()), 0).unwrap();
    let tc = TrainConfig {
        mode: Mode::TitOnly,
        rounds: 2000,
        ..TrainConfig::toy()
    };
    let log = train(&mut model, &task.train, &tc).unwrap().log;
    assert_eq!(log.len(), 2000);
    let windows: Vec<f64> = log
        .chunks(100)
        .map(|c| c.iter().map(|e| e.loss).sum::<f64>() / c.len() as f64)
        .collect();
    for pair in windows.windows(2) {
        assert!(pair[1] <= pair[0], "window means rose: {windows:.3?}");
    }
    assert!(*windows.last().unwrap() < 0.5, "{windows:.3?}");
}
