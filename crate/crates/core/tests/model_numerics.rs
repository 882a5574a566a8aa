use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use titkit::corpus::{build_vocab, encode, MtExample, OcrExample, TitExample, Vocabulary, EOS, PAD};
use titkit::encoders::FeatureSequence;
use titkit::model::{Mode, Model, ModelConfig};
use titkit::nn::Ctx;
use titkit::raster::Image;
use titkit::transformer::SeqEncoderKind;
use titkit_tensor::gradcheck::check_params;
use titkit_tensor::{log_softmax, softmax, Graph, ParamStore, Tensor};

fn vocabs() -> (Vocabulary, Vocabulary) {
    (build_vocab(&["ABC"]).unwrap(), build_vocab(&["xyz"]).unwrap())
}

fn image(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Image {
    let (h, w) = (cfg.image.image_height, cfg.image.image_width);
    Image::new(h, w, (0..h * w * 3).map(|_| rng.random()).collect())
}

struct Batch {
    tit: Vec<TitExample>,
    mt: Vec<MtExample>,
    ocr: Vec<OcrExample>,
}

fn batch(cfg: &ModelConfig, src: &Vocabulary, tgt: &Vocabulary, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texts = [("AB", "yx"), ("CAB", "xzz"), ("B", "z")];
    let mut b = Batch {
        tit: vec![],
        mt: vec![],
        ocr: vec![],
    };
    for (s, t) in texts {
        let se = encode(s, src, cfg.max_src_len);
        let te = encode(t, tgt, cfg.max_tgt_len);
        b.tit.push(TitExample {
            image: image(cfg, &mut rng),
            target: te.clone(),
        });
        b.ocr.push(OcrExample {
            image: image(cfg, &mut rng),
            source: se.clone(),
        });
        b.mt.push(MtExample { source: se, target: te });
    }
    b
}

fn tiny_model(mode: Mode, kind: SeqEncoderKind) -> Model {
    let mut cfg = ModelConfig::tiny();
    cfg.seq_encoder = kind;
    let (s, t) = vocabs();
    Model::new(cfg, mode, Some(s), Some(t), 3).unwrap()
}

/// Moves the parameters to a generic point: zero-initialized biases put ReLUs
/// exactly on their kink wherever the warp samples outside the image, and the
/// localization head starts on its clamp boundary.
fn jitter_params(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    if let Some(w) = store.find("tps.fc2.weight") {
        let shape = store.get(w).shape().to_vec();
        store.set(w, Tensor::uniform(shape, 0.3, rng));
        let b = store.find("tps.fc2.bias").unwrap();
        let shrunk = store.get(b).map(|v| v * 0.8);
        store.set(b, shrunk);
    }
    let biases: Vec<_> = store.ids().filter(|&p| store.name(p).ends_with("bias")).collect();
    for pid in biases {
        let noise = Tensor::<f64>::uniform(store.get(pid).shape().to_vec(), 0.05, rng);
        let moved = store.get(pid).zip_map(&noise, |a, b| a + b);
        store.set(pid, moved);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for scale in [1.0, 10.0, 100.0] {
        let x = Tensor::<f32>::uniform(vec![7, 33], scale, &mut rng);
        let p = softmax(&x);
        for row in p.data().chunks(33) {
            let s: f64 = row.iter().map(|&v| f64::from(v)).sum();
            assert!((s - 1.0).abs() <= 1e-6, "row sum {s}");
        }
    }
}

#[test]
fn decoder_is_causal() {
    let model = tiny_model(Mode::TitMt, SeqEncoderKind::Transformer);
    let store = model.store.cast::<f64>();
    let dec = model.target_decoder().unwrap();
    let g = Graph::inference();
    let cx = Ctx::eval(&g, &store);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let memory = FeatureSequence {
        features: cx.constant(Tensor::uniform(vec![1, 4, 8], 1.0, &mut rng)),
        lengths: vec![4],
    };
    let ids = vec![1, 4, 5, 6, 4, 5];
    let base = dec.forward(&cx, &memory, &ids, ids.len()).value();
    let v = dec.vocab;
    for j in 1..ids.len() {
        let mut changed = ids.clone();
        changed[j] = if ids[j] == 6 { 4 } else { 6 };
        let out = dec.forward(&cx, &memory, &changed, ids.len()).value();
        for pos in 0..ids.len() {
            let a = &base.data()[pos * v..(pos + 1) * v];
            let b = &out.data()[pos * v..(pos + 1) * v];
            let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            if pos < j {
                assert_eq!(diff, 0.0, "position {pos} saw token {j}");
            } else if pos == j {
                assert!(diff > 0.0, "position {pos} ignores its own input");
            }
        }
    }
}

#[test]
fn encoder_ignores_padding() {
    for kind in [SeqEncoderKind::Transformer, SeqEncoderKind::Bilstm] {
        let model = tiny_model(Mode::MtOnly, kind);
        let store = model.store.cast::<f64>();
        let g = Graph::inference();
        let cx = Ctx::eval(&g, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::uniform(vec![1, 5, 8], 1.0, &mut rng);
        let mut y = x.clone();
        for v in &mut y.data_mut()[3 * 8..] {
            *v += 0.7;
        }
        let run = |t: Tensor<f64>| {
            let fs = FeatureSequence {
                features: cx.constant(t),
                lengths: vec![3],
            };
            model.encoder.forward(&cx, &fs).features.value()
        };
        let (a, b) = (run(x), run(y));
        for (p, q) in a.data()[..3 * 8].iter().zip(&b.data()[..3 * 8]) {
            assert!((p - q).abs() < 1e-12, "{kind:?}: valid outputs depend on padding");
        }
    }
}

#[test]
fn all_parameter_groups_pass_gradcheck() {
    for kind in [SeqEncoderKind::Transformer, SeqEncoderKind::Bilstm] {
        let model = tiny_model(Mode::TitMtOcr, kind);
        let (s, t) = vocabs();
        let b = batch(&model.config, &s, &t, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = model.store.cast::<f64>();
        jitter_params(&mut store, &mut rng);
        let reports = check_params(&store, 1e-6, 6, &mut rng, |g, st| {
            let cx = Ctx::eval(g, st);
            let tit: Vec<_> = b.tit.iter().collect();
            let mt: Vec<_> = b.mt.iter().collect();
            let ocr: Vec<_> = b.ocr.iter().collect();
            let l1 = model.loss_tit(&cx, &tit, 0.1).unwrap().loss;
            let l2 = model.loss_mt(&cx, &mt, 0.1).unwrap().loss;
            let l3 = model.loss_ocr(&cx, &ocr, 0.1).unwrap().loss;
            l1.add(l2.scale(0.6)).add(l3.scale(0.4))
        });
        let groups = ["tps.", "img.", "txt.", "enc.", "tdec.", "sdec."];
        for gname in groups {
            assert!(reports.iter().any(|(n, _)| n.starts_with(gname)), "{gname} not checked");
        }
        for (name, r) in &reports {
            assert!(r.max_rel_error <= 1e-3, "{kind:?} {name}: {r:?}");
        }
    }
}

#[test]
fn losses_are_finite_at_init() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for seed in 0..3 {
        let model = tiny_model(Mode::TitMtOcr, SeqEncoderKind::Transformer);
        let (s, t) = vocabs();
        let b = batch(&model.config, &s, &t, seed + rng.random_range(0..100));
        let g = Graph::new();
        let cx = Ctx::new(&g, &model.store, true, seed);
        let tit: Vec<_> = b.tit.iter().collect();
        let mt: Vec<_> = b.mt.iter().collect();
        let ocr: Vec<_> = b.ocr.iter().collect();
        for l in [
            model.loss_tit(&cx, &tit, 0.1).unwrap(),
            model.loss_mt(&cx, &mt, 0.1).unwrap(),
            model.loss_ocr(&cx, &ocr, 0.1).unwrap(),
        ] {
            assert!(l.loss.item().is_finite() && l.nll.is_finite());
        }
    }
}

fn zero_heads(model: &mut Model) {
    for name in ["tdec.head", "sdec.head"] {
        if let Some(pid) = model.store.find(name) {
            let shape = model.store.get(pid).shape().to_vec();
            model.store.set(pid, Tensor::zeros(shape));
        }
    }
}

#[test]
fn uniform_model_loss_is_log_v() {
    let mut model = tiny_model(Mode::TitMtOcr, SeqEncoderKind::Transformer);
    zero_heads(&mut model);
    let (s, t) = vocabs();
    let b = batch(&model.config, &s, &t, 7);
    let g = Graph::inference();
    let cx = Ctx::eval(&g, &model.store);
    let tit: Vec<_> = b.tit.iter().collect();
    let mt: Vec<_> = b.mt.iter().collect();
    let ocr: Vec<_> = b.ocr.iter().collect();
    let lt = model.loss_tit(&cx, &tit, 0.0).unwrap().loss.item() as f64;
    let lm = model.loss_mt(&cx, &mt, 0.0).unwrap().loss.item() as f64;
    let lo = model.loss_ocr(&cx, &ocr, 0.0).unwrap().loss.item() as f64;
    assert!((lt - (t.len() as f64).ln()).abs() <= 1e-3);
    assert!((lm - (t.len() as f64).ln()).abs() <= 1e-3);
    assert!((lo - (s.len() as f64).ln()).abs() <= 1e-3);
}

#[test]
fn loss_matches_hand_summed_nll() {
    let model = tiny_model(Mode::TitMtOcr, SeqEncoderKind::Transformer);
    let store = model.store.cast::<f64>();
    let (s, t) = vocabs();
    let b = batch(&model.config, &s, &t, 8);
    let g = Graph::inference();
    let cx = Ctx::eval(&g, &store);
    let tit: Vec<_> = b.tit.iter().collect();
    let images: Vec<&Image> = tit.iter().map(|e| &e.image).collect();
    let targets: Vec<&[usize]> = tit.iter().map(|e| e.target.as_slice()).collect();
    let memory = model.image_memory(&cx, &images).unwrap();
    let dec = model.target_decoder().unwrap();
    let (logits, labels) = dec.decode_train(&cx, &memory, &targets).unwrap();
    let logits = logits.value();
    let v = dec.vocab;
    let mut total = 0.0;
    let mut count = 0;
    for (r, &y) in labels.iter().enumerate() {
        if y == PAD {
            continue;
        }
        let row = &logits.data()[r * v..(r + 1) * v];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
        count += 1;
    }
    let expect = total / count as f64;
    let got = model.loss_tit(&cx, &tit, 0.0).unwrap();
    assert!((got.loss.item() - expect).abs() < 1e-10);
    assert!((got.nll - expect).abs() < 1e-10);
    assert_eq!(got.tokens, count);
}

/// Every EOS-terminated or length-capped continuation up to `max_len` tokens.
fn all_sequences(symbols: &[usize], max_len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut frontier = vec![vec![]];
    for step in 0..max_len {
        let mut next = Vec::new();
        for p in frontier {
            let mut done = p.clone();
            done.push(EOS);
            out.push(done);
            for &s in symbols {
                let mut q: Vec<usize> = p.clone();
                q.push(s);
                if step + 1 == max_len {
                    out.push(q);
                } else {
                    next.push(q);
                }
            }
        }
        frontier = next;
    }
    out
}

#[test]
fn beam_search_against_exhaustive_oracle() {
    let model = tiny_model(Mode::TitOnly, SeqEncoderKind::Transformer);
    let store = model.store.cast::<f64>();
    let dec = model.target_decoder().unwrap();
    let g = Graph::inference();
    let cx = Ctx::eval(&g, &store);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let max_len = 3;
    let symbols: Vec<usize> = (4..dec.vocab).collect();
    for trial in 0..6 {
        let memory = FeatureSequence {
            features: cx.constant(Tensor::uniform(vec![1, 4, 8], 2.0, &mut rng)),
            lengths: vec![4],
        };
        let greedy = dec.greedy(&cx, &memory, max_len);
        assert_eq!(dec.beam(&cx, &memory, 1, max_len), greedy, "trial {trial}");
        let mut best = (f64::NEG_INFINITY, vec![]);
        for seq in all_sequences(&symbols, max_len) {
            let score = dec.sequence_logprob(&cx, &memory, &seq) / seq.len() as f64;
            if score > best.0 {
                best = (score, seq);
            }
        }
        let wide = dec.beam(&cx, &memory, 200, max_len).remove(0);
        let strip: Vec<usize> = best.1.iter().copied().take_while(|&t| t != EOS).collect();
        assert_eq!(wide, strip, "trial {trial}");
        // A wider beam never finds a worse normalized score than a narrower one here.
        let score_of = |ids: &[usize]| {
            let mut s = ids.to_vec();
            if s.len() < max_len {
                s.push(EOS);
            }
            dec.sequence_logprob(&cx, &memory, &s) / s.len() as f64
        };
        assert!(score_of(&wide) >= score_of(&dec.beam(&cx, &memory, 4, max_len)[0]) - 1e-12);
    }
}

#[test]
fn log_softmax_agrees_with_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = Tensor::<f64>::uniform(vec![3, 9], 5.0, &mut rng);
    let a = log_softmax(&x);
    let b = softmax(&x);
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p.exp() - q).abs() < 1e-12);
    }
}

/// Final norm collapsed to a constant vector that the head maps onto EOS.
fn force_eos(model: &mut Model, prefix: &str) {
    let d = model.config.transformer.d_model;
    let gamma = model.store.find(&format!("{prefix}.ln.gamma")).unwrap();
    model.store.set(gamma, Tensor::zeros(vec![d]));
    let beta = model.store.find(&format!("{prefix}.ln.beta")).unwrap();
    let mut e0 = vec![0.0f32; d];
    e0[0] = 1.0;
    model.store.set(beta, Tensor::new(vec![d], e0));
    let head = model.store.find(&format!("{prefix}.head")).unwrap();
    let shape = model.store.get(head).shape().to_vec();
    let mut w = vec![0.0f32; shape[0] * shape[1]];
    w[EOS * d] = 40.0;
    model.store.set(head, Tensor::new(shape, w));
}

#[test]
fn forced_model_loss_is_near_zero() {
    let mut model = tiny_model(Mode::TitMtOcr, SeqEncoderKind::Transformer);
    force_eos(&mut model, "tdec");
    force_eos(&mut model, "sdec");
    let (s, t) = vocabs();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = image(&model.config, &mut rng);
    let tit = TitExample {
        image: img.clone(),
        target: encode("", &t, 6),
    };
    let ocr = OcrExample {
        image: img,
        source: encode("", &s, 6),
    };
    let mt = MtExample {
        source: encode("AB", &s, 6),
        target: encode("", &t, 6),
    };
    let g = Graph::inference();
    let cx = Ctx::eval(&g, &model.store);
    for l in [
        model.loss_tit(&cx, &[&tit], 0.0).unwrap(),
        model.loss_mt(&cx, &[&mt], 0.0).unwrap(),
        model.loss_ocr(&cx, &[&ocr], 0.0).unwrap(),
    ] {
        assert!(l.nll < 1e-3, "{}", l.nll);
    }
}
