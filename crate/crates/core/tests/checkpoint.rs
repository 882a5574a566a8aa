use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use titkit::checkpoint::{load_checkpoint, save_checkpoint, to_bytes, Checkpoint, VERSION};
use titkit::corpus::build_vocab;
use titkit::model::{Mode, Model, ModelConfig};
use titkit::raster::Image;
use titkit::Error;

fn model(mode: Mode, seed: u64) -> Model {
    let s = build_vocab(&["ABC"]).unwrap();
    let t = build_vocab(&["xyz"]).unwrap();
    Model::new(ModelConfig::tiny(), mode, Some(s), Some(t), seed).unwrap()
}

fn images(m: &Model) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (h, w) = (m.config.image.image_height, m.config.image.image_width);
    (0..3)
        .map(|_| Image::new(h, w, (0..h * w * 3).map(|_| rng.random()).collect()))
        .collect()
}

fn memory(m: &Model, imgs: &[Image]) -> Vec<f32> {
    let g = titkit_tensor::Graph::inference();
    let cx = titkit::nn::Ctx::eval(&g, &m.store);
    let refs: Vec<&Image> = imgs.iter().collect();
    m.image_memory(&cx, &refs).unwrap().features.value().data().to_vec()
}

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.titk");
    let m = model(Mode::TitMtOcr, 7);
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(back.mode, m.mode);
    assert_eq!(back.source_vocab().unwrap(), m.source_vocab().unwrap());
    assert_eq!(back.target_vocab().unwrap(), m.target_vocab().unwrap());
    for ((_, n1, t1), (_, n2, t2)) in m.store.iter().zip(back.store.iter()) {
        assert_eq!(n1, n2);
        let bits = |t: &titkit_tensor::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t1), bits(t2));
    }
    let imgs = images(&m);
    assert_eq!(memory(&m, &imgs), memory(&back, &imgs));
    let refs: Vec<&Image> = imgs.iter().collect();
    assert_eq!(m.translate_images(&refs, 1).unwrap(), back.translate_images(&refs, 1).unwrap());
}

#[test]
fn version_mismatch_is_explicit() {
    let mut bytes = to_bytes(&model(Mode::TitOnly, 0)).unwrap();
    bytes[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    match Checkpoint::from_bytes(&bytes) {
        Err(Error::CheckpointVersion { found, expected }) => {
            assert_eq!((found, expected), (VERSION + 1, VERSION));
        }
        other => panic!("expected a version error, got {:?}", other.err()),
    }
}

#[test]
fn malformed_files_are_rejected() {
    let bytes = to_bytes(&model(Mode::TitOnly, 0)).unwrap();
    assert!(matches!(Checkpoint::from_bytes(b"PNG\0...."), Err(Error::Checkpoint(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Checkpoint(_))));
}

#[test]
fn partial_load_keeps_shared_encoder() {
    let trained = model(Mode::TitMtOcr, 1);
    let ckpt = Checkpoint::from_bytes(&to_bytes(&trained).unwrap()).unwrap();
    let mut fresh = model(Mode::TitMt, 2);
    let copied = ckpt.load_components(&mut fresh, &["enc"]).unwrap();
    assert!(copied > 0);
    for (_, name, t) in fresh.store.iter() {
        let original = trained.store.get(trained.store.find(name).unwrap());
        if name.starts_with("enc.") {
            assert_eq!(t.data(), original.data(), "{name}");
        } else if name == "tdec.head" {
            assert_ne!(t.data(), original.data(), "{name} should keep its own init");
        }
    }
}
