use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use titkit::nn::{Ctx, Init};
use titkit::raster::{bilinear_resize, Image};
use titkit::tps::{base_fiducials, kernel, solve_tps, tps_grid, FiducialSet, LocalizationNet, TpsConfig, TpsWarp};
use titkit::Error;
use titkit_tensor::gradcheck::{check_inputs, check_params};
use titkit_tensor::{Graph, ParamStore, Tensor};

/// Dense solve of the TPS system built from scratch, via nalgebra.
fn oracle(source: &FiducialSet, target: &FiducialSet) -> Vec<[f64; 2]> {
    let k = source.len();
    let n = k + 3;
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..k {
        for j in 0..k {
            let (p, q) = (source.points[i], source.points[j]);
            let r2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
            a[(i, j)] = if r2 == 0.0 { 0.0 } else { r2 * r2.ln() };
        }
        let row = [1.0, source.points[i][0], source.points[i][1]];
        for (c, v) in row.iter().enumerate() {
            a[(i, k + c)] = *v;
            a[(k + c, i)] = *v;
        }
    }
    let lu = a.lu();
    let mut out = vec![[0.0; 2]; n];
    for d in 0..2 {
        let mut b = DVector::<f64>::zeros(n);
        for i in 0..k {
            b[i] = target.points[i][d];
        }
        let x = lu.solve(&b).expect("non-singular");
        for i in 0..n {
            out[i][d] = x[i];
        }
    }
    out
}

fn jitter(base: &FiducialSet, rng: &mut impl Rng, amount: f64) -> FiducialSet {
    FiducialSet {
        points: base
            .points
            .iter()
            .map(|p| [p[0] + rng.random_range(-amount..amount), p[1] + rng.random_range(-amount..amount)])
            .collect(),
    }
}

#[test]
fn solve_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in [6, 10, 20] {
        let source = base_fiducials(k).unwrap();
        for _ in 0..5 {
            let target = jitter(&source, &mut rng, 0.3);
            let ours = solve_tps(&source, &target).unwrap();
            let theirs = oracle(&source, &target);
            for (a, b) in ours.weights.iter().zip(&theirs) {
                assert!((a[0] - b[0]).abs() < 1e-8 && (a[1] - b[1]).abs() < 1e-8, "{a:?} vs {b:?}");
            }
        }
    }
}

#[test]
fn identity_target_gives_identity_affine() {
    let s = base_fiducials(20).unwrap();
    let c = solve_tps(&s, &s).unwrap();
    for w in c.nonlinear() {
        assert!(w[0].abs() < 1e-6 && w[1].abs() < 1e-6);
    }
    let a = c.affine();
    let expect = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
    for (x, e) in a.iter().zip(&expect) {
        assert!((x[0] - e[0]).abs() < 1e-6 && (x[1] - e[1]).abs() < 1e-6);
    }
    let grid = tps_grid(&c, &s, 3, 5);
    assert!((grid[0][0] + 1.0).abs() < 1e-6 && (grid[0][1] + 1.0).abs() < 1e-6);
    assert!((grid[7][0] - 0.0).abs() < 1e-6 && (grid[7][1] - 0.0).abs() < 1e-6);
}

#[test]
fn translation_is_affine_only() {
    let s = base_fiducials(10).unwrap();
    let t = FiducialSet {
        points: s.points.iter().map(|p| [p[0] + 0.1, p[1]]).collect(),
    };
    let c = solve_tps(&s, &t).unwrap();
    assert!(c.nonlinear().iter().all(|w| w[0].abs() < 1e-6 && w[1].abs() < 1e-6));
    let lattice = tps_grid(&solve_tps(&s, &s).unwrap(), &s, 4, 6);
    for (g, l) in tps_grid(&c, &s, 4, 6).iter().zip(&lattice) {
        assert!((g[0] - l[0] - 0.1).abs() < 1e-6 && (g[1] - l[1]).abs() < 1e-6);
    }
}

#[test]
fn coincident_or_bad_count_rejected() {
    assert!(matches!(base_fiducials(5), Err(Error::FiducialCount(5))));
    assert!(matches!(base_fiducials(4), Err(Error::FiducialCount(4))));
    let mut s = base_fiducials(6).unwrap();
    s.points[1] = s.points[0];
    let err = solve_tps(&s, &s).unwrap_err();
    assert!(err.to_string().contains("degenerate fiducials"));
}

#[test]
fn kernel_values() {
    assert_eq!(kernel(0.0), 0.0);
    assert_eq!(kernel(1.0), 0.0);
    assert!((kernel(4.0) - 4.0 * 4f64.ln()).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn interpolates_and_stays_orthogonal(seed in any::<u64>(), half in 3usize..12, amount in 0.01f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let source = jitter(&base_fiducials(2 * half).unwrap(), &mut rng, 0.2);
        let target = jitter(&source, &mut rng, amount);
        let c = solve_tps(&source, &target).unwrap();
        for (s, t) in source.points.iter().zip(&target.points) {
            let m = c.map_point(&source, *s);
            prop_assert!((m[0] - t[0]).abs() <= 1e-5 && (m[1] - t[1]).abs() <= 1e-5);
        }
        prop_assert!(c.orthogonality_residual(&source) <= 1e-6);
    }
}

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(h, w, (0..h * w * 3).map(|_| rng.random()).collect())
}

#[test]
fn identity_warp_is_bilinear_resize() {
    for (h, w, oh, ow) in [(16, 40, 8, 20), (32, 64, 32, 64), (7, 9, 12, 15)] {
        let img = random_image(h, w, (h * w) as u64);
        let warp = TpsWarp::new(20, oh, ow).unwrap();
        let g = Graph::<f64>::inference();
        let store = ParamStore::new();
        let cx = Ctx::eval(&g, &store);
        let images = cx.constant(Image::batch_nchw(&[&img]));
        let base = base_fiducials(20).unwrap();
        let fid = cx.constant(Tensor::from_f64([1, 20, 2], &base.flat()));
        let out = warp.warp(&cx, images, fid).value();
        let expect = bilinear_resize(&img, oh, ow);
        let got = Image::from_nchw(&out, 0);
        let diff = got
            .data
            .iter()
            .zip(&expect.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        assert!(diff <= 1e-6, "max diff {diff}");
    }
}

#[test]
fn differentiable_grid_matches_direct_grid() {
    let source = base_fiducials(10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let target = jitter(&source, &mut rng, 0.2);
    let warp = TpsWarp::new(10, 5, 7).unwrap();
    let g = Graph::<f64>::inference();
    let store = ParamStore::new();
    let cx = Ctx::eval(&g, &store);
    let grid = warp.grid(&cx, cx.constant(Tensor::from_f64([1, 10, 2], &target.flat()))).value();
    let direct = tps_grid(&solve_tps(&source, &target).unwrap(), &source, 5, 7);
    for (i, p) in direct.iter().enumerate() {
        assert!((grid.data()[2 * i] - p[0]).abs() < 1e-9);
        assert!((grid.data()[2 * i + 1] - p[1]).abs() < 1e-9);
    }
}

#[test]
fn composed_gradient_wrt_fiducials_and_image() {
    let warp = TpsWarp::new(6, 4, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img: Vec<f64> = (0..3 * 16).map(|_| rng.random()).collect();
    let fid = jitter(&base_fiducials(6).unwrap(), &mut rng, 0.15);
    let weights: Vec<f64> = (0..3 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let inputs = [Tensor::from_f64([1, 3, 4, 4], &img), Tensor::from_f64([1, 6, 2], &fid.flat())];
    // The closure must work for any graph lifetime, so the empty store is 'static.
    let store: &'static ParamStore<f64> = Box::leak(Box::new(ParamStore::new()));
    let report = check_inputs(&inputs, 1e-6, |g, v| {
        let cx = Ctx::eval(g, store);
        let w = g.constant(Tensor::from_f64([1, 3, 4, 4], &weights));
        warp.warp(&cx, v[0], v[1]).mul(w).sum_all()
    });
    assert!(report.max_rel_error <= 1e-3, "{report:?}");
}

#[test]
fn localization_starts_at_base_and_gradchecks() {
    let cfg = TpsConfig {
        fiducials: 6,
        loc_channels: vec![2, 2],
        loc_hidden: 4,
    };
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = LocalizationNet::new(&mut Init::new(&mut store, &mut rng), &cfg).unwrap();
    let warp = TpsWarp::new(6, 4, 4).unwrap();
    let img = Tensor::<f64>::uniform(vec![2, 3, 4, 4], 1.0, &mut rng);
    {
        let g = Graph::inference();
        let cx = Ctx::eval(&g, &store);
        let out = net.forward(&cx, cx.constant(img.clone())).value();
        let base = base_fiducials(6).unwrap().flat();
        assert_eq!(out.shape(), &[2, 6, 2]);
        for b in 0..2 {
            for (x, y) in out.data()[b * 12..(b + 1) * 12].iter().zip(&base) {
                assert_eq!(x, y);
            }
        }
    }
    // Move the head off the clamp boundary before checking gradients.
    let pid = store.find("fc2.weight").unwrap();
    store.set(pid, Tensor::uniform(vec![4, 12], 0.3, &mut rng));
    let bias = store.find("fc2.bias").unwrap();
    let shrunk = store.get(bias).map(|v| v * 0.8);
    store.set(bias, shrunk);
    let reports = check_params(&store, 1e-6, 20, &mut rng, |g, s| {
        let cx = Ctx::eval(g, s);
        let x = cx.constant(img.clone());
        let fid = net.forward(&cx, x);
        warp.warp(&cx, x, fid).sqr().sum_all()
    });
    for (name, r) in reports {
        assert!(r.max_rel_error <= 1e-3, "{name}: {r:?}");
    }
}
