//! Thin-plate-spline rectification: a localization network predicts fiducial
//! points in the input image and a TPS grid resamples the image so that
//! those points land on fixed positions along the top and bottom edges.

use serde::{Deserialize, Serialize};
use titkit_tensor::{Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Init, Linear};

/// Pairwise distance below which two fiducials count as coincident.
pub const COINCIDENT_TOL: f64 = 1e-8;

/// `K` control points `(x, y)` in normalized coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct FiducialSet {
    pub points: Vec<[f64; 2]>,
}

impl FiducialSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Row-major `[K, 2]` values.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p[0], p[1]]).collect()
    }
}

pub fn check_fiducial_count(k: usize) -> Result<()> {
    if k < 6 || k % 2 != 0 {
        return Err(Error::FiducialCount(k));
    }
    Ok(())
}

/// `K/2` points along `y = -1` then `K/2` along `y = +1`, `x` evenly spaced in `[-1, 1]`.
pub fn base_fiducials(k: usize) -> Result<FiducialSet> {
    check_fiducial_count(k)?;
    let half = k / 2;
    let xs: Vec<f64> = (0..half).map(|i| -1.0 + 2.0 * i as f64 / (half - 1) as f64).collect();
    let mut points: Vec<[f64; 2]> = xs.iter().map(|&x| [x, -1.0]).collect();
    points.extend(xs.iter().map(|&x| [x, 1.0]));
    Ok(FiducialSet { points })
}

/// `U(r) = r^2 log r^2`, given `r^2`.
pub fn kernel(r2: f64) -> f64 {
    if r2 == 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// `(K + 3) x 2` solution: `K` kernel weights, then the affine terms `[c, a_x, a_y]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TpsCoefficients {
    pub weights: Vec<[f64; 2]>,
}

impl TpsCoefficients {
    pub fn nonlinear(&self) -> &[[f64; 2]] {
        &self.weights[..self.weights.len() - 3]
    }

    pub fn affine(&self) -> &[[f64; 2]] {
        &self.weights[self.weights.len() - 3..]
    }

    /// Largest of `|sum w|`, `|sum w x|`, `|sum w y|` over both output coordinates.
    pub fn orthogonality_residual(&self, source: &FiducialSet) -> f64 {
        let mut worst = 0f64;
        for d in 0..2 {
            let (mut s, mut sx, mut sy) = (0.0, 0.0, 0.0);
            for (w, p) in self.nonlinear().iter().zip(&source.points) {
                s += w[d];
                sx += w[d] * p[0];
                sy += w[d] * p[1];
            }
            worst = worst.max(s.abs()).max(sx.abs()).max(sy.abs());
        }
        worst
    }

    /// Evaluates the spline at `p`.
    pub fn map_point(&self, source: &FiducialSet, p: [f64; 2]) -> [f64; 2] {
        let row = basis_row(source, p);
        let mut out = [0.0; 2];
        for (r, w) in row.iter().zip(&self.weights) {
            out[0] += r * w[0];
            out[1] += r * w[1];
        }
        out
    }
}

/// `[U(|p - s_1|^2), ..., U(|p - s_K|^2), 1, x, y]`.
fn basis_row(source: &FiducialSet, p: [f64; 2]) -> Vec<f64> {
    let mut row: Vec<f64> = source
        .points
        .iter()
        .map(|s| kernel((p[0] - s[0]).powi(2) + (p[1] - s[1]).powi(2)))
        .collect();
    row.extend([1.0, p[0], p[1]]);
    row
}

/// The `(K + 3)` square system `[[Phi, P], [P^T, 0]]`, row-major.
pub fn system_matrix(source: &FiducialSet) -> Vec<f64> {
    let k = source.len();
    let n = k + 3;
    let mut a = vec![0.0; n * n];
    for i in 0..k {
        let row = basis_row(source, source.points[i]);
        a[i * n..(i + 1) * n].copy_from_slice(&row);
        for j in 0..3 {
            a[(k + j) * n + i] = row[k + j];
        }
    }
    a
}

fn check_distinct(source: &FiducialSet) -> Result<()> {
    for i in 0..source.len() {
        for j in 0..i {
            let (a, b) = (source.points[i], source.points[j]);
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            if d < COINCIDENT_TOL {
                return Err(Error::DegenerateFiducials(format!(
                    "points {j} and {i} are {d:e} apart"
                )));
            }
        }
    }
    Ok(())
}

/// Solves `A X = B` in place by Gaussian elimination with partial pivoting.
/// `b` is `n x m` row-major.
fn lu_solve(mut a: Vec<f64>, n: usize, mut b: Vec<f64>, m: usize) -> Result<Vec<f64>> {
    let scale = a.iter().fold(0f64, |s, v| s.max(v.abs())).max(1.0);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .expect("non-empty range");
        if a[piv * n + col].abs() <= 1e-12 * scale {
            return Err(Error::DegenerateFiducials("singular TPS system".into()));
        }
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
            }
            for j in 0..m {
                b.swap(col * m + j, piv * m + j);
            }
        }
        let d = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[r * n + j] -= f * a[col * n + j];
            }
            for j in 0..m {
                b[r * m + j] -= f * b[col * m + j];
            }
        }
    }
    for col in (0..n).rev() {
        let d = a[col * n + col];
        for j in 0..m {
            let mut v = b[col * m + j];
            for c in col + 1..n {
                v -= a[col * n + c] * b[c * m + j];
            }
            b[col * m + j] = v / d;
        }
    }
    Ok(b)
}

/// Spline taking each `source` point to the matching `target` point.
pub fn solve_tps(source: &FiducialSet, target: &FiducialSet) -> Result<TpsCoefficients> {
    if source.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} source vs {} target fiducials",
            source.len(),
            target.len()
        )));
    }
    check_distinct(source)?;
    let k = source.len();
    let mut rhs = target.flat();
    rhs.extend([0.0; 6]);
    let x = lu_solve(system_matrix(source), k + 3, rhs, 2)?;
    Ok(TpsCoefficients {
        weights: x.chunks(2).map(|c| [c[0], c[1]]).collect(),
    })
}

/// Corner-aligned normalized coordinate of index `i` out of `n`.
fn lattice_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// Sampling location in the input for every output pixel, row-major `[h * w]`.
pub fn tps_grid(coeffs: &TpsCoefficients, source: &FiducialSet, out_h: usize, out_w: usize) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        for x in 0..out_w {
            out.push(coeffs.map_point(source, [lattice_coord(x, out_w), lattice_coord(y, out_h)]));
        }
    }
    out
}

/// Differentiable warp from predicted fiducials. Because the spline is linear
/// in its targets, the grid is a fixed `[h*w, K]` matrix times the fiducials;
/// the matrix is solved once for the base fiducials.
#[derive(Clone, Debug)]
pub struct TpsWarp {
    pub out_h: usize,
    pub out_w: usize,
    pub k: usize,
    /// `[K, h*w]`.
    basis_t: Tensor<f64>,
}

impl TpsWarp {
    pub fn new(k: usize, out_h: usize, out_w: usize) -> Result<Self> {
        let source = base_fiducials(k)?;
        let n = k + 3;
        // First K columns of the inverse system matrix.
        let mut eye = vec![0.0; n * k];
        for i in 0..k {
            eye[i * k + i] = 1.0;
        }
        let inv = lu_solve(system_matrix(&source), n, eye, k)?;
        let hw = out_h * out_w;
        let mut basis_t = vec![0.0; k * hw];
        for y in 0..out_h {
            for x in 0..out_w {
                let p = y * out_w + x;
                let row = basis_row(&source, [lattice_coord(x, out_w), lattice_coord(y, out_h)]);
                for j in 0..k {
                    basis_t[j * hw + p] = (0..n).map(|r| row[r] * inv[r * k + j]).sum();
                }
            }
        }
        Ok(Self {
            out_h,
            out_w,
            k,
            basis_t: Tensor::new(vec![k, hw], basis_t),
        })
    }

    /// `[B, K, 2]` fiducials to a `[B, h, w, 2]` sampling grid.
    pub fn grid<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, fiducials: Var<'g, T>) -> Var<'g, T> {
        let b = fiducials.dim(0);
        let basis = cx.constant(self.basis_t.cast());
        fiducials
            .matmul_t(basis, true, false)
            .permute(&[0, 2, 1])
            .reshape(&[b, self.out_h, self.out_w, 2])
    }

    /// Resamples `[B, C, H, W]` images to `[B, C, h, w]`.
    pub fn warp<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, images: Var<'g, T>, fiducials: Var<'g, T>) -> Var<'g, T> {
        images.grid_sample(self.grid(cx, fiducials))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpsConfig {
    pub fiducials: usize,
    /// One 3x3 conv + 2x2 max-pool block per entry.
    pub loc_channels: Vec<usize>,
    pub loc_hidden: usize,
}

impl Default for TpsConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TpsConfig {
    pub fn paper() -> Self {
        Self {
            fiducials: 20,
            loc_channels: vec![16, 32, 64, 128],
            loc_hidden: 256,
        }
    }

    pub fn desk() -> Self {
        Self {
            fiducials: 20,
            loc_channels: vec![4, 8, 16, 16],
            loc_hidden: 32,
        }
    }
}

/// Conv/pool stack, global average pool, FC, FC, hardtanh.
#[derive(Clone, Debug)]
pub struct LocalizationNet {
    pub convs: Vec<Conv2d>,
    pub fc1: Linear,
    pub fc2: Linear,
    pub k: usize,
}

impl LocalizationNet {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &TpsConfig) -> Result<Self> {
        let base = base_fiducials(cfg.fiducials)?;
        let mut c_in = 3;
        let mut convs = Vec::new();
        for (i, &c) in cfg.loc_channels.iter().enumerate() {
            convs.push(Conv2d::new(&mut init.scope(&format!("conv{i}")), c_in, c, 3, true));
            c_in = c;
        }
        let fc1 = Linear::new(&mut init.scope("fc1"), c_in, cfg.loc_hidden, true);
        let mut s = init.scope("fc2");
        let fc2 = Linear {
            w: s.zeros("weight", &[cfg.loc_hidden, 2 * cfg.fiducials]),
            b: Some(s.add("bias", Tensor::from_f64([2 * cfg.fiducials], &base.flat()))),
        };
        Ok(Self {
            convs,
            fc1,
            fc2,
            k: cfg.fiducials,
        })
    }

    /// `[B, 3, H, W]` images to `[B, K, 2]` fiducials in `[-1, 1]`.
    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, images: Var<'g, T>) -> Var<'g, T> {
        let b = images.dim(0);
        let mut x = images;
        for conv in &self.convs {
            x = conv.forward(cx, x).relu();
            let (h, w) = (x.dim(2), x.dim(3));
            if h >= 2 && w >= 2 {
                x = x.max_pool2d(2, 2);
            }
        }
        let c = x.dim(1);
        let pooled = x.reshape(&[b, c, x.dim(2) * x.dim(3)]).mean_axis(2);
        let h = self.fc1.forward(cx, pooled).relu();
        self.fc2.forward(cx, h).hardtanh().reshape(&[b, self.k, 2])
    }
}

/// Localization net plus warp.
#[derive(Clone, Debug)]
pub struct Tps {
    pub loc: LocalizationNet,
    pub warp: TpsWarp,
}

impl Tps {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &TpsConfig, out_h: usize, out_w: usize) -> Result<Self> {
        Ok(Self {
            loc: LocalizationNet::new(init, cfg)?,
            warp: TpsWarp::new(cfg.fiducials, out_h, out_w)?,
        })
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, images: Var<'g, T>) -> Var<'g, T> {
        let fid = self.loc.forward(cx, images);
        self.warp.warp(cx, images, fid)
    }
}
