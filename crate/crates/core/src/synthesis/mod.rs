//! Synthetic text images and the toy cipher language pair.

mod dataset;
pub mod font;
mod toy;

pub use dataset::{synth_mt_dataset, synth_ocr_dataset, synth_tit_dataset};
pub use toy::{make_toy_parallel, ToyPairSpec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;

/// Smallest glyph height: one output pixel per font cell.
pub const MIN_FONT_PX: f64 = font::GLYPH_ROWS as f64;
/// Pixels kept free on each side of the text line.
const MARGIN_PX: f64 = 1.0;
/// Peak deviation of textured backgrounds from their base luminance.
const TEXTURE_AMPLITUDE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    /// Glyph height in pixels; shrunk to fit the width when needed.
    pub font_size_px: f64,
    pub rotation_deg: f64,
    /// 0 flat, 1 gradient, 2 noise, 3 gradient plus noise.
    pub background_id: u32,
    /// Luminance gap between ink and background base.
    pub contrast: f64,
    pub seed: u64,
}

pub const BACKGROUNDS: u32 = 4;

/// Distribution that per-record [`RenderSpec`]s are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub min_font_px: f64,
    pub max_font_px: f64,
    pub max_rotation_deg: f64,
    pub min_contrast: f64,
    pub max_contrast: f64,
    pub backgrounds: Vec<u32>,
    /// Subsamples per pixel axis for anti-aliasing.
    pub supersample: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 64,
            min_font_px: 7.0,
            max_font_px: 11.0,
            max_rotation_deg: 15.0,
            min_contrast: 0.35,
            max_contrast: 0.5,
            backgrounds: vec![0, 1, 2, 3],
            supersample: 3,
        }
    }
}

impl RenderConfig {
    /// Horizontal text on a flat background.
    pub fn clean() -> Self {
        Self {
            max_rotation_deg: 0.0,
            backgrounds: vec![0],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.image_height == 0 || self.image_width == 0 {
            return bad("image size must be positive");
        }
        if !(self.min_font_px >= MIN_FONT_PX && self.max_font_px >= self.min_font_px) {
            return bad("font sizes must satisfy 7 <= min_font_px <= max_font_px");
        }
        if !(0.0..=45.0).contains(&self.max_rotation_deg) {
            return bad("max_rotation_deg must be in [0, 45]");
        }
        if !(self.min_contrast > 0.0 && self.min_contrast <= self.max_contrast && self.max_contrast <= 0.5) {
            return bad("contrast bounds must satisfy 0 < min_contrast <= max_contrast <= 0.5");
        }
        if self.backgrounds.is_empty() || self.backgrounds.iter().any(|&b| b >= BACKGROUNDS) {
            return bad("backgrounds must be a non-empty subset of 0..=3");
        }
        if self.supersample == 0 {
            return bad("supersample must be positive");
        }
        Ok(())
    }

    /// Draws a spec whose seed is `seed`; the draw itself is seeded by it too.
    pub fn sample_spec(&self, seed: u64) -> RenderSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_5EC5);
        let uniform = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        RenderSpec {
            font_size_px: uniform(&mut rng, self.min_font_px, self.max_font_px),
            rotation_deg: uniform(&mut rng, -self.max_rotation_deg, self.max_rotation_deg),
            background_id: self.backgrounds[rng.random_range(0..self.backgrounds.len())],
            contrast: uniform(&mut rng, self.min_contrast, self.max_contrast),
            seed,
        }
    }

    pub fn render(&self, text: &str, spec: &RenderSpec) -> Result<Image> {
        render_with(text, spec, self.image_height, self.image_width, self.supersample)
    }
}

/// Renders one line of text, centred, then rotated about the image centre.
pub fn render_text_image(text: &str, spec: &RenderSpec, out_h: usize, out_w: usize) -> Result<Image> {
    render_with(text, spec, out_h, out_w, RenderConfig::default().supersample)
}

/// Font cell size in pixels after shrinking to fit `out_w`.
pub fn fitted_cell_px(chars: usize, font_size_px: f64, out_w: usize) -> Result<f64> {
    let cells = (chars * font::ADVANCE - 1) as f64;
    let avail = out_w as f64 - 2.0 * MARGIN_PX;
    let wanted = font_size_px.max(MIN_FONT_PX) / font::GLYPH_ROWS as f64;
    let cell = wanted.min(avail / cells);
    if cell < 1.0 {
        return Err(Error::TextOverflow {
            chars,
            needed: cells as usize + 2 * MARGIN_PX as usize,
            width: out_w,
        });
    }
    Ok(cell)
}

fn render_with(text: &str, spec: &RenderSpec, out_h: usize, out_w: usize, ss: usize) -> Result<Image> {
    let chars: Vec<char> = text.chars().collect();
    if chars.is_empty() {
        return Err(Error::InvalidArgument("cannot render empty text".into()));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("image size must be positive".into()));
    }
    let cell = fitted_cell_px(chars.len(), spec.font_size_px, out_w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let palette = Palette::draw(&mut rng, spec.contrast);
    let background = Background::draw(&mut rng, spec.background_id, out_h, out_w);

    let text_w = (chars.len() * font::ADVANCE - 1) as f64 * cell;
    let text_h = font::GLYPH_ROWS as f64 * cell;
    let (cx, cy) = (out_w as f64 / 2.0, out_h as f64 / 2.0);
    let (left, top) = (cx - text_w / 2.0, cy - text_h / 2.0);
    let (sin, cos) = spec.rotation_deg.to_radians().sin_cos();
    let inv_ss = 1.0 / ss as f64;

    let mut img = Image::filled(out_h, out_w, 0.0);
    for y in 0..out_h {
        for x in 0..out_w {
            let mut hits = 0usize;
            for sy in 0..ss {
                for sx in 0..ss {
                    let px = x as f64 + (sx as f64 + 0.5) * inv_ss - cx;
                    let py = y as f64 + (sy as f64 + 0.5) * inv_ss - cy;
                    // Undo a counter-clockwise rotation (y axis points down).
                    let tx = cos * px - sin * py + cx - left;
                    let ty = sin * px + cos * py + cy - top;
                    if inked(&chars, tx / cell, ty / cell) {
                        hits += 1;
                    }
                }
            }
            let alpha = hits as f64 / (ss * ss) as f64;
            let base = background.luminance(y, x, palette.bg);
            let mut rgb = [0f32; 3];
            for c in 0..3 {
                let bg = (base + palette.bg_tint[c]).clamp(0.0, 1.0);
                let fg = (palette.fg + palette.fg_tint[c]).clamp(0.0, 1.0);
                rgb[c] = (bg * (1.0 - alpha) + fg * alpha) as f32;
            }
            img.set_pixel(y, x, rgb);
        }
    }
    img.quantize();
    Ok(img)
}

/// Coverage test in font-cell coordinates relative to the text box.
fn inked(chars: &[char], u: f64, v: f64) -> bool {
    if u < 0.0 || v < 0.0 {
        return false;
    }
    let (col, row) = (u as usize, v as usize);
    let slot = col / font::ADVANCE;
    slot < chars.len() && font::ink(chars[slot], col % font::ADVANCE, row)
}

struct Palette {
    bg: f64,
    fg: f64,
    bg_tint: [f64; 3],
    fg_tint: [f64; 3],
}

impl Palette {
    /// Picks a polarity and base luminances `contrast` apart, keeping the
    /// textured background's excursion inside [0, 1].
    fn draw(rng: &mut ChaCha8Rng, contrast: f64) -> Self {
        let dark_text = rng.random_bool(0.5);
        let a = TEXTURE_AMPLITUDE;
        let (bg, fg) = if dark_text {
            let bg = rng.random_range((contrast + a).min(1.0 - a)..=1.0 - a);
            (bg, bg - contrast)
        } else {
            let bg = rng.random_range(a..=(1.0 - contrast - a).max(a));
            (bg, bg + contrast)
        };
        let mut tint = || {
            let mut t = [0.0; 3];
            for v in &mut t {
                *v = rng.random_range(-0.04..=0.04);
            }
            t
        };
        let bg_tint = tint();
        let fg_tint = tint();
        Self { bg, fg, bg_tint, fg_tint }
    }
}

enum Background {
    Flat,
    Gradient { dx: f64, dy: f64 },
    Noise(ValueNoise),
    Mixed { dx: f64, dy: f64, noise: ValueNoise },
}

impl Background {
    fn draw(rng: &mut ChaCha8Rng, id: u32, h: usize, w: usize) -> Self {
        let grad = |rng: &mut ChaCha8Rng| {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let span = (h.max(w) as f64).max(1.0);
            (angle.cos() / span, angle.sin() / span)
        };
        match id {
            1 => {
                let (dx, dy) = grad(rng);
                Background::Gradient { dx, dy }
            }
            2 => Background::Noise(ValueNoise::new(rng, h, w)),
            3 => {
                let (dx, dy) = grad(rng);
                Background::Mixed {
                    dx,
                    dy,
                    noise: ValueNoise::new(rng, h, w),
                }
            }
            _ => Background::Flat,
        }
    }

    fn luminance(&self, y: usize, x: usize, base: f64) -> f64 {
        let a = TEXTURE_AMPLITUDE;
        let ramp = |dx: f64, dy: f64| (x as f64 * dx + y as f64 * dy) * 2.0;
        let v = match self {
            Background::Flat => 0.0,
            Background::Gradient { dx, dy } => a * ramp(*dx, *dy).clamp(-1.0, 1.0),
            Background::Noise(n) => a * n.at(y, x),
            Background::Mixed { dx, dy, noise } => {
                a * 0.5 * (ramp(*dx, *dy).clamp(-1.0, 1.0) + noise.at(y, x))
            }
        };
        base + v
    }
}

/// Bilinearly interpolated lattice noise in [-1, 1].
struct ValueNoise {
    cell: f64,
    cols: usize,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let cell = 6.0;
        let rows = (h as f64 / cell) as usize + 2;
        let cols = (w as f64 / cell) as usize + 2;
        let values = (0..rows * cols).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Self { cell, cols, values }
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        let (fy, fx) = (y as f64 / self.cell, x as f64 / self.cell);
        let (r, c) = (fy as usize, fx as usize);
        let (ty, tx) = (fy - r as f64, fx - c as f64);
        let v = |r: usize, c: usize| self.values[r * self.cols + c];
        let top = v(r, c) * (1.0 - tx) + v(r, c + 1) * tx;
        let bot = v(r + 1, c) * (1.0 - tx) + v(r + 1, c + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(rot: f64, bg: u32) -> RenderSpec {
        RenderSpec {
            font_size_px: 9.0,
            rotation_deg: rot,
            background_id: bg,
            contrast: 0.4,
            seed: 7,
        }
    }

    #[test]
    fn deterministic_and_in_range() {
        for bg in 0..BACKGROUNDS {
            let a = render_text_image("HELLO", &spec(10.0, bg), 32, 64).unwrap();
            let b = render_text_image("HELLO", &spec(10.0, bg), 32, 64).unwrap();
            assert_eq!(a, b);
            assert_eq!((a.height, a.width, a.data.len()), (32, 64, 32 * 64 * 3));
            assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn unrotated_ink_sits_in_text_band() {
        let img = render_text_image("ABC", &spec(0.0, 0), 32, 64).unwrap();
        let row_var = |y: usize| {
            let vals: Vec<f64> = (0..64).map(|x| f64::from(img.pixel(y, x)[0])).collect();
            let m = vals.iter().sum::<f64>() / 64.0;
            vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 64.0
        };
        let band = (16 - 5)..(16 + 5);
        assert!(band.clone().any(|y| row_var(y) > 1e-3));
        assert!((0..32).filter(|y| !band.contains(y)).all(|y| row_var(y) < 1e-9));
    }

    #[test]
    fn rotation_changes_pixels() {
        let a = render_text_image("ABCD", &spec(0.0, 0), 32, 64).unwrap();
        let b = render_text_image("ABCD", &spec(12.0, 0), 32, 64).unwrap();
        let mad: f32 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f32>() / a.data.len() as f32;
        assert!(mad > 0.0);
    }

    #[test]
    fn overflow_is_reported() {
        let err = render_text_image(&"A".repeat(11), &spec(0.0, 0), 32, 64).unwrap_err();
        assert!(err.to_string().starts_with("text overflow"));
        assert!(render_text_image(&"A".repeat(10), &spec(0.0, 0), 32, 64).is_ok());
    }

    #[test]
    fn sampled_specs_respect_bounds() {
        let cfg = RenderConfig::default();
        for s in 0..200 {
            let sp = cfg.sample_spec(s);
            assert!(sp.rotation_deg.abs() <= cfg.max_rotation_deg);
            assert!(sp.contrast >= cfg.min_contrast);
            assert!(cfg.backgrounds.contains(&sp.background_id));
        }
    }
}
