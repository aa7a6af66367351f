//! Procedural word rendering with the embedded bitmap font.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::font::{glyph, ink, GLYPH_H, GLYPH_W};
use super::Image;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    /// Amplitude of additive uniform noise, at most 0.1.
    pub noise: f64,
    /// Largest absolute shear angle in degrees, at most 15.
    pub max_shear_deg: f64,
    /// Fixed integer glyph scale; drawn from 2..=4 when `None`.
    pub scale: Option<usize>,
    pub allow_empty: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { noise: 0.05, max_shear_deg: 15.0, scale: None, allow_empty: false }
    }
}

impl RenderOptions {
    /// No noise and no shear.
    pub fn clean() -> Self {
        Self { noise: 0.0, max_shear_deg: 0.0, ..Self::default() }
    }
}

/// The random draws behind one rendered image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderMeta {
    pub scale: usize,
    /// Pixels between neighbouring glyphs.
    pub gap: usize,
    /// Border around the text, in pixels.
    pub margin: usize,
    pub background: f32,
    pub foreground: f32,
    pub shear_deg: f64,
    pub noise: f64,
}

/// Renders `label` as dark text on a light background, replicated into three
/// channels. Equal `(label, seed, opts)` give bit-identical images.
pub fn render_word(label: &str, seed: u64, opts: &RenderOptions) -> Result<(Image, RenderMeta)> {
    let glyphs = label.chars().map(|c| glyph(c).ok_or(Error::UnknownChar(c))).collect::<Result<Vec<_>>>()?;
    if glyphs.is_empty() && !opts.allow_empty {
        return Err(Error::InvalidArgument { op: "render_word", detail: "empty label".into() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = match opts.scale {
        Some(s) if s >= 1 => s,
        Some(_) => return Err(Error::InvalidArgument { op: "render_word", detail: "scale must be positive".into() }),
        None => rng.gen_range(2..=4),
    };
    let gap = rng.gen_range(1..=2);
    let background = rng.gen_range(0.65f32..0.95);
    let foreground = rng.gen_range(0.0f32..0.3);
    let shear_deg =
        if opts.max_shear_deg > 0.0 { rng.gen_range(-opts.max_shear_deg..=opts.max_shear_deg) } else { 0.0 };
    let margin = scale;

    let n = glyphs.len();
    let text_w = if n == 0 { scale } else { n * GLYPH_W * scale + (n - 1) * gap };
    let h = GLYPH_H * scale + 2 * margin;
    let w = text_w + 2 * margin;
    let mut canvas = vec![background; h * w];
    for (k, g) in glyphs.iter().enumerate() {
        let x0 = margin + k * (GLYPH_W * scale + gap);
        for row in 0..GLYPH_H {
            for col in 0..GLYPH_W {
                if !ink(g, row, col) {
                    continue;
                }
                for dy in 0..scale {
                    let y = margin + row * scale + dy;
                    let start = y * w + x0 + col * scale;
                    canvas[start..start + scale].fill(foreground);
                }
            }
        }
    }

    let (mut canvas, w) = if shear_deg != 0.0 { shear(&canvas, h, w, shear_deg, background) } else { (canvas, w) };

    if opts.noise > 0.0 {
        let a = opts.noise as f32;
        for v in &mut canvas {
            *v = (*v + rng.gen_range(-a..=a)).clamp(0.0, 1.0);
        }
    }
    let meta = RenderMeta { scale, gap, margin, background, foreground, shear_deg, noise: opts.noise };
    Ok((Image::from_gray(h, w, &canvas)?, meta))
}

/// Horizontal shear about the vertical center, widening the canvas so no ink
/// is lost. Rows are resampled linearly.
fn shear(src: &[f32], h: usize, w: usize, deg: f64, fill: f32) -> (Vec<f32>, usize) {
    let t = deg.to_radians().tan();
    let extra = (t.abs() * (h as f64 - 1.0)).ceil() as usize;
    let ow = w + extra;
    let mid = (h as f64 - 1.0) / 2.0;
    let mut out = vec![fill; h * ow];
    for y in 0..h {
        let shift = t * (mid - y as f64) + extra as f64 / 2.0;
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            let sx = x as f64 - shift;
            let x0 = sx.floor();
            let f = (sx - x0) as f32;
            let pick = |i: f64| if i >= 0.0 && (i as usize) < w { row[i as usize] } else { fill };
            out[y * ow + x] = pick(x0) * (1.0 - f) + pick(x0 + 1.0) * f;
        }
    }
    (out, ow)
}
