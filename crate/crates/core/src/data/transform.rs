//! Border-replicating robustness transforms.

use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Image;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Transform {
    #[default]
    None,
    /// +100% per axis, half on each side.
    Padded,
    /// Random per-side growth up to 20% of the axis.
    RPadded,
    /// +10% per axis, split over both sides.
    Expanded,
    /// Random per-side growth up to 10% of the axis.
    RExpanded,
}

impl Transform {
    pub const ALL: [Transform; 5] =
        [Transform::None, Transform::Padded, Transform::RPadded, Transform::Expanded, Transform::RExpanded];

    pub fn name(self) -> &'static str {
        match self {
            Transform::None => "none",
            Transform::Padded => "padded",
            Transform::RPadded => "r-padded",
            Transform::Expanded => "expanded",
            Transform::RExpanded => "r-expanded",
        }
    }

    /// `seed` only affects the random variants.
    pub fn apply(self, img: &Image, seed: u64) -> Image {
        match self {
            Transform::None => img.clone(),
            Transform::Padded => padded(img),
            Transform::RPadded => r_padded(img, seed),
            Transform::Expanded => expanded(img),
            Transform::RExpanded => r_expanded(img, seed),
        }
    }
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Transform::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown transform `{s}`")))
    }
}

impl std::fmt::Display for Transform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Grows the image by whole pixels on each side, copying the nearest border
/// pixel outward.
pub fn replicate_pad(img: &Image, top: usize, bottom: usize, left: usize, right: usize) -> Image {
    let (h, w) = (img.height, img.width);
    let (oh, ow) = (h + top + bottom, w + left + right);
    let mut data = Vec::with_capacity(img.channels * oh * ow);
    for c in 0..img.channels {
        for y in 0..oh {
            let sy = y.saturating_sub(top).min(h - 1);
            for x in 0..ow {
                let sx = x.saturating_sub(left).min(w - 1);
                data.push(img.at(c, sy, sx));
            }
        }
    }
    Image { channels: img.channels, height: oh, width: ow, data }
}

fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor() as usize
}

/// Splits fractional per-side growth into whole pixels whose total is the
/// rounded sum.
fn split(before: f64, after: f64) -> (usize, usize) {
    let total = round_half_up(before + after);
    let b = round_half_up(before).min(total);
    (b, total - b)
}

/// Pads by fractional pixel offsets `[top, bottom, left, right]`.
pub fn pad_by_offsets(img: &Image, offsets: [f64; 4]) -> Image {
    let (top, bottom) = split(offsets[0], offsets[1]);
    let (left, right) = split(offsets[2], offsets[3]);
    replicate_pad(img, top, bottom, left, right)
}

pub fn padded(img: &Image) -> Image {
    let (h, w) = (img.height, img.width);
    replicate_pad(img, h / 2, h - h / 2, w / 2, w - w / 2)
}

pub fn expanded(img: &Image) -> Image {
    let (th, tw) = (round_half_up(0.1 * img.height as f64), round_half_up(0.1 * img.width as f64));
    replicate_pad(img, th / 2, th - th / 2, tw / 2, tw - tw / 2)
}

/// Independent uniform offsets in `[0, frac·dim]` for each side.
pub fn random_offsets(img: &Image, frac: f64, seed: u64) -> [f64; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mh, mw) = (frac * img.height as f64, frac * img.width as f64);
    [rng.gen_range(0.0..=mh), rng.gen_range(0.0..=mh), rng.gen_range(0.0..=mw), rng.gen_range(0.0..=mw)]
}

pub fn r_padded(img: &Image, seed: u64) -> Image {
    pad_by_offsets(img, random_offsets(img, 0.2, seed))
}

pub fn r_expanded(img: &Image, seed: u64) -> Image {
    pad_by_offsets(img, random_offsets(img, 0.1, seed))
}
