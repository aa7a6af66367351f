//! Resize to the network's input height, normalize and pad to fixed width.

use super::Image;
use crate::ops::pool::resize_bilinear;
use crate::tensor::Tensor;

pub const HEIGHT: usize = 32;
pub const WIDTH: usize = 128;
pub const MIN_WIDTH: usize = 8;

/// Width of the content region after resizing an `h×w` image.
pub fn content_width(h: usize, w: usize) -> usize {
    let scaled = (HEIGHT as f64 * w as f64 / h as f64).round() as usize;
    scaled.clamp(MIN_WIDTH, WIDTH)
}

/// `3×32×128` network input: bilinear resize to height 32 keeping the aspect
/// ratio, map `x → 2x − 1`, then right-pad with zeros.
pub fn preprocess(img: &Image) -> Tensor<f32> {
    let cw = content_width(img.height, img.width);
    let rgb = if img.channels == 3 {
        img.clone()
    } else {
        Image::from_gray(img.height, img.width, &img.to_gray()).expect("valid")
    };
    let resized = if (img.height, img.width) == (HEIGHT, cw) {
        rgb.data
    } else {
        resize_bilinear(&rgb.data, 3, img.height, img.width, HEIGHT, cw)
    };
    let mut out = vec![0.0f32; 3 * HEIGHT * WIDTH];
    for c in 0..3 {
        for y in 0..HEIGHT {
            let src = &resized[(c * HEIGHT + y) * cw..(c * HEIGHT + y + 1) * cw];
            let dst = &mut out[(c * HEIGHT + y) * WIDTH..(c * HEIGHT + y) * WIDTH + cw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = 2.0 * s - 1.0;
            }
        }
    }
    Tensor::new(&[3, HEIGHT, WIDTH], out).expect("fixed shape")
}
