//! Horizontal flips and pad-and-crop.

use rand::Rng;

use crate::nnkernel::Tensor;

/// Zero padding on each side before cropping.
pub const PAD: usize = 4;

/// Flip then crop one `c x h x w` image. The crop window starts at
/// `(dy, dx)` in the padded image, so `(PAD, PAD)` without a flip is the
/// identity.
pub fn augment_image(src: &[f64], dst: &mut [f64], (c, h, w): (usize, usize, usize), flip: bool, dy: usize, dx: usize) {
    assert!(dy <= 2 * PAD && dx <= 2 * PAD, "crop offset outside padded image");
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - PAD as isize;
            for x in 0..w {
                let sx = (x + dx) as isize - PAD as isize;
                let inside = (0..h as isize).contains(&sy) && (0..w as isize).contains(&sx);
                dst[(ch * h + y) * w + x] = if inside {
                    let sx = if flip { w - 1 - sx as usize } else { sx as usize };
                    src[(ch * h + sy as usize) * w + sx]
                } else {
                    0.0
                };
            }
        }
    }
}

/// Independent flip (p = 0.5) and random crop per image.
pub fn augment_batch<R: Rng + ?Sized>(images: &Tensor, rng: &mut R) -> Tensor {
    let shape = images.sample_shape();
    let mut out = Tensor::zeros(images.dims());
    for b in 0..images.batch() {
        let flip = rng.random_bool(0.5);
        let dy = rng.random_range(0..=2 * PAD);
        let dx = rng.random_range(0..=2 * PAD);
        augment_image(images.sample(b), out.sample_mut(b), shape, flip, dy, dx);
    }
    out
}
