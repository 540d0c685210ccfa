//! Synthetic piecewise-constant test images.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Random overlapping rectangles and ellipses with intensities in `[0, 1]`.
pub fn piecewise_constant(dims: (usize, usize), n_shapes: usize, seed: u64) -> Array2<f64> {
    let (h, w) = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Array2::from_elem(dims, rng.gen_range(0.1..0.4));
    for _ in 0..n_shapes {
        let value = rng.gen_range(0.0..1.0);
        let ci = rng.gen_range(0.0..h as f64);
        let cj = rng.gen_range(0.0..w as f64);
        let ri = rng.gen_range(0.08..0.35) * h as f64;
        let rj = rng.gen_range(0.08..0.35) * w as f64;
        let ellipse = rng.gen_bool(0.5);
        for ((i, j), px) in img.indexed_iter_mut() {
            let di = (i as f64 + 0.5 - ci) / ri;
            let dj = (j as f64 + 0.5 - cj) / rj;
            let inside = if ellipse { di * di + dj * dj <= 1.0 } else { di.abs() <= 1.0 && dj.abs() <= 1.0 };
            if inside {
                *px = value;
            }
        }
    }
    img
}

/// `count` random square patches drawn uniformly from `images`.
pub fn extract_patches(images: &[Array2<f64>], patch_size: usize, count: usize, seed: u64) -> Result<Vec<Array2<f64>>> {
    if images.is_empty() {
        return Err(Error::invalid("no images to extract patches from"));
    }
    if let Some(img) = images.iter().find(|img| img.nrows() < patch_size || img.ncols() < patch_size) {
        return Err(Error::invalid(format!("image {:?} smaller than patch size {patch_size}", img.dim())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let img = &images[rng.gen_range(0..images.len())];
            let i = rng.gen_range(0..=img.nrows() - patch_size);
            let j = rng.gen_range(0..=img.ncols() - patch_size);
            img.slice(ndarray::s![i..i + patch_size, j..j + patch_size]).to_owned()
        })
        .collect())
}

/// Training patches cut from freshly generated phantoms.
pub fn phantom_patches(patch_size: usize, count: usize, seed: u64) -> Vec<Array2<f64>> {
    let side = (2 * patch_size).max(16);
    let n_images = count.div_ceil(8).max(1);
    let images: Vec<_> = (0..n_images)
        .map(|k| piecewise_constant((side, side), 12, seed.wrapping_mul(7919).wrapping_add(k as u64)))
        .collect();
    extract_patches(&images, patch_size, count, seed ^ 0x9e37_79b9).expect("phantoms exceed patch size")
}
