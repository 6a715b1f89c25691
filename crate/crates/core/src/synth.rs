//! Deterministic synthetic test images and samples from a patch prior.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::forward::{DegradationOperator, Kernel};
use crate::gmm::{extract_patches, train_em, AdaptedGmm, EmOptions, PatchGmm};
use crate::image::Image;
use crate::partition::Partition;
use crate::rng;

/// Standard deviation of the fine texture added to every synthetic image.
pub const TEXTURE_STD: f64 = 0.01;

/// Smooth gradient background with a few discs and rectangles, lightly blurred,
/// plus fine texture, in `[0.02, 0.98]`.
pub fn synthetic_image(width: usize, height: usize, seed: u64) -> Result<Image> {
    let mut rng = rng::stream(seed, &[0x5359_4e54]);
    let (w, h) = (width as f64, height as f64);
    let base = rng.random_range(0.25..0.6);
    let gx = rng.random_range(-0.25..0.25);
    let gy = rng.random_range(-0.25..0.25);
    let mut data: Vec<f64> = (0..width * height)
        .map(|n| base + gx * ((n % width) as f64 / w - 0.5) + gy * ((n / width) as f64 / h - 0.5))
        .collect();
    let shapes = rng.random_range(3..7);
    for _ in 0..shapes {
        let level = rng.random_range(-0.4..0.4);
        let cx = rng.random_range(0.0..w);
        let cy = rng.random_range(0.0..h);
        if rng.random_bool(0.5) {
            let rad = rng.random_range(0.1..0.35) * w.min(h);
            for (n, v) in data.iter_mut().enumerate() {
                let dx = (n % width) as f64 - cx;
                let dy = (n / width) as f64 - cy;
                if dx * dx + dy * dy <= rad * rad {
                    *v += level;
                }
            }
        } else {
            let hw = rng.random_range(0.1..0.3) * w;
            let hh = rng.random_range(0.1..0.3) * h;
            for (n, v) in data.iter_mut().enumerate() {
                if ((n % width) as f64 - cx).abs() <= hw && ((n / width) as f64 - cy).abs() <= hh {
                    *v += level;
                }
            }
        }
    }
    let blur = DegradationOperator::conv2d(width, height, Kernel::gaussian(3, 0.8)?)?;
    let texture = Normal::new(0.0, TEXTURE_STD).expect("valid std");
    let smooth = blur.apply(&data)?;
    Image::new(
        width,
        height,
        smooth.into_iter().map(|v| (v + texture.sample(&mut rng)).clamp(0.02, 0.98)).collect(),
    )
}

/// Independent draws of every block of `part` from the (marginalized) prior.
pub fn sample_from_prior(gmm: &AdaptedGmm, part: &Partition, seed: u64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; part.pixel_count()];
    for (j, blk) in part.blocks().iter().enumerate() {
        let mut rng = rng::stream(seed, &[0x5052_494f, j as u64]);
        let g = if blk.len() == gmm.dim() {
            gmm.clone()
        } else {
            gmm.marginalize(&blk.local)?
        };
        let x = g.sample(&mut rng)?;
        for (k, &i) in blk.indices.iter().enumerate() {
            out[i] = x[k];
        }
    }
    Ok(out)
}

/// A zero-mean patch GMM fitted to `images` synthetic images of size `size × size`.
pub fn train_synthetic_gmm(k: usize, patch: usize, images: usize, size: usize, seed: u64) -> Result<PatchGmm> {
    let mut samples = Vec::new();
    for i in 0..images {
        let img = synthetic_image(size, size, rng::derive_seed(seed, &[i as u64]))?;
        samples.extend(extract_patches(img.data(), size, size, patch, 1, true)?);
    }
    Ok(train_em(
        &samples,
        &EmOptions {
            k,
            seed,
            ..EmOptions::default()
        },
    )?
    .gmm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_images_are_reproducible_and_bounded() {
        let a = synthetic_image(16, 12, 3).unwrap();
        let b = synthetic_image(16, 12, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| (0.02..=0.98).contains(&v)));
        assert_ne!(a, synthetic_image(16, 12, 4).unwrap());
    }
}
