//! Training-time augmentations: input noise and conditioning dropout.

use rand::Rng as _;

use crate::diffusion::gaussian_image;
use crate::image::Image;
use crate::renderer::FeatureImage;
use crate::rng::Rng;

pub const INPUT_NOISE_PROBABILITY: f64 = 0.5;
pub const INPUT_NOISE_MAX_STD: f64 = 0.5;
pub const DROPOUT_PROBABILITY: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub image: Image,
    /// Standard deviation of the added noise, `None` when untouched.
    pub noise_std: Option<f64>,
}

/// With probability `p`, adds white noise whose std is uniform in `[0, 0.5]`.
pub fn augment_input_noise(image: &Image, rng: &mut Rng, p: f64) -> Augmented {
    if rng.random::<f64>() >= p {
        return Augmented {
            image: image.clone(),
            noise_std: None,
        };
    }
    let std = rng.random_range(0.0..=INPUT_NOISE_MAX_STD);
    let noise = gaussian_image(image.shape(), std, rng);
    Augmented {
        image: image.zip_map(&noise, |a, b| a + b).expect("same shape"),
        noise_std: Some(std),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dropout {
    pub feature: FeatureImage,
    pub dropped: bool,
}

/// With probability `p`, replaces the feature data by standard Gaussian noise.
pub fn conditioning_dropout(feature: &FeatureImage, rng: &mut Rng, p: f64) -> Dropout {
    if rng.random::<f64>() >= p {
        return Dropout {
            feature: feature.clone(),
            dropped: false,
        };
    }
    Dropout {
        feature: null_feature(feature, rng),
        dropped: true,
    }
}

/// Copy of `feature` whose data is standard Gaussian noise.
pub fn null_feature(feature: &FeatureImage, rng: &mut Rng) -> FeatureImage {
    FeatureImage {
        data: gaussian_image(feature.data.shape(), 1.0, rng),
        alpha: feature.alpha.clone(),
        target_camera: feature.target_camera.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Camera;
    use crate::rng::{stream, Purpose};
    use nalgebra::Matrix4;

    fn feature(h: usize, w: usize) -> FeatureImage {
        let cam = Camera::new(Matrix4::identity(), 40.0, w, h, 0.5, 2.0).unwrap();
        FeatureImage {
            data: Image::from_fn(16, h, w, |c, y, x| 0.01 * (c + y + x) as f64),
            alpha: Image::filled(1, h, w, 0.5),
            target_camera: cam,
        }
    }

    #[test]
    fn identity_branches_are_bit_exact() {
        let img = Image::from_fn(3, 4, 4, |c, y, x| (c * 7 + y * 3 + x) as f64 / 50.0 - 0.5);
        let out = augment_input_noise(&img, &mut stream(0, Purpose::Augmentation, 0), 0.0);
        assert_eq!(out, Augmented { image: img, noise_std: None });
        let f = feature(4, 4);
        let out = conditioning_dropout(&f, &mut stream(0, Purpose::Dropout, 0), 0.0);
        assert_eq!(out.feature, f);
        assert!(!out.dropped);
    }

    #[test]
    fn augmentation_is_seeded_and_bounded() {
        let img = Image::zeros(3, 8, 8);
        let mut fired = 0;
        for i in 0..200 {
            let a = augment_input_noise(&img, &mut stream(1, Purpose::Augmentation, i), INPUT_NOISE_PROBABILITY);
            let b = augment_input_noise(&img, &mut stream(1, Purpose::Augmentation, i), INPUT_NOISE_PROBABILITY);
            assert_eq!(a, b);
            if let Some(std) = a.noise_std {
                fired += 1;
                assert!((0.0..=0.5).contains(&std));
            } else {
                assert_eq!(a.image, img);
            }
        }
        assert!((70..130).contains(&fired));
    }

    #[test]
    fn dropout_noise_moments() {
        let f = feature(128, 128);
        let out = conditioning_dropout(&f, &mut stream(3, Purpose::Dropout, 0), 1.0);
        assert!(out.dropped);
        let data = out.feature.data.data();
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let std = (data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.05);
        assert!((std - 1.0).abs() < 0.05);
    }
}
