//! Synthetic stand-in for the learned image encoder: samples the analytic
//! scene on a camera's frustum grid.

use crate::field::{softplus, softplus_inverse, Dense, DecoderMlp, FeatureVolume, FieldError, DEFAULT_HIDDEN};
use crate::geometry::Camera;
use crate::harness::scene::{scene_field, ToyScene};

/// Density code stored for empty space; `softplus(EMPTY_DENSITY_CODE) < 1e-6`.
pub const EMPTY_DENSITY_CODE: f64 = -14.0;

/// Raw density code for `tau`, clamped below at [`EMPTY_DENSITY_CODE`].
pub fn encode_density(tau: f64) -> f64 {
    if tau <= softplus(EMPTY_DENSITY_CODE) {
        EMPTY_DENSITY_CODE
    } else {
        softplus_inverse(tau)
    }
}

/// Volume over `camera`'s frustum whose voxels hold the scene feature in
/// channels `0..c−1` and the density code in channel `c − 1`. When
/// `logit_channel` is set, a zero logit is appended for softmax-weighted
/// aggregation.
pub fn synthetic_encode(
    scene: &ToyScene,
    camera: &Camera,
    channels: usize,
    depth_slices: usize,
    logit_channel: bool,
) -> Result<FeatureVolume, FieldError> {
    if channels < 4 {
        return Err(FieldError::ChannelMismatch {
            expected: 4,
            actual: channels,
        });
    }
    let stored = channels + usize::from(logit_channel);
    FeatureVolume::from_fn(camera.clone(), stored, depth_slices, |p| {
        let sample = scene_field(scene, &p);
        let mut w: Vec<f64> = sample.feature.iter().copied().chain(std::iter::repeat(0.0)).take(channels - 1).collect();
        w.push(encode_density(sample.tau));
        if logit_channel {
            w.push(0.0);
        }
        w
    })
}

/// Decoder whose output on a synthetic voxel is `(softplus(w[c−1]), w[0..c−1] ++ [0])`.
///
/// Hidden units 0 and 1 carry the positive and negative parts of the
/// density code; every other parameter is zero.
pub fn synthetic_decoder(channels: usize) -> DecoderMlp {
    let hidden = DEFAULT_HIDDEN;
    let code = channels - 1;
    let mut w1 = vec![0.0; hidden * channels];
    w1[code] = 1.0;
    w1[channels + code] = -1.0;
    let mut w2 = vec![0.0; hidden * hidden];
    w2[0] = 1.0;
    w2[hidden + 1] = 1.0;
    let mut w3 = vec![0.0; (channels + 1) * hidden];
    w3[0] = 1.0;
    w3[1] = -1.0;
    // Output row `channels` is feature channel c−1; cancel the skipped code.
    w3[channels * hidden] = -1.0;
    w3[channels * hidden + 1] = 1.0;
    DecoderMlp::new(
        Dense::new(channels, hidden, w1, vec![0.0; hidden]).expect("shape"),
        Dense::new(hidden, hidden, w2, vec![0.0; hidden]).expect("shape"),
        Dense::new(hidden, channels + 1, w3, vec![0.0; channels + 1]).expect("shape"),
    )
    .expect("layers chain")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{decode, sample_volume};
    use nalgebra::{Point3, Vector3};

    #[test]
    fn voxel_centers_round_trip_through_decoder() {
        let scene = ToyScene::demo(16);
        let cam = Camera::look_at(
            Point3::new(0.3, -0.4, -2.0),
            Point3::origin(),
            Vector3::new(0.0, -1.0, 0.0),
            40.0,
            12,
            12,
            1.0,
            3.0,
        )
        .unwrap();
        let vol = synthetic_encode(&scene, &cam, 16, 16, false).unwrap();
        let mlp = synthetic_decoder(16);
        let mut occupied = 0;
        for k in 0..16 {
            for row in 0..12 {
                for col in 0..12 {
                    let p = vol.voxel_center(k, row, col);
                    let truth = scene_field(&scene, &p);
                    let got = decode(&mlp, &sample_volume(&vol, &p)).unwrap();
                    assert!((got.tau - truth.tau).abs() < 1e-6, "{} vs {}", got.tau, truth.tau);
                    for c in 0..15 {
                        assert!((got.feature[c] - truth.feature[c]).abs() < 1e-9);
                    }
                    assert!(got.feature[15].abs() < 1e-9);
                    occupied += usize::from(truth.tau > 0.0);
                }
            }
        }
        assert!(occupied > 100);
    }

    #[test]
    fn density_code_floor() {
        assert_eq!(encode_density(0.0), EMPTY_DENSITY_CODE);
        assert!(softplus(EMPTY_DENSITY_CODE) < 1e-6);
        assert!((softplus(encode_density(2.5)) - 2.5).abs() < 1e-12);
    }
}
