//! Shift / rotate / flip augmentation with zero-filled borders.

use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Max shift as a fraction of each dimension, in [0, 0.2].
    pub max_shift_fraction: f32,
    /// Max rotation magnitude in degrees, in [0, 15].
    pub max_rotation_degrees: f32,
    pub horizontal_flip: bool,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            max_shift_fraction: 0.1,
            max_rotation_degrees: 10.0,
            horizontal_flip: false,
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=0.2).contains(&self.max_shift_fraction) {
            return Err(format!(
                "max_shift_fraction {} outside [0, 0.2]",
                self.max_shift_fraction
            ));
        }
        if !(0.0..=15.0).contains(&self.max_rotation_degrees) {
            return Err(format!(
                "max_rotation_degrees {} outside [0, 15]",
                self.max_rotation_degrees
            ));
        }
        Ok(())
    }
}

/// Rotate (bilinear, about the image center), then shift by integer
/// offsets, then optionally mirror. Vacated borders are zero; the output
/// is clamped to [0,1]. Pure function of (image, policy, rng state).
pub fn augment(image: &Tensor, policy: &AugmentPolicy, rng: &mut impl Rng) -> Tensor {
    let shape = image.shape();
    assert_eq!(shape.len(), 3, "augment expects (C,H,W)");
    let (c, h, w) = (shape[0], shape[1], shape[2]);

    let max_dy = (policy.max_shift_fraction * h as f32).floor() as i32;
    let max_dx = (policy.max_shift_fraction * w as f32).floor() as i32;
    let dy = if max_dy > 0 { rng.gen_range(-max_dy..=max_dy) } else { 0 };
    let dx = if max_dx > 0 { rng.gen_range(-max_dx..=max_dx) } else { 0 };
    let theta = if policy.max_rotation_degrees > 0.0 {
        rng.gen_range(-policy.max_rotation_degrees..=policy.max_rotation_degrees)
            .to_radians()
    } else {
        0.0
    };
    let flip = policy.horizontal_flip && rng.gen::<bool>();

    let mut out = Tensor::zeros(vec![c, h, w]);
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    let (sin, cos) = theta.sin_cos();
    for ci in 0..c {
        let src = &image.data()[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out.data_mut()[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                // undo flip, then shift, then rotation (inverse mapping)
                let ox = if flip { w - 1 - x } else { x } as i32 - dx;
                let oy = y as i32 - dy;
                let fy = oy as f32 - cy;
                let fx = ox as f32 - cx;
                // inverse rotation by -theta
                let sy = cos * fy + sin * fx + cy;
                let sx = -sin * fy + cos * fx + cx;
                let v = if theta == 0.0 {
                    sample_nearest(src, h, w, oy, ox)
                } else {
                    sample_bilinear(src, h, w, sy, sx)
                };
                dst[y * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn sample_nearest(src: &[f32], h: usize, w: usize, y: i32, x: i32) -> f32 {
    if y < 0 || x < 0 || y >= h as i32 || x >= w as i32 {
        0.0
    } else {
        src[y as usize * w + x as usize]
    }
}

fn sample_bilinear(src: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let y0 = y.floor();
    let x0 = x.floor();
    let ty = y - y0;
    let tx = x - x0;
    let mut acc = 0.0;
    for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
        for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
            let v = sample_nearest(src, h, w, y0 as i32 + dy, x0 as i32 + dx);
            acc += v * wy * wx;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn degenerate_policy_is_identity() {
        let policy = AugmentPolicy {
            max_shift_fraction: 0.0,
            max_rotation_degrees: 0.0,
            horizontal_flip: false,
        };
        let mut rng = seed::rng(1);
        let img = Tensor::new(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(augment(&img, &policy, &mut rng), img);
    }

    #[test]
    fn unit_shift_moves_pixel_and_zero_fills() {
        // force dx = +1 by sampling until the draw comes out that way is
        // fragile; instead verify via an exhaustive scan over seeds.
        let policy = AugmentPolicy {
            max_shift_fraction: 0.2,
            max_rotation_degrees: 0.0,
            horizontal_flip: false,
        };
        let mut img = Tensor::zeros(vec![1, 5, 5]);
        img.data_mut()[2 * 5 + 2] = 1.0; // center pixel
        let mut saw_right_shift = false;
        for s in 0..64 {
            let out = augment(&img, &policy, &mut seed::rng(s));
            let hot: Vec<usize> = out
                .data()
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > 0.5)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(hot.len(), 1, "shift preserves the single hot pixel");
            if hot[0] == 2 * 5 + 3 {
                saw_right_shift = true;
            }
        }
        assert!(saw_right_shift);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let policy = AugmentPolicy::default();
        let mut rng = seed::rng(9);
        let img = Tensor::new(
            vec![1, 4, 4],
            (0..16).map(|i| i as f32 / 16.0).collect(),
        )
        .unwrap();
        let a = augment(&img, &policy, &mut seed::rng(33));
        let b = augment(&img, &policy, &mut seed::rng(33));
        assert_eq!(a, b);
        let _ = &mut rng;
    }

    #[test]
    fn output_stays_in_unit_range() {
        let policy = AugmentPolicy {
            max_shift_fraction: 0.2,
            max_rotation_degrees: 15.0,
            horizontal_flip: true,
        };
        let img = Tensor::filled(vec![1, 8, 8], 1.0);
        for s in 0..16 {
            let out = augment(&img, &policy, &mut seed::rng(s));
            assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
