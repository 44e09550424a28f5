//! Box-filter down-sampling and per-channel normalization.

use super::dataset::DataError;
use crate::tensor::Tensor;

/// Area-average (box filter) resampling of a (C,H,W) image down to (C,h,w).
/// Handles non-integer ratios by weighting source pixels by overlap area.
pub fn downsample(image: &Tensor, target: (usize, usize)) -> Result<Tensor, DataError> {
    let shape = image.shape();
    assert_eq!(shape.len(), 3, "downsample expects (C,H,W)");
    let (c, src_h, src_w) = (shape[0], shape[1], shape[2]);
    let (dst_h, dst_w) = target;
    if dst_h > src_h || dst_w > src_w || dst_h == 0 || dst_w == 0 {
        return Err(DataError::Upsample {
            from: src_h,
            from_w: src_w,
            to: dst_h,
            to_w: dst_w,
        });
    }
    let ry = src_h as f64 / dst_h as f64;
    let rx = src_w as f64 / dst_w as f64;
    let mut out = Tensor::zeros(vec![c, dst_h, dst_w]);
    for ci in 0..c {
        let src = &image.data()[ci * src_h * src_w..(ci + 1) * src_h * src_w];
        for oy in 0..dst_h {
            let y0 = oy as f64 * ry;
            let y1 = (oy + 1) as f64 * ry;
            for ox in 0..dst_w {
                let x0 = ox as f64 * rx;
                let x1 = (ox + 1) as f64 * rx;
                let mut acc = 0.0f64;
                let mut area = 0.0f64;
                let sy0 = y0.floor() as usize;
                let sy1 = (y1.ceil() as usize).min(src_h);
                let sx0 = x0.floor() as usize;
                let sx1 = (x1.ceil() as usize).min(src_w);
                for sy in sy0..sy1 {
                    let wy = overlap(sy as f64, (sy + 1) as f64, y0, y1);
                    if wy == 0.0 {
                        continue;
                    }
                    for sx in sx0..sx1 {
                        let wx = overlap(sx as f64, (sx + 1) as f64, x0, x1);
                        if wx == 0.0 {
                            continue;
                        }
                        acc += src[sy * src_w + sx] as f64 * wy * wx;
                        area += wy * wx;
                    }
                }
                out.data_mut()[(ci * dst_h + oy) * dst_w + ox] = (acc / area) as f32;
            }
        }
    }
    Ok(out)
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// (x - mean) / std per channel, over a (N,C,H,W) or (C,H,W) tensor.
pub fn normalize(batch: &Tensor, stats: &ChannelStats) -> Result<Tensor, DataError> {
    apply_stats(batch, stats, |x, m, s| (x - m) / s)
}

/// Inverse of `normalize`.
pub fn denormalize(batch: &Tensor, stats: &ChannelStats) -> Result<Tensor, DataError> {
    apply_stats(batch, stats, |x, m, s| x * s + m)
}

fn apply_stats(
    batch: &Tensor,
    stats: &ChannelStats,
    f: impl Fn(f32, f32, f32) -> f32,
) -> Result<Tensor, DataError> {
    if let Some(channel) = stats.std.iter().position(|&s| s <= 0.0) {
        return Err(DataError::ZeroStd { channel });
    }
    let shape = batch.shape().to_vec();
    let (c, plane) = match shape.len() {
        3 => (shape[0], shape[1] * shape[2]),
        4 => (shape[1], shape[2] * shape[3]),
        _ => panic!("normalize expects (C,H,W) or (N,C,H,W)"),
    };
    assert_eq!(stats.mean.len(), c);
    assert_eq!(stats.std.len(), c);
    let mut out = batch.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ci = (i / plane) % c;
        *v = f(*v, stats.mean[ci], stats.std[ci]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_stays_constant() {
        let img = Tensor::filled(vec![1, 9, 7], 0.37);
        let out = downsample(&img, (4, 3)).unwrap();
        for &v in out.data() {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn two_by_two_average() {
        let img = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = downsample(&img, (1, 1)).unwrap();
        assert!((out.data()[0] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn checkerboard_averages_to_half() {
        let mut data = vec![0.0f32; 32 * 32];
        for y in 0..32 {
            for x in 0..32 {
                data[y * 32 + x] = ((x + y) % 2) as f32;
            }
        }
        let img = Tensor::new(vec![1, 32, 32], data).unwrap();
        let out = downsample(&img, (16, 16)).unwrap();
        // brute-force box-filter reference: every 2x2 cell holds two ones
        for &v in out.data() {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_rejected() {
        let img = Tensor::filled(vec![1, 4, 4], 0.0);
        assert!(downsample(&img, (8, 8)).is_err());
    }

    #[test]
    fn normalize_identity_and_round_trip() {
        let stats = ChannelStats {
            mean: vec![0.0],
            std: vec![1.0],
        };
        let batch = Tensor::new(vec![1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(normalize(&batch, &stats).unwrap(), batch);

        let stats = ChannelStats {
            mean: vec![0.25],
            std: vec![0.5],
        };
        let constant = Tensor::filled(vec![1, 2, 2], 0.25);
        let z = normalize(&constant, &stats).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        let back = denormalize(&normalize(&batch, &stats).unwrap(), &stats).unwrap();
        for (a, b) in back.data().iter().zip(batch.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_std_rejected() {
        let stats = ChannelStats {
            mean: vec![0.0],
            std: vec![0.0],
        };
        let batch = Tensor::filled(vec![1, 2, 2], 0.5);
        assert!(matches!(
            normalize(&batch, &stats),
            Err(DataError::ZeroStd { channel: 0 })
        ));
    }
}
