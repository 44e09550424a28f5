//! Procedural glyph corpora for desk-scale experiments.
//!
//! The mentor's world is digit glyphs (10 classes, 1x28x28). The
//! attacker's unlabeled pool is letter glyphs: same rendering pipeline,
//! disjoint shapes — an unrelated corpus standing in for the attacker's
//! found data.

use super::dataset::{LabeledDataset, UnlabeledPool};
use crate::seed;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;

#[rustfmt::skip]
const DIGITS: [[&str; 7]; 10] = [
    [" ### ","#   #","#  ##","# # #","##  #","#   #"," ### "], // 0
    ["  #  "," ##  ","  #  ","  #  ","  #  ","  #  "," ### "], // 1
    [" ### ","#   #","    #","   # ","  #  "," #   ","#####"], // 2
    [" ### ","#   #","    #","  ## ","    #","#   #"," ### "], // 3
    ["   # ","  ## "," # # ","#  # ","#####","   # ","   # "], // 4
    ["#####","#    ","#### ","    #","    #","#   #"," ### "], // 5
    [" ### ","#    ","#    ","#### ","#   #","#   #"," ### "], // 6
    ["#####","    #","   # ","  #  ","  #  ","  #  ","  #  "], // 7
    [" ### ","#   #","#   #"," ### ","#   #","#   #"," ### "], // 8
    [" ### ","#   #","#   #"," ####","    #","    #"," ### "], // 9
];

#[rustfmt::skip]
const LETTERS: [[&str; 7]; 26] = [
    ["  #  "," # # ","#   #","#   #","#####","#   #","#   #"], // A
    ["#### ","#   #","#   #","#### ","#   #","#   #","#### "], // B
    [" ### ","#   #","#    ","#    ","#    ","#   #"," ### "], // C
    ["#### ","#   #","#   #","#   #","#   #","#   #","#### "], // D
    ["#####","#    ","#    ","#### ","#    ","#    ","#####"], // E
    ["#####","#    ","#    ","#### ","#    ","#    ","#    "], // F
    [" ### ","#   #","#    ","# ###","#   #","#   #"," ### "], // G
    ["#   #","#   #","#   #","#####","#   #","#   #","#   #"], // H
    [" ### ","  #  ","  #  ","  #  ","  #  ","  #  "," ### "], // I
    ["    #","    #","    #","    #","    #","#   #"," ### "], // J
    ["#   #","#  # ","# #  ","##   ","# #  ","#  # ","#   #"], // K
    ["#    ","#    ","#    ","#    ","#    ","#    ","#####"], // L
    ["#   #","## ##","# # #","#   #","#   #","#   #","#   #"], // M
    ["#   #","##  #","# # #","#  ##","#   #","#   #","#   #"], // N
    [" ### ","#   #","#   #","#   #","#   #","#   #"," ### "], // O
    ["#### ","#   #","#   #","#### ","#    ","#    ","#    "], // P
    [" ### ","#   #","#   #","#   #","# # #","#  # "," ## #"], // Q
    ["#### ","#   #","#   #","#### ","# #  ","#  # ","#   #"], // R
    [" ####","#    ","#    "," ### ","    #","    #","#### "], // S
    ["#####","  #  ","  #  ","  #  ","  #  ","  #  ","  #  "], // T
    ["#   #","#   #","#   #","#   #","#   #","#   #"," ### "], // U
    ["#   #","#   #","#   #","#   #"," # # "," # # ","  #  "], // V
    ["#   #","#   #","#   #","# # #","# # #","## ##","#   #"], // W
    ["#   #"," # # ","  #  ","  #  ","  #  "," # # ","#   #"], // X
    ["#   #"," # # ","  #  ","  #  ","  #  ","  #  ","  #  "], // Y
    ["#####","    #","   # ","  #  "," #   ","#    ","#####"], // Z
];

const IMG: usize = 28;
const CELL: usize = 3;
const RASTER_W: usize = GLYPH_W * CELL;
const RASTER_H: usize = GLYPH_H * CELL;

fn rasterize(glyph: &[&str; 7]) -> Vec<f32> {
    let mut raster = vec![0.0f32; RASTER_W * RASTER_H];
    for (gy, row) in glyph.iter().enumerate() {
        for (gx, ch) in row.bytes().enumerate() {
            if ch == b'#' {
                for dy in 0..CELL {
                    for dx in 0..CELL {
                        raster[(gy * CELL + dy) * RASTER_W + gx * CELL + dx] = 1.0;
                    }
                }
            }
        }
    }
    raster
}

/// Render one glyph into a 1x28x28 image with a random affine transform,
/// stroke intensity and additive noise. Pure function of the rng state.
pub fn render_glyph(glyph: &[&str; 7], rng: &mut impl Rng) -> Tensor {
    let raster = rasterize(glyph);
    let scale: f32 = rng.gen_range(0.85..1.2);
    let theta: f32 = rng.gen_range(-12.0f32..12.0).to_radians();
    let dy: f32 = rng.gen_range(-2.5..2.5);
    let dx: f32 = rng.gen_range(-2.5..2.5);
    let intensity: f32 = rng.gen_range(0.65..1.0);
    let noise = Normal::new(0.0f32, 0.04).unwrap();

    let mut out = Tensor::zeros(vec![1, IMG, IMG]);
    let cy = (IMG as f32 - 1.0) / 2.0;
    let cx = cy;
    let gcy = (RASTER_H as f32 - 1.0) / 2.0;
    let gcx = (RASTER_W as f32 - 1.0) / 2.0;
    let (sin, cos) = theta.sin_cos();
    let data = out.data_mut();
    for y in 0..IMG {
        for x in 0..IMG {
            let fy = (y as f32 - cy - dy) / scale;
            let fx = (x as f32 - cx - dx) / scale;
            let sy = cos * fy + sin * fx + gcy;
            let sx = -sin * fy + cos * fx + gcx;
            let v = bilinear(&raster, RASTER_H, RASTER_W, sy, sx) * intensity;
            let v = v + noise.sample(rng);
            data[y * IMG + x] = v.clamp(0.0, 1.0);
        }
    }
    out
}

fn bilinear(src: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let y0 = y.floor();
    let x0 = x.floor();
    let ty = y - y0;
    let tx = x - x0;
    let mut acc = 0.0;
    for (ddy, wy) in [(0i32, 1.0 - ty), (1, ty)] {
        for (ddx, wx) in [(0i32, 1.0 - tx), (1, tx)] {
            let yy = y0 as i32 + ddy;
            let xx = x0 as i32 + ddx;
            let v = if yy < 0 || xx < 0 || yy >= h as i32 || xx >= w as i32 {
                0.0
            } else {
                src[yy as usize * w + xx as usize]
            };
            acc += v * wy * wx;
        }
    }
    acc
}

/// 10-class digit-glyph dataset; labels are the digit values.
pub fn digit_dataset(n: usize, seed_val: u64, name: &str) -> LabeledDataset {
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = seed::rng(seed::derive2(seed_val, "digit", i as u64));
        let class = rng.gen_range(0..10);
        images.push(render_glyph(&DIGITS[class], &mut rng));
        labels.push(class);
    }
    LabeledDataset {
        images,
        labels,
        num_classes: 10,
        name: name.into(),
    }
}

/// Letter-glyph pool: shares the rendering pipeline but none of the shapes.
pub fn letter_pool(n: usize, seed_val: u64, name: &str) -> UnlabeledPool {
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = seed::rng(seed::derive2(seed_val, "letter", i as u64));
        let class = rng.gen_range(0..26);
        images.push(render_glyph(&LETTERS[class], &mut rng));
    }
    UnlabeledPool {
        images,
        name: name.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyph_tables_are_well_formed() {
        for g in DIGITS.iter().chain(LETTERS.iter()) {
            for row in g {
                assert_eq!(row.len(), GLYPH_W);
            }
        }
    }

    #[test]
    fn datasets_are_deterministic_and_in_range() {
        let a = digit_dataset(20, 7, "a");
        let b = digit_dataset(20, 7, "b");
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        for img in &a.images {
            assert_eq!(img.shape(), &[1, 28, 28]);
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let p = letter_pool(10, 3, "p");
        assert_eq!(p.len(), 10);
    }

    #[test]
    fn renders_have_signal() {
        let set = digit_dataset(10, 1, "s");
        for img in &set.images {
            let mass: f32 = img.data().iter().sum();
            assert!(mass > 10.0, "glyph too faint: {mass}");
        }
    }
}
