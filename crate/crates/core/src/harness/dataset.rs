//! Procedural shape images.
//!
//! Each image is a linear colour gradient with one to three filled shapes
//! (axis-aligned ellipses or rectangles) composited on top. Shape edges are
//! anti-aliased by 4×4 supersampling of the coverage mask. Image `i` of a
//! dataset is drawn from stream `i` of the dataset seed, so datasets are
//! reproducible and prefixes of larger datasets agree.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

pub const MIN_SIZE: usize = 8;
pub const MAX_SIZE: usize = 64;

const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (u, v) = ((x - cx) / rx, (y - cy) / ry);
                u * u + v * v <= 1.0
            }
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
        }
    }

    fn coverage(&self, px: usize, py: usize) -> f64 {
        let mut hits = 0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                if self.contains(x, y) {
                    hits += 1;
                }
            }
        }
        hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
    }
}

fn check_size(size: usize) -> Result<()> {
    if !(MIN_SIZE..=MAX_SIZE).contains(&size) {
        return Err(Error::param(format!(
            "image size must lie in [{MIN_SIZE}, {MAX_SIZE}], got {size}"
        )));
    }
    Ok(())
}

/// One `[3, size, size]` image with values in `[0, 1]`.
pub fn render_shape_image<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Result<Tensor> {
    check_size(size)?;
    let s = size as f64;
    let c0: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.75));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.75));
    let theta = rng.gen_range(0.0..2.0 * PI);
    let (dx, dy) = (theta.cos(), theta.sin());
    let half_diag = s / std::f64::consts::SQRT_2;

    let mut img = Tensor::zeros(&[3, size, size]);
    {
        let data = img.data_mut();
        for y in 0..size {
            for x in 0..size {
                let proj = (x as f64 + 0.5 - s / 2.0) * dx + (y as f64 + 0.5 - s / 2.0) * dy;
                let g = (0.5 + 0.5 * proj / half_diag).clamp(0.0, 1.0);
                for c in 0..3 {
                    data[(c * size + y) * size + x] = c0[c] + (c1[c] - c0[c]) * g;
                }
            }
        }
    }

    let n_shapes = rng.gen_range(1..=3);
    for _ in 0..n_shapes {
        let cx = rng.gen_range(0.2..0.8) * s;
        let cy = rng.gen_range(0.2..0.8) * s;
        let rx = rng.gen_range(0.12..0.35) * s;
        let ry = rng.gen_range(0.12..0.35) * s;
        let shape = if rng.gen_bool(0.5) {
            Shape::Ellipse { cx, cy, rx, ry }
        } else {
            Shape::Rect {
                x0: cx - rx,
                y0: cy - ry,
                x1: cx + rx,
                y1: cy + ry,
            }
        };
        let colour: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.95));
        let data = img.data_mut();
        for y in 0..size {
            for x in 0..size {
                let a = shape.coverage(x, y);
                if a == 0.0 {
                    continue;
                }
                for (c, &col) in colour.iter().enumerate() {
                    let p = &mut data[(c * size + y) * size + x];
                    *p = (1.0 - a) * *p + a * col;
                }
            }
        }
    }
    Ok(img)
}

/// `count` shape images of side `size`; image `i` uses stream `i` of `seed`.
pub fn gen_shape_dataset(count: usize, size: usize, seed: u64) -> Result<Vec<Tensor>> {
    check_size(size)?;
    (0..count)
        .map(|i| render_shape_image(size, &mut stream(seed, i as u64)))
        .collect()
}

/// Mean of each channel over a whole dataset.
pub fn channel_means(images: &[Tensor]) -> Vec<f64> {
    let Some(first) = images.first() else {
        return Vec::new();
    };
    let c = first.dims()[0];
    (0..c)
        .map(|ch| {
            let total: f64 = images.iter().map(|im| im.channel(ch).iter().sum::<f64>()).sum();
            let n: usize = images.iter().map(|im| im.channel(ch).len()).sum();
            total / n as f64
        })
        .collect()
}
