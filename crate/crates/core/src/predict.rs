//! Whole-image inference: reflect-pad to a multiple of 32, run fixed-size
//! tiles, stitch, and crop back to the original size.

use std::path::Path;

use crate::data::augment::reflect;
use crate::data::{crop, png_io, stitch};
use crate::error::{Error, Result};
use crate::metrics::binarize;
use crate::model::FaNet;
use crate::nn::ParamStore;
use crate::tensor::{save_ftns, Shape, Tensor};
use crate::train::predict_probabilities;

pub const ALIGN: usize = 32;

fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Extend the bottom and right edges by reflection to `h x w`.
pub fn pad_reflect_to(t: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let s = t.shape();
    Tensor::from_fn(Shape::new(s.b(), s.c(), h, w), |[b, c, y, x]| {
        t.at(b, c, reflect(y as i64, s.h()), reflect(x as i64, s.w()))
    })
}

/// Start offsets along one axis of length `n` for windows of `size`; the
/// last window is pulled back to end at `n`.
fn starts(n: usize, size: usize) -> Vec<usize> {
    if n <= size {
        return vec![0];
    }
    let mut v: Vec<usize> = (0..n.div_ceil(size)).map(|i| i * size).collect();
    if let Some(last) = v.last_mut() {
        *last = (*last).min(n - size);
    }
    v
}

/// Probabilities `(1,1,H,W)` for an image `(1,3,H,W)` of any size.
pub fn predict_image(net: &FaNet, store: &ParamStore, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.b() != 1 || s.c() != 3 {
        return Err(Error::shape("predict_image", "C", format!("expected (1,3,H,W), got {s}")));
    }
    if s.h() == 0 || s.w() == 0 {
        return Err(Error::Validation("image is empty".into()));
    }
    let (hp, wp) = (round_up(s.h(), ALIGN), round_up(s.w(), ALIGN));
    let padded = pad_reflect_to(image, hp, wp);
    let size = net.config.tile_size;
    let (th, tw) = (size.min(hp), size.min(wp));
    let mut origins = Vec::new();
    let mut tiles = Vec::new();
    for y0 in starts(hp, th) {
        for x0 in starts(wp, tw) {
            let t = crop(&padded, y0, x0, th, tw);
            tiles.push(predict_probabilities(net, store, &t)?);
            origins.push((y0, x0));
        }
    }
    let full = stitch(&tiles, &origins, hp, wp)?;
    Ok(crop(&full, 0, 0, s.h(), s.w()))
}

/// Write `mask.png` (0 / 255) and `probabilities.ftns` into `out`.
pub fn write_prediction(out: &Path, probabilities: &Tensor<f32>, threshold: f64) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mask = binarize(probabilities, threshold)?;
    png_io::write_mask(&out.join("mask.png"), &mask.to_tensor())?;
    save_ftns(&out.join("probabilities.ftns"), probabilities)
}
