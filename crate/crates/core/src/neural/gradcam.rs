use image::{Rgb, RgbImage};

use super::{Model, NeuralError, IMAGE_INPUT, TARGETS};
use crate::autodiff::{Feed, Mode, Tensor};
use crate::patch::encode_png;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCam {
    /// Row-major `side x side` map in [0, 1].
    pub heatmap: Vec<f64>,
    pub side: usize,
    /// Unnormalized map at the block's resolution.
    pub coarse: Vec<f64>,
    pub coarse_side: usize,
    pub channel_weights: Vec<f64>,
}

impl GradCam {
    /// Row and column of the largest heatmap value (first in row-major order).
    pub fn peak(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.heatmap.iter().enumerate() {
            if v > self.heatmap[best] {
                best = i;
            }
        }
        (best / self.side, best % self.side)
    }
}

/// Bilinear resize of a square map, sampling at pixel centres.
pub fn bilinear_upsample(src: &[f64], from: usize, to: usize) -> Vec<f64> {
    let scale = from as f64 / to as f64;
    let coord = |d: usize| {
        let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (from - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(from - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = vec![0.0; to * to];
    for r in 0..to {
        let (r0, r1, fr) = coord(r);
        for c in 0..to {
            let (c0, c1, fc) = coord(c);
            let top = src[r0 * from + c0] * (1.0 - fc) + src[r0 * from + c1] * fc;
            let bottom = src[r1 * from + c0] * (1.0 - fc) + src[r1 * from + c1] * fc;
            out[r * to + c] = top * (1.0 - fr) + bottom * fr;
        }
    }
    out
}

/// Grad-CAM at the last conv block for one `[C, S, S]` patch.
pub fn grad_cam(model: &mut Model, patch: &Tensor, target: usize) -> Result<GradCam, NeuralError> {
    let block = model
        .meta
        .last_block
        .ok_or_else(|| NeuralError::InvalidConfig("model has no conv block for Grad-CAM".into()))?;
    if target >= model.meta.classes {
        return Err(NeuralError::InvalidData(format!(
            "target class {target} outside {} classes",
            model.meta.classes
        )));
    }
    if patch.shape().len() != 3 || patch.shape()[1] != patch.shape()[2] {
        return Err(NeuralError::InvalidData(format!("expected a [C, S, S] patch, got {:?}", patch.shape())));
    }
    let side = patch.shape()[1];
    let mut shape = vec![1];
    shape.extend_from_slice(patch.shape());
    let mut feed = Feed::new();
    feed.insert(IMAGE_INPUT.into(), Tensor::new(shape, patch.data().to_vec())?);
    feed.insert(TARGETS.into(), Tensor::new(vec![1], vec![target as f64])?);
    model.graph.forward(&feed, Mode::Eval)?;
    let act = model.graph.value(block).expect("block computed").clone();
    let s = act.shape().to_vec();
    if s.len() != 4 || s[2] != s[3] || s[2] == 0 {
        return Err(NeuralError::InvalidConfig(format!(
            "Grad-CAM layer has no square spatial extent: {s:?}"
        )));
    }
    let (channels, h) = (s[1], s[2]);
    let k = model.meta.classes;
    let mut seed = vec![0.0; k];
    seed[target] = 1.0;
    let grad = model
        .graph
        .backward_seeded(model.meta.logits, Tensor::new(vec![1, k], seed)?, &[block])?
        .remove(0);
    let area = h * h;
    let weights: Vec<f64> = (0..channels)
        .map(|c| grad.data()[c * area..(c + 1) * area].iter().sum::<f64>() / area as f64)
        .collect();
    let mut coarse = vec![0.0; area];
    for (c, &w) in weights.iter().enumerate() {
        for (o, &a) in coarse.iter_mut().zip(&act.data()[c * area..(c + 1) * area]) {
            *o += w * a;
        }
    }
    for v in coarse.iter_mut() {
        *v = v.max(0.0);
    }
    let mut heatmap = bilinear_upsample(&coarse, h, side);
    let max = heatmap.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for v in heatmap.iter_mut() {
            *v = (*v / max).clamp(0.0, 1.0);
        }
    }
    Ok(GradCam {
        heatmap,
        side,
        coarse,
        coarse_side: h,
        channel_weights: weights,
    })
}

fn jet(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |x: f64| ((1.5 - (4.0 * v - x).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

fn colour_map(cam: &GradCam) -> RgbImage {
    let s = cam.side as u32;
    RgbImage::from_fn(s, s, |x, y| Rgb(jet(cam.heatmap[(y * s + x) as usize])))
}

pub fn heatmap_png(cam: &GradCam) -> Result<Vec<u8>, NeuralError> {
    encode_png(&colour_map(cam)).map_err(|e| NeuralError::Image(e.to_string()))
}

/// Colour-mapped heatmap blended over the patch with weight `alpha`.
pub fn overlay_png(patch: &RgbImage, cam: &GradCam, alpha: f64) -> Result<Vec<u8>, NeuralError> {
    if patch.dimensions() != (cam.side as u32, cam.side as u32) {
        return Err(NeuralError::InvalidData("patch and heatmap sizes differ".into()));
    }
    let heat = colour_map(cam);
    let out = RgbImage::from_fn(patch.width(), patch.height(), |x, y| {
        let (p, h) = (patch.get_pixel(x, y).0, heat.get_pixel(x, y).0);
        let mix = |i: usize| ((1.0 - alpha) * p[i] as f64 + alpha * h[i] as f64).round().clamp(0.0, 255.0) as u8;
        Rgb([mix(0), mix(1), mix(2)])
    });
    encode_png(&out).map_err(|e| NeuralError::Image(e.to_string()))
}
