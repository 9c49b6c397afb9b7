use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PatchError;
use crate::autodiff::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub rotation_deg: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip_p: 0.5,
            vflip_p: 0.5,
            rotation_deg: 15.0,
            brightness: 0.1,
            contrast: 0.1,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn identity() -> Self {
        AugmentConfig {
            hflip_p: 0.0,
            vflip_p: 0.0,
            rotation_deg: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), PatchError> {
        let bad = |what: &str, v: f64| Err(PatchError::InvalidConfig(format!("{what} = {v} out of range")));
        for (what, v) in [("hflip_p", self.hflip_p), ("vflip_p", self.vflip_p)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(what, v);
            }
        }
        if !(0.0..=180.0).contains(&self.rotation_deg) {
            return bad("rotation_deg", self.rotation_deg);
        }
        for (what, v) in [("brightness", self.brightness), ("contrast", self.contrast)] {
            if !(0.0..=0.5).contains(&v) {
                return bad(what, v);
            }
        }
        Ok(())
    }

    pub fn draw(&self, rng: &mut impl Rng) -> AugmentDraw {
        let hflip = self.hflip_p > 0.0 && rng.random_bool(self.hflip_p);
        let vflip = self.vflip_p > 0.0 && rng.random_bool(self.vflip_p);
        let mut uniform = |half: f64| if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 };
        let angle_deg = uniform(self.rotation_deg);
        let brightness = 1.0 + uniform(self.brightness);
        let contrast = 1.0 + uniform(self.contrast);
        AugmentDraw {
            hflip,
            vflip,
            angle_deg,
            brightness,
            contrast,
        }
    }
}

/// One realised set of augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub vflip: bool,
    pub angle_deg: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        hflip: false,
        vflip: false,
        angle_deg: 0.0,
        brightness: 1.0,
        contrast: 1.0,
    };
}

/// Random stream for one patch, independent of processing order.
pub fn patch_rng(seed: u64, patch_id: &str, epoch: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(epoch.to_le_bytes());
    h.update(patch_id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

pub fn augment(patch: &Tensor, config: &AugmentConfig, rng: &mut impl Rng) -> Tensor {
    apply_draw(patch, &config.draw(rng))
}

/// Applies flips, nearest-neighbour rotation with edge replication, brightness
/// and contrast, in that order, to a `[C, H, W]` tensor; output clamped to
/// [0, 1]. Disabled steps leave values untouched bit for bit.
pub fn apply_draw(patch: &Tensor, d: &AugmentDraw) -> Tensor {
    let s = patch.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = patch.data();
    let mut out = src.to_vec();
    let idx = |ch: usize, r: usize, col: usize| (ch * h + r) * w + col;

    if d.hflip || d.vflip {
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let sr = if d.vflip { h - 1 - r } else { r };
                    let sc = if d.hflip { w - 1 - col } else { col };
                    out[idx(ch, r, col)] = src[idx(ch, sr, sc)];
                }
            }
        }
    }
    if d.angle_deg != 0.0 {
        let prev = out.clone();
        let (sin, cos) = d.angle_deg.to_radians().sin_cos();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        for r in 0..h {
            for col in 0..w {
                let (dy, dx) = (r as f64 - cy, col as f64 - cx);
                // inverse rotation of the output coordinate
                let sx = (cos * dx + sin * dy + cx).round().clamp(0.0, (w - 1) as f64) as usize;
                let sy = (-sin * dx + cos * dy + cy).round().clamp(0.0, (h - 1) as f64) as usize;
                for ch in 0..c {
                    out[idx(ch, r, col)] = prev[idx(ch, sy, sx)];
                }
            }
        }
    }
    if d.brightness != 1.0 {
        out.iter_mut().for_each(|v| *v *= d.brightness);
    }
    if d.contrast != 1.0 {
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        out.iter_mut().for_each(|v| *v = mean + d.contrast * (*v - mean));
    }
    if d.brightness != 1.0 || d.contrast != 1.0 {
        out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Tensor::new(s.to_vec(), out).expect("shape preserved")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            brightness: 0.6,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn quarter_turn_moves_corners() {
        let t = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let d = AugmentDraw {
            angle_deg: 90.0,
            ..AugmentDraw::IDENTITY
        };
        let r = apply_draw(&t, &d);
        let mut got = r.data().to_vec();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, vec![1.0, 2.0, 3.0, 4.0]);
        assert_ne!(r.data(), t.data());
    }

    #[test]
    fn patch_streams_differ_by_id() {
        let a: u64 = patch_rng(1, "p0", 0).random();
        let b: u64 = patch_rng(1, "p1", 0).random();
        assert_ne!(a, b);
        assert_eq!(a, patch_rng(1, "p0", 0).random::<u64>());
    }
}
