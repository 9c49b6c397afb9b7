use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AnnotationRecord, AnnotationSet, ClassLabel, PatchError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSlideSpec {
    /// Nuclei per class, indexed by [`ClassLabel::index`].
    pub counts: [usize; 3],
    /// 0 keeps the class morphologies apart, 1 makes them identical.
    pub difficulty: f64,
    pub seed: u64,
    pub image_size: u32,
    /// Each nucleus sits near the centre of its own cell of this size.
    pub cell: u32,
}

impl Default for SynthSlideSpec {
    fn default() -> Self {
        SynthSlideSpec {
            counts: [40, 40, 40],
            difficulty: 0.0,
            seed: 0,
            image_size: 512,
            cell: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSlide {
    pub image: RgbImage,
    pub annotations: AnnotationSet,
}

#[derive(Clone, Copy)]
struct Morphology {
    radius: f64,
    /// Distance of each of the two lobes from the centre.
    separation: f64,
    color: [f64; 3],
}

const MORPHOLOGY: [Morphology; 3] = [
    // tumour: large dark disk
    Morphology {
        radius: 11.0,
        separation: 0.0,
        color: [75.0, 35.0, 110.0],
    },
    // non-tumour: small pale disk
    Morphology {
        radius: 6.0,
        separation: 0.0,
        color: [175.0, 135.0, 195.0],
    },
    // mitosis: dark bipolar figure
    Morphology {
        radius: 4.5,
        separation: 6.0,
        color: [35.0, 15.0, 60.0],
    },
];

const BACKGROUND: [f64; 3] = [232.0, 196.0, 214.0];

fn blended(class: ClassLabel, difficulty: f64) -> Morphology {
    let m = MORPHOLOGY[class.index()];
    let mix = |f: fn(&Morphology) -> f64| {
        let centroid = MORPHOLOGY.iter().map(f).sum::<f64>() / 3.0;
        (1.0 - difficulty) * f(&m) + difficulty * centroid
    };
    Morphology {
        radius: mix(|m| m.radius),
        separation: mix(|m| m.separation),
        color: [mix(|m| m.color[0]), mix(|m| m.color[1]), mix(|m| m.color[2])],
    }
}

impl SynthSlideSpec {
    pub fn validate(&self) -> Result<(), PatchError> {
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(PatchError::InvalidConfig(format!("difficulty {} outside [0, 1]", self.difficulty)));
        }
        if self.cell == 0 || self.image_size < self.cell {
            return Err(PatchError::InvalidConfig("cell must fit inside the image".into()));
        }
        Ok(())
    }

    pub fn cells_per_slide(&self) -> usize {
        let k = (self.image_size / self.cell) as usize;
        k * k
    }
}

/// Renders textured slides with one parametric nucleus per annotated point.
/// Always yields at least one slide.
pub fn synth_slides(spec: &SynthSlideSpec) -> Result<Vec<SyntheticSlide>, PatchError> {
    spec.validate()?;
    let mut labels: Vec<ClassLabel> = ClassLabel::ALL
        .iter()
        .flat_map(|&c| std::iter::repeat_n(c, spec.counts[c.index()]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    labels.shuffle(&mut rng);
    let per = spec.cells_per_slide();
    let slides = labels.len().div_ceil(per).max(1);
    let side = spec.image_size / spec.cell;
    let mut out = Vec::with_capacity(slides);
    for s in 0..slides {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(s as u64 + 1);
        let chunk = &labels[(s * per).min(labels.len())..((s + 1) * per).min(labels.len())];
        let mut cells: Vec<u32> = (0..side * side).collect();
        cells.shuffle(&mut rng);
        let id = format!("slide_{s:04}");
        let mut image = background(spec.image_size, &mut rng);
        let mut ann = AnnotationSet::new(&id, spec.image_size, spec.image_size);
        let n = spec.image_size - 1;
        for (&class, &cell) in chunk.iter().zip(&cells) {
            let jitter = spec.cell as f64 / 16.0;
            let cx = ((cell % side) * spec.cell) as f64 + spec.cell as f64 / 2.0 + rng.random_range(-jitter..=jitter);
            let cy = ((cell / side) * spec.cell) as f64 + spec.cell as f64 / 2.0 + rng.random_range(-jitter..=jitter);
            let (px, py) = (cx.round().min(n as f64) as u32, cy.round().min(n as f64) as u32);
            draw_nucleus(&mut image, px as f64, py as f64, blended(class, spec.difficulty), &mut rng);
            ann.records.push(AnnotationRecord {
                class,
                x: px as f64 / n as f64,
                y: py as f64 / n as f64,
            });
        }
        out.push(SyntheticSlide { image, annotations: ann });
    }
    Ok(out)
}

fn background(size: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let phase: [f64; 4] = [0; 4].map(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let noise: Vec<f64> = (0..size * size * 3).map(|_| rng.random_range(-10.0..10.0)).collect();
    RgbImage::from_fn(size, size, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let wave = 6.0 * ((xf / 37.0 + phase[0]).sin() * (yf / 53.0 + phase[1]).cos())
            + 4.0 * ((xf + yf) / 29.0 + phase[2]).sin() * (xf / 71.0 + phase[3]).cos();
        let base = ((y * size + x) * 3) as usize;
        image::Rgb([0, 1, 2].map(|c| (BACKGROUND[c] + wave + noise[base + c]).round().clamp(0.0, 255.0) as u8))
    })
}

fn draw_nucleus(image: &mut RgbImage, cx: f64, cy: f64, m: Morphology, rng: &mut ChaCha8Rng) {
    let jitter = Normal::new(0.0, 8.0).unwrap();
    let radius = m.radius * rng.random_range(0.85..1.15);
    let color = m.color.map(|c| c + jitter.sample(rng));
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let (dx, dy) = (m.separation * theta.cos(), m.separation * theta.sin());
    let lobes = [(cx + dx, cy + dy), (cx - dx, cy - dy)];
    let reach = (m.separation + radius + 2.0).ceil() as i64;
    let (w, h) = (image.width() as i64, image.height() as i64);
    for y in (cy as i64 - reach).max(0)..(cy as i64 + reach + 1).min(h) {
        for x in (cx as i64 - reach).max(0)..(cx as i64 + reach + 1).min(w) {
            let d = lobes
                .iter()
                .map(|&(lx, ly)| ((x as f64 - lx).powi(2) + (y as f64 - ly).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            let alpha = (radius + 0.5 - d).clamp(0.0, 1.0);
            if alpha == 0.0 {
                continue;
            }
            let grain = rng.random_range(-6.0..6.0);
            let px = image.get_pixel_mut(x as u32, y as u32);
            for c in 0..3 {
                let v = alpha * (color[c] + grain) + (1.0 - alpha) * px.0[c] as f64;
                px.0[c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_counts_give_one_blank_slide() {
        let slides = synth_slides(&SynthSlideSpec {
            counts: [0, 0, 0],
            ..SynthSlideSpec::default()
        })
        .unwrap();
        assert_eq!(slides.len(), 1);
        assert!(slides[0].annotations.records.is_empty());
    }

    #[test]
    fn counts_are_honoured_across_slides() {
        let spec = SynthSlideSpec {
            counts: [70, 20, 5],
            ..SynthSlideSpec::default()
        };
        let slides = synth_slides(&spec).unwrap();
        assert_eq!(slides.len(), 2);
        let mut total = [0; 3];
        for s in &slides {
            for (t, c) in total.iter_mut().zip(s.annotations.class_counts()) {
                *t += c;
            }
        }
        assert_eq!(total, [70, 20, 5]);
    }

    #[test]
    fn full_difficulty_collapses_morphology() {
        let a = blended(ClassLabel::Tumour, 1.0);
        let b = blended(ClassLabel::Mitosis, 1.0);
        assert!((a.radius - b.radius).abs() < 1e-12 && (a.separation - b.separation).abs() < 1e-12);
    }
}
