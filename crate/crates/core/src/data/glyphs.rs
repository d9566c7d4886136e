use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::IdxImages;
use crate::error::{Error, Result};

/// Procedural stroke glyphs: every class is a fixed set of 3-5 line strokes,
/// every sample a randomly rotated, scaled, sheared and shifted rendering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlyphConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
}

impl Default for GlyphConfig {
    fn default() -> Self {
        GlyphConfig {
            seed: 0,
            num_classes: 64,
            samples_per_class: 20,
            image_size: 28,
        }
    }
}

type Stroke = [(f64, f64); 2];

/// Renders the glyph set as IDX images plus `u8` labels, samples interleaved
/// class by class.
pub fn generate_glyphs(cfg: &GlyphConfig) -> Result<(IdxImages, Vec<u8>)> {
    if cfg.num_classes == 0 || cfg.num_classes > 256 {
        return Err(Error::config("synthetic.num_classes", "must be in 1..=256"));
    }
    if cfg.samples_per_class == 0 {
        return Err(Error::config(
            "synthetic.samples_per_class",
            "must be positive",
        ));
    }
    if cfg.image_size < 4 {
        return Err(Error::config("synthetic.image_size", "must be at least 4"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let classes: Vec<Vec<Stroke>> = (0..cfg.num_classes)
        .map(|_| {
            let count = rng.gen_range(3..=5);
            (0..count)
                .map(|_| {
                    let mut p = || (rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7));
                    [p(), p()]
                })
                .collect()
        })
        .collect();

    let size = cfg.image_size;
    let count = cfg.num_classes * cfg.samples_per_class;
    let mut pixels = Vec::with_capacity(count * size * size);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..cfg.samples_per_class {
        for (label, strokes) in classes.iter().enumerate() {
            let jittered: Vec<Stroke> = strokes
                .iter()
                .map(|s| {
                    s.map(|(x, y)| {
                        (
                            x + rng.gen_range(-0.04..0.04),
                            y + rng.gen_range(-0.04..0.04),
                        )
                    })
                })
                .collect();
            let transform = Affine::random(&mut rng);
            let placed: Vec<Stroke> = jittered
                .iter()
                .map(|s| s.map(|p| transform.apply(p)))
                .collect();
            render(&placed, size, &mut pixels);
            labels.push(label as u8);
        }
    }
    Ok((
        IdxImages {
            count,
            rows: size,
            cols: size,
            pixels,
        },
        labels,
    ))
}

struct Affine {
    m: [[f64; 2]; 2],
    t: (f64, f64),
}

impl Affine {
    fn random<R: Rng>(rng: &mut R) -> Self {
        let angle: f64 = rng.gen_range(-0.3..0.3);
        let (sx, sy) = (rng.gen_range(0.85..1.15), rng.gen_range(0.85..1.15));
        let shear = rng.gen_range(-0.15..0.15);
        let t = (rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
        let (c, s) = (angle.cos(), angle.sin());
        // rotation · shear · scale
        let a = [[sx, shear * sy], [0.0, sy]];
        let m = [
            [c * a[0][0] - s * a[1][0], c * a[0][1] - s * a[1][1]],
            [s * a[0][0] + c * a[1][0], s * a[0][1] + c * a[1][1]],
        ];
        Affine { m, t }
    }

    fn apply(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.t.0,
            self.m[1][0] * x + self.m[1][1] * y + self.t.1,
        )
    }
}

fn segment_distance(p: (f64, f64), [a, b]: Stroke) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Strokes live in `[-1, 1]²`; edges fade over one pixel.
fn render(strokes: &[Stroke], size: usize, out: &mut Vec<u8>) {
    let pixel = 2.0 / size as f64;
    let half_width = 0.09;
    for row in 0..size {
        for col in 0..size {
            let p = (
                -1.0 + (col as f64 + 0.5) * pixel,
                -1.0 + (row as f64 + 0.5) * pixel,
            );
            let d = strokes
                .iter()
                .map(|&s| segment_distance(p, s))
                .fold(f64::INFINITY, f64::min);
            let v = (0.5 + (half_width - d) / pixel).clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
}
