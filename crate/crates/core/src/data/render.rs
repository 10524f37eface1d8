use std::f64::consts::PI;

pub const SIDE: usize = 16;
pub const IMAGE_DIM: usize = SIDE * SIDE * 3;
pub const BACKGROUND: f32 = 0.05;
pub const CLASSES: usize = 4;

const CENTER: f64 = 7.5;
const AMPLITUDE: f64 = 4.0;
const BASE_RADIUS: f64 = 2.5;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Plus,
    Diamond,
    Circle,
    Cross,
    Triangle,
}

impl Shape {
    /// The three shapes of a domain; the pools are disjoint.
    pub fn pool(domain: usize) -> [Shape; 3] {
        match domain {
            0 => [Shape::Square, Shape::Plus, Shape::Diamond],
            _ => [Shape::Circle, Shape::Cross, Shape::Triangle],
        }
    }

    fn covers(self, dx: f64, dy: f64, r: f64) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            Shape::Square => ax.max(ay) <= 0.85 * r,
            Shape::Plus => (ax <= r && ay <= r / 3.0) || (ax <= r / 3.0 && ay <= r),
            Shape::Diamond => ax + ay <= r,
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Cross => {
                ax.max(ay) <= r && ((dx - dy).abs() <= 0.5 * r || (dx + dy).abs() <= 0.5 * r)
            }
            Shape::Triangle => {
                // Apex up, centroid at the origin; the inradius is r / 2.
                let s3 = 3f64.sqrt() / 2.0;
                dy <= r / 2.0 && -s3 * dx - 0.5 * dy <= r / 2.0 && s3 * dx - 0.5 * dy <= r / 2.0
            }
        }
    }
}

/// RGB colours of a domain; warm hues for domain 0, cool for domain 1.
pub fn palette(domain: usize) -> [[f32; 3]; 3] {
    match domain {
        0 => [[0.90, 0.15, 0.10], [0.95, 0.55, 0.10], [0.95, 0.90, 0.15]],
        _ => [[0.15, 0.80, 0.20], [0.10, 0.80, 0.90], [0.15, 0.30, 0.95]],
    }
}

/// Appearance of a sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlyphSpec {
    pub domain: usize,
    pub shape: usize,
    pub colour: usize,
}

/// Motion of a sequence: 0 horizontal oscillation, 1 vertical oscillation,
/// 2 clockwise orbit, 3 pulse.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionSpec {
    pub class: usize,
    pub phase: f64,
}

impl MotionSpec {
    /// Glyph centre `(x, y)` and radius at frame `t` of `frames`.
    pub fn placement(&self, t: usize, frames: usize) -> (f64, f64, f64) {
        let theta = 2.0 * PI * t as f64 / frames as f64 + self.phase;
        match self.class {
            0 => (CENTER + AMPLITUDE * theta.sin(), CENTER, BASE_RADIUS),
            1 => (CENTER, CENTER + AMPLITUDE * theta.sin(), BASE_RADIUS),
            // Image rows grow downwards, so increasing angle turns clockwise.
            2 => (
                CENTER + AMPLITUDE * theta.cos(),
                CENTER + AMPLITUDE * theta.sin(),
                BASE_RADIUS,
            ),
            _ => (CENTER, CENTER, 2.75 + 1.25 * theta.sin()),
        }
    }
}

/// Row-major `16 x 16 x RGB` frame with values in `[0, 1]`.
pub fn render_frame(glyph: &GlyphSpec, motion: &MotionSpec, t: usize, frames: usize) -> Vec<f32> {
    let (cx, cy, r) = motion.placement(t, frames);
    let shape = Shape::pool(glyph.domain)[glyph.shape];
    let colour = palette(glyph.domain)[glyph.colour];
    let step = 1.0 / SUPERSAMPLE as f64;
    let mut out = Vec::with_capacity(IMAGE_DIM);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 - 0.5 + (sx as f64 + 0.5) * step;
                    let py = y as f64 - 0.5 + (sy as f64 + 0.5) * step;
                    if shape.covers(px - cx, py - cy, r) {
                        hits += 1;
                    }
                }
            }
            let cov = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
            out.extend(colour.iter().map(|&c| BACKGROUND * (1.0 - cov) + c * cov));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mass_centre(frame: &[f32]) -> (f64, f64) {
        let (mut sx, mut sy, mut total) = (0.0, 0.0, 0.0);
        for (i, px) in frame.chunks_exact(3).enumerate() {
            let w = px
                .iter()
                .map(|&v| (v - BACKGROUND).abs() as f64)
                .sum::<f64>();
            sx += w * (i % SIDE) as f64;
            sy += w * (i / SIDE) as f64;
            total += w;
        }
        (sx / total, sy / total)
    }

    #[test]
    fn orbit_crosses_the_canvas() {
        let glyph = GlyphSpec {
            domain: 1,
            shape: 0,
            colour: 0,
        };
        let motion = MotionSpec {
            class: 2,
            phase: 0.0,
        };
        let a = mass_centre(&render_frame(&glyph, &motion, 0, 8));
        let b = mass_centre(&render_frame(&glyph, &motion, 4, 8));
        assert!((a.0 - b.0).abs() >= 4.0, "{a:?} {b:?}");
    }

    #[test]
    fn trajectory_ignores_domain() {
        for class in 0..CLASSES {
            let motion = MotionSpec { class, phase: 1.3 };
            for t in 0..8 {
                let a = render_frame(
                    &GlyphSpec {
                        domain: 0,
                        shape: 0,
                        colour: 0,
                    },
                    &motion,
                    t,
                    8,
                );
                let b = render_frame(
                    &GlyphSpec {
                        domain: 1,
                        shape: 0,
                        colour: 0,
                    },
                    &motion,
                    t,
                    8,
                );
                let (ca, cb) = (mass_centre(&a), mass_centre(&b));
                assert!(
                    (ca.0 - cb.0).abs() < 0.25 && (ca.1 - cb.1).abs() < 0.25,
                    "class {class} t {t}: {ca:?} {cb:?}"
                );
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn every_glyph_is_visible_at_minimum_size() {
        // Phase chosen so the pulse sits at its smallest radius.
        let motion = MotionSpec {
            class: 3,
            phase: 1.5 * PI,
        };
        for domain in 0..2 {
            for shape in 0..3 {
                let f = render_frame(
                    &GlyphSpec {
                        domain,
                        shape,
                        colour: 0,
                    },
                    &motion,
                    0,
                    8,
                );
                let lit = f
                    .chunks_exact(3)
                    .filter(|px| px.iter().any(|&v| v != BACKGROUND))
                    .count();
                assert!(lit >= 4, "domain {domain} shape {shape}: {lit}");
                assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn palettes_do_not_overlap() {
        for a in palette(0) {
            assert!(!palette(1).contains(&a));
        }
    }
}
