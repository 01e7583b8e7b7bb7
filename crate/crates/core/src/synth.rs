//! Procedural "natural-style" scenes: a coloured shape with a nuisance
//! texture on a muted, noisy background.

use crate::image::{Image, Rgb};
use crate::rng;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

/// Built-in class catalog. Every name starts with a distinct letter, so the
/// one-glyph prompt that fits the default block still identifies the class.
pub const CLASS_NAMES: [&str; 16] = [
    "apple",
    "banana",
    "cherry",
    "date",
    "elderberry",
    "fig",
    "grape",
    "honeydew",
    "kiwi",
    "lemon",
    "mango",
    "nectarine",
    "orange",
    "papaya",
    "quince",
    "raspberry",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

const SHAPES: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];
/// Hues for red, yellow, green, blue.
const HUES: [f64; 4] = [0.0, 0.15, 0.36, 0.62];

/// Visual definition of catalog class `class_id`.
pub fn class_look(class_id: usize) -> (Shape, f64) {
    (SHAPES[class_id % 4], HUES[(class_id / 4) % 4])
}

/// Whether two catalog classes have the same shape or the same hue.
pub fn shares_cue(a: usize, b: usize) -> bool {
    let ((sa, ha), (sb, hb)) = (class_look(a), class_look(b));
    sa == sb || ha == hb
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> Rgb {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn rgb_to_hsv(rgb: Rgb) -> (f64, f64, f64) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn inside(shape: Shape, dy: f64, dx: f64, r: f64) -> bool {
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs().max(dy.abs()) <= 0.82 * r,
        Shape::Triangle => dy >= -r && dy <= 0.8 * r && dx.abs() <= 0.62 * (dy + r),
        Shape::Cross => {
            let arm = 0.34 * r;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
    }
}

/// Muted background with a linear gradient and pixel noise.
pub fn noise_background(size: usize, rng: &mut rng::Rng) -> Image {
    let noise = Normal::new(0.0, 0.05).expect("std");
    let base = hsv_to_rgb(rng.random(), rng.random_range(0.0..0.25), rng.random_range(0.25..0.8));
    let (gy, gx) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    let mut img = Image::filled(size, size, base);
    let denom = size as f64;
    for r in 0..size {
        for c in 0..size {
            let shade = gy * (r as f64 / denom - 0.5) + gx * (c as f64 / denom - 0.5);
            let px = base.map(|v| v + shade + noise.sample(rng));
            img.set_pixel(r, c, px);
        }
    }
    img.clamp_unit();
    img
}

/// One natural-style exemplar of catalog class `class_id`.
pub fn render_scene(class_id: usize, size: usize, seed: u64) -> Image {
    let mut rng = rng::rng(seed);
    let mut img = noise_background(size, &mut rng);
    let (shape, hue) = class_look(class_id);
    let s = size as f64;
    let radius = rng.random_range(0.2 * s..0.32 * s);
    let cy = s / 2.0 + rng.random_range(-0.14 * s..0.14 * s);
    let cx = s / 2.0 + rng.random_range(-0.14 * s..0.14 * s);
    let fill = hsv_to_rgb(
        hue + rng.random_range(-0.035..0.035),
        rng.random_range(0.55..1.0),
        rng.random_range(0.6..1.0),
    );
    // nuisance texture: 0 solid, 1 stripes, 2 dots
    let texture = rng.random_range(0..3u32);
    let period = rng.random_range(3..6usize);
    let noise = Normal::new(0.0, 0.04).expect("std");
    for r in 0..size {
        for c in 0..size {
            let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
            if !inside(shape, dy, dx, radius) {
                continue;
            }
            let dim = match texture {
                1 if (r / period) % 2 == 1 => 0.7,
                2 if (r % period == 0) && (c % period == 0) => 0.45,
                _ => 1.0,
            };
            let px = fill.map(|v| (v * dim + noise.sample(&mut rng)).clamp(0.0, 1.0));
            img.set_pixel(r, c, px);
        }
    }
    img
}

/// Which class cue a partial scene keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cue {
    /// Class shape in a grey fill.
    ShapeOnly,
    /// Class hue scattered as confetti, no shape.
    HueOnly,
}

/// A scene that shows only one of the two cues defining `class_id`, so it
/// is consistent with every class sharing that cue.
pub fn render_partial_scene(class_id: usize, size: usize, cue: Cue, seed: u64) -> Image {
    match cue {
        Cue::ShapeOnly => {
            let mut img = render_scene(class_id, size, seed);
            for px in img.data_mut().chunks_exact_mut(3) {
                let (_, s, v) = rgb_to_hsv([px[0], px[1], px[2]]);
                if s > 0.3 {
                    px.fill(v * 0.8);
                }
            }
            img
        }
        Cue::HueOnly => {
            let mut rng = rng::rng(seed);
            let mut img = noise_background(size, &mut rng);
            let (_, hue) = class_look(class_id);
            let piece = (size / 14).max(1);
            for _ in 0..rng.random_range(10..18) {
                let r0 = rng.random_range(0..size - piece);
                let c0 = rng.random_range(0..size - piece);
                let fill = hsv_to_rgb(
                    hue + rng.random_range(-0.035..0.035),
                    rng.random_range(0.55..1.0),
                    rng.random_range(0.6..1.0),
                );
                for r in r0..r0 + piece {
                    for c in c0..c0 + piece {
                        img.set_pixel(r, c, fill);
                    }
                }
            }
            img
        }
    }
}
