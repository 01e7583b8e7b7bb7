//! Class-name visual prompts: text rendered into a pixel block, and
//! class-conditional images made by pasting that block into a picture.

mod export;
mod font;

pub use export::{encode_png, encode_ppm, quantize, write_image};
pub use font::{Font, Glyph, GLYPH_HEIGHT, GLYPH_SPACING, GLYPH_WIDTH};

use crate::error::{Error, Result};
use crate::image::{Image, Rgb};
use crate::rng;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const DEFAULT_MIN_CONTRAST: f64 = 0.3;

/// Prompt edge length over image edge length.
pub const DEFAULT_PROMPT_RATIO: f64 = 1.0 / 7.0;

pub fn default_prompt_size(image_size: usize) -> usize {
    prompt_size(image_size, DEFAULT_PROMPT_RATIO)
}

pub fn prompt_size(image_size: usize, ratio: f64) -> usize {
    (image_size as f64 * ratio).round() as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualPrompt {
    pub pixels: Image,
    pub class_id: Option<usize>,
    pub fg_color: Rgb,
    pub bg_color: Rgb,
    pub seed: u64,
    /// Characters actually drawn after truncation.
    pub shown: String,
}

impl VisualPrompt {
    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn for_class(mut self, class_id: usize) -> Self {
        self.class_id = Some(class_id);
        self
    }
}

/// Where the rendered text sits inside the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextLayout {
    pub scale: usize,
    pub chars: usize,
    pub origin: (usize, usize),
}

/// Largest integer scale at which the whole string fits; otherwise scale 1
/// and as many leading characters as fit.
pub fn layout_text(n_chars: usize, h: usize, w: usize) -> TextLayout {
    let width_at = |n: usize, s: usize| n * GLYPH_WIDTH * s + n.saturating_sub(1) * GLYPH_SPACING * s;
    let mut scale = 0;
    let mut s = 1;
    while GLYPH_HEIGHT * s <= h && width_at(n_chars, s) <= w {
        scale = s;
        s += 1;
    }
    let (scale, chars) = if scale == 0 {
        (1, ((w + GLYPH_SPACING) / (GLYPH_WIDTH + GLYPH_SPACING)).min(n_chars))
    } else {
        (scale, n_chars)
    };
    let origin = ((h - GLYPH_HEIGHT * scale) / 2, (w - width_at(chars, scale)) / 2);
    TextLayout {
        scale,
        chars,
        origin,
    }
}

/// Draws foreground/background colours with channel-wise max distance of at
/// least `min_contrast`.
pub fn sample_colors(rng: &mut rng::Rng, min_contrast: f64) -> (Rgb, Rgb) {
    loop {
        let fg: Rgb = [rng.random(), rng.random(), rng.random()];
        let bg: Rgb = [rng.random(), rng.random(), rng.random()];
        let dist = fg.iter().zip(&bg).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if dist >= min_contrast {
            return (fg, bg);
        }
    }
}

/// Renders `class_name` into an h×w block with colours drawn from `seed`.
pub fn render_prompt(class_name: &str, h: usize, w: usize, seed: u64) -> Result<VisualPrompt> {
    render_prompt_with(class_name, h, w, seed, DEFAULT_MIN_CONTRAST)
}

pub fn render_prompt_with(
    class_name: &str,
    h: usize,
    w: usize,
    seed: u64,
    min_contrast: f64,
) -> Result<VisualPrompt> {
    if h < GLYPH_HEIGHT || w < GLYPH_WIDTH {
        return Err(Error::config(
            "prompt_size",
            format!("{h}×{w} block is smaller than one {GLYPH_HEIGHT}×{GLYPH_WIDTH} glyph"),
        ));
    }
    if class_name.is_empty() {
        return Err(Error::config("class_name", "empty class name"));
    }
    if !(0.0..1.0).contains(&min_contrast) {
        return Err(Error::config("min_contrast", format!("{min_contrast} outside [0, 1)")));
    }
    let (fg, bg) = sample_colors(&mut rng::rng(seed), min_contrast);
    Ok(render_with_colors(class_name, h, w, fg, bg, seed))
}

pub(crate) fn render_with_colors(class_name: &str, h: usize, w: usize, fg: Rgb, bg: Rgb, seed: u64) -> VisualPrompt {
    let chars: Vec<char> = class_name.chars().collect();
    let layout = layout_text(chars.len(), h, w);
    let font = Font::builtin();
    let mut pixels = Image::filled(h, w, bg);
    let step = (GLYPH_WIDTH + GLYPH_SPACING) * layout.scale;
    for (i, &ch) in chars.iter().take(layout.chars).enumerate() {
        let glyph = font.glyph(ch);
        let col0 = layout.origin.1 + i * step;
        for (gr, row) in glyph.iter().enumerate() {
            for (gc, &on) in row.iter().enumerate() {
                if !on {
                    continue;
                }
                for dr in 0..layout.scale {
                    for dc in 0..layout.scale {
                        pixels.set_pixel(
                            layout.origin.0 + gr * layout.scale + dr,
                            col0 + gc * layout.scale + dc,
                            fg,
                        );
                    }
                }
            }
        }
    }
    VisualPrompt {
        pixels,
        class_id: None,
        fg_color: fg,
        bg_color: bg,
        seed,
        shown: chars[..layout.chars].iter().collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    Top,
    Bottom,
    #[default]
    Rand,
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Placement::Top => "top",
            Placement::Bottom => "bottom",
            Placement::Rand => "rand",
        })
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(Placement::Top),
            "bottom" => Ok(Placement::Bottom),
            "rand" => Ok(Placement::Rand),
            other => Err(Error::config("placement", format!("unknown placement `{other}`"))),
        }
    }
}

/// Top-left corner of an h×w block inside an H×W image.
pub fn placement_origin(
    image_hw: (usize, usize),
    block_hw: (usize, usize),
    placement: Placement,
    seed: u64,
) -> Result<(usize, usize)> {
    let (ih, iw) = image_hw;
    let (bh, bw) = block_hw;
    if bh > ih || bw > iw {
        return Err(Error::config(
            "prompt_size",
            format!("{bh}×{bw} prompt is larger than the {ih}×{iw} image"),
        ));
    }
    let centered = (iw - bw) / 2;
    Ok(match placement {
        Placement::Top => (0, centered),
        Placement::Bottom => (ih - bh, centered),
        Placement::Rand => {
            let mut r = rng::rng(seed);
            (r.random_range(0..=ih - bh), r.random_range(0..=iw - bw))
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassConditionalImage {
    pub pixels: Image,
    pub source_class: Option<usize>,
    pub block_origin: (usize, usize),
}

/// Replaces one prompt-sized block of `image` with the prompt.
pub fn apply_prompt(
    image: &Image,
    prompt: &VisualPrompt,
    placement: Placement,
    seed: u64,
) -> Result<ClassConditionalImage> {
    let origin = placement_origin(
        (image.height(), image.width()),
        (prompt.height(), prompt.width()),
        placement,
        seed,
    )?;
    let mut pixels = image.clone();
    pixels.paste(&prompt.pixels, origin)?;
    Ok(ClassConditionalImage {
        pixels,
        source_class: prompt.class_id,
        block_origin: origin,
    })
}
