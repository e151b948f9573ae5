//! Deterministic in-process backend.
//!
//! Images are a pure function of `(prompt, seed, index, width, height)` and
//! carry their prompt in a PNG `tEXt` chunk keyed [`MOCK_PROMPT_KEY`].
//! Prompts that instantiate a foreground template render one saturated
//! convex shape on an off-white field; all other prompts render smooth
//! colour gradients. Scores are token Jaccard similarities against the
//! embedded prompt and captions are fixed rephrasings of it.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use image::{Rgba, RgbaImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Backend, GenerationRequest, PngBytes};
use crate::mask::BinaryMask;
use crate::prompting::TemplateSet;
use crate::rng::derive_seed;
use crate::{imageio, Result};

pub const MOCK_PROMPT_KEY: &str = "mockprompt";

/// Words ignored by the mock similarity: function words and the template
/// filler around the object or context.
const STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "in", "on", "at", "with", "and", "or", "to", "for", "by", "is", "are",
    "photo", "real", "realistic", "picture", "image", "color", "colored", "colour", "pure",
    "white", "background", "isolated",
];

const CAPTION_FORMS: [&str; 4] = ["", "a photo of ", "an image of ", "a picture of "];

/// Content tokens of `text` as seen by the mock scorer.
pub fn mock_tokens(text: &str) -> BTreeSet<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty() && !STOPWORDS.contains(t))
        .map(String::from)
        .collect()
}

/// `|A ∩ B| / |A ∪ B|`, zero when both sets are empty.
pub fn jaccard_similarity(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// The `i`-th mock caption for an image generated from `prompt`.
pub fn mock_caption(prompt: Option<&str>, i: u32) -> String {
    let content = prompt
        .map(|p| p.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase())
        .filter(|p| !p.is_empty())
        .unwrap_or_else(|| "an empty scene".to_string());
    let form = CAPTION_FORMS[i as usize % CAPTION_FORMS.len()];
    let round = i as usize / CAPTION_FORMS.len();
    if round == 0 {
        format!("{form}{content}")
    } else {
        format!("{form}{content}, and view {}", round + 1)
    }
}

/// The object drawn into a mock foreground image, in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MockShape {
    Ellipse {
        cx: f64,
        cy: f64,
        a: f64,
        b: f64,
        angle: f64,
    },
    /// Convex polygon, vertices in angular order.
    Polygon { vertices: Vec<(f64, f64)> },
}

impl MockShape {
    pub fn contains(&self, px: f64, py: f64) -> bool {
        match self {
            MockShape::Ellipse { cx, cy, a, b, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (px - cx, py - cy);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            MockShape::Polygon { vertices } => {
                let n = vertices.len();
                let mut sign = 0.0f64;
                for i in 0..n {
                    let (x0, y0) = vertices[i];
                    let (x1, y1) = vertices[(i + 1) % n];
                    let cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
                    if cross != 0.0 {
                        if sign == 0.0 {
                            sign = cross.signum();
                        } else if cross.signum() != sign {
                            return false;
                        }
                    }
                }
                true
            }
        }
    }

    /// Pixels whose centres fall inside the shape.
    pub fn rasterize(&self, width: u32, height: u32) -> BinaryMask {
        BinaryMask::from_fn(width, height, |x, y| {
            self.contains(x as f64 + 0.5, y as f64 + 0.5)
        })
    }
}

/// Deterministic backend with no model behind it.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    templates: TemplateSet,
    labels: Vec<String>,
}

impl MockBackend {
    pub fn new(templates: TemplateSet) -> Self {
        MockBackend {
            templates,
            labels: Vec::new(),
        }
    }

    /// Restrict foreground rendering to prompts whose template slot holds
    /// one of `labels`. With no labels any foreground-template match counts.
    pub fn with_labels<S: AsRef<str>>(mut self, labels: &[S]) -> Self {
        self.labels = labels.iter().map(|l| l.as_ref().to_lowercase()).collect();
        self
    }

    pub fn is_foreground_prompt(&self, prompt: &str) -> bool {
        match self.templates.match_foreground(prompt) {
            Some((_, slot)) => self.labels.is_empty() || self.labels.contains(&slot),
            None => false,
        }
    }

    fn image_rng(prompt: &str, seed: u64, index: u32, width: u32, height: u32) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(
            seed,
            &[&"mock-image", &prompt, &index, &width, &height],
        ))
    }

    /// Shape drawn for this request, or `None` for background-style prompts.
    pub fn foreground_shape(
        &self,
        prompt: &str,
        seed: u64,
        index: u32,
        width: u32,
        height: u32,
    ) -> Option<MockShape> {
        if !self.is_foreground_prompt(prompt) {
            return None;
        }
        let mut rng = Self::image_rng(prompt, seed, index, width, height);
        Some(draw_shape(&mut rng, width, height))
    }

    /// Render one image without encoding it.
    pub fn render(&self, prompt: &str, seed: u64, index: u32, width: u32, height: u32) -> RgbaImage {
        let mut rng = Self::image_rng(prompt, seed, index, width, height);
        if self.is_foreground_prompt(prompt) {
            let shape = draw_shape(&mut rng, width, height);
            render_foreground(&mut rng, &shape, width, height)
        } else {
            render_background(&mut rng, width, height)
        }
    }

    pub fn render_png(&self, prompt: &str, seed: u64, index: u32, width: u32, height: u32) -> Result<PngBytes> {
        let image = self.render(prompt, seed, index, width, height);
        Ok(PngBytes(imageio::encode_rgba(&image, &[(MOCK_PROMPT_KEY, prompt)])?))
    }
}

fn embedded_prompt(image: &PngBytes) -> Result<Option<String>> {
    let decoded = image.decode().map_err(|e| crate::Error::BadResponse(e.to_string()))?;
    Ok(decoded.text_value(MOCK_PROMPT_KEY).map(String::from))
}

impl Backend for MockBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<PngBytes>> {
        req.validate()?;
        (0..req.n)
            .map(|i| self.render_png(&req.prompt, req.seed, i, req.width, req.height))
            .collect()
    }

    fn score(&self, image: &PngBytes, texts: &[String]) -> Result<Vec<f64>> {
        let prompt = embedded_prompt(image)?.unwrap_or_default();
        let reference = mock_tokens(&prompt);
        Ok(texts
            .iter()
            .map(|t| jaccard_similarity(&reference, &mock_tokens(t)))
            .collect())
    }

    fn caption(&self, image: &PngBytes, n: u32) -> Result<Vec<String>> {
        let prompt = embedded_prompt(image)?;
        Ok((0..n).map(|i| mock_caption(prompt.as_deref(), i)).collect())
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

fn draw_shape(rng: &mut ChaCha8Rng, width: u32, height: u32) -> MockShape {
    let side = width.min(height) as f64;
    let cx = width as f64 * (0.5 + rng.random_range(-0.08..0.08));
    let cy = height as f64 * (0.5 + rng.random_range(-0.08..0.08));
    if rng.random_bool(0.5) {
        MockShape::Ellipse {
            cx,
            cy,
            a: side * rng.random_range(0.14..0.30),
            b: side * rng.random_range(0.14..0.30),
            angle: rng.random_range(0.0..PI),
        }
    } else {
        let n = rng.random_range(5..=8);
        let a = side * rng.random_range(0.18..0.30);
        let b = side * rng.random_range(0.18..0.30);
        let tilt = rng.random_range(0.0..PI);
        let step = 2.0 * PI / n as f64;
        let (ts, tc) = tilt.sin_cos();
        // points on an ellipse in angular order are in convex position
        let vertices = (0..n)
            .map(|k| {
                let t = k as f64 * step + rng.random_range(-0.3..0.3) * step;
                let (u, v) = (a * t.cos(), b * t.sin());
                (cx + u * tc - v * ts, cy + u * ts + v * tc)
            })
            .collect();
        MockShape::Polygon { vertices }
    }
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn render_foreground(rng: &mut ChaCha8Rng, shape: &MockShape, width: u32, height: u32) -> RgbaImage {
    let base: f64 = rng.random_range(238.0..248.0);
    let field = [
        base + rng.random_range(-3.0..3.0),
        base + rng.random_range(-3.0..3.0),
        base + rng.random_range(-3.0..3.0),
    ];
    let color = hsv_to_rgb(
        rng.random_range(0.0..360.0),
        rng.random_range(0.85..1.0),
        rng.random_range(0.55..0.9),
    );
    let shade_dir = rng.random_range(0.0..2.0 * PI);
    let (sx, sy) = (shade_dir.cos(), shade_dir.sin());
    let (w, h) = (width as f64, height as f64);
    let mut img = RgbaImage::new(width, height);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let noise: [f64; 3] = [
            rng.random_range(-2.0..=2.0),
            rng.random_range(-2.0..=2.0),
            rng.random_range(-2.0..=2.0),
        ];
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let rgb = if shape.contains(fx, fy) {
            let shade = 10.0 * ((fx / w - 0.5) * sx + (fy / h - 0.5) * sy);
            [color[0] + shade, color[1] + shade, color[2] + shade]
        } else {
            field
        };
        *px = Rgba([
            clamp_u8(rgb[0] + noise[0]),
            clamp_u8(rgb[1] + noise[1]),
            clamp_u8(rgb[2] + noise[2]),
            255,
        ]);
    }
    img
}

fn render_background(rng: &mut ChaCha8Rng, width: u32, height: u32) -> RgbaImage {
    let corner = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        [
            rng.random_range(40.0..220.0),
            rng.random_range(40.0..220.0),
            rng.random_range(40.0..220.0),
        ]
    };
    let corners = [corner(rng), corner(rng), corner(rng), corner(rng)];
    let freq = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
    let phase = rng.random_range(0.0..2.0 * PI);
    let amp = rng.random_range(5.0..15.0);
    let mut img = RgbaImage::new(width, height);
    let (w, h) = (width.max(2) as f64 - 1.0, height.max(2) as f64 - 1.0);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (u, v) = (x as f64 / w, y as f64 / h);
        let wave = amp * (2.0 * PI * (freq.0 * u + freq.1 * v) + phase).sin();
        let mut out = [0u8; 4];
        for c in 0..3 {
            let top = corners[0][c] * (1.0 - u) + corners[1][c] * u;
            let bottom = corners[2][c] * (1.0 - u) + corners[3][c] * u;
            let value = top * (1.0 - v) + bottom * v + wave + rng.random_range(-3.0..=3.0);
            out[c] = clamp_u8(value);
        }
        out[3] = 255;
        *px = Rgba(out);
    }
    img
}
