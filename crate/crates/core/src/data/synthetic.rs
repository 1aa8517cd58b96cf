//! Procedurally drawn images with four visually separable binary concepts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::images::{quantize, ImageGeometry};
use crate::data::{Dataset, DatasetRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BRIGHT_BACKGROUND: &str = "bright-background";
pub const CENTERED_CIRCLE: &str = "centered-circle";
pub const HORIZONTAL_STRIPES: &str = "horizontal-stripes";
pub const BORDER_FRAME: &str = "border-frame";

pub const NOISE: f32 = 0.03;

const RED: [f32; 3] = [0.9, 0.1, 0.1];
const BLUE: [f32; 3] = [0.1, 0.1, 0.9];
const GREEN: [f32; 3] = [0.1, 0.8, 0.1];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Rule {
    Bright,
    Circle,
    Stripes,
    Frame,
}

impl Rule {
    fn of(name: &str) -> Option<Self> {
        match name {
            BRIGHT_BACKGROUND => Some(Rule::Bright),
            CENTERED_CIRCLE => Some(Rule::Circle),
            HORIZONTAL_STRIPES => Some(Rule::Stripes),
            BORDER_FRAME => Some(Rule::Frame),
            _ => None,
        }
    }
}

/// Concept names with a per-concept probability of being present.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub names: Vec<String>,
    pub probabilities: Vec<f64>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            names: [BRIGHT_BACKGROUND, CENTERED_CIRCLE, HORIZONTAL_STRIPES, BORDER_FRAME]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            probabilities: vec![0.5, 0.5, 0.2, 0.05],
        }
    }
}

impl SyntheticSpec {
    fn rules(&self) -> Result<Vec<Rule>> {
        if self.names.is_empty() || self.names.len() != self.probabilities.len() {
            return Err(Error::Config("need one probability per synthetic concept".into()));
        }
        if let Some(p) = self.probabilities.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Config(format!("concept probability {p} outside [0, 1]")));
        }
        let mut rules = Vec::new();
        for name in &self.names {
            let rule = Rule::of(name).ok_or_else(|| Error::Config(format!("no rendering rule for concept {name}")))?;
            if rules.contains(&rule) {
                return Err(Error::Config(format!("concept {name} listed twice")));
            }
            rules.push(rule);
        }
        Ok(rules)
    }
}

/// Pixel coordinates that only the background ever covers.
pub const BACKGROUND_PROBES: [(usize, usize); 4] = [(2, 2), (3, 3), (2, 3), (3, 2)];

pub fn gen_synthetic(n: usize, spec: &SyntheticSpec, geometry: ImageGeometry, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    geometry.validate()?;
    if geometry.height < 8 || geometry.width < 8 {
        return Err(Error::Config("synthetic images need at least 8x8 pixels".into()));
    }
    let rules = spec.rules()?;
    let records = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let attributes: Vec<bool> = spec.probabilities.iter().map(|&p| rng.random_bool(p)).collect();
            let image = render(&rules, &attributes, geometry, &mut rng);
            DatasetRecord { image, attributes }
        })
        .collect();
    Ok(Dataset {
        concepts: spec.names.clone(),
        records,
        skipped: 0,
    })
}

fn render(rules: &[Rule], attrs: &[bool], g: ImageGeometry, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let on = |r: Rule| rules.iter().zip(attrs).any(|(&x, &a)| x == r && a);
    let (h, w) = (g.height, g.width);
    let side = h.min(w) as f32;
    let gray = if on(Rule::Bright) { 0.75 } else { 0.25 };
    let (cy, cx) = (
        h as f32 / 2.0 + rng.random_range(-1.0..=1.0),
        w as f32 / 2.0 + rng.random_range(-1.0..=1.0),
    );
    let radius = side / 4.0 + rng.random_range(-0.5..=0.5);
    let frame = (side / 12.0).round().max(1.0) as usize;
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let mut px = [gray; 3];
            if on(Rule::Stripes) && y % 4 < 2 && y >= 4 && y < h - 4 {
                px = BLUE;
            }
            let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
            if on(Rule::Circle) && dy * dy + dx * dx <= radius * radius {
                px = RED;
            }
            if on(Rule::Frame) && (y < frame || x < frame || y >= h - frame || x >= w - frame) {
                px = GREEN;
            }
            for v in px {
                data.push(quantize(v + rng.random_range(-NOISE..=NOISE)));
            }
        }
    }
    let rgb = Tensor::new([h, w, 3], data).expect("rendered buffer");
    if g.channels == 3 {
        rgb
    } else {
        let gray: Vec<f32> = rgb
            .data()
            .chunks(3)
            .map(|p| quantize(p.iter().sum::<f32>() / 3.0))
            .collect();
        Tensor::new([h, w, 1], gray).expect("rendered buffer")
    }
}
