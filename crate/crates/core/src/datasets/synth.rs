//! Procedural shapes rendered in domain-specific styles.
//!
//! Class identity is the shape; domains differ in palette, background
//! texture frequency, and whether shapes are filled or stroked.

use std::f32::consts::PI;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Raster;
use crate::rng;

use super::{Domain, DomainDataset, LabeledSample, SampleId};

pub const SHAPE_NAMES: [&str; 7] = ["circle", "square", "triangle", "cross", "ring", "star", "bar"];

const STYLE_NAMES: [&str; 4] = ["photo", "art", "cartoon", "sketch"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub name: String,
    pub foreground: [u8; 3],
    pub background: [u8; 3],
    /// Stripe frequency of the background texture, in cycles per image; 0 disables it.
    pub texture_frequency: f32,
    pub texture_amplitude: f32,
    /// Outline width as a fraction of the image half-size; 0 renders filled shapes.
    pub stroke_width: f32,
    /// Per-channel colour jitter amplitude (0..255 scale).
    pub color_jitter: f32,
    pub grayscale: bool,
}

impl DomainStyle {
    /// Built-in styles; index 4 and beyond interpolate palettes deterministically.
    pub fn preset(index: usize) -> Self {
        match index {
            0 => DomainStyle {
                name: STYLE_NAMES[0].into(),
                foreground: [170, 110, 60],
                background: [90, 140, 190],
                texture_frequency: 3.0,
                texture_amplitude: 0.15,
                stroke_width: 0.0,
                color_jitter: 30.0,
                grayscale: false,
            },
            1 => DomainStyle {
                name: STYLE_NAMES[1].into(),
                foreground: [230, 40, 120],
                background: [240, 200, 40],
                texture_frequency: 9.0,
                texture_amplitude: 0.35,
                stroke_width: 0.0,
                color_jitter: 50.0,
                grayscale: false,
            },
            2 => DomainStyle {
                name: STYLE_NAMES[2].into(),
                foreground: [20, 20, 20],
                background: [120, 230, 140],
                texture_frequency: 0.0,
                texture_amplitude: 0.0,
                stroke_width: 0.12,
                color_jitter: 20.0,
                grayscale: false,
            },
            3 => DomainStyle {
                name: STYLE_NAMES[3].into(),
                foreground: [30, 30, 30],
                background: [245, 245, 245],
                texture_frequency: 0.0,
                texture_amplitude: 0.0,
                stroke_width: 0.06,
                color_jitter: 10.0,
                grayscale: true,
            },
            i => {
                let t = (i as f32 * 0.618_034).fract();
                let hue = |phase: f32| ((0.5 + 0.5 * (2.0 * PI * (t + phase)).cos()) * 255.0) as u8;
                DomainStyle {
                    name: format!("domain{i}"),
                    foreground: [hue(0.0), hue(0.33), hue(0.67)],
                    background: [hue(0.5), hue(0.83), hue(0.17)],
                    texture_frequency: (i % 5) as f32 * 2.0,
                    texture_amplitude: 0.1 + 0.05 * (i % 4) as f32,
                    stroke_width: if i % 3 == 0 { 0.08 } else { 0.0 },
                    color_jitter: 25.0,
                    grayscale: i % 7 == 0,
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_domains: usize,
    pub num_classes: usize,
    pub samples_per_domain_class: usize,
    pub resolution: usize,
    pub seed: u64,
    /// One style per domain; presets are used when empty.
    #[serde(default)]
    pub styles: Vec<DomainStyle>,
}

impl SynthSpec {
    pub fn desk(num_domains: usize, num_classes: usize, per: usize, resolution: usize, seed: u64) -> Self {
        SynthSpec {
            num_domains,
            num_classes,
            samples_per_domain_class: per,
            resolution,
            seed,
            styles: Vec::new(),
        }
    }

    fn style(&self, d: usize) -> DomainStyle {
        self.styles.get(d).cloned().unwrap_or_else(|| DomainStyle::preset(d))
    }
}

/// Signed distance-like field, positive inside, in units of the image half-size.
fn shape_field(class: usize, x: f32, y: f32, size: f32) -> f32 {
    let r = (x * x + y * y).sqrt();
    match class {
        0 => size - r,
        1 => 0.85 * size - x.abs().max(y.abs()),
        2 => {
            // Equilateral triangle pointing up, inscribed radius ~ size/2.
            let k = 3f32.sqrt();
            let a = y + 0.5 * size;
            let b = (-k * x - y + size) / 2.0;
            let c = (k * x - y + size) / 2.0;
            a.min(b).min(c) * 0.9
        }
        3 => {
            let arm = 0.28 * size;
            let h = (arm - y.abs()).min(size - x.abs());
            let v = (arm - x.abs()).min(size - y.abs());
            h.max(v)
        }
        4 => (size - r).min(r - 0.55 * size),
        5 => {
            let theta = y.atan2(x);
            let radius = size * (0.55 + 0.45 * (0.5 + 0.5 * (5.0 * theta).cos()).powf(2.0));
            (radius - r) * 0.6
        }
        _ => (0.22 * size - y.abs()).min(1.1 * size - x.abs()),
    }
}

fn render(class: usize, style: &DomainStyle, res: usize, rng: &mut rng::Rng) -> Raster {
    let cx = rng.gen_range(-0.15f32..0.15);
    let cy = rng.gen_range(-0.15f32..0.15);
    let size = rng.gen_range(0.55f32..0.75);
    let angle = rng.gen_range(-0.35f32..0.35);
    let stripe_angle = rng.gen_range(0.0f32..PI);
    let jitter = |rng: &mut rng::Rng, base: [u8; 3]| -> [f32; 3] {
        let j = style.color_jitter;
        let shift = rng.gen_range(-j..=j);
        let mut c = base.map(|v| v as f32 + shift + rng.gen_range(-j * 0.3..=j * 0.3));
        if style.grayscale {
            let g = (c[0] + c[1] + c[2]) / 3.0;
            c = [g; 3];
        }
        c
    };
    let fg = jitter(rng, style.foreground);
    let bg = jitter(rng, style.background);
    let (sin, cos) = angle.sin_cos();
    let mut data = Vec::with_capacity(res * res * 3);
    for py in 0..res {
        for px in 0..res {
            let u = (px as f32 + 0.5) / res as f32 * 2.0 - 1.0 - cx;
            let v = (py as f32 + 0.5) / res as f32 * 2.0 - 1.0 - cy;
            let (x, y) = (cos * u + sin * v, -sin * u + cos * v);
            let d = shape_field(class, x, y, size);
            let on = if style.stroke_width > 0.0 {
                d.abs() < style.stroke_width
            } else {
                d > 0.0
            };
            let color = if on {
                fg
            } else {
                let phase = 2.0 * PI * style.texture_frequency * 0.5 * (u * stripe_angle.cos() + v * stripe_angle.sin());
                let m = 1.0 + style.texture_amplitude * phase.sin();
                bg.map(|c| c * m)
            };
            let noise = rng.gen_range(-6.0f32..6.0);
            for c in color {
                data.push((c + noise).clamp(0.0, 255.0).round() as u8);
            }
        }
    }
    Raster::new(res, res, 3, data).expect("exact size")
}

pub fn synthesize(spec: &SynthSpec) -> Result<DomainDataset> {
    if spec.num_domains == 0 || spec.samples_per_domain_class == 0 {
        return Err(Error::Config("synthetic spec needs domains and samples".into()));
    }
    if spec.num_classes == 0 || spec.num_classes > SHAPE_NAMES.len() {
        return Err(Error::Config(format!(
            "synthetic classes must lie in 1..={}",
            SHAPE_NAMES.len()
        )));
    }
    if spec.resolution < 6 {
        return Err(Error::Config("synthetic resolution must be at least 6".into()));
    }
    let mut domains = Vec::with_capacity(spec.num_domains);
    for d in 0..spec.num_domains {
        let style = spec.style(d);
        let mut rng = rng::rng(rng::derive_seed(spec.seed, &format!("synth/{d}")));
        let mut samples = Vec::new();
        for class in 0..spec.num_classes {
            for _ in 0..spec.samples_per_domain_class {
                let raster = render(class, &style, spec.resolution, &mut rng);
                samples.push(LabeledSample {
                    id: SampleId::new(d, samples.len()),
                    image: Arc::new(raster),
                    label: class,
                    origin: None,
                });
            }
        }
        domains.push(Domain {
            name: style.name,
            samples,
        });
    }
    let names = SHAPE_NAMES[..spec.num_classes].iter().map(|s| s.to_string()).collect();
    DomainDataset::new(domains, names, spec.resolution)
}
