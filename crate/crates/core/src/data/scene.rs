//! Seeded generator of instrument-like scenes: gray shafts entering from the
//! frame edges with articulated tips over a reddish tissue texture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mask::Mask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of label classes: background plus three.
pub const NUM_CLASSES: usize = 4;

/// What the three foreground labels mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelMode {
    /// Whole instrument labelled by its type. The type shows as a hue on
    /// shaft and jaws only while the instrument's marker is lit.
    Type,
    /// Shaft, wrist and jaws labelled separately.
    Parts,
}

impl LabelMode {
    pub fn name(self) -> &'static str {
        match self {
            LabelMode::Type => "type",
            LabelMode::Parts => "parts",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "type" => Ok(LabelMode::Type),
            "parts" => Ok(LabelMode::Parts),
            _ => Err(Error::Config(format!("unknown label mode {s:?} (expected type or parts)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub instruments: usize,
    pub mode: LabelMode,
    /// All instruments of a video share one type.
    pub shared_type: bool,
    /// Peak tip speed in pixels per frame.
    pub motion_amplitude: f64,
    pub blur_prob: f64,
    /// Number of 5×5 box-filter passes on a blur frame.
    pub blur_strength: usize,
    pub brightness_prob: f64,
    pub occlusion: bool,
    /// Per-frame probability that a tip marker switches on or off.
    pub marker_switch_prob: f64,
    pub tool_width: f64,
    pub tip_length: f64,
    pub noise: f64,
    pub length: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 80,
            instruments: 2,
            mode: LabelMode::Type,
            shared_type: true,
            motion_amplitude: 1.5,
            blur_prob: 0.1,
            blur_strength: 1,
            brightness_prob: 0.1,
            occlusion: true,
            marker_switch_prob: 0.08,
            tool_width: 6.0,
            tip_length: 10.0,
            noise: 0.03,
            length: 60,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("blur_prob", self.blur_prob),
            ("brightness_prob", self.brightness_prob),
            ("marker_switch_prob", self.marker_switch_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!("frame {}x{} is too small", self.height, self.width)));
        }
        if self.instruments == 0 || self.instruments > 2 {
            return Err(Error::Config(format!("instruments must be 1 or 2, got {}", self.instruments)));
        }
        if self.length == 0 {
            return Err(Error::Config("video length must be positive".into()));
        }
        let short = self.height.min(self.width) as f64;
        if !(self.tool_width > 0.0 && self.tool_width <= short / 4.0) {
            return Err(Error::Config(format!(
                "tool_width {} does not fit a {}x{} frame",
                self.tool_width, self.height, self.width
            )));
        }
        if !(self.tip_length > 0.0 && 2.0 * self.tip_length <= short / 2.0) {
            return Err(Error::Config(format!(
                "tip_length {} does not fit a {}x{} frame",
                self.tip_length, self.height, self.width
            )));
        }
        if !(self.motion_amplitude >= 0.0 && self.noise >= 0.0) {
            return Err(Error::Config("motion_amplitude and noise must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FrameEvents {
    pub blur: bool,
    pub occlusion: bool,
    pub brightness: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    /// `[3, H, W]` in `[0, 1]`.
    pub frames: Vec<Tensor<f32>>,
    pub masks: Vec<Mask>,
    pub events: Vec<FrameEvents>,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

type Rgb = [f32; 3];

const SHAFT: Rgb = [0.72, 0.72, 0.74];
const WRIST: Rgb = [0.45, 0.46, 0.50];
const JAWS_DARK: Rgb = [0.55, 0.55, 0.58];
const MARKERS: [Rgb; 3] = [[1.0, 0.55, 0.1], [0.2, 0.85, 0.3], [0.25, 0.45, 1.0]];

fn mix(a: Rgb, b: Rgb, t: f32) -> Rgb {
    [0, 1, 2].map(|i| a[i] * (1.0 - t) + b[i] * t)
}

#[derive(Clone, Copy, Debug)]
struct Segment {
    a: (f64, f64),
    b: (f64, f64),
    radius: f64,
}

impl Segment {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dy * dy + dx * dx;
        let t = if len2 > 0.0 { (((y - self.a.0) * dy + (x - self.a.1) * dx) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let (py, px) = (self.a.0 + t * dy - y, self.a.1 + t * dx - x);
        py * py + px * px <= self.radius * self.radius
    }
}

struct Instrument {
    entry: (f64, f64),
    center: (f64, f64),
    omega: (f64, f64),
    phase: (f64, f64),
    radius: (f64, f64),
    kind: usize,
    lit: bool,
}

impl Instrument {
    fn tip(&self, t: usize) -> (f64, f64) {
        let t = t as f64;
        (
            self.center.0 + self.radius.0 * (self.omega.0 * t + self.phase.0).sin(),
            self.center.1 + self.radius.1 * (self.omega.1 * t + self.phase.1).sin(),
        )
    }

    /// Shaft, wrist and jaws for frame `t`.
    fn parts(&self, t: usize, cfg: &SceneConfig) -> [Segment; 3] {
        let wrist_end = self.tip(t);
        let (dy, dx) = (wrist_end.0 - self.entry.0, wrist_end.1 - self.entry.1);
        let norm = (dy * dy + dx * dx).sqrt().max(1e-9);
        let dir = (dy / norm, dx / norm);
        let wrist_len = cfg.tip_length * 0.5;
        let shaft_end = (wrist_end.0 - dir.0 * wrist_len, wrist_end.1 - dir.1 * wrist_len);
        let jaws_end = (wrist_end.0 + dir.0 * cfg.tip_length, wrist_end.1 + dir.1 * cfg.tip_length);
        let r = cfg.tool_width / 2.0;
        [
            Segment { a: self.entry, b: shaft_end, radius: r },
            Segment { a: shaft_end, b: wrist_end, radius: r },
            Segment { a: wrist_end, b: jaws_end, radius: r * 1.25 },
        ]
    }
}

fn make_instruments(cfg: &SceneConfig, rng: &mut ChaCha8Rng, kinds: Option<usize>) -> Vec<Instrument> {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let margin = cfg.tip_length + cfg.tool_width;
    let shared = rng.random_range(1..NUM_CLASSES);
    (0..cfg.instruments)
        .map(|i| {
            // instrument 0 enters from the left, instrument 1 from the right
            let from_left = i == 0;
            let entry = (rng.random_range(0.25 * h..0.75 * h), if from_left { -2.0 } else { w + 1.0 });
            let (x_lo, x_hi) = if !cfg.occlusion && cfg.instruments > 1 {
                if from_left {
                    (margin * 0.5, w / 2.0 - margin)
                } else {
                    (w / 2.0 + margin, w - margin * 0.5)
                }
            } else if from_left {
                (0.25 * w, w - margin)
            } else {
                (margin, 0.75 * w)
            };
            let (y_lo, y_hi) = (margin, h - margin);
            let center = ((y_lo + y_hi) / 2.0, (x_lo + x_hi) / 2.0);
            let range = ((y_hi - y_lo).max(0.0) / 2.0, (x_hi - x_lo).max(0.0) / 2.0);
            let omega = (rng.random_range(0.05..0.15), rng.random_range(0.05..0.15));
            let phase = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU));
            let radius = (
                range.0.min(cfg.motion_amplitude / omega.0),
                range.1.min(cfg.motion_amplitude / omega.1),
            );
            let drawn = rng.random_range(1..NUM_CLASSES);
            let kind = match (kinds, cfg.shared_type) {
                (Some(k), true) => 1 + k % (NUM_CLASSES - 1),
                (Some(k), false) => 1 + (k + i) % (NUM_CLASSES - 1),
                (None, true) => shared,
                (None, false) => drawn,
            };
            Instrument { entry, center, omega, phase, radius, kind, lit: rng.random_bool(0.5) }
        })
        .collect()
}

fn background(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<Rgb> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.05..0.25),
                rng.random_range(0.05..0.25),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.03..0.08),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(cfg.height * cfg.width);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let t: f64 = waves.iter().map(|&(fy, fx, ph, a)| a * (fy * y as f64 + fx * x as f64 + ph).sin()).sum();
            let t = t as f32;
            out.push([0.62 + t, 0.22 + 0.6 * t, 0.2 + 0.5 * t]);
        }
    }
    out
}

fn box_blur(img: &mut [f32], h: usize, w: usize) {
    let src = img.to_vec();
    for c in 0..3 {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut n = 0.0;
                for yy in y.saturating_sub(2)..(y + 3).min(h) {
                    for xx in x.saturating_sub(2)..(x + 3).min(w) {
                        acc += plane[yy * w + xx];
                        n += 1.0;
                    }
                }
                img[c * h * w + y * w + x] = acc / n;
            }
        }
    }
}

/// Generates one video with randomly drawn instrument types. Deterministic
/// in `cfg`.
pub fn generate_video(cfg: &SceneConfig) -> Result<VideoSample> {
    generate(cfg, None)
}

/// Generates `n` videos seeded by [`video_seed`]. Instrument types rotate
/// with the video index so every type appears equally often.
pub fn generate_dataset(cfg: &SceneConfig, n: usize) -> Result<Vec<VideoSample>> {
    (0..n).map(|i| generate(&SceneConfig { seed: video_seed(cfg.seed, i), ..cfg.clone() }, Some(i))).collect()
}

fn generate(cfg: &SceneConfig, kinds: Option<usize>) -> Result<VideoSample> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tools = make_instruments(cfg, &mut rng, kinds);
    let bg = background(cfg, &mut rng);

    let mut sample = VideoSample { frames: Vec::new(), masks: Vec::new(), events: Vec::new() };
    for t in 0..cfg.length {
        if t > 0 {
            for tool in &mut tools {
                if rng.random_bool(cfg.marker_switch_prob) {
                    tool.lit = !tool.lit;
                }
            }
        }
        let geometry: Vec<[Segment; 3]> = tools.iter().map(|tool| tool.parts(t, cfg)).collect();
        let mut img = vec![0f32; 3 * h * w];
        let mut labels = vec![0u8; h * w];
        let mut overlap = false;
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let mut color = bg[y * w + x];
                let mut label = 0u8;
                let mut hits = 0;
                // paint back to front so instrument 0 ends on top
                for (i, parts) in geometry.iter().enumerate().rev() {
                    let tool = &tools[i];
                    let hit = parts.iter().rposition(|s| s.contains(py, px));
                    if let Some(part) = hit {
                        hits += 1;
                        let shade = 1.0 - 0.15 * ((px / w as f64) as f32);
                        let marker = (cfg.mode == LabelMode::Type && tool.lit).then(|| MARKERS[tool.kind - 1]);
                        color = match (part, marker) {
                            (0, Some(m)) => mix(SHAFT, m, 0.6).map(|v| v * shade),
                            (0, None) => SHAFT.map(|v| v * shade),
                            (1, _) => WRIST,
                            (_, Some(m)) => m,
                            (_, None) => JAWS_DARK,
                        };
                        label = match cfg.mode {
                            LabelMode::Type => tool.kind as u8,
                            LabelMode::Parts => part as u8 + 1,
                        };
                    }
                }
                overlap |= hits > 1;
                labels[y * w + x] = label;
                for c in 0..3 {
                    img[c * h * w + y * w + x] = color[c];
                }
            }
        }
        for v in img.iter_mut() {
            *v = (*v + rng.random_range(-1.0..=1.0) * cfg.noise as f32).clamp(0.0, 1.0);
        }
        let events = FrameEvents {
            blur: rng.random_bool(cfg.blur_prob),
            occlusion: overlap,
            brightness: rng.random_bool(cfg.brightness_prob),
        };
        if events.blur {
            for _ in 0..cfg.blur_strength {
                box_blur(&mut img, h, w);
            }
        }
        if events.brightness {
            for v in img.iter_mut() {
                *v = (*v * 1.3).min(1.0);
            }
        }
        sample.frames.push(Tensor::new(&[3, h, w], img)?);
        sample.masks.push(Mask::new(h, w, labels)?);
        sample.events.push(events);
    }
    Ok(sample)
}

/// Seed of video `index` in a dataset generated from `base`.
pub fn video_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let cfg = SceneConfig { length: 5, ..Default::default() };
        assert_eq!(generate_video(&cfg).unwrap(), generate_video(&cfg).unwrap());
    }

    #[test]
    fn no_blur_when_disabled() {
        let cfg = SceneConfig { length: 20, blur_prob: 0.0, ..Default::default() };
        assert!(generate_video(&cfg).unwrap().events.iter().all(|e| !e.blur));
    }

    #[test]
    fn oversized_tools_rejected() {
        let cfg = SceneConfig { tool_width: 40.0, ..Default::default() };
        assert!(generate_video(&cfg).is_err());
        let cfg = SceneConfig { tip_length: 30.0, ..Default::default() };
        assert!(generate_video(&cfg).is_err());
    }
}
