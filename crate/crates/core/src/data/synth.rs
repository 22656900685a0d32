//! Procedural stand-in datasets.
//!
//! Each image is a class-specific drawing placed with a random pose, then
//! Gaussian pixel noise, then 8-bit quantization (so PNG export is
//! lossless). Shapes are drawn from signed distance functions in a canonical
//! `[-1, 1]²` frame with one pixel of anti-aliasing.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, LabeledDataset, Sample, Split};
use crate::nn::Tensor;
use crate::rng::{derive, purpose, stream, Rng64};

/// Noise standard deviation per unit of `noise_level`.
pub const NOISE_SIGMA_PER_LEVEL: f32 = 0.5;
pub const DEFAULT_NOISE_LEVEL: f32 = 0.3;
/// Lattice period of the original texture, in pixels.
pub const TEXTURE_PERIOD: f32 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SynthTask {
    /// Eight shape/texture classes used for backbone pretraining.
    Source8,
    /// Product silhouettes on a light background.
    Products4,
    /// Buckle and label close-ups, fake variants with altered proportions.
    Details4,
    /// Regular monogram lattice against a jittered imitation.
    Textures2,
}

impl SynthTask {
    pub const ALL: [SynthTask; 4] = [
        SynthTask::Source8,
        SynthTask::Products4,
        SynthTask::Details4,
        SynthTask::Textures2,
    ];

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            SynthTask::Source8 => &[
                "checker", "circle", "cross", "dots", "hstripes", "square", "triangle", "vstripes",
            ],
            SynthTask::Products4 => &["glasses", "lv_big_bag", "lv_small_bag", "watches"],
            SynthTask::Details4 => &["fake_buckle", "fake_etiquette", "original_buckle", "original_etiquette"],
            SynthTask::Textures2 => &["fake", "original"],
        }
    }

    pub fn default_image_size(self) -> usize {
        match self {
            SynthTask::Textures2 => 64,
            _ => 32,
        }
    }

    fn tag(self) -> u64 {
        match self {
            SynthTask::Source8 => 1,
            SynthTask::Products4 => 2,
            SynthTask::Details4 => 3,
            SynthTask::Textures2 => 4,
        }
    }
}

impl fmt::Display for SynthTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthTask::Source8 => "source8",
            SynthTask::Products4 => "products4",
            SynthTask::Details4 => "details4",
            SynthTask::Textures2 => "textures2",
        })
    }
}

impl FromStr for SynthTask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SynthTask::ALL
            .into_iter()
            .find(|t| t.to_string() == s)
            .ok_or_else(|| format!("unknown synthetic task {s:?} (expected source8, products4, details4 or textures2)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub task: SynthTask,
    pub images_per_class: usize,
    /// Square side in pixels.
    pub image_size: usize,
    pub noise_level: f32,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(task: SynthTask, images_per_class: usize, seed: u64) -> Self {
        SynthSpec {
            task,
            images_per_class,
            image_size: task.default_image_size(),
            noise_level: DEFAULT_NOISE_LEVEL,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.images_per_class == 0 {
            return Err(DataError::Invalid("images_per_class must be at least 1".into()));
        }
        if self.image_size < 8 {
            return Err(DataError::Invalid(format!("image size {} is below 8", self.image_size)));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(DataError::Invalid(format!("noise level {} outside [0, 1]", self.noise_level)));
        }
        Ok(())
    }
}

/// Per-image nuisance parameters. For textures, `offset` is the lattice
/// phase in pixels and `scale` the period multiplier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub offset: (f32, f32),
    pub scale: f32,
    pub angle: f32,
    /// Additive brightness shift.
    pub tone: f32,
    /// Drives per-image colours and texture row jitter.
    pub pattern_seed: u64,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            offset: (0.0, 0.0),
            scale: 1.0,
            angle: 0.0,
            tone: 0.0,
            pattern_seed: 0,
        }
    }
}

fn image_rng(spec: &SynthSpec, class: usize, index: usize, tag: u64) -> Rng64 {
    let key = derive(derive(spec.seed, spec.task.tag()), ((class as u64) << 32) | index as u64);
    stream(key, tag)
}

/// The pose used for image `index` of `class`.
pub fn pose_for(spec: &SynthSpec, class: usize, index: usize) -> Pose {
    let mut rng = image_rng(spec, class, index, purpose::SYNTH);
    let tone = rng.random_range(-0.06..0.06);
    let pattern_seed = rng.random();
    match spec.task {
        SynthTask::Textures2 => {
            let original = class == 1;
            let phase = |rng: &mut Rng64| {
                if original {
                    rng.random_range(-1i32..=1) as f32
                } else {
                    rng.random_range(0.0..TEXTURE_PERIOD)
                }
            };
            let offset = (phase(&mut rng), phase(&mut rng));
            let scale = if original {
                1.0
            } else if rng.random_bool(0.5) {
                rng.random_range(0.75..0.85)
            } else {
                rng.random_range(1.2..1.35)
            };
            Pose {
                offset,
                scale,
                angle: 0.0,
                tone,
                pattern_seed,
            }
        }
        _ => Pose {
            offset: (rng.random_range(-0.12..0.12), rng.random_range(-0.12..0.12)),
            scale: rng.random_range(0.85..1.1),
            angle: rng.random_range(-0.25..0.25),
            tone,
            pattern_seed,
        },
    }
}

/// Generates `images_per_class` images for every class of the task. Source
/// ids are `class/NNNNN.png`; every sample starts in the train split.
pub fn synth_dataset(spec: &SynthSpec) -> Result<LabeledDataset, DataError> {
    spec.validate()?;
    let names = spec.task.class_names();
    let sigma = NOISE_SIGMA_PER_LEVEL * spec.noise_level;
    let noise = Normal::new(0.0f32, sigma.max(f32::MIN_POSITIVE)).expect("finite sigma");
    let mut samples = Vec::with_capacity(names.len() * spec.images_per_class);
    for (label, name) in names.iter().enumerate() {
        for index in 0..spec.images_per_class {
            let pose = pose_for(spec, label, index);
            let mut image = render(spec.task, label, &pose, spec.image_size)?;
            if sigma > 0.0 {
                let mut rng = image_rng(spec, label, index, purpose::SYNTH + 1);
                for v in image.data_mut() {
                    *v += noise.sample(&mut rng);
                }
            }
            samples.push(Sample {
                image: quantize(image),
                label,
                split: Split::Train,
                source_id: format!("{name}/{index:05}.png"),
            });
        }
    }
    LabeledDataset::new(samples, names.iter().map(|s| s.to_string()).collect())
}

fn quantize(image: Tensor) -> Tensor {
    image.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

type Rgb = [f32; 3];

/// Draws class `label` of `task` under `pose`, without noise.
pub fn render(task: SynthTask, label: usize, pose: &Pose, size: usize) -> Result<Tensor, DataError> {
    let n = task.class_names().len();
    if label >= n {
        return Err(DataError::Invalid(format!("class {label} out of range for {task}")));
    }
    if size < 8 {
        return Err(DataError::Invalid(format!("image size {size} is below 8")));
    }
    let mut data = Vec::with_capacity(size * size * 3);
    match task {
        SynthTask::Textures2 => {
            let tex = Lattice::new(label == 1, pose);
            for y in 0..size {
                for x in 0..size {
                    data.extend(tone(tex.shade(x as f32 + 0.5, y as f32 + 0.5), pose.tone));
                }
            }
        }
        _ => {
            let (cos, sin) = (pose.angle.cos(), pose.angle.sin());
            // One pixel expressed in canonical units.
            let px = 2.0 / size as f32 / pose.scale;
            let palette = Palette::new(pose.pattern_seed);
            for y in 0..size {
                for x in 0..size {
                    let u = (x as f32 + 0.5) / size as f32 * 2.0 - 1.0 - pose.offset.0;
                    let v = (y as f32 + 0.5) / size as f32 * 2.0 - 1.0 - pose.offset.1;
                    let q = ((cos * u + sin * v) / pose.scale, (-sin * u + cos * v) / pose.scale);
                    let c = match task {
                        SynthTask::Products4 => product(label, q, px),
                        SynthTask::Details4 => detail(label, q, px),
                        _ => source(label, q, px, &palette),
                    };
                    data.extend(tone(c, pose.tone));
                }
            }
        }
    }
    Ok(Tensor::new(vec![size, size, 3], data)?)
}

fn tone(c: Rgb, t: f32) -> Rgb {
    c.map(|v| (v + t).clamp(0.0, 1.0))
}

fn mix(under: Rgb, over: Rgb, alpha: f32) -> Rgb {
    [0, 1, 2].map(|i| under[i] * (1.0 - alpha) + over[i] * alpha)
}

/// Fraction of a pixel covered by the region `d < 0`.
fn cover(d: f32, px: f32) -> f32 {
    (0.5 - d / px).clamp(0.0, 1.0)
}

fn length(p: (f32, f32)) -> f32 {
    (p.0 * p.0 + p.1 * p.1).sqrt()
}

fn sd_circle(p: (f32, f32), c: (f32, f32), r: f32) -> f32 {
    length((p.0 - c.0, p.1 - c.1)) - r
}

fn sd_ring(p: (f32, f32), c: (f32, f32), r: f32, thickness: f32) -> f32 {
    sd_circle(p, c, r).abs() - thickness / 2.0
}

fn sd_box(p: (f32, f32), c: (f32, f32), half: (f32, f32)) -> f32 {
    let d = ((p.0 - c.0).abs() - half.0, (p.1 - c.1).abs() - half.1);
    length((d.0.max(0.0), d.1.max(0.0))) + d.0.max(d.1).min(0.0)
}

fn sd_frame(p: (f32, f32), c: (f32, f32), half: (f32, f32), thickness: f32) -> f32 {
    let inner = (half.0 - thickness, half.1 - thickness);
    sd_box(p, c, half).max(-sd_box(p, c, inner))
}

fn sd_segment(p: (f32, f32), a: (f32, f32), b: (f32, f32), thickness: f32) -> f32 {
    let (pa, ba) = ((p.0 - a.0, p.1 - a.1), (b.0 - a.0, b.1 - a.1));
    let h = ((pa.0 * ba.0 + pa.1 * ba.1) / (ba.0 * ba.0 + ba.1 * ba.1)).clamp(0.0, 1.0);
    length((pa.0 - ba.0 * h, pa.1 - ba.1 * h)) - thickness / 2.0
}

/// Upward-pointing equilateral triangle with circumradius `r`: the
/// largest signed distance to its three edge lines.
fn sd_triangle(p: (f32, f32), r: f32) -> f32 {
    let h = 3f32.sqrt() / 2.0;
    let d = p.1.max(h * p.0 - 0.5 * p.1).max(-h * p.0 - 0.5 * p.1);
    d - r / 2.0
}

const WHITE_BG: Rgb = [0.93, 0.93, 0.91];
const LEATHER: Rgb = [0.36, 0.23, 0.13];
const BAG_BROWN: Rgb = [0.48, 0.31, 0.17];
const GOLD: Rgb = [0.82, 0.66, 0.27];
const DARK: Rgb = [0.1, 0.1, 0.12];

fn product(label: usize, p: (f32, f32), px: f32) -> Rgb {
    let mut c = WHITE_BG;
    match label {
        // glasses
        0 => {
            let frame = sd_ring(p, (-0.42, 0.0), 0.3, 0.08)
                .min(sd_ring(p, (0.42, 0.0), 0.3, 0.08))
                .min(sd_segment(p, (-0.13, -0.06), (0.13, -0.06), 0.06))
                .min(sd_segment(p, (-0.72, -0.05), (-0.93, -0.2), 0.05))
                .min(sd_segment(p, (0.72, -0.05), (0.93, -0.2), 0.05));
            let lens = sd_circle(p, (-0.42, 0.0), 0.3).min(sd_circle(p, (0.42, 0.0), 0.3));
            c = mix(c, [0.7, 0.74, 0.78], cover(lens, px));
            c = mix(c, DARK, cover(frame, px));
        }
        // lv_big_bag
        1 => {
            let handle = sd_ring(p, (0.0, -0.2), 0.38, 0.08).max(p.1 + 0.2);
            c = mix(c, [0.3, 0.2, 0.1], cover(handle, px));
            c = mix(c, BAG_BROWN, cover(sd_box(p, (0.0, 0.22), (0.72, 0.45)), px));
            c = mix(c, GOLD, cover(sd_box(p, (0.0, 0.0), (0.1, 0.06)), px));
        }
        // lv_small_bag
        2 => {
            let strap = sd_segment(p, (-0.36, 0.0), (0.0, -0.85), 0.04)
                .min(sd_segment(p, (0.36, 0.0), (0.0, -0.85), 0.04));
            c = mix(c, [0.3, 0.2, 0.1], cover(strap, px));
            c = mix(c, BAG_BROWN, cover(sd_box(p, (0.0, 0.28), (0.38, 0.28)), px));
            c = mix(c, GOLD, cover(sd_circle(p, (0.0, 0.12), 0.06), px));
        }
        // watches
        _ => {
            c = mix(c, [0.2, 0.14, 0.1], cover(sd_box(p, (0.0, 0.0), (0.17, 0.92)), px));
            c = mix(c, [0.76, 0.76, 0.8], cover(sd_circle(p, (0.0, 0.0), 0.36), px));
            c = mix(c, DARK, cover(sd_ring(p, (0.0, 0.0), 0.36, 0.06), px));
            let hands = sd_segment(p, (0.0, 0.0), (0.0, -0.26), 0.05).min(sd_segment(p, (0.0, 0.0), (0.18, 0.05), 0.05));
            c = mix(c, DARK, cover(hands, px));
        }
    }
    c
}

fn detail(label: usize, p: (f32, f32), px: f32) -> Rgb {
    let fake = label < 2;
    let mut c = LEATHER;
    if label % 2 == 0 {
        // buckle: metal frame with a prong; imitations are squatter with a
        // heavier frame and an off-centre prong.
        let (half, thick, prong_x, prong_w) = if fake {
            ((0.6, 0.3), 0.16, 0.1, 0.12)
        } else {
            ((0.5, 0.44), 0.1, 0.0, 0.07)
        };
        c = mix(c, [0.25, 0.15, 0.08], cover(sd_box(p, (0.0, 0.0), (0.95, 0.2)), px));
        c = mix(c, GOLD, cover(sd_frame(p, (0.0, 0.0), half, thick), px));
        let prong = sd_segment(p, (prong_x, -half.1), (prong_x, half.1), prong_w);
        c = mix(c, [0.9, 0.78, 0.4], cover(prong, px));
    } else {
        // etiquette: stitched label with lines of lettering; imitations
        // have a shorter label, tighter heavier lines.
        let (half, spacing, line_w, line_half) = if fake {
            ((0.62, 0.32), 0.13, 0.08, 0.5)
        } else {
            ((0.6, 0.44), 0.2, 0.05, 0.4)
        };
        c = mix(c, [0.93, 0.89, 0.78], cover(sd_box(p, (0.0, 0.0), half), px));
        let mut text = f32::MAX;
        for k in -1..=1 {
            let y = k as f32 * spacing;
            text = text.min(sd_segment(p, (-line_half, y), (line_half, y), line_w));
        }
        c = mix(c, [0.2, 0.16, 0.12], cover(text, px));
    }
    c
}

/// Foreground/background colours for source images, far enough apart in
/// brightness that every class stays visible.
struct Palette {
    fg: Rgb,
    bg: Rgb,
}

impl Palette {
    fn new(seed: u64) -> Self {
        let mut rng = stream(seed, purpose::SYNTH + 2);
        let dark_fg = rng.random_bool(0.5);
        let mut pick = |lo: f32, hi: f32| [0; 3].map(|_| rng.random_range(lo..hi));
        let (light, dark) = (pick(0.6, 0.95), pick(0.05, 0.4));
        if dark_fg {
            Palette { fg: dark, bg: light }
        } else {
            Palette { fg: light, bg: dark }
        }
    }
}

fn source(label: usize, p: (f32, f32), px: f32, pal: &Palette) -> Rgb {
    // Texture classes vary with position in canonical space, so pose scales
    // and rotates them as well.
    let wave = |t: f32, period: f32| {
        let s = (t / period * std::f32::consts::TAU).sin();
        (s / (std::f32::consts::TAU * px / period).max(1e-3) + 0.5).clamp(0.0, 1.0)
    };
    let alpha = match label {
        0 => {
            let (a, b) = (wave(p.0, 0.5), wave(p.1, 0.5));
            a * b + (1.0 - a) * (1.0 - b)
        }
        1 => cover(sd_circle(p, (0.0, 0.0), 0.55), px),
        2 => cover(
            sd_box(p, (0.0, 0.0), (0.6, 0.16)).min(sd_box(p, (0.0, 0.0), (0.16, 0.6))),
            px,
        ),
        3 => {
            let cell = 0.4;
            let f = |t: f32| (t / cell).rem_euclid(1.0) * cell - cell / 2.0;
            cover(length((f(p.0), f(p.1))) - 0.11, px)
        }
        4 => wave(p.1, 0.36),
        5 => cover(sd_box(p, (0.0, 0.0), (0.5, 0.5)), px),
        6 => cover(sd_triangle(p, 0.7), px),
        _ => wave(p.0, 0.36),
    };
    mix(pal.bg, pal.fg, alpha)
}

/// Monogram lattice: a dot with a small diamond between neighbours.
struct Lattice {
    period: f32,
    phase: (f32, f32),
    original: bool,
    row_seed: u64,
}

impl Lattice {
    fn new(original: bool, pose: &Pose) -> Self {
        Lattice {
            period: TEXTURE_PERIOD * pose.scale,
            phase: pose.offset,
            original,
            row_seed: pose.pattern_seed,
        }
    }

    /// Horizontal shift of lattice row `row`, in periods. Imitations have
    /// misregistered rows.
    fn row_shift(&self, row: i64) -> f32 {
        if self.original {
            return 0.0;
        }
        let h = crate::rng::mix(self.row_seed ^ (row as u64).wrapping_mul(0x9E37_79B9));
        (h >> 40) as f32 / (1u64 << 24) as f32 * 0.5 - 0.25
    }

    fn shade(&self, x: f32, y: f32) -> Rgb {
        let p = self.period;
        let gy = (y - self.phase.1) / p;
        let row = gy.floor() as i64;
        let gx = (x - self.phase.0) / p + self.row_shift(row);
        let (fx, fy) = ((gx.rem_euclid(1.0) - 0.5) * p, (gy.rem_euclid(1.0) - 0.5) * p);
        let dot = length((fx, fy)) - 0.22 * p;
        // Diamond centred on the cell corner.
        let (cx, cy) = ((gx + 0.5).rem_euclid(1.0) - 0.5, (gy + 0.5).rem_euclid(1.0) - 0.5);
        let diamond = (cx.abs() + cy.abs()) * p - 0.14 * p;
        let mut c = [0.42, 0.29, 0.17];
        c = mix(c, [0.86, 0.74, 0.46], cover(dot, 1.0));
        mix(c, [0.25, 0.16, 0.09], cover(diamond, 1.0))
    }
}
