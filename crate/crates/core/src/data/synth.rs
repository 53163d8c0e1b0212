//! Seeded synthetic RGB/thermal sequences.
//!
//! The target is a textured coloured square that is also a warm blob in
//! the thermal band. Distractors are squares of a different colour and
//! texture that are nearly as warm, so neither band alone separates them
//! cleanly. Rendering is anti-aliased, so sub-pixel motion is visible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, SequenceRecord};
use crate::frame::FramePair;
use crate::tensor::{Real, Tensor};
use crate::tracker::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Linear,
    /// Linear drift with one sudden displacement.
    Jump,
    Sinusoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Illumination {
    Normal,
    Low,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_frames: usize,
    pub motion: Motion,
    pub distractors: usize,
    pub illumination: Illumination,
    pub noise_sigma: f64,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub target_size: f64,
    /// Pixels per frame for linear motion and the drift of `jump`.
    pub speed: f64,
    /// Frame at which `jump` displaces the target; defaults to the middle.
    pub jump_frame: Option<usize>,
    /// Jump length; defaults to `max(8, 1.25 * target_size)`.
    pub jump_distance: Option<f64>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_frames: 100,
            motion: Motion::Linear,
            distractors: 2,
            illumination: Illumination::Low,
            noise_sigma: 0.02,
            seed: 0,
            width: 64,
            height: 64,
            target_size: 14.0,
            speed: 0.4,
            jump_frame: None,
            jump_distance: None,
        }
    }
}

/// RGB gain applied under low illumination.
pub const LOW_LIGHT_GAIN: f64 = 0.15;

impl SynthSpec {
    pub fn jump_frame(&self) -> usize {
        self.jump_frame.unwrap_or(self.n_frames / 2)
    }

    pub fn jump_distance(&self) -> f64 {
        self.jump_distance.unwrap_or((1.25 * self.target_size).max(8.0))
    }

    pub fn name(&self) -> String {
        let m = match self.motion {
            Motion::Linear => "linear",
            Motion::Jump => "jump",
            Motion::Sinusoid => "sinusoid",
        };
        let l = match self.illumination {
            Illumination::Normal => "normal",
            Illumination::Low => "low",
        };
        format!("synth-{m}-{l}-d{}-s{}", self.distractors, self.seed)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let min_side = self.width.min(self.height) as f64;
        if self.n_frames < 2 {
            return Err(DataError::Spec("n_frames must be at least 2".into()));
        }
        if !(self.target_size >= 2.0 && self.target_size * 2.0 < min_side) {
            return Err(DataError::Spec(format!(
                "target_size {} must lie in [2, {})",
                self.target_size,
                min_side / 2.0
            )));
        }
        if self.noise_sigma < 0.0 || self.speed < 0.0 {
            return Err(DataError::Spec("noise_sigma and speed must be non-negative".into()));
        }
        if self.motion == Motion::Jump && !(1..self.n_frames).contains(&self.jump_frame()) {
            return Err(DataError::Spec("jump_frame must lie in [1, n_frames)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Actor {
    color: [f64; 3],
    heat: f64,
    phase: [f64; 2],
    /// Texture cycles across the box; stripes when the second entry is 0.
    cycles: [f64; 2],
}

impl Actor {
    fn rgb(&self, u: f64, v: f64) -> [f64; 3] {
        let tu = (std::f64::consts::TAU * self.cycles[0] * u + self.phase[0]).sin();
        let tv = if self.cycles[1] > 0.0 {
            (std::f64::consts::TAU * self.cycles[1] * v + self.phase[1]).sin()
        } else {
            1.0
        };
        let t = 0.55 + 0.45 * (0.5 + 0.5 * tu * tv);
        self.color.map(|c| c * t)
    }

    fn thermal(&self, u: f64, v: f64) -> f64 {
        let r2 = ((u - 0.5).powi(2) + (v - 0.5).powi(2)) / 0.5;
        self.heat + 0.1 * (1.0 - r2)
    }
}

/// A rendered world: static background plus actors with known paths.
#[derive(Debug, Clone)]
pub struct Scene {
    width: usize,
    height: usize,
    rgb_gain: f64,
    noise_sigma: f64,
    seed: u64,
    bg: [[f64; 3]; 3],
    target: Actor,
    path: Vec<BBox>,
    distractors: Vec<(Actor, Vec<BBox>)>,
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn linear_path(rng: &mut impl Rng, spec: &SynthSpec, n: usize, speed: f64) -> Vec<(f64, f64)> {
    let s = spec.target_size;
    let (lo_x, hi_x) = (s / 2.0 + 1.0, spec.width as f64 - s / 2.0 - 1.0);
    let (lo_y, hi_y) = (s / 2.0 + 1.0, spec.height as f64 - s / 2.0 - 1.0);
    let mut travel = speed * (n.saturating_sub(1)) as f64;
    for attempt in 0..2000 {
        if attempt % 200 == 199 {
            travel *= 0.8;
        }
        let (x0, y0) = (uniform(rng, lo_x, hi_x), uniform(rng, lo_y, hi_y));
        let theta = uniform(rng, 0.0, std::f64::consts::TAU);
        let (x1, y1) = (x0 + travel * theta.cos(), y0 + travel * theta.sin());
        if (lo_x..=hi_x).contains(&x1) && (lo_y..=hi_y).contains(&y1) {
            let denom = n.saturating_sub(1).max(1) as f64;
            let (vx, vy) = ((x1 - x0) / denom, (y1 - y0) / denom);
            return (0..n).map(|t| (x0 + vx * t as f64, y0 + vy * t as f64)).collect();
        }
    }
    vec![((lo_x + hi_x) / 2.0, (lo_y + hi_y) / 2.0); n]
}

/// Reflects `v` into `[lo, hi]`.
fn bounce(v: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let m = (v - lo).rem_euclid(2.0 * span);
    lo + if m > span { 2.0 * span - m } else { m }
}

impl Scene {
    pub fn new(spec: &SynthSpec) -> Result<Self, DataError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let n = spec.n_frames;
        let s = spec.target_size;
        let mut bg = [[0.0; 3]; 3];
        for row in bg.iter_mut() {
            *row = [uniform(&mut rng, 0.0, 6.3), uniform(&mut rng, 0.08, 0.2), uniform(&mut rng, 0.06, 0.18)];
        }
        let target = Actor {
            color: [uniform(&mut rng, 0.85, 1.0), uniform(&mut rng, 0.3, 0.5), uniform(&mut rng, 0.1, 0.25)],
            heat: 0.85,
            phase: [uniform(&mut rng, 0.0, 6.3), uniform(&mut rng, 0.0, 6.3)],
            cycles: [1.5, 1.5],
        };
        let centers: Vec<(f64, f64)> = match spec.motion {
            Motion::Linear => linear_path(&mut rng, spec, n, spec.speed),
            Motion::Jump => {
                let jf = spec.jump_frame();
                let dist = spec.jump_distance();
                let (lo, hi_x, hi_y) = (
                    s / 2.0 + 1.0,
                    spec.width as f64 - s / 2.0 - 1.0,
                    spec.height as f64 - s / 2.0 - 1.0,
                );
                let inside = |p: &(f64, f64)| (lo..=hi_x).contains(&p.0) && (lo..=hi_y).contains(&p.1);
                let mut out = None;
                for _ in 0..2000 {
                    let base = linear_path(&mut rng, spec, n, spec.speed);
                    let theta = uniform(&mut rng, 0.0, std::f64::consts::TAU);
                    let (jx, jy) = (dist * theta.cos(), dist * theta.sin());
                    let path: Vec<(f64, f64)> = base
                        .iter()
                        .enumerate()
                        .map(|(t, &(x, y))| if t >= jf { (x + jx, y + jy) } else { (x, y) })
                        .collect();
                    if path.iter().all(inside) {
                        out = Some(path);
                        break;
                    }
                }
                out.ok_or_else(|| DataError::Spec("jump does not fit inside the frame".into()))?
            }
            Motion::Sinusoid => {
                let (cx, cy) = (spec.width as f64 / 2.0, spec.height as f64 / 2.0);
                let ax = (spec.width as f64 - s) / 2.0 - 2.0;
                let ay = (spec.height as f64 - s) / 2.0 - 2.0;
                let (px, py) = (uniform(&mut rng, 30.0, 60.0), uniform(&mut rng, 30.0, 60.0));
                let (fx, fy) = (uniform(&mut rng, 0.0, 6.3), uniform(&mut rng, 0.0, 6.3));
                (0..n)
                    .map(|t| {
                        let t = t as f64;
                        (
                            cx + 0.8 * ax * (std::f64::consts::TAU * t / px + fx).sin(),
                            cy + 0.8 * ay * (std::f64::consts::TAU * t / py + fy).sin(),
                        )
                    })
                    .collect()
            }
        };
        let path: Vec<BBox> = centers.iter().map(|&(x, y)| BBox::from_center(x, y, s, s)).collect();
        let mut distractors = Vec::new();
        for _ in 0..spec.distractors {
            let actor = Actor {
                color: [uniform(&mut rng, 0.1, 0.3), uniform(&mut rng, 0.45, 0.8), uniform(&mut rng, 0.7, 1.0)],
                heat: 0.72,
                phase: [uniform(&mut rng, 0.0, 6.3), 0.0],
                cycles: [2.5, 0.0],
            };
            let (lo, hi_x, hi_y) = (s / 2.0, spec.width as f64 - s / 2.0, spec.height as f64 - s / 2.0);
            let draw = |rng: &mut ChaCha8Rng| {
                let (x0, y0) = (uniform(rng, lo, hi_x), uniform(rng, lo, hi_y));
                let theta = uniform(rng, 0.0, std::f64::consts::TAU);
                let v = uniform(rng, 0.3, 0.8);
                (0..n)
                    .map(|t| {
                        let t = t as f64;
                        let x = bounce(x0 + v * theta.cos() * t, lo, hi_x);
                        let y = bounce(y0 + v * theta.sin() * t, lo, hi_y);
                        BBox::from_center(x, y, s, s)
                    })
                    .collect::<Vec<BBox>>()
            };
            let mut boxes = draw(&mut rng);
            if spec.motion == Motion::Jump {
                // keep the target clear of distractors across the discontinuity
                let jf = spec.jump_frame();
                let clear = |b: &[BBox]| {
                    (jf.saturating_sub(1)..=jf.min(n - 1)).all(|t| b[t].center_distance(&path[t]) >= 1.5 * s)
                };
                for _ in 0..2000 {
                    if clear(&boxes) {
                        break;
                    }
                    boxes = draw(&mut rng);
                }
            }
            distractors.push((actor, boxes));
        }
        Ok(Scene {
            width: spec.width,
            height: spec.height,
            rgb_gain: match spec.illumination {
                Illumination::Normal => 1.0,
                Illumination::Low => LOW_LIGHT_GAIN,
            },
            noise_sigma: spec.noise_sigma,
            seed: spec.seed,
            bg,
            target,
            path,
            distractors,
        })
    }

    pub fn len(&self) -> usize {
        self.path.len()
    }

    pub fn is_empty(&self) -> bool {
        self.path.is_empty()
    }

    pub fn gt(&self) -> &[BBox] {
        &self.path
    }

    /// Per-frame boxes of each distractor.
    pub fn distractor_paths(&self) -> impl Iterator<Item = &[BBox]> {
        self.distractors.iter().map(|(_, p)| p.as_slice())
    }

    fn background(&self, x: f64, y: f64) -> ([f64; 3], f64) {
        let mut rgb = [0.0; 3];
        for (c, [phase, fx, fy]) in self.bg.iter().enumerate() {
            rgb[c] = 0.45 + 0.18 * (fx * x + phase).sin() * (fy * y + 0.5 * phase).cos();
        }
        let t = 0.2 + 0.05 * (0.11 * x + self.bg[0][0]).sin() * (0.09 * y).cos();
        (rgb, t)
    }

    /// Renders frame `t`. Noise is drawn from a stream keyed by the frame
    /// index, so each frame is reproducible in isolation.
    pub fn render<R: Real>(&self, t: usize) -> FramePair<R> {
        let (w, h) = (self.width, self.height);
        let n = w * h;
        let mut rgb = vec![0.0f64; 3 * n];
        let mut th = vec![0.0f64; n];
        let mut actors: Vec<(&Actor, BBox)> = self.distractors.iter().map(|(a, p)| (a, p[t])).collect();
        actors.push((&self.target, self.path[t]));
        for py in 0..h {
            for px in 0..w {
                let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
                let (mut c, mut tv) = self.background(cx, cy);
                let cell = BBox::new(px as f64, py as f64, 1.0, 1.0);
                for (actor, b) in &actors {
                    let alpha = cell.intersection(b);
                    if alpha <= 0.0 {
                        continue;
                    }
                    let (u, v) = (((cx - b.x) / b.w).clamp(0.0, 1.0), ((cy - b.y) / b.h).clamp(0.0, 1.0));
                    let ac = actor.rgb(u, v);
                    for k in 0..3 {
                        c[k] = (1.0 - alpha) * c[k] + alpha * ac[k];
                    }
                    tv = (1.0 - alpha) * tv + alpha * actor.thermal(u, v);
                }
                let i = py * w + px;
                for k in 0..3 {
                    rgb[k * n + i] = c[k] * self.rgb_gain;
                }
                th[i] = tv;
            }
        }
        if self.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(t as u64 + 1);
            let noise = Normal::new(0.0, self.noise_sigma).expect("valid sigma");
            for v in rgb.iter_mut().chain(th.iter_mut()) {
                *v += noise.sample(&mut rng);
            }
        }
        let rgb = Tensor::from_fn([3, h, w], |i| R::of(rgb[i]));
        let th = Tensor::from_fn([1, h, w], |i| R::of(th[i]));
        FramePair::new(rgb, th).expect("scene geometry is consistent")
    }
}

pub fn synth_sequence<R: Real>(spec: &SynthSpec) -> Result<SequenceRecord<R>, DataError> {
    let scene = Scene::new(spec)?;
    let frames = (0..scene.len()).map(|t| scene.render(t)).collect();
    let mut attributes = Vec::new();
    if spec.illumination == Illumination::Low {
        attributes.push("LI".to_string());
    }
    if spec.motion == Motion::Jump {
        attributes.push("FM".to_string());
    }
    if spec.distractors > 0 {
        attributes.push("BC".to_string());
    }
    SequenceRecord::new(spec.name(), frames, scene.gt().to_vec(), attributes)
}

/// A small corpus of varied frame pairs for distilling the fusion student.
pub fn fusion_pairs<R: Real>(count: usize, size: usize, seed: u64) -> Vec<FramePair<R>> {
    (0..count)
        .map(|i| {
            let spec = SynthSpec {
                n_frames: 2,
                motion: Motion::Linear,
                distractors: 1 + i % 2,
                illumination: if i % 2 == 0 { Illumination::Low } else { Illumination::Normal },
                noise_sigma: 0.0,
                seed: seed.wrapping_mul(1000).wrapping_add(i as u64),
                width: size,
                height: size,
                target_size: (size as f64 * 0.3).max(2.0),
                ..SynthSpec::default()
            };
            Scene::new(&spec).expect("valid toy spec").render(0)
        })
        .collect()
}
