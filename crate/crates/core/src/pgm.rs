//! Pixel-level generation: a small convolutional student that learns to
//! produce the fused X modality from an RGB/thermal pair by distilling a
//! teacher fusion method.
//!
//! Student layout: a visible encoder (3→c→c) and a thermal encoder (1→c→c),
//! channel concat, then two fusion convs (2c→c→3) and a sigmoid. All convs
//! are 3×3 with unit padding. The last conv starts at zero, so an untrained
//! student outputs 0.5 everywhere.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::frame::{luma, FramePair};
use crate::nn::{he_conv, ParamStore};
use crate::tensor::kernels::concat;
use crate::tensor::{AdamW, AdamWConfig, Conv2dSpec, Graph, Real, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum PgmError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("distillation needs at least one frame pair")]
    EmptyDataset,
    #[error("distillation diverged: epoch {epoch} loss {loss:.4} exceeded 10x the initial {initial:.4} for 3 epochs")]
    Diverged { epoch: usize, loss: f64, initial: f64 },
}

/// A deterministic fusion method whose output the student imitates.
pub trait TeacherOracle<R: Real>: Send + Sync {
    /// Fuses `rgb[3,H,W]` and `thermal[1,H,W]` into `[3,H,W]` in `[0,1]`.
    fn fuse(&self, rgb: &Tensor<R>, thermal: &Tensor<R>) -> Tensor<R>;
}

/// Intensity/gradient fusion: the fused luminance averages the brighter of
/// the two sources with whichever source has the stronger local gradient
/// (the brighter one on ties). Chroma comes from the visible image.
#[derive(Debug, Clone, Copy, Default)]
pub struct AnalyticTeacher;

impl<R: Real> TeacherOracle<R> for AnalyticTeacher {
    fn fuse(&self, rgb: &Tensor<R>, thermal: &Tensor<R>) -> Tensor<R> {
        let y = luma(rgb);
        let fused = fused_luminance(&y, thermal);
        replace_luminance(rgb, &y, &fused)
    }
}

/// Teacher output for a frame pair.
pub fn analytic_teacher<R: Real>(pair: &FramePair<R>) -> Tensor<R> {
    AnalyticTeacher.fuse(&pair.rgb, &pair.thermal)
}

/// Central-difference gradient magnitude with replicated borders.
pub fn gradient_magnitude<R: Real>(plane: &Tensor<R>) -> Tensor<R> {
    let (h, w) = (plane.shape()[1], plane.shape()[2]);
    let d = plane.data();
    let at = |y: usize, x: usize| d[y * w + x];
    let half = R::of(0.5);
    Tensor::from_fn([1, h, w], |i| {
        let (y, x) = (i / w, i % w);
        let gx = (at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1))) * half;
        let gy = (at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x)) * half;
        (gx * gx + gy * gy).sqrt()
    })
}

pub fn fused_luminance<R: Real>(y: &Tensor<R>, thermal: &Tensor<R>) -> Tensor<R> {
    let gy = gradient_magnitude(y);
    let gt = gradient_magnitude(thermal);
    let (yd, td) = (y.data(), thermal.data());
    let half = R::of(0.5);
    Tensor::from_fn(y.shape().to_vec(), |i| {
        let brighter = yd[i].max(td[i]);
        let dominant = if gy.data()[i] > gt.data()[i] {
            yd[i]
        } else if gt.data()[i] > gy.data()[i] {
            td[i]
        } else {
            brighter
        };
        (brighter + dominant) * half
    })
}

/// Swaps the luminance of `rgb` (whose luma is `y`) for `fused`, keeping
/// chroma. In YCbCr this is adding `fused - y` to every channel.
fn replace_luminance<R: Real>(rgb: &Tensor<R>, y: &Tensor<R>, fused: &Tensor<R>) -> Tensor<R> {
    let n = y.numel();
    let (rd, yd, fd) = (rgb.data(), y.data(), fused.data());
    Tensor::from_fn(rgb.shape().to_vec(), |i| {
        let p = i % n;
        (rd[i] + fd[p] - yd[p]).max(R::zero()).min(R::one())
    })
}

const SAME: Conv2dSpec = Conv2dSpec::new(1, 1, 1);

#[derive(Debug, Clone, PartialEq)]
pub struct PgmStudent<R> {
    pub params: ParamStore<R>,
}

impl<R: Real> PgmStudent<R> {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = channels;
        let mut p = ParamStore::new();
        let mut conv = |p: &mut ParamStore<R>, name: &str, out: usize, inp: usize| {
            p.push(format!("{name}.w"), he_conv(out, inp, 3, &mut rng));
            p.push(format!("{name}.b"), Tensor::zeros([out]));
        };
        conv(&mut p, "rgb1", c, 3);
        conv(&mut p, "rgb2", c, c);
        conv(&mut p, "t1", c, 1);
        conv(&mut p, "t2", c, c);
        conv(&mut p, "fuse1", c, 2 * c);
        p.push("fuse2.w", Tensor::zeros([3, c, 3, 3]));
        p.push("fuse2.b", Tensor::zeros([3]));
        PgmStudent { params: p }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_values()
    }

    /// Batched forward: `rgb[N,3,H,W]`, `thermal[N,1,H,W]` → `[N,3,H,W]`.
    pub fn forward(g: &mut Graph<R>, p: &[Var], rgb: Var, thermal: Var) -> Result<Var, TensorError> {
        let conv_relu = |g: &mut Graph<R>, x: Var, i: usize| {
            let y = g.conv2d(x, p[i], p[i + 1], SAME)?;
            g.relu(y)
        };
        let a = conv_relu(g, rgb, 0)?;
        let a = conv_relu(g, a, 2)?;
        let b = conv_relu(g, thermal, 4)?;
        let b = conv_relu(g, b, 6)?;
        let f = g.concat(&[a, b], 1)?;
        let f = conv_relu(g, f, 8)?;
        let out = g.conv2d(f, p[10], p[11], SAME)?;
        g.sigmoid(out)
    }

    /// Fuses a single pair into `[3,H,W]`.
    pub fn fuse(&self, rgb: &Tensor<R>, thermal: &Tensor<R>) -> Result<Tensor<R>, TensorError> {
        let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let r = g.constant(rgb.clone().reshape([1, 3, h, w])?);
        let t = g.constant(thermal.clone().reshape([1, 1, h, w])?);
        let out = Self::forward(&mut g, &p, r, t)?;
        g.value(out).clone().reshape([3, h, w])
    }
}

/// Runs the student on `pair` and stores the result as its X modality.
pub fn pgm_forward<R: Real>(
    pair: &mut FramePair<R>,
    student: &PgmStudent<R>,
) -> Result<Tensor<R>, TensorError> {
    let x = student.fuse(&pair.rgb, &pair.thermal)?;
    pair.x_modality = Some(x.clone());
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub epochs: usize,
    pub batch: usize,
    pub noise_sigma: f64,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            epochs: 200,
            batch: 2,
            noise_sigma: 0.05,
            lr: 3e-3,
            seed: 7,
        }
    }
}

/// Decay cap of the parameter moving average that training returns; step
/// `n` (from 1) uses `min(EMA_DECAY, n / (n + 3))`.
pub const EMA_DECAY: f64 = 0.98;

#[derive(Debug, Clone)]
pub struct DistillOutcome<R> {
    /// Moving average of the trained weights.
    pub student: PgmStudent<R>,
    /// Clean-input L1 to the teacher after each epoch.
    pub trace: Vec<f64>,
    /// Mean noisy-input training loss per epoch.
    pub train_trace: Vec<f64>,
}

fn stack<R: Real>(parts: &[&Tensor<R>]) -> Result<Tensor<R>, TensorError> {
    let lifted: Vec<Tensor<R>> = parts
        .iter()
        .map(|t| {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            (*t).clone().reshape(s)
        })
        .collect::<Result<_, _>>()?;
    let refs: Vec<&Tensor<R>> = lifted.iter().collect();
    concat(&refs, 0)
}

/// Trains `student` to minimise the L1 distance between its output on
/// noise-corrupted inputs and the teacher's output on the clean inputs.
pub fn distill_train<R: Real>(
    dataset: &[FramePair<R>],
    teacher: &dyn TeacherOracle<R>,
    mut student: PgmStudent<R>,
    cfg: &DistillConfig,
) -> Result<DistillOutcome<R>, PgmError> {
    if dataset.is_empty() {
        return Err(PgmError::EmptyDataset);
    }
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut train_trace = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok(DistillOutcome { student, trace, train_trace });
    }
    // teacher targets, computed once
    let targets: Vec<Tensor<R>> = dataset
        .iter()
        .map(|p| teacher.fuse(&p.rgb, &p.thermal))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("valid sigma");
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let batch = cfg.batch.max(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut averaged = student.clone();
    let mut initial = None;
    let mut over = 0;
    let mut steps = 0.0;
    for epoch in 0..cfg.epochs {
        // cosine decay to a tenth of the base rate
        let progress = epoch as f64 / cfg.epochs as f64;
        let lr = cfg.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let lrs = vec![lr; student.params.len()];
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch) {
            let mut corrupt = |t: &Tensor<R>| {
                if cfg.noise_sigma > 0.0 {
                    let mut out = t.clone();
                    for v in out.data_mut() {
                        *v += R::of(noise.sample(&mut rng));
                    }
                    out
                } else {
                    t.clone()
                }
            };
            let rgbs: Vec<Tensor<R>> = chunk.iter().map(|&i| corrupt(&dataset[i].rgb)).collect();
            let ths: Vec<Tensor<R>> = chunk.iter().map(|&i| corrupt(&dataset[i].thermal)).collect();
            let tgt: Vec<&Tensor<R>> = chunk.iter().map(|&i| &targets[i]).collect();

            let mut g = Graph::new();
            let p = student.params.bind(&mut g);
            let r = g.constant(stack(&rgbs.iter().collect::<Vec<_>>())?);
            let t = g.constant(stack(&ths.iter().collect::<Vec<_>>())?);
            let target = g.constant(stack(&tgt)?);
            let out = PgmStudent::forward(&mut g, &p, r, t)?;
            let loss = g.l1_loss(out, target)?;
            total += g.value(loss).item().as_f64();
            batches += 1;
            g.backward(loss)?;
            student.params.apply(&mut opt, &g, &p, &lrs)?;
            steps += 1.0;
            let decay = EMA_DECAY.min(steps / (steps + 3.0));
            averaged.params.blend_from(&student.params, R::of(decay));
        }
        train_trace.push(total / batches as f64);
        let epoch_loss = mean_l1(&averaged, dataset, &targets)?;
        trace.push(epoch_loss);
        let init = *initial.get_or_insert(epoch_loss);
        if epoch_loss > 10.0 * init {
            over += 1;
            if over >= 3 {
                return Err(PgmError::Diverged {
                    epoch,
                    loss: epoch_loss,
                    initial: init,
                });
            }
        } else {
            over = 0;
        }
    }
    Ok(DistillOutcome {
        student: averaged,
        trace,
        train_trace,
    })
}

fn mean_l1<R: Real>(student: &PgmStudent<R>, pairs: &[FramePair<R>], targets: &[Tensor<R>]) -> Result<f64, TensorError> {
    let mut total = 0.0;
    for (p, t) in pairs.iter().zip(targets) {
        let s = student.fuse(&p.rgb, &p.thermal)?;
        let d: f64 = s.data().iter().zip(t.data()).map(|(a, b)| (*a - *b).abs().as_f64()).sum();
        total += d / s.numel() as f64;
    }
    Ok(total / pairs.len().max(1) as f64)
}

/// Mean absolute difference between student and teacher over `pairs`.
pub fn mean_l1_to_teacher<R: Real>(
    student: &PgmStudent<R>,
    teacher: &dyn TeacherOracle<R>,
    pairs: &[FramePair<R>],
) -> Result<f64, TensorError> {
    let targets: Vec<Tensor<R>> = pairs.iter().map(|p| teacher.fuse(&p.rgb, &p.thermal)).collect();
    mean_l1(student, pairs, &targets)
}
