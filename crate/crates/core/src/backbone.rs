//! Dilated convolutional feature extractor, one parameter set per modality.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{he_conv, ParamStore};
use crate::tensor::{shape_err, Conv2dSpec, Graph, Real, Result, Tensor, Var};

/// Smallest accepted input side.
pub const MIN_INPUT: usize = 32;
/// Input pixels per feature cell.
pub const STRIDE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Rgb,
    Thermal,
    X,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Thermal, Modality::X];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Thermal => "thermal",
            Modality::X => "x",
        }
    }
}

/// Per-modality features of one frame, all `[C,H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepFeatures<R> {
    pub d_rgb: Tensor<R>,
    pub d_t: Tensor<R>,
    pub d_x: Tensor<R>,
}

impl<R: Real> DeepFeatures<R> {
    pub fn new(d_rgb: Tensor<R>, d_t: Tensor<R>, d_x: Tensor<R>) -> Result<Self> {
        let s = d_rgb.shape();
        if s.len() != 3 || d_t.shape() != s || d_x.shape() != s {
            return Err(shape_err(
                "features",
                format!("{:?}, {:?}, {:?}", s, d_t.shape(), d_x.shape()),
            ));
        }
        if !s[0].is_multiple_of(4) {
            return Err(shape_err("features", format!("{} channels is not a multiple of 4", s[0])));
        }
        Ok(DeepFeatures { d_rgb, d_t, d_x })
    }

    pub fn channels(&self) -> usize {
        self.d_rgb.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<R> {
    pub streams: [ParamStore<R>; 3],
    dilations: [usize; 3],
}

impl<R: Real> Backbone<R> {
    /// Three streams drawn from the same seed, so they start identical.
    pub fn new(channels: [usize; 3], dilations: [usize; 3], seed: u64) -> Self {
        let make = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = ParamStore::new();
            let mut inp = 3;
            for (i, &c) in channels.iter().enumerate() {
                p.push(format!("conv{}.w", i + 1), he_conv(c, inp, 3, &mut rng));
                p.push(format!("conv{}.b", i + 1), Tensor::zeros([c]));
                inp = c;
            }
            p
        };
        Backbone {
            streams: [make(), make(), make()],
            dilations,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.streams[0].at(4).shape()[0]
    }

    pub fn stream(&self, m: Modality) -> &ParamStore<R> {
        &self.streams[m.index()]
    }

    /// `x[N,3,h,w]` → `[N,C,h/2,w/2]` through bound stream parameters.
    pub fn forward(&self, g: &mut Graph<R>, p: &[Var], x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(shape_err("backbone", format!("expected [N,3,h,w], got {s:?}")));
        }
        if s[2] < MIN_INPUT || s[3] < MIN_INPUT {
            return Err(shape_err(
                "backbone",
                format!("input {}x{} is smaller than {MIN_INPUT}x{MIN_INPUT}", s[3], s[2]),
            ));
        }
        let mut h = x;
        for (i, &d) in self.dilations.iter().enumerate() {
            h = g.conv2d(h, p[2 * i], p[2 * i + 1], Conv2dSpec::new(1, d, d))?;
            h = g.relu(h)?;
            if i == 0 {
                h = g.max_pool2d(h, STRIDE)?;
            }
        }
        Ok(h)
    }

    /// Features of a single `[3,h,w]` image.
    pub fn extract(&self, m: Modality, image: &Tensor<R>) -> Result<Tensor<R>> {
        let s = image.shape().to_vec();
        if s.len() != 3 {
            return Err(shape_err("backbone", format!("expected [3,h,w], got {s:?}")));
        }
        let mut g = Graph::new();
        let p = self.stream(m).bind_frozen(&mut g);
        let x = g.constant(image.clone().reshape([1, s[0], s[1], s[2]])?);
        let y = self.forward(&mut g, &p, x)?;
        let out = g.shape(y)[1..].to_vec();
        g.value(y).clone().reshape(out)
    }

    /// Pre-pool output of the first stage, for equivariance checks.
    pub fn first_stage(&self, m: Modality, image: &Tensor<R>) -> Result<Tensor<R>> {
        let s = image.shape().to_vec();
        let mut g = Graph::new();
        let p = self.stream(m).bind_frozen(&mut g);
        let x = g.constant(image.clone().reshape([1, s[0], s[1], s[2]])?);
        let y = g.conv2d(x, p[0], p[1], Conv2dSpec::new(1, self.dilations[0], self.dilations[0]))?;
        let y = g.relu(y)?;
        let out = g.shape(y)[1..].to_vec();
        g.value(y).clone().reshape(out)
    }
}
