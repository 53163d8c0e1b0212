//! Feature-level interaction: channel-sliced one-pixel shifts of the visible
//! and thermal features, then paired cross-modal attention whose sum is
//! concatenated with the X-modality features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::DeepFeatures;
use crate::config::ShiftFill;
use crate::nn::ParamStore;
use crate::tensor::kernels::concat;
use crate::tensor::{shape_err, Graph, Real, Result, Tensor, Var};

/// Direction sets for the four channel slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftOrder {
    /// +W, -W, +H, -H.
    Rgb,
    /// +H, -H, +W, -W.
    Thermal,
}

impl ShiftOrder {
    /// `(dy, dx)` per slice.
    pub fn offsets(self) -> [(isize, isize); 4] {
        match self {
            ShiftOrder::Rgb => [(0, 1), (0, -1), (1, 0), (-1, 0)],
            ShiftOrder::Thermal => [(1, 0), (-1, 0), (0, 1), (0, -1)],
        }
    }
}

/// Source index for every output element of a shift of a `[C,H,W]` tensor;
/// `None` marks zero-filled cells.
pub fn shift_index(shape: &[usize], order: ShiftOrder, fill: ShiftFill) -> Result<Vec<Option<usize>>> {
    let &[c, h, w] = shape else {
        return Err(shape_err("sfts", format!("expected [C,H,W], got {shape:?}")));
    };
    if c % 4 != 0 {
        return Err(shape_err("sfts", format!("{c} channels is not a multiple of 4")));
    }
    if h < 2 || w < 2 {
        return Err(shape_err("sfts", format!("spatial size {h}x{w} is below 2x2")));
    }
    let slice = c / 4;
    let offsets = order.offsets();
    let mut idx = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let (dy, dx) = offsets[ch / slice];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (y as isize - dy, x as isize - dx);
                let own = (ch * h + y) * w + x;
                let src = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    Some((ch * h + sy as usize) * w + sx as usize)
                } else {
                    match fill {
                        ShiftFill::Zero => None,
                        ShiftFill::Copy => Some(own),
                    }
                };
                idx.push(src);
            }
        }
    }
    Ok(idx)
}

pub fn sfts_shift<R: Real>(d: &Tensor<R>, order: ShiftOrder, fill: ShiftFill) -> Result<Tensor<R>> {
    let idx = shift_index(d.shape(), order, fill)?;
    let src = d.data();
    Ok(Tensor::from_fn(d.shape().to_vec(), |i| idx[i].map_or(R::zero(), |s| src[s])))
}

/// Outputs of the cross-modal attention, all `[C,H,W]` except `d_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps<R> {
    /// Thermal queries attending to visible keys and values.
    pub d_rgb_t: Tensor<R>,
    /// Visible queries attending to thermal keys and values.
    pub d_t_rgb: Tensor<R>,
    pub att_rgbt: Tensor<R>,
    /// `[2C,H,W]`: X-modality features followed by `att_rgbt`.
    pub d_f: Tensor<R>,
}

/// Graph handles of the same quantities.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub d_rgb_t: Var,
    pub d_t_rgb: Var,
    pub att_rgbt: Var,
    pub d_f: Var,
}

/// Slot order inside the parameter store.
const PROJ: [&str; 6] = ["rgb.q", "rgb.k", "rgb.v", "t.q", "t.k", "t.v"];
const RGB_Q: usize = 0;
const RGB_K: usize = 1;
const RGB_V: usize = 2;
const T_Q: usize = 3;
const T_K: usize = 4;
const T_V: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Fim<R> {
    pub params: ParamStore<R>,
    pub fill: ShiftFill,
    pub dk: f64,
}

impl<R: Real> Fim<R> {
    /// Query/key/value projections start at identity plus `N(0, noise²)`.
    pub fn new(channels: usize, noise: f64, fill: ShiftFill, dk: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for name in PROJ {
            let mut w = Tensor::<R>::randn([channels, channels], noise, &mut rng);
            for i in 0..channels {
                let v = w.get(&[i, i]);
                w.set(&[i, i], v + R::one());
            }
            params.push(format!("{name}.w"), w);
            params.push(format!("{name}.b"), Tensor::zeros([channels]));
        }
        Fim { params, fill, dk }
    }

    pub fn channels(&self) -> usize {
        self.params.at(0).shape()[0]
    }

    /// Swaps the visible and thermal projection sets.
    pub fn swapped(&self) -> Self {
        let mut out = self.clone();
        for k in 0..6 {
            *out.params.at_mut(k) = self.params.at((k + 6) % 12).clone();
            *out.params.at_mut(k + 6) = self.params.at(k).clone();
        }
        out
    }

    fn tokens(g: &mut Graph<R>, x: Var) -> Result<(Var, [usize; 3])> {
        let s = g.shape(x).to_vec();
        let &[c, h, w] = &s[..] else {
            return Err(shape_err("mfit", format!("expected [C,H,W], got {s:?}")));
        };
        let flat = g.reshape(x, &[c, h * w])?;
        Ok((g.transpose(flat)?, [c, h, w]))
    }

    fn untokens(g: &mut Graph<R>, t: Var, shape: [usize; 3]) -> Result<Var> {
        let back = g.transpose(t)?;
        g.reshape(back, &shape)
    }

    fn project(g: &mut Graph<R>, p: &[Var], tokens: Var, slot: usize) -> Result<Var> {
        g.linear(tokens, p[2 * slot], p[2 * slot + 1])
    }

    /// `softmax(q kᵀ / sqrt(dk)) v` on token matrices.
    fn attend(&self, g: &mut Graph<R>, q: Var, k: Var, v: Var) -> Result<Var> {
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / self.dk.sqrt())?;
        let weights = g.softmax(scores)?;
        g.matmul(weights, v)
    }

    /// Attention over already-shifted inputs.
    pub fn attention_graph(&self, g: &mut Graph<R>, p: &[Var], rgb_s: Var, t_s: Var, x: Var) -> Result<AttentionVars> {
        let (a, shape) = Self::tokens(g, rgb_s)?;
        let (b, shape_t) = Self::tokens(g, t_s)?;
        if shape != shape_t || g.shape(x) != shape {
            return Err(shape_err(
                "mfit",
                format!("{shape:?} / {shape_t:?} / {:?}", g.shape(x)),
            ));
        }
        let q_rgb = Self::project(g, p, a, RGB_Q)?;
        let k_rgb = Self::project(g, p, a, RGB_K)?;
        let v_rgb = Self::project(g, p, a, RGB_V)?;
        let q_t = Self::project(g, p, b, T_Q)?;
        let k_t = Self::project(g, p, b, T_K)?;
        let v_t = Self::project(g, p, b, T_V)?;
        let rgb_t = self.attend(g, q_t, k_rgb, v_rgb)?;
        let t_rgb = self.attend(g, q_rgb, k_t, v_t)?;
        let d_rgb_t = Self::untokens(g, rgb_t, shape)?;
        let d_t_rgb = Self::untokens(g, t_rgb, shape)?;
        let att_rgbt = g.add(d_rgb_t, d_t_rgb)?;
        let d_f = g.concat(&[x, att_rgbt], 0)?;
        Ok(AttentionVars {
            d_rgb_t,
            d_t_rgb,
            att_rgbt,
            d_f,
        })
    }

    /// Shift then attend, on graph variables.
    pub fn forward_graph(&self, g: &mut Graph<R>, p: &[Var], d_rgb: Var, d_t: Var, d_x: Var) -> Result<AttentionVars> {
        let shape = g.shape(d_rgb).to_vec();
        let rgb_s = g.gather(d_rgb, shift_index(&shape, ShiftOrder::Rgb, self.fill)?, &shape)?;
        let shape_t = g.shape(d_t).to_vec();
        let t_s = g.gather(d_t, shift_index(&shape_t, ShiftOrder::Thermal, self.fill)?, &shape_t)?;
        self.attention_graph(g, p, rgb_s, t_s, d_x)
    }

    fn collect(g: &Graph<R>, v: AttentionVars) -> AttentionMaps<R> {
        AttentionMaps {
            d_rgb_t: g.value(v.d_rgb_t).clone(),
            d_t_rgb: g.value(v.d_t_rgb).clone(),
            att_rgbt: g.value(v.att_rgbt).clone(),
            d_f: g.value(v.d_f).clone(),
        }
    }

    pub fn mfit_attention(&self, d_rgb_s: &Tensor<R>, d_t_s: &Tensor<R>, d_x: &Tensor<R>) -> Result<AttentionMaps<R>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let a = g.constant(d_rgb_s.clone());
        let b = g.constant(d_t_s.clone());
        let x = g.constant(d_x.clone());
        let v = self.attention_graph(&mut g, &p, a, b, x)?;
        Ok(Self::collect(&g, v))
    }

    pub fn forward(&self, df: &DeepFeatures<R>) -> Result<AttentionMaps<R>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let a = g.constant(df.d_rgb.clone());
        let b = g.constant(df.d_t.clone());
        let x = g.constant(df.d_x.clone());
        let v = self.forward_graph(&mut g, &p, a, b, x)?;
        Ok(Self::collect(&g, v))
    }
}

/// `concat(d_x, d_rgb + d_t)`: the fusion used when the interaction module is off.
pub fn additive_fusion<R: Real>(df: &DeepFeatures<R>) -> Result<Tensor<R>> {
    let sum = Tensor::from_fn(df.d_rgb.shape().to_vec(), |i| df.d_rgb.data()[i] + df.d_t.data()[i]);
    concat(&[&df.d_x, &sum], 0)
}

pub fn additive_fusion_graph<R: Real>(g: &mut Graph<R>, d_rgb: Var, d_t: Var, d_x: Var) -> Result<Var> {
    let sum = g.add(d_rgb, d_t)?;
    g.concat(&[d_x, sum], 0)
}

/// Fused `[2C,H,W]` features, through the interaction module when given.
pub fn fim_forward<R: Real>(df: &DeepFeatures<R>, fim: Option<&Fim<R>>) -> Result<Tensor<R>> {
    match fim {
        Some(f) => Ok(f.forward(df)?.d_f),
        None => additive_fusion(df),
    }
}

/// Channel mean of a `[C,H,W]` map as `[1,H,W]`.
pub fn channel_mean<R: Real>(t: &Tensor<R>) -> Tensor<R> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let n = h * w;
    let d = t.data();
    let inv = R::of(1.0 / c as f64);
    Tensor::from_fn([1, h, w], |i| (0..c).fold(R::zero(), |acc, ch| acc + d[ch * n + i]) * inv)
}
