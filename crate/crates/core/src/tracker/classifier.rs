use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::{he_linear, ParamStore};
use crate::tensor::kernels::concat;
use crate::tensor::{AdamW, Graph, Real, Result, Tensor, Var};

/// Column of the positive logit; the negative logit is column 1.
pub const POS: usize = 0;
pub const NEG: usize = 1;

/// Three fully connected layers scoring RoI features as target/background.
#[derive(Debug, Clone, PartialEq)]
pub struct FcHead<R> {
    pub params: ParamStore<R>,
    pub dropout: f64,
}

impl<R: Real> FcHead<R> {
    pub fn new(in_dim: usize, dims: [usize; 2], dropout: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        p.push("fc4.w", he_linear(in_dim, dims[0], &mut rng));
        p.push("fc4.b", Tensor::zeros([dims[0]]));
        p.push("fc5.w", he_linear(dims[0], dims[1], &mut rng));
        p.push("fc5.b", Tensor::zeros([dims[1]]));
        p.push("fc6.w", Tensor::randn([dims[1], 2], 0.01, &mut rng));
        p.push("fc6.b", Tensor::zeros([2]));
        FcHead { params: p, dropout }
    }

    pub fn in_dim(&self) -> usize {
        self.params.at(0).shape()[0]
    }

    /// Learning rate per parameter slot: `fc_lr` for fc4/fc5, `fc6_lr` for fc6.
    pub fn slot_lrs(&self, fc_lr: f64, fc6_lr: f64) -> Vec<f64> {
        vec![fc_lr, fc_lr, fc_lr, fc_lr, fc6_lr, fc6_lr]
    }

    /// `x[N,D]` → logits `[N,2]`. Dropout applies only when `rng` is given.
    pub fn forward(&self, g: &mut Graph<R>, p: &[Var], x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let mut h = g.linear(x, p[0], p[1])?;
        h = g.relu(h)?;
        let mut rng = rng;
        if let Some(r) = rng.as_deref_mut() {
            h = g.dropout(h, self.dropout, r)?;
        }
        h = g.linear(h, p[2], p[3])?;
        h = g.relu(h)?;
        if let Some(r) = rng {
            h = g.dropout(h, self.dropout, r)?;
        }
        g.linear(h, p[4], p[5])
    }

    /// Evaluation-mode logits.
    pub fn logits(&self, feats: &Tensor<R>) -> Result<Tensor<R>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(feats.clone());
        let y = self.forward(&mut g, &p, x, None)?;
        Ok(g.value(y).clone())
    }

    /// `logit+ - logit-` per row.
    pub fn margins(&self, feats: &Tensor<R>) -> Result<Vec<f64>> {
        Ok(margins(&self.logits(feats)?))
    }

    /// Mini-batch cross-entropy fine-tuning. Each iteration draws
    /// `batch_pos` positives and `batch_neg` negatives by walking shuffled
    /// orders of both pools. Returns the loss per iteration.
    #[allow(clippy::too_many_arguments)]
    pub fn train(
        &mut self,
        opt: &mut AdamW<R>,
        pos: &Tensor<R>,
        neg: &Tensor<R>,
        iters: usize,
        batch_pos: usize,
        batch_neg: usize,
        lrs: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        let (np, nn) = (pos.shape()[0], neg.shape()[0]);
        let mut losses = Vec::with_capacity(iters);
        if np == 0 || nn == 0 {
            return Ok(losses);
        }
        let mut pos_walk = Walk::new(np, rng);
        let mut neg_walk = Walk::new(nn, rng);
        for _ in 0..iters {
            let pi = pos_walk.take(batch_pos.min(np).max(1), rng);
            let ni = neg_walk.take(batch_neg.min(nn).max(1), rng);
            let pb = rows(pos, &pi)?;
            let nb = rows(neg, &ni)?;
            let x = concat(&[&pb, &nb], 0)?;
            let mut labels = vec![POS; pi.len()];
            labels.extend(std::iter::repeat_n(NEG, ni.len()));
            let mut g = Graph::new();
            let p = self.params.bind(&mut g);
            let xv = g.constant(x);
            let mut drop_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let logits = self.forward(&mut g, &p, xv, Some(&mut drop_rng))?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            losses.push(g.value(loss).item().as_f64());
            g.backward(loss)?;
            self.params.apply(opt, &g, &p, lrs)?;
        }
        Ok(losses)
    }
}

/// Cycles through a shuffled index order, reshuffling when exhausted.
struct Walk {
    order: Vec<usize>,
    at: usize,
}

impl Walk {
    fn new(n: usize, rng: &mut impl Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Walk { order, at: 0 }
    }

    fn take(&mut self, k: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.at == self.order.len() {
                self.order.shuffle(rng);
                self.at = 0;
            }
            out.push(self.order[self.at]);
            self.at += 1;
        }
        out
    }
}

/// Selected rows of a `[N,D]` tensor.
pub fn rows<R: Real>(t: &Tensor<R>, idx: &[usize]) -> Result<Tensor<R>> {
    let d = t.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
    }
    Tensor::new([idx.len(), d], data)
}

pub fn margins<R: Real>(logits: &Tensor<R>) -> Vec<f64> {
    logits
        .data()
        .chunks(2)
        .map(|r| (r[POS] - r[NEG]).as_f64())
        .collect()
}

/// Softmax probability of the positive class from a logit margin.
pub fn positive_prob(margin: f64) -> f64 {
    1.0 / (1.0 + (-margin).exp())
}
