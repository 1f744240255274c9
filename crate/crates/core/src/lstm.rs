//! LSTM encoder with additive attention pooling and a two-layer tanh head.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{AqiClass, N_CLASSES};
use crate::error::{Error, Result};
use crate::eval::metrics::weighted_f1;
use crate::features::WindowInstance;

/// Instances per gradient chunk; chunks are reduced in order so results do
/// not depend on the thread count.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub hidden: usize,
    pub dropout: f64,
    pub l2: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub window: usize,
    /// Epochs without validation improvement before stopping; `None`
    /// trains for all epochs.
    pub patience: Option<usize>,
    pub val_fraction: f64,
    /// Keep every k-th training instance per device.
    pub instance_stride: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            hidden: 128,
            dropout: 0.2,
            l2: 0.001,
            learning_rate: 0.001,
            epochs: 1000,
            batch_size: 256,
            window: crate::features::DEFAULT_WINDOW,
            patience: Some(25),
            val_fraction: 0.1,
            instance_stride: 1,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 || self.window == 0 || self.instance_stride == 0 {
            return bad("hidden, epochs, batch_size, window and instance_stride must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.l2 >= 0.0 && self.learning_rate > 0.0) {
            return bad("l2 must be >= 0 and learning_rate > 0");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if self.patience == Some(0) {
            return bad("patience must be positive");
        }
        Ok(())
    }
}

/// Offsets of each parameter block inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub d: usize,
    pub h: usize,
    pub w: Range<usize>,
    pub u: Range<usize>,
    pub b: Range<usize>,
    pub wa: Range<usize>,
    pub ba: Range<usize>,
    pub v: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
    pub wo: Range<usize>,
    pub bo: Range<usize>,
    pub len: usize,
}

impl Layout {
    pub fn new(d: usize, h: usize) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let w = take(4 * h * d);
        let u = take(4 * h * h);
        let b = take(4 * h);
        let wa = take(h * h);
        let ba = take(h);
        let v = take(h);
        let w1 = take(h * h);
        let b1 = take(h);
        let w2 = take(h * h);
        let b2 = take(h);
        let wo = take(N_CLASSES * h);
        let bo = take(N_CLASSES);
        Layout {
            d,
            h,
            w,
            u,
            b,
            wa,
            ba,
            v,
            w1,
            b1,
            w2,
            b2,
            wo,
            bo,
            len: at,
        }
    }

    /// Blocks under the L2 penalty (all weights, no biases).
    pub fn penalized(&self) -> [Range<usize>; 7] {
        [
            self.w.clone(),
            self.u.clone(),
            self.wa.clone(),
            self.v.clone(),
            self.w1.clone(),
            self.w2.clone(),
            self.wo.clone(),
        ]
    }

    pub fn groups(&self) -> Vec<(&'static str, Range<usize>)> {
        vec![
            ("lstm_w", self.w.clone()),
            ("lstm_u", self.u.clone()),
            ("lstm_b", self.b.clone()),
            ("attn_w", self.wa.clone()),
            ("attn_b", self.ba.clone()),
            ("attn_v", self.v.clone()),
            ("head_w1", self.w1.clone()),
            ("head_b1", self.b1.clone()),
            ("head_w2", self.w2.clone()),
            ("head_b2", self.b2.clone()),
            ("out_w", self.wo.clone()),
            ("out_b", self.bo.clone()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceModel {
    pub d: usize,
    pub hidden: usize,
    pub seed: u64,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub probs: [f64; N_CLASSES],
    pub attention: Vec<f64>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// out[r] += sum_c m[r, c] x[c]
#[inline]
fn matvec_add(out: &mut [f64], m: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o += dot(&m[r * cols..(r + 1) * cols], x);
    }
}

/// out[c] += sum_r m[r, c] y[r]
#[inline]
fn matvec_t_add(out: &mut [f64], m: &[f64], y: &[f64]) {
    let cols = out.len();
    for (r, &yr) in y.iter().enumerate() {
        if yr == 0.0 {
            continue;
        }
        for (o, w) in out.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
            *o += w * yr;
        }
    }
}

/// g[r, c] += y[r] x[c]
#[inline]
fn outer_add(g: &mut [f64], y: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, &yr) in y.iter().enumerate() {
        if yr == 0.0 {
            continue;
        }
        for (gi, xi) in g[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *gi += yr * xi;
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Activations kept for the backward pass.
struct Cache {
    t: usize,
    /// Gate activations per step: i, f, g, o blocks of H.
    gates: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
    a: Vec<f64>,
    alpha: Vec<f64>,
    m0: Vec<f64>,
    d0: Vec<f64>,
    a1: Vec<f64>,
    m1: Vec<f64>,
    d1: Vec<f64>,
    a2: Vec<f64>,
    probs: [f64; N_CLASSES],
}

fn dropout_mask(n: usize, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Vec<f64> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect()
        }
        _ => vec![1.0; n],
    }
}

impl SequenceModel {
    pub fn zeros(d: usize, hidden: usize) -> Self {
        SequenceModel {
            d,
            hidden,
            seed: 0,
            params: vec![0.0; Layout::new(d, hidden).len],
        }
    }

    /// Xavier-uniform weights, zero biases, forget-gate bias 1.
    pub fn init(d: usize, hidden: usize, seed: u64) -> Self {
        let l = Layout::new(d, hidden);
        let mut p = vec![0.0; l.len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = hidden;
        let blocks = [
            (l.w.clone(), d, 4 * h),
            (l.u.clone(), h, 4 * h),
            (l.wa.clone(), h, h),
            (l.v.clone(), h, 1),
            (l.w1.clone(), h, h),
            (l.w2.clone(), h, h),
            (l.wo.clone(), h, N_CLASSES),
        ];
        for (r, fan_in, fan_out) in blocks {
            let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for x in &mut p[r] {
                *x = rng.random_range(-lim..lim);
            }
        }
        for x in &mut p[l.b.start + h..l.b.start + 2 * h] {
            *x = 1.0;
        }
        SequenceModel {
            d,
            hidden,
            seed,
            params: p,
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.d, self.hidden)
    }

    fn check_window(&self, window: &[&[f64]]) -> Result<()> {
        if window.is_empty() {
            return Err(Error::Empty("window"));
        }
        if let Some(r) = window.iter().find(|r| r.len() != self.d) {
            return Err(Error::ShapeMismatch {
                expected: format!("{} features per step", self.d),
                got: r.len().to_string(),
            });
        }
        Ok(())
    }

    fn forward_cache(
        &self,
        l: &Layout,
        window: &[&[f64]],
        dropout: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Cache> {
        let p = &self.params;
        let h = self.hidden;
        let t_len = window.len();
        let mut gates = vec![0.0; t_len * 4 * h];
        let mut c = vec![0.0; t_len * h];
        let mut tanh_c = vec![0.0; t_len * h];
        let mut hs = vec![0.0; t_len * h];
        let zero = vec![0.0; h];
        let mut z = vec![0.0; 4 * h];
        for (t, x) in window.iter().enumerate() {
            z.copy_from_slice(&p[l.b.clone()]);
            matvec_add(&mut z, &p[l.w.clone()], x);
            let (h_prev, c_prev) = if t == 0 {
                (&zero[..], &zero[..])
            } else {
                (&hs[(t - 1) * h..t * h], &c[(t - 1) * h..t * h])
            };
            matvec_add(&mut z, &p[l.u.clone()], h_prev);
            let g = &mut gates[t * 4 * h..(t + 1) * 4 * h];
            for k in 0..h {
                g[k] = sigmoid(z[k]);
                g[h + k] = sigmoid(z[h + k]);
                g[2 * h + k] = z[2 * h + k].tanh();
                g[3 * h + k] = sigmoid(z[3 * h + k]);
            }
            let mut new_c = vec![0.0; h];
            for k in 0..h {
                new_c[k] = g[h + k] * c_prev[k] + g[k] * g[2 * h + k];
            }
            for k in 0..h {
                let tc = new_c[k].tanh();
                tanh_c[t * h + k] = tc;
                hs[t * h + k] = g[3 * h + k] * tc;
            }
            c[t * h..(t + 1) * h].copy_from_slice(&new_c);
            if hs[t * h..(t + 1) * h].iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { step: t });
            }
        }

        let mut a = vec![0.0; t_len * h];
        let mut alpha = vec![0.0; t_len];
        for t in 0..t_len {
            let at = &mut a[t * h..(t + 1) * h];
            at.copy_from_slice(&p[l.ba.clone()]);
            matvec_add(at, &p[l.wa.clone()], &hs[t * h..(t + 1) * h]);
            for v in at.iter_mut() {
                *v = v.tanh();
            }
            alpha[t] = dot(&p[l.v.clone()], at);
        }
        softmax_in_place(&mut alpha);
        let mut ctx = vec![0.0; h];
        for t in 0..t_len {
            for k in 0..h {
                ctx[k] += alpha[t] * hs[t * h + k];
            }
        }

        let m0 = dropout_mask(h, dropout, rng.as_deref_mut());
        let d0: Vec<f64> = ctx.iter().zip(&m0).map(|(x, m)| x * m).collect();
        let mut a1 = p[l.b1.clone()].to_vec();
        matvec_add(&mut a1, &p[l.w1.clone()], &d0);
        a1.iter_mut().for_each(|v| *v = v.tanh());
        let m1 = dropout_mask(h, dropout, rng.as_deref_mut());
        let d1: Vec<f64> = a1.iter().zip(&m1).map(|(x, m)| x * m).collect();
        let mut a2 = p[l.b2.clone()].to_vec();
        matvec_add(&mut a2, &p[l.w2.clone()], &d1);
        a2.iter_mut().for_each(|v| *v = v.tanh());
        let mut logits = [0.0; N_CLASSES];
        logits.copy_from_slice(&p[l.bo.clone()]);
        matvec_add(&mut logits, &p[l.wo.clone()], &a2);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: t_len });
        }
        softmax_in_place(&mut logits);
        Ok(Cache {
            t: t_len,
            gates,
            c,
            tanh_c,
            h: hs,
            a,
            alpha,
            m0,
            d0,
            a1,
            m1,
            d1,
            a2,
            probs: logits,
        })
    }

    /// Class probabilities and attention weights. With `dropout` set, masks
    /// are drawn from the given generator at the given rate.
    pub fn forward(&self, window: &[&[f64]], dropout: Option<(f64, &mut ChaCha8Rng)>) -> Result<Forward> {
        self.check_window(window)?;
        let l = self.layout();
        let c = match dropout {
            Some((rate, rng)) => self.forward_cache(&l, window, rate, Some(rng))?,
            None => self.forward_cache(&l, window, 0.0, None)?,
        };
        Ok(Forward {
            probs: c.probs,
            attention: c.alpha,
        })
    }

    pub fn predict_proba(&self, window: &[&[f64]]) -> Result<[f64; N_CLASSES]> {
        Ok(self.forward(window, None)?.probs)
    }

    /// Accumulates the gradient of `scale * CE` for one instance.
    fn backward(&self, l: &Layout, window: &[&[f64]], cache: &Cache, label: usize, scale: f64, grad: &mut [f64]) {
        let p = &self.params;
        let h = self.hidden;
        let t_len = cache.t;

        let mut dlogits = cache.probs;
        dlogits[label] -= 1.0;
        dlogits.iter_mut().for_each(|v| *v *= scale);
        outer_add(&mut grad[l.wo.clone()], &dlogits, &cache.a2);
        for (g, d) in grad[l.bo.clone()].iter_mut().zip(&dlogits) {
            *g += d;
        }
        let mut dz2 = vec![0.0; h];
        matvec_t_add(&mut dz2, &p[l.wo.clone()], &dlogits);
        for (dz, a) in dz2.iter_mut().zip(&cache.a2) {
            *dz *= 1.0 - a * a;
        }
        outer_add(&mut grad[l.w2.clone()], &dz2, &cache.d1);
        for (g, d) in grad[l.b2.clone()].iter_mut().zip(&dz2) {
            *g += d;
        }
        let mut dz1 = vec![0.0; h];
        matvec_t_add(&mut dz1, &p[l.w2.clone()], &dz2);
        for k in 0..h {
            dz1[k] *= cache.m1[k] * (1.0 - cache.a1[k] * cache.a1[k]);
        }
        outer_add(&mut grad[l.w1.clone()], &dz1, &cache.d0);
        for (g, d) in grad[l.b1.clone()].iter_mut().zip(&dz1) {
            *g += d;
        }
        let mut dctx = vec![0.0; h];
        matvec_t_add(&mut dctx, &p[l.w1.clone()], &dz1);
        for k in 0..h {
            dctx[k] *= cache.m0[k];
        }

        // attention pooling
        let mut dh = vec![0.0; t_len * h];
        let mut dalpha = vec![0.0; t_len];
        for t in 0..t_len {
            let ht = &cache.h[t * h..(t + 1) * h];
            dalpha[t] = dot(ht, &dctx);
            for k in 0..h {
                dh[t * h + k] = cache.alpha[t] * dctx[k];
            }
        }
        let mean: f64 = cache.alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
        let mut dza = vec![0.0; h];
        for t in 0..t_len {
            let de = cache.alpha[t] * (dalpha[t] - mean);
            let at = &cache.a[t * h..(t + 1) * h];
            for (g, a) in grad[l.v.clone()].iter_mut().zip(at) {
                *g += de * a;
            }
            for k in 0..h {
                dza[k] = de * p[l.v.start + k] * (1.0 - at[k] * at[k]);
            }
            outer_add(&mut grad[l.wa.clone()], &dza, &cache.h[t * h..(t + 1) * h]);
            for (g, d) in grad[l.ba.clone()].iter_mut().zip(&dza) {
                *g += d;
            }
            matvec_t_add(&mut dh[t * h..(t + 1) * h], &p[l.wa.clone()], &dza);
        }

        // backpropagation through time
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        let zero = vec![0.0; h];
        for t in (0..t_len).rev() {
            let g = &cache.gates[t * 4 * h..(t + 1) * 4 * h];
            let c_prev = if t == 0 { &zero[..] } else { &cache.c[(t - 1) * h..t * h] };
            let h_prev = if t == 0 { &zero[..] } else { &cache.h[(t - 1) * h..t * h] };
            for k in 0..h {
                let dhk = dh[t * h + k] + dh_next[k];
                let (i, f, gg, o) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
                let tc = cache.tanh_c[t * h + k];
                let dc = dhk * o * (1.0 - tc * tc) + dc_next[k];
                dz[k] = dc * gg * i * (1.0 - i);
                dz[h + k] = dc * c_prev[k] * f * (1.0 - f);
                dz[2 * h + k] = dc * i * (1.0 - gg * gg);
                dz[3 * h + k] = dhk * tc * o * (1.0 - o);
                dc_next[k] = dc * f;
            }
            outer_add(&mut grad[l.w.clone()], &dz, window[t]);
            outer_add(&mut grad[l.u.clone()], &dz, h_prev);
            for (gb, d) in grad[l.b.clone()].iter_mut().zip(&dz) {
                *gb += d;
            }
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_add(&mut dh_next, &p[l.u.clone()], &dz);
        }
    }

    pub fn l2_penalty(&self, l2: f64) -> f64 {
        let l = self.layout();
        l2 * l
            .penalized()
            .into_iter()
            .map(|r| self.params[r].iter().map(|w| w * w).sum::<f64>())
            .sum::<f64>()
    }

    /// Mean cross-entropy over the batch plus the L2 penalty.
    pub fn loss(&self, batch: &[(Vec<&[f64]>, AqiClass)], l2: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut ce = 0.0;
        for (w, y) in batch {
            ce -= self.predict_proba(w)?[y.index()].ln();
        }
        Ok(ce / batch.len() as f64 + self.l2_penalty(l2))
    }

    /// Loss and gradient. `dropout_seeds` supplies one mask seed per
    /// instance; `None` disables dropout.
    pub fn loss_and_grad(
        &self,
        batch: &[(Vec<&[f64]>, AqiClass)],
        l2: f64,
        dropout: Option<(f64, &[u64])>,
    ) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        for (w, _) in batch {
            self.check_window(w)?;
        }
        let l = self.layout();
        let scale = 1.0 / batch.len() as f64;
        let parts: Vec<Result<(f64, Vec<f64>)>> = batch
            .par_chunks(GRAD_CHUNK)
            .enumerate()
            .map(|(ci, chunk)| {
                let mut grad = vec![0.0; l.len];
                let mut ce = 0.0;
                for (j, (w, y)) in chunk.iter().enumerate() {
                    let cache = match dropout {
                        Some((rate, seeds)) => {
                            let mut rng = ChaCha8Rng::seed_from_u64(seeds[ci * GRAD_CHUNK + j]);
                            self.forward_cache(&l, w, rate, Some(&mut rng))?
                        }
                        None => self.forward_cache(&l, w, 0.0, None)?,
                    };
                    ce -= cache.probs[y.index()].ln();
                    self.backward(&l, w, &cache, y.index(), scale, &mut grad);
                }
                Ok((ce, grad))
            })
            .collect();
        let mut grad = vec![0.0; l.len];
        let mut ce = 0.0;
        for part in parts {
            let (c, g) = part?;
            ce += c;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        for r in l.penalized() {
            for i in r {
                grad[i] += 2.0 * l2 * self.params[i];
            }
        }
        Ok((ce * scale + self.l2_penalty(l2), grad))
    }
}

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub train_loss: Vec<f64>,
    pub val_weighted_f1: Vec<f64>,
    pub n_train: usize,
    pub n_val: usize,
}

/// Splits instance indices into training and validation sets; the
/// validation set is the trailing `fraction` of each device's instances.
pub fn split_validation(instances: &[WindowInstance], fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut by_device: std::collections::BTreeMap<&str, Vec<usize>> = Default::default();
    for (i, inst) in instances.iter().enumerate() {
        by_device.entry(inst.device_id()).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (_, mut idx) in by_device {
        idx.sort_by_key(|&i| (instances[i].end_timestamp(), i));
        let n_val = if fraction > 0.0 && idx.len() >= 10 {
            ((idx.len() as f64) * fraction).ceil() as usize
        } else {
            0
        };
        let cut = idx.len() - n_val;
        train.extend_from_slice(&idx[..cut]);
        val.extend_from_slice(&idx[cut..]);
    }
    (train, val)
}

/// Minibatch Adam training with optional early stopping on validation
/// weighted F1. The returned model holds the best validation parameters.
pub fn train(
    instances: &[WindowInstance],
    labels: &[AqiClass],
    hp: &HyperParams,
    seed: u64,
) -> Result<(SequenceModel, TrainingLog)> {
    hp.validate()?;
    if instances.is_empty() {
        return Err(Error::Empty("training instances"));
    }
    if instances.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", instances.len()),
            got: labels.len().to_string(),
        });
    }
    let d = instances[0].step(0).len();
    let (train_idx, val_idx) = split_validation(instances, hp.val_fraction);
    let train_idx: Vec<usize> = train_idx.into_iter().step_by(hp.instance_stride).collect();
    let mut model = SequenceModel::init(d, hp.hidden, seed);
    let mut adam = Adam::new(model.params.len(), hp.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut log = TrainingLog {
        n_train: train_idx.len(),
        n_val: val_idx.len(),
        ..Default::default()
    };
    let val_windows: Vec<Vec<&[f64]>> = val_idx.iter().map(|&i| instances[i].steps()).collect();
    let val_true: Vec<AqiClass> = val_idx.iter().map(|&i| labels[i]).collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut stale = 0;
    let mut order = train_idx.clone();
    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch_idx in order.chunks(hp.batch_size) {
            let batch: Vec<(Vec<&[f64]>, AqiClass)> =
                batch_idx.iter().map(|&i| (instances[i].steps(), labels[i])).collect();
            let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
            let dropout = (hp.dropout > 0.0).then_some((hp.dropout, &seeds[..]));
            let (loss, grad) = model.loss_and_grad(&batch, hp.l2, dropout)?;
            adam.step(&mut model.params, &grad);
            loss_sum += loss * batch.len() as f64;
        }
        log.train_loss.push(loss_sum / order.len() as f64);
        log.epochs_run = epoch + 1;
        if val_windows.is_empty() {
            continue;
        }
        let pred: Vec<AqiClass> = val_windows
            .par_iter()
            .map(|w| model.predict_proba(w).and_then(|p| AqiClass::from_index(crate::rf::argmax(&p))))
            .collect::<Result<_>>()?;
        let f1 = weighted_f1(&val_true, &pred)?;
        log.val_weighted_f1.push(f1);
        if best.as_ref().is_none_or(|(b, _)| f1 > *b) {
            best = Some((f1, model.params.clone()));
            log.best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
            if hp.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn random_window(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Vec<Vec<f64>> {
        (0..t).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    fn refs(w: &[Vec<f64>]) -> Vec<&[f64]> {
        w.iter().map(|r| r.as_slice()).collect()
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = SequenceModel::zeros(5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_window(&mut rng, 7, 5);
        let f = m.forward(&refs(&w), None).unwrap();
        assert_eq!(f.probs, [0.2; N_CLASSES]);
        for a in &f.attention {
            assert_eq!(*a, 1.0 / 7.0);
        }
        let batch = vec![(refs(&w), AqiClass::new(3).unwrap())];
        assert_abs_diff_eq!(m.loss(&batch, 0.5).unwrap(), 5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn attention_normalized_and_inference_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..100 {
            let m = SequenceModel::init(6, 5, trial);
            let w = random_window(&mut rng, 4, 6);
            let a = m.forward(&refs(&w), None).unwrap();
            let b = m.forward(&refs(&w), None).unwrap();
            assert_eq!(a, b);
            assert_abs_diff_eq!(a.attention.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            assert_abs_diff_eq!(a.probs.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            assert!(a.probs.iter().all(|p| *p > 0.0));
        }
    }

    #[test]
    fn single_step_attention_is_one() {
        let m = SequenceModel::init(3, 4, 9);
        let f = m.forward(&[&[0.1, 0.2, 0.3]], None).unwrap();
        assert_eq!(f.attention, vec![1.0]);
    }

    #[test]
    fn shape_errors() {
        let m = SequenceModel::init(3, 4, 9);
        assert!(m.forward(&[&[0.1, 0.2]], None).is_err());
        assert!(m.forward(&[], None).is_err());
    }

    #[test]
    fn l2_term() {
        let m = SequenceModel::init(3, 4, 9);
        let w = [vec![0.1, 0.2, 0.3]];
        let batch = vec![(refs(&w), AqiClass::new(1).unwrap())];
        let ce = m.loss(&batch, 0.0).unwrap();
        let with = m.loss(&batch, 0.01).unwrap();
        assert_abs_diff_eq!(with - ce, m.l2_penalty(0.01), epsilon = 1e-12);
        assert!(m.l2_penalty(0.01) > 0.0);
    }

    #[test]
    fn confident_correct_prediction_has_zero_ce() {
        let mut m = SequenceModel::zeros(2, 2);
        let l = m.layout();
        m.params[l.bo.start + 2] = 1e4;
        let w = [vec![0.0, 0.0]];
        let batch = vec![(refs(&w), AqiClass::new(3).unwrap())];
        assert_eq!(m.loss(&batch, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn dropout_masks_are_inverted() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = dropout_mask(10_000, 0.2, Some(&mut rng));
        let kept = m.iter().filter(|&&x| x > 0.0).count() as f64 / 1e4;
        assert!((kept - 0.8).abs() < 0.02);
        assert!(m.iter().all(|&x| x == 0.0 || x == 1.25));
        assert_eq!(dropout_mask(3, 0.2, None), vec![1.0; 3]);
    }
}
