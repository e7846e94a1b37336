//! Recurrent dueling Q-network with a treatment-prediction head.
//!
//! Layout: a two-layer ReLU encoder feeds a single GRU cell (PyTorch gate
//! convention: reset, update, new). The hidden state drives a value head, an
//! advantage head and a small sigmoid treatment head, each two fully connected
//! layers. `Q = V + A - mean(A)`.
//!
//! All parameters live in one flat vector described by a named tensor layout,
//! which keeps the optimizer, target syncing, checkpoints and finite-difference
//! checks trivial. Gradients are hand-derived; the treatment head's gradient
//! into the GRU and encoder can be sign-flipped (gradient reversal).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::N_ACTIONS;
use crate::error::{ensure, Error, Result};

pub const HIDDEN: usize = 32;
pub const TREATMENT_HIDDEN: usize = 8;
/// Probabilities fed to the cross-entropy are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

/// Sizes of one network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetShape {
    pub obs_dim: usize,
    pub n_actions: usize,
    pub hidden: usize,
    pub treatment_hidden: usize,
    /// Also feed the condition flag (last observation entry) straight into
    /// the value and advantage heads, next to the hidden state.
    pub flag_to_heads: bool,
}

impl NetShape {
    pub fn new(obs_dim: usize, flag_to_heads: bool) -> Self {
        NetShape {
            obs_dim,
            n_actions: N_ACTIONS,
            hidden: HIDDEN,
            treatment_hidden: TREATMENT_HIDDEN,
            flag_to_heads,
        }
    }

    fn head_in(&self) -> usize {
        self.hidden + self.flag_to_heads as usize
    }
}

/// Named slice of the flat parameter vector; weights are row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: &'static str,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Encoder and GRU parameters feed the shared hidden state.
    pub fn is_shared(&self) -> bool {
        self.name.starts_with("encoder.") || self.name.starts_with("gru.")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Offsets {
    enc1_w: usize,
    enc1_b: usize,
    enc2_w: usize,
    enc2_b: usize,
    w_ih: usize,
    w_hh: usize,
    b_ih: usize,
    b_hh: usize,
    val1_w: usize,
    val1_b: usize,
    val2_w: usize,
    val2_b: usize,
    adv1_w: usize,
    adv1_b: usize,
    adv2_w: usize,
    adv2_b: usize,
    trt1_w: usize,
    trt1_b: usize,
    trt2_w: usize,
    trt2_b: usize,
}

fn build_layout(s: &NetShape) -> (Vec<TensorSpec>, Offsets, usize) {
    let mut specs = Vec::new();
    let mut next = 0;
    let mut push = |name: &'static str, rows: usize, cols: usize| {
        specs.push(TensorSpec {
            name,
            offset: next,
            rows,
            cols,
        });
        next += rows * cols;
        next - rows * cols
    };
    let (h, hi, th) = (s.hidden, s.head_in(), s.treatment_hidden);
    let o = Offsets {
        enc1_w: push("encoder.fc1.weight", h, s.obs_dim),
        enc1_b: push("encoder.fc1.bias", h, 1),
        enc2_w: push("encoder.fc2.weight", h, h),
        enc2_b: push("encoder.fc2.bias", h, 1),
        w_ih: push("gru.weight_ih", 3 * h, h),
        w_hh: push("gru.weight_hh", 3 * h, h),
        b_ih: push("gru.bias_ih", 3 * h, 1),
        b_hh: push("gru.bias_hh", 3 * h, 1),
        val1_w: push("value.fc1.weight", h, hi),
        val1_b: push("value.fc1.bias", h, 1),
        val2_w: push("value.fc2.weight", 1, h),
        val2_b: push("value.fc2.bias", 1, 1),
        adv1_w: push("advantage.fc1.weight", h, hi),
        adv1_b: push("advantage.fc1.bias", h, 1),
        adv2_w: push("advantage.fc2.weight", s.n_actions, h),
        adv2_b: push("advantage.fc2.bias", s.n_actions, 1),
        trt1_w: push("treatment.fc1.weight", th, h),
        trt1_b: push("treatment.fc1.bias", th, 1),
        trt2_w: push("treatment.fc2.weight", 1, th),
        trt2_b: push("treatment.fc2.bias", 1, 1),
    };
    (specs, o, next)
}

/// Intermediate values of one forward step, kept for backpropagation.
#[derive(Debug, Clone, Default)]
pub struct StepCache {
    pub obs: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    x: Vec<f64>,
    pub h_prev: Vec<f64>,
    gi: Vec<f64>,
    gh: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    pub h: Vec<f64>,
    hin: Vec<f64>,
    vz: Vec<f64>,
    va: Vec<f64>,
    pub value: f64,
    az: Vec<f64>,
    aa: Vec<f64>,
    pub advantage: Vec<f64>,
    pub q: Vec<f64>,
    tz: Vec<f64>,
    ta: Vec<f64>,
    pub logit: f64,
    /// Treatment probability `sigmoid(logit)`.
    pub prob: f64,
}

impl StepCache {
    /// Pre-activations of every ReLU unit (used to keep finite-difference
    /// checks away from kinks).
    pub fn relu_preactivations(&self) -> impl Iterator<Item = f64> + '_ {
        self.z1
            .iter()
            .chain(&self.z2)
            .chain(&self.vz)
            .chain(&self.az)
            .chain(&self.tz)
            .copied()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        *o = acc;
    }
}

/// Accumulates `dW += dout x^T`, `db += dout` and, when requested, `dx = W^T dout`.
fn affine_backward(
    w: &[f64],
    x: &[f64],
    dout: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let cols = x.len();
    for (r, &d) in dout.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        gb[r] += d;
        let grow = &mut gw[r * cols..(r + 1) * cols];
        for (g, xi) in grow.iter_mut().zip(x) {
            *g += d * xi;
        }
    }
    if let Some(dx) = dx {
        dx.fill(0.0);
        for (r, &d) in dout.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &w[r * cols..(r + 1) * cols];
            for (o, wi) in dx.iter_mut().zip(row) {
                *o += d * wi;
            }
        }
    }
}

fn resize(v: &mut Vec<f64>, n: usize) {
    v.clear();
    v.resize(n, 0.0);
}

/// Learnable parameters of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    shape: NetShape,
    specs: Vec<TensorSpec>,
    off: Offsets,
    params: Vec<f64>,
}

impl QNetwork {
    /// Fresh network with weights and biases uniform in `+-1/sqrt(fan_in)`.
    pub fn new(shape: NetShape, seed: u64) -> Self {
        let (specs, off, n) = build_layout(&shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; n];
        for s in &specs {
            let fan_in = if s.name.starts_with("gru.") {
                shape.hidden
            } else if s.name.ends_with(".weight") {
                s.cols
            } else {
                // Bias: same fan-in as its weight (the preceding tensor).
                specs
                    .iter()
                    .find(|w| w.name == s.name.replace(".bias", ".weight"))
                    .map(|w| w.cols)
                    .unwrap_or(1)
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[s.range()] {
                *p = rng.random_range(-bound..=bound);
            }
        }
        QNetwork {
            shape,
            specs,
            off,
            params,
        }
    }

    /// Network with the given parameter vector.
    pub fn from_params(shape: NetShape, params: Vec<f64>) -> Result<Self> {
        let (specs, off, n) = build_layout(&shape);
        ensure!(params.len() == n, "expected {n} parameters, got {}", params.len());
        Ok(QNetwork {
            shape,
            specs,
            off,
            params,
        })
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.params[s.range()])
    }

    /// Name of the tensor holding flat parameter `index`.
    pub fn param_name(&self, index: usize) -> &'static str {
        self.specs
            .iter()
            .find(|s| s.range().contains(&index))
            .map(|s| s.name)
            .unwrap_or("<out of range>")
    }

    /// Copies every parameter from `other` (target-network sync).
    pub fn copy_from(&mut self, other: &QNetwork) {
        debug_assert_eq!(self.shape, other.shape);
        self.params.copy_from_slice(&other.params);
    }

    pub fn zero_hidden(&self) -> Vec<f64> {
        vec![0.0; self.shape.hidden]
    }

    pub fn new_grad(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    fn p(&self, at: usize, len: usize) -> &[f64] {
        &self.params[at..at + len]
    }

    /// One recurrent step: fills `c` with every intermediate value.
    pub fn step_into(&self, obs: &[f64], h_prev: &[f64], c: &mut StepCache) -> Result<()> {
        let s = &self.shape;
        let o = &self.off;
        let (h, hi, th, na) = (s.hidden, s.head_in(), s.treatment_hidden, s.n_actions);
        ensure!(
            obs.len() == s.obs_dim,
            "observation has {} entries, network expects {}",
            obs.len(),
            s.obs_dim
        );
        ensure!(h_prev.len() == h, "hidden state must have {h} entries");

        c.obs.clear();
        c.obs.extend_from_slice(obs);
        c.h_prev.clear();
        c.h_prev.extend_from_slice(h_prev);
        for v in [&mut c.z1, &mut c.a1, &mut c.z2, &mut c.x] {
            resize(v, h);
        }
        affine(self.p(o.enc1_w, h * s.obs_dim), self.p(o.enc1_b, h), obs, &mut c.z1);
        for (a, z) in c.a1.iter_mut().zip(&c.z1) {
            *a = z.max(0.0);
        }
        affine(self.p(o.enc2_w, h * h), self.p(o.enc2_b, h), &c.a1, &mut c.z2);
        for (a, z) in c.x.iter_mut().zip(&c.z2) {
            *a = z.max(0.0);
        }

        resize(&mut c.gi, 3 * h);
        resize(&mut c.gh, 3 * h);
        affine(self.p(o.w_ih, 3 * h * h), self.p(o.b_ih, 3 * h), &c.x, &mut c.gi);
        affine(self.p(o.w_hh, 3 * h * h), self.p(o.b_hh, 3 * h), h_prev, &mut c.gh);
        for v in [&mut c.r, &mut c.z, &mut c.n, &mut c.h] {
            resize(v, h);
        }
        #[allow(clippy::needless_range_loop)]
        for k in 0..h {
            let r = sigmoid(c.gi[k] + c.gh[k]);
            let z = sigmoid(c.gi[h + k] + c.gh[h + k]);
            let n = (c.gi[2 * h + k] + r * c.gh[2 * h + k]).tanh();
            c.r[k] = r;
            c.z[k] = z;
            c.n[k] = n;
            c.h[k] = (1.0 - z) * n + z * h_prev[k];
        }

        c.hin.clear();
        c.hin.extend_from_slice(&c.h);
        if s.flag_to_heads {
            c.hin.push(obs[s.obs_dim - 1]);
        }

        resize(&mut c.vz, h);
        resize(&mut c.va, h);
        affine(self.p(o.val1_w, h * hi), self.p(o.val1_b, h), &c.hin, &mut c.vz);
        for (a, z) in c.va.iter_mut().zip(&c.vz) {
            *a = z.max(0.0);
        }
        let mut v = [0.0];
        affine(self.p(o.val2_w, h), self.p(o.val2_b, 1), &c.va, &mut v);
        c.value = v[0];

        resize(&mut c.az, h);
        resize(&mut c.aa, h);
        resize(&mut c.advantage, na);
        affine(self.p(o.adv1_w, h * hi), self.p(o.adv1_b, h), &c.hin, &mut c.az);
        for (a, z) in c.aa.iter_mut().zip(&c.az) {
            *a = z.max(0.0);
        }
        affine(self.p(o.adv2_w, na * h), self.p(o.adv2_b, na), &c.aa, &mut c.advantage);
        c.q.clear();
        c.q.extend(dueling_combine(c.value, &c.advantage));

        resize(&mut c.tz, th);
        resize(&mut c.ta, th);
        affine(self.p(o.trt1_w, th * h), self.p(o.trt1_b, th), &c.h, &mut c.tz);
        for (a, z) in c.ta.iter_mut().zip(&c.tz) {
            *a = z.max(0.0);
        }
        let mut l = [0.0];
        affine(self.p(o.trt2_w, th), self.p(o.trt2_b, 1), &c.ta, &mut l);
        c.logit = l[0];
        c.prob = sigmoid(c.logit);
        Ok(())
    }

    /// One recurrent step returning a fresh cache.
    pub fn step(&self, obs: &[f64], h_prev: &[f64]) -> Result<StepCache> {
        let mut c = StepCache::default();
        self.step_into(obs, h_prev, &mut c)?;
        Ok(c)
    }

    /// Runs a whole sequence from a zero hidden state.
    pub fn forward_sequence<O: AsRef<[f64]>>(&self, obs: &[O]) -> Result<Vec<StepCache>> {
        let mut out: Vec<StepCache> = Vec::with_capacity(obs.len());
        let mut h = self.zero_hidden();
        for o in obs {
            let c = self.step(o.as_ref(), &h)?;
            h.copy_from_slice(&c.h);
            out.push(c);
        }
        Ok(out)
    }

    /// Backpropagates one step.
    ///
    /// `dq` is the loss gradient with respect to the Q-values, `dlogit` with
    /// respect to the treatment logit, and `dh_next` the gradient arriving at
    /// this step's output hidden state from later steps. With `reversal` the
    /// treatment head's contribution to the hidden-state gradient is negated
    /// before it reaches the GRU and encoder. Gradients are accumulated into
    /// `grad`; the gradient with respect to the previous hidden state is
    /// written to `dh_prev`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_step(
        &self,
        c: &StepCache,
        dq: &[f64],
        dlogit: f64,
        dh_next: &[f64],
        reversal: bool,
        grad: &mut [f64],
        dh_prev: &mut [f64],
    ) {
        let s = &self.shape;
        let o = self.off;
        let (h, hi, th, na) = (s.hidden, s.head_in(), s.treatment_hidden, s.n_actions);
        let mut dh: Vec<f64> = dh_next.to_vec();

        // Dueling combine.
        let dv: f64 = dq.iter().sum();
        let mean_dq = dv / na as f64;
        let dadv: Vec<f64> = dq.iter().map(|d| d - mean_dq).collect();

        let mut dhin = vec![0.0; hi];
        let mut tmp_h = vec![0.0; h];
        let mut tmp_hin = vec![0.0; hi];

        if dv != 0.0 || dadv.iter().any(|&d| d != 0.0) {
            // Value head.
            {
                let (gw, gb) = split2(grad, o.val2_w, h, o.val2_b, 1);
                affine_backward(self.p(o.val2_w, h), &c.va, &[dv], gw, gb, Some(&mut tmp_h));
            }
            for (d, z) in tmp_h.iter_mut().zip(&c.vz) {
                if *z <= 0.0 {
                    *d = 0.0;
                }
            }
            {
                let (gw, gb) = split2(grad, o.val1_w, h * hi, o.val1_b, h);
                affine_backward(self.p(o.val1_w, h * hi), &c.hin, &tmp_h, gw, gb, Some(&mut tmp_hin));
            }
            for (a, b) in dhin.iter_mut().zip(&tmp_hin) {
                *a += b;
            }
            // Advantage head.
            {
                let (gw, gb) = split2(grad, o.adv2_w, na * h, o.adv2_b, na);
                affine_backward(self.p(o.adv2_w, na * h), &c.aa, &dadv, gw, gb, Some(&mut tmp_h));
            }
            for (d, z) in tmp_h.iter_mut().zip(&c.az) {
                if *z <= 0.0 {
                    *d = 0.0;
                }
            }
            {
                let (gw, gb) = split2(grad, o.adv1_w, h * hi, o.adv1_b, h);
                affine_backward(self.p(o.adv1_w, h * hi), &c.hin, &tmp_h, gw, gb, Some(&mut tmp_hin));
            }
            for (a, b) in dhin.iter_mut().zip(&tmp_hin) {
                *a += b;
            }
            for k in 0..h {
                dh[k] += dhin[k];
            }
        }

        if dlogit != 0.0 {
            let mut dta = vec![0.0; th];
            {
                let (gw, gb) = split2(grad, o.trt2_w, th, o.trt2_b, 1);
                affine_backward(self.p(o.trt2_w, th), &c.ta, &[dlogit], gw, gb, Some(&mut dta));
            }
            for (d, z) in dta.iter_mut().zip(&c.tz) {
                if *z <= 0.0 {
                    *d = 0.0;
                }
            }
            {
                let (gw, gb) = split2(grad, o.trt1_w, th * h, o.trt1_b, th);
                affine_backward(self.p(o.trt1_w, th * h), &c.h, &dta, gw, gb, Some(&mut tmp_h));
            }
            let sign = if reversal { -1.0 } else { 1.0 };
            for k in 0..h {
                dh[k] += sign * tmp_h[k];
            }
        }

        // GRU cell.
        let mut dgi = vec![0.0; 3 * h];
        let mut dgh = vec![0.0; 3 * h];
        for k in 0..h {
            let (r, z, n) = (c.r[k], c.z[k], c.n[k]);
            let d = dh[k];
            let dn = d * (1.0 - z);
            let dz = d * (c.h_prev[k] - n);
            dh_prev[k] = d * z;
            let dan = dn * (1.0 - n * n);
            let daz = dz * z * (1.0 - z);
            let dr = dan * c.gh[2 * h + k];
            let dar = dr * r * (1.0 - r);
            dgi[k] = dar;
            dgi[h + k] = daz;
            dgi[2 * h + k] = dan;
            dgh[k] = dar;
            dgh[h + k] = daz;
            dgh[2 * h + k] = dan * r;
        }
        {
            let (gw, gb) = split2(grad, o.w_hh, 3 * h * h, o.b_hh, 3 * h);
            affine_backward(self.p(o.w_hh, 3 * h * h), &c.h_prev, &dgh, gw, gb, Some(&mut tmp_h));
        }
        for k in 0..h {
            dh_prev[k] += tmp_h[k];
        }
        let mut dx = vec![0.0; h];
        {
            let (gw, gb) = split2(grad, o.w_ih, 3 * h * h, o.b_ih, 3 * h);
            affine_backward(self.p(o.w_ih, 3 * h * h), &c.x, &dgi, gw, gb, Some(&mut dx));
        }

        // Encoder.
        for (d, z) in dx.iter_mut().zip(&c.z2) {
            if *z <= 0.0 {
                *d = 0.0;
            }
        }
        {
            let (gw, gb) = split2(grad, o.enc2_w, h * h, o.enc2_b, h);
            affine_backward(self.p(o.enc2_w, h * h), &c.a1, &dx, gw, gb, Some(&mut tmp_h));
        }
        for (d, z) in tmp_h.iter_mut().zip(&c.z1) {
            if *z <= 0.0 {
                *d = 0.0;
            }
        }
        let (gw, gb) = split2(grad, o.enc1_w, h * s.obs_dim, o.enc1_b, h);
        affine_backward(self.p(o.enc1_w, h * s.obs_dim), &c.obs, &tmp_h, gw, gb, None);
    }

    /// Backpropagation through time over a forward sequence.
    pub fn backward_sequence(
        &self,
        caches: &[StepCache],
        dqs: &[Vec<f64>],
        dlogits: &[f64],
        reversal: bool,
        grad: &mut [f64],
    ) {
        let h = self.shape.hidden;
        let mut dh = vec![0.0; h];
        let mut dh_prev = vec![0.0; h];
        for t in (0..caches.len()).rev() {
            self.backward_step(&caches[t], &dqs[t], dlogits[t], &dh, reversal, grad, &mut dh_prev);
            std::mem::swap(&mut dh, &mut dh_prev);
        }
    }

    /// Sum of squared parameters.
    pub fn l2(&self) -> f64 {
        self.params.iter().map(|p| p * p).sum()
    }

    /// Adds `lambda1 * 2 * theta` to every gradient entry.
    pub fn add_l2_grad(&self, lambda1: f64, grad: &mut [f64]) {
        if lambda1 == 0.0 {
            return;
        }
        for (g, p) in grad.iter_mut().zip(&self.params) {
            *g += 2.0 * lambda1 * p;
        }
    }

    /// Fails with the offending tensor name if any gradient is not finite.
    pub fn check_finite(&self, grad: &[f64]) -> Result<()> {
        match grad.iter().position(|g| !g.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NumericalFailure {
                param: self.param_name(i).to_string(),
            }),
        }
    }
}

/// Two disjoint mutable sub-slices of `grad` (weight block first).
fn split2(grad: &mut [f64], w_at: usize, w_len: usize, b_at: usize, b_len: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(w_at + w_len <= b_at);
    let (left, right) = grad.split_at_mut(b_at);
    (&mut left[w_at..w_at + w_len], &mut right[..b_len])
}

/// `Q(a) = V + A(a) - mean(A)`.
pub fn dueling_combine(value: f64, advantage: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let mean = advantage.iter().sum::<f64>() / advantage.len() as f64;
    advantage.iter().map(move |a| value + a - mean)
}

/// Index of the largest value (lowest index on ties).
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Binary cross-entropy of the treatment prediction.
pub fn treatment_loss(c: u8, c_hat: f64) -> f64 {
    let p = clamp_prob(c_hat);
    if c == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Derivative of [`treatment_loss`] with respect to the logit; zero where
/// the clamp is active.
pub fn treatment_logit_grad(c: u8, c_hat: f64) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&c_hat) {
        return 0.0;
    }
    c_hat - c as f64
}

/// Numerically stable `log softmax(q)[a]`.
pub fn log_softmax_at(q: &[f64], a: usize) -> f64 {
    let m = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + q.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    q[a] - lse
}

/// Gradient of `-log softmax(q)[a]` with respect to `q`, scaled by `weight`,
/// added into `dq`.
pub fn add_cross_entropy_grad(q: &[f64], a: usize, weight: f64, dq: &mut [f64]) {
    let m = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = q.iter().map(|v| (v - m).exp()).sum();
    for (k, d) in dq.iter_mut().enumerate() {
        let p = (q[k] - m).exp() / z;
        *d += weight * (p - if k == a { 1.0 } else { 0.0 });
    }
}

/// Weights of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// l2 penalty on all parameters.
    pub lambda1: f64,
    /// Treatment cross-entropy (counterfactual regularizer).
    pub lambda2: f64,
    /// Action-supervision cross-entropy.
    pub lambda3: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.lambda3 >= 0.0,
            "loss weights must be non-negative"
        );
        ensure!(self.gamma > 0.0 && self.gamma <= 1.0, "discount must lie in (0, 1]");
        Ok(())
    }
}

/// Which loss terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerms {
    pub td: bool,
    pub treatment: bool,
    pub supervision: bool,
    pub reversal: bool,
}

/// One replayed transition together with the recurrent state it was
/// collected under.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub action: u8,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub terminal: bool,
    pub condition: u8,
    /// Expert action used by the supervision loss.
    pub expert_action: Option<u8>,
}

/// Loss values of one batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub td: f64,
    pub l2: f64,
    pub treatment: f64,
    pub supervision: f64,
    /// `|y - Q(s, a)|` per transition (zero when the TD term is off).
    pub td_errors: Vec<f64>,
}

/// Double-Q targets `y = r + gamma * Q_target(s', argmax_a Q_online(s', a))`
/// (`y = r` for terminal transitions). Both networks restart from the stored
/// hidden state and step through `s` then `s'`.
pub fn td_targets(batch: &[Transition], online: &QNetwork, target: &QNetwork, gamma: f64) -> Result<Vec<f64>> {
    let mut online_cache = StepCache::default();
    let mut target_cache = StepCache::default();
    let mut out = Vec::with_capacity(batch.len());
    for tr in batch {
        if tr.terminal {
            out.push(tr.reward);
            continue;
        }
        online.step_into(&tr.obs, &tr.h_prev, &mut online_cache)?;
        let h_on = online_cache.h.clone();
        online.step_into(&tr.next_obs, &h_on, &mut online_cache)?;
        let a_max = argmax(&online_cache.q);
        target.step_into(&tr.obs, &tr.h_prev, &mut target_cache)?;
        let h_t = target_cache.h.clone();
        target.step_into(&tr.next_obs, &h_t, &mut target_cache)?;
        out.push(tr.reward + gamma * target_cache.q[a_max]);
    }
    Ok(out)
}

/// Mean squared TD loss of a batch and the per-transition absolute errors.
pub fn td_loss(batch: &[Transition], online: &QNetwork, target: &QNetwork, gamma: f64) -> Result<(f64, Vec<f64>)> {
    ensure!(!batch.is_empty(), "TD loss needs a non-empty batch");
    let y = td_targets(batch, online, target, gamma)?;
    let mut errs = Vec::with_capacity(batch.len());
    let mut loss = 0.0;
    for (tr, yi) in batch.iter().zip(&y) {
        let c = online.step(&tr.obs, &tr.h_prev)?;
        let e = yi - c.q[tr.action as usize];
        loss += e * e;
        errs.push(e.abs());
    }
    Ok((loss / batch.len() as f64, errs))
}

/// Total loss of a replay batch and its gradient (accumulated into `grad`).
///
/// `is_weights` scales each transition's TD term (importance sampling); the
/// TD targets are treated as constants. Treatment and supervision terms are
/// averaged over the batch and weighted by `lambda2` and `lambda3`.
pub fn batch_loss_and_grad(
    online: &QNetwork,
    target: &QNetwork,
    batch: &[Transition],
    is_weights: Option<&[f64]>,
    w: &LossWeights,
    terms: LossTerms,
    grad: &mut [f64],
) -> Result<LossReport> {
    ensure!(!batch.is_empty(), "loss needs a non-empty batch");
    let n = batch.len() as f64;
    let y = if terms.td {
        td_targets(batch, online, target, w.gamma)?
    } else {
        Vec::new()
    };
    let mut rep = LossReport {
        td_errors: vec![0.0; batch.len()],
        ..Default::default()
    };
    let mut cache = StepCache::default();
    let zero_h = online.zero_hidden();
    let mut dh_prev = online.zero_hidden();
    let mut dq = vec![0.0; online.shape.n_actions];
    for (i, tr) in batch.iter().enumerate() {
        online.step_into(&tr.obs, &tr.h_prev, &mut cache)?;
        dq.fill(0.0);
        if terms.td {
            let a = tr.action as usize;
            let e = y[i] - cache.q[a];
            let wi = is_weights.map_or(1.0, |ws| ws[i]);
            rep.td += wi * e * e / n;
            rep.td_errors[i] = e.abs();
            dq[a] += -2.0 * wi * e / n;
        }
        if terms.supervision {
            if let Some(a) = tr.expert_action {
                rep.supervision -= log_softmax_at(&cache.q, a as usize) / n;
                add_cross_entropy_grad(&cache.q, a as usize, w.lambda3 / n, &mut dq);
            }
        }
        let mut dlogit = 0.0;
        if terms.treatment {
            rep.treatment += treatment_loss(tr.condition, cache.prob) / n;
            dlogit = w.lambda2 * treatment_logit_grad(tr.condition, cache.prob) / n;
        }
        online.backward_step(&cache, &dq, dlogit, &zero_h, terms.reversal, grad, &mut dh_prev);
    }
    rep.l2 = online.l2();
    online.add_l2_grad(w.lambda1, grad);
    rep.total = rep.td + w.lambda1 * rep.l2 + w.lambda2 * rep.treatment + w.lambda3 * rep.supervision;
    online.check_finite(grad)?;
    Ok(rep)
}

/// A whole demonstration episode from one agent's viewpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSequence {
    /// `T + 1` observations (states `s_0 .. s_T`).
    pub obs: Vec<Vec<f64>>,
    /// `T` actions.
    pub actions: Vec<u8>,
    /// `T` shaped rewards.
    pub rewards: Vec<f64>,
    /// Whether `s_T` is terminal (otherwise the last step bootstraps).
    pub terminal: bool,
    pub condition: u8,
    /// Per-step supervision targets (defaults to `actions` when absent).
    pub expert_actions: Option<Vec<u8>>,
}

impl EpisodeSequence {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Episode-level loss with backpropagation through time from a zero hidden
/// state. Terms are averaged over the episode's steps.
pub fn sequence_loss_and_grad(
    online: &QNetwork,
    target: &QNetwork,
    seq: &EpisodeSequence,
    w: &LossWeights,
    terms: LossTerms,
    grad: &mut [f64],
) -> Result<LossReport> {
    let t_len = seq.len();
    ensure!(t_len > 0, "episode sequence has no transitions");
    ensure!(
        seq.obs.len() == t_len + 1 && seq.rewards.len() == t_len,
        "sequence lengths disagree"
    );
    let n = t_len as f64;
    let caches = online.forward_sequence(&seq.obs)?;
    let mut rep = LossReport {
        td_errors: vec![0.0; t_len],
        ..Default::default()
    };
    let target_q: Vec<Vec<f64>> = if terms.td {
        target.forward_sequence(&seq.obs)?.into_iter().map(|c| c.q).collect()
    } else {
        Vec::new()
    };
    let na = online.shape.n_actions;
    let mut dqs = vec![vec![0.0; na]; t_len + 1];
    let mut dlogits = vec![0.0; t_len + 1];
    for t in 0..t_len {
        let q = &caches[t].q;
        if terms.td {
            let a = seq.actions[t] as usize;
            let last = t + 1 == t_len;
            let y = if last && seq.terminal {
                seq.rewards[t]
            } else {
                let a_max = argmax(&caches[t + 1].q);
                seq.rewards[t] + w.gamma * target_q[t + 1][a_max]
            };
            let e = y - q[a];
            rep.td += e * e / n;
            rep.td_errors[t] = e.abs();
            dqs[t][a] += -2.0 * e / n;
        }
        if terms.supervision {
            let a = seq.expert_actions.as_ref().map_or(seq.actions[t], |x| x[t]) as usize;
            rep.supervision -= log_softmax_at(q, a) / n;
            add_cross_entropy_grad(q, a, w.lambda3 / n, &mut dqs[t]);
        }
        if terms.treatment {
            rep.treatment += treatment_loss(seq.condition, caches[t].prob) / n;
            dlogits[t] = w.lambda2 * treatment_logit_grad(seq.condition, caches[t].prob) / n;
        }
    }
    online.backward_sequence(&caches, &dqs, &dlogits, terms.reversal, grad);
    rep.l2 = online.l2();
    online.add_l2_grad(w.lambda1, grad);
    rep.total = rep.td + w.lambda1 * rep.l2 + w.lambda2 * rep.treatment + w.lambda3 * rep.supervision;
    online.check_finite(grad)?;
    Ok(rep)
}

/// First-order adaptive-moment optimizer with the usual moment constants.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Rescales `grad` so its Euclidean norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
    norm
}
