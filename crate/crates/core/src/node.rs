//! Latent-ODE trajectory model.
//!
//! Encoder-process-decoder architecture: a two-layer encoder maps the mean
//! warm-up window to a latent state, the latent evolves under a two-layer
//! processor integrated with fixed-step RK4 (step 1, aligned to the data
//! grid), and a linear decoder emits the contemporaneous weight matrix at
//! every step. The lag tensor A is a free static parameter. Hard masks are
//! applied by Hadamard product, so removed edges carry exactly zero weight
//! and zero gradient; soft-masked entries get an adaptive L1 penalty.
//!
//! Gradients are exact reverse-mode derivatives of the unrolled RK4
//! computation (discretize-then-optimize), verified against central finite
//! differences in the tests.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::ops::Range;
use std::path::Path;

use crate::dism::PriorSet;
use crate::error::{Error, Result};
use crate::io;
use crate::linalg;
use crate::synth::TimeSeriesPanel;

/// Shape parameters fixing the flat layout bijection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vars: usize,
    pub lag: usize,
    /// Latent dimension m.
    pub latent: usize,
    /// Warm-up window width consumed by the encoder.
    pub w_enc: usize,
}

impl ModelDims {
    pub fn enc_in(&self) -> usize {
        self.w_enc * self.vars
    }

    fn layout(&self) -> Layout {
        let (d, m) = (self.vars, self.latent);
        let e_in = self.enc_in();
        let mut off = 0usize;
        let mut seg = |len: usize| -> Range<usize> {
            let r = off..off + len;
            off += len;
            r
        };
        Layout {
            enc_w1: seg(m * e_in),
            enc_b1: seg(m),
            enc_w2: seg(m * m),
            enc_b2: seg(m),
            proc_w1: seg(m * (m + 1)),
            proc_b1: seg(m),
            proc_w2: seg(m * m),
            proc_b2: seg(m),
            dec_w: seg(d * d * m),
            dec_b: seg(d * d),
            a: seg(self.lag * d * d),
            total: off,
        }
    }

    pub fn param_len(&self) -> usize {
        self.layout().total
    }
}

/// Byte offsets of each parameter block inside the flat vector. Row-major
/// `[rows, cols]` weight matrices; encoder and processor are tanh-hidden,
/// linear-output two-layer nets; the decoder is a single linear layer.
struct Layout {
    enc_w1: Range<usize>,
    enc_b1: Range<usize>,
    enc_w2: Range<usize>,
    enc_b2: Range<usize>,
    proc_w1: Range<usize>,
    proc_b1: Range<usize>,
    proc_w2: Range<usize>,
    proc_b2: Range<usize>,
    dec_w: Range<usize>,
    dec_b: Range<usize>,
    a: Range<usize>,
    total: usize,
}

/// Model parameters as a flat vector plus its shape key. The flat layout is
/// the unit of federation: averaging flat vectors averages every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaParams {
    pub dims: ModelDims,
    pub flat: Vec<f64>,
}

impl ThetaParams {
    /// Glorot-uniform weights scaled by 0.5, zero biases, zero lag tensor.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        if dims.vars == 0 || dims.latent == 0 || dims.w_enc == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        let lay = dims.layout();
        let mut flat = vec![0.0; lay.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, m, e_in) = (dims.vars, dims.latent, dims.enc_in());
        let mut fill = |range: Range<usize>, fan_in: usize, fan_out: usize, flat: &mut Vec<f64>| {
            let limit = 0.5 * (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut flat[range] {
                *v = rng.random_range(-limit..limit);
            }
        };
        fill(lay.enc_w1, e_in, m, &mut flat);
        fill(lay.enc_w2, m, m, &mut flat);
        fill(lay.proc_w1, m + 1, m, &mut flat);
        // The processor output layer starts at zero: a zero vector field
        // keeps latents constant over arbitrarily long horizons instead of
        // growing exponentially through the integrator.
        fill(lay.dec_w, m, d * d, &mut flat);
        Ok(ThetaParams { dims, flat })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_flat_tensor(
            path,
            &[
                self.dims.vars as u32,
                self.dims.lag as u32,
                self.dims.latent as u32,
                self.dims.w_enc as u32,
            ],
            &self.flat,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (dims, flat) = io::read_flat_tensor(path)?;
        if dims.len() != 4 {
            return Err(Error::format("checkpoint shape header must have 4 entries"));
        }
        let dims = ModelDims {
            vars: dims[0] as usize,
            lag: dims[1] as usize,
            latent: dims[2] as usize,
            w_enc: dims[3] as usize,
        };
        if flat.len() != dims.param_len() {
            return Err(Error::format("checkpoint payload does not match its shape header"));
        }
        Ok(ThetaParams { dims, flat })
    }
}

/// Loss weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Penalties {
    pub lambda_w: f64,
    pub lambda_a: f64,
    pub lambda_dag: f64,
}

impl Default for Penalties {
    fn default() -> Self {
        Penalties {
            lambda_w: 1e-2,
            lambda_a: 1e-2,
            lambda_dag: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub total: f64,
    pub mse: f64,
    pub dag: f64,
    pub soft_w: f64,
    pub soft_a: f64,
}

#[derive(Debug, Clone)]
pub struct TrajectoryOutput {
    /// Latent states per time step `[T, m]`; held at the initial state
    /// before the encoder anchor.
    pub latents: Array2<f64>,
    pub w_raw: Array3<f64>,
    pub w_eff: Array3<f64>,
    pub a_eff: Array3<f64>,
}

// --- dense kernels ---------------------------------------------------------

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        out[r] = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// `out += W^T g` for row-major `W [rows, cols]`.
fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, g: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let gv = g[r];
        let row = &w[r * cols..(r + 1) * cols];
        for c in 0..cols {
            out[c] += row[c] * gv;
        }
    }
}

/// `gw += g x^T` for row-major `gw [rows, cols]`.
fn outer_acc(gw: &mut [f64], g: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, &gv) in g.iter().enumerate() {
        let row = &mut gw[r * cols..(r + 1) * cols];
        for (c, &xv) in x.iter().enumerate() {
            row[c] += gv * xv;
        }
    }
}

fn sign0(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum()
    }
}

// --- forward pass with caches ---------------------------------------------

struct StageCache {
    /// latent input of the stage
    u: Vec<f64>,
    /// hidden tanh activation
    a1: Vec<f64>,
    /// stage output k = f(u, s)
    k: Vec<f64>,
    s_norm: f64,
}

struct ForwardCache {
    x0: Vec<f64>,
    enc_a1: Vec<f64>,
    /// anchor step index t0 = w_enc - 1
    t0: usize,
    /// RK4 stage caches for steps t0..T-1
    stages: Vec<[StageCache; 4]>,
}

/// Two-layer net, tanh hidden, linear output; returns the hidden activation
/// alongside the output so the backward pass can reuse it.
fn mlp2(
    w1: &[f64],
    b1: &[f64],
    w2: &[f64],
    b2: &[f64],
    hidden: usize,
    x: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut a1 = vec![0.0; hidden];
    matvec(w1, hidden, x.len(), x, &mut a1);
    for (v, b) in a1.iter_mut().zip(b1) {
        *v = (*v + b).tanh();
    }
    let mut out = vec![0.0; b2.len()];
    matvec(w2, b2.len(), hidden, &a1, &mut out);
    for (v, b) in out.iter_mut().zip(b2) {
        *v += b;
    }
    (out, a1)
}

fn forward_internal(
    theta: &ThetaParams,
    priors: &PriorSet,
    panel: &TimeSeriesPanel,
) -> Result<(TrajectoryOutput, ForwardCache)> {
    let dims = theta.dims;
    let (d, m, lag) = (dims.vars, dims.latent, dims.lag);
    let t_len = panel.steps();
    if panel.vars() != d {
        return Err(Error::shape("panel variable count does not match the model"));
    }
    if priors.steps() != t_len || priors.vars() != d || priors.lag() != lag {
        return Err(Error::shape("priors not shaped for (T, D, L)"));
    }
    if dims.w_enc > t_len {
        return Err(Error::config("encoder window longer than the series"));
    }
    if theta.flat.len() != dims.param_len() {
        return Err(Error::shape("parameter vector does not match the layout"));
    }
    let lay = dims.layout();
    let p = &theta.flat;

    // encoder input: cross-sample mean of the warm-up window, flattened [t][d]
    let n = panel.n_samples() as f64;
    let mut x0 = vec![0.0; dims.enc_in()];
    for sample in panel.values.axis_iter(Axis(0)) {
        for t in 0..dims.w_enc {
            for v in 0..d {
                x0[t * d + v] += sample[[t, v]] / n;
            }
        }
    }

    let (h0, enc_a1) = mlp2(
        &p[lay.enc_w1.clone()],
        &p[lay.enc_b1.clone()],
        &p[lay.enc_w2.clone()],
        &p[lay.enc_b2.clone()],
        m,
        &x0,
    );

    let t0 = dims.w_enc - 1;
    let mut latents = Array2::<f64>::zeros((t_len, m));
    for t in 0..=t0 {
        latents.row_mut(t).assign(&ndarray::ArrayView1::from(&h0));
    }
    let proc = |u: &[f64], s_norm: f64| -> (Vec<f64>, Vec<f64>) {
        let mut input = Vec::with_capacity(m + 1);
        input.extend_from_slice(u);
        input.push(s_norm);
        mlp2(
            &p[lay.proc_w1.clone()],
            &p[lay.proc_b1.clone()],
            &p[lay.proc_w2.clone()],
            &p[lay.proc_b2.clone()],
            m,
            &input,
        )
    };

    let mut stages = Vec::with_capacity(t_len.saturating_sub(t0 + 1));
    let mut h = h0;
    let tf = t_len as f64;
    for t in t0..t_len.saturating_sub(1) {
        let mk = |u: Vec<f64>, s: f64| -> StageCache {
            let (k, a1) = proc(&u, s);
            StageCache { u, a1, k, s_norm: s }
        };
        let s1 = mk(h.clone(), t as f64 / tf);
        let u2: Vec<f64> = h.iter().zip(&s1.k).map(|(a, b)| a + 0.5 * b).collect();
        let s2 = mk(u2, (t as f64 + 0.5) / tf);
        let u3: Vec<f64> = h.iter().zip(&s2.k).map(|(a, b)| a + 0.5 * b).collect();
        let s3 = mk(u3, (t as f64 + 0.5) / tf);
        let u4: Vec<f64> = h.iter().zip(&s3.k).map(|(a, b)| a + b).collect();
        let s4 = mk(u4, (t as f64 + 1.0) / tf);
        for i in 0..m {
            h[i] += (s1.k[i] + 2.0 * s2.k[i] + 2.0 * s3.k[i] + s4.k[i]) / 6.0;
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "latent state diverged while integrating to t = {}",
                t + 1
            )));
        }
        latents.row_mut(t + 1).assign(&ndarray::ArrayView1::from(&h));
        stages.push([s1, s2, s3, s4]);
    }

    // decode every step and mask
    let dec_w = &p[lay.dec_w.clone()];
    let dec_b = &p[lay.dec_b.clone()];
    let mut w_raw = Array3::<f64>::zeros((t_len, d, d));
    let mut w_eff = Array3::<f64>::zeros((t_len, d, d));
    for t in 0..t_len {
        let h_t = latents.row(t);
        let mut y = vec![0.0; d * d];
        matvec(dec_w, d * d, m, h_t.as_slice().unwrap(), &mut y);
        for i in 0..d {
            for j in 0..d {
                let raw = y[i * d + j] + dec_b[i * d + j];
                w_raw[[t, i, j]] = raw;
                w_eff[[t, i, j]] = if i == j {
                    0.0
                } else {
                    raw * priors.s[[t, i, j]] as f64
                };
            }
        }
    }
    let mut a_eff = Array3::<f64>::zeros((lag, d, d));
    for tau in 0..lag {
        for i in 0..d {
            for j in 0..d {
                a_eff[[tau, i, j]] =
                    p[lay.a.start + (tau * d + i) * d + j] * priors.s_a[[tau, i, j]] as f64;
            }
        }
    }

    Ok((
        TrajectoryOutput {
            latents,
            w_raw,
            w_eff,
            a_eff,
        },
        ForwardCache {
            x0,
            enc_a1,
            t0,
            stages,
        },
    ))
}

/// Runs the model over a panel under the given priors.
pub fn forward(
    theta: &ThetaParams,
    priors: &PriorSet,
    panel: &TimeSeriesPanel,
) -> Result<TrajectoryOutput> {
    forward_internal(theta, priors, panel).map(|(out, _)| out)
}

// --- loss -------------------------------------------------------------------

/// Residuals of the reconstruction identity over the loss range t >= L:
/// `r = V^t - V^t W_eff^(t) - sum_tau V^{t-tau} A_eff^(tau)`.
fn residuals(out: &TrajectoryOutput, panel: &TimeSeriesPanel, lag: usize) -> Array3<f64> {
    let (n, t_len, d) = panel.values.dim();
    let mut r = Array3::<f64>::zeros((n, t_len, d));
    for s in 0..n {
        for t in lag..t_len {
            for j in 0..d {
                let mut pred = 0.0;
                for i in 0..d {
                    pred += panel.values[[s, t, i]] * out.w_eff[[t, i, j]];
                }
                for tau in 1..=lag {
                    for i in 0..d {
                        pred += panel.values[[s, t - tau, i]] * out.a_eff[[tau - 1, i, j]];
                    }
                }
                r[[s, t, j]] = panel.values[[s, t, j]] - pred;
            }
        }
    }
    r
}

fn loss_terms(
    out: &TrajectoryOutput,
    panel: &TimeSeriesPanel,
    priors: &PriorSet,
    lams: &Penalties,
) -> (LossTerms, Array3<f64>) {
    let (n, t_len, d) = panel.values.dim();
    let lag = out.a_eff.shape()[0];
    let r = residuals(out, panel, lag);
    let n_terms = (n * (t_len - lag) * d) as f64;
    let mse = r.iter().map(|v| v * v).sum::<f64>() / n_terms;

    let mut dag = 0.0;
    let mut soft_w = 0.0;
    for t in 0..t_len {
        let w_t = out.w_eff.index_axis(Axis(0), t);
        dag += linalg::acyclicity_penalty(&w_t, d);
        for i in 0..d {
            for j in 0..d {
                soft_w += w_t[[i, j]].abs() * priors.l_soft[[t, i, j]] as f64;
            }
        }
    }
    dag *= lams.lambda_dag / t_len as f64;
    soft_w *= lams.lambda_w / t_len as f64;

    let soft_a = lams.lambda_a
        * out
            .a_eff
            .iter()
            .zip(priors.l_soft_a.iter())
            .map(|(v, &l)| v.abs() * l as f64)
            .sum::<f64>();

    let terms = LossTerms {
        total: mse + dag + soft_w + soft_a,
        mse,
        dag,
        soft_w,
        soft_a,
    };
    (terms, r)
}

/// Full objective: reconstruction MSE + acyclicity + adaptive L1 penalties.
pub fn loss(
    theta: &ThetaParams,
    priors: &PriorSet,
    panel: &TimeSeriesPanel,
    lams: &Penalties,
) -> Result<LossTerms> {
    let (out, _) = forward_internal(theta, priors, panel)?;
    Ok(loss_terms(&out, panel, priors, lams).0)
}

// --- gradient ----------------------------------------------------------------

/// Backprop through one processor evaluation; accumulates parameter grads and
/// returns the gradient w.r.t. the latent input (the time input is a leaf).
#[allow(clippy::too_many_arguments)]
fn proc_backward(
    p: &[f64],
    lay: &Layout,
    m: usize,
    stage: &StageCache,
    g_out: &[f64],
    grad: &mut [f64],
) -> Vec<f64> {
    // output layer
    outer_acc(&mut grad[lay.proc_w2.clone()], g_out, &stage.a1);
    for (g, v) in grad[lay.proc_b2.clone()].iter_mut().zip(g_out) {
        *g += v;
    }
    let mut gz1 = vec![0.0; m];
    matvec_t_acc(&p[lay.proc_w2.clone()], m, m, g_out, &mut gz1);
    for (g, a) in gz1.iter_mut().zip(&stage.a1) {
        *g *= 1.0 - a * a;
    }
    // hidden layer; input is [u ; s_norm]
    let mut input = Vec::with_capacity(m + 1);
    input.extend_from_slice(&stage.u);
    input.push(stage.s_norm);
    outer_acc(&mut grad[lay.proc_w1.clone()], &gz1, &input);
    for (g, v) in grad[lay.proc_b1.clone()].iter_mut().zip(&gz1) {
        *g += v;
    }
    // gradient to the latent part of the input (drop the time column)
    let w1 = &p[lay.proc_w1.clone()];
    let mut g_u = vec![0.0; m];
    for r in 0..m {
        let gv = gz1[r];
        let row = &w1[r * (m + 1)..r * (m + 1) + m];
        for c in 0..m {
            g_u[c] += row[c] * gv;
        }
    }
    g_u
}

/// Reverse-mode gradient of [`loss`] with respect to the flat parameters.
pub fn gradient(
    theta: &ThetaParams,
    priors: &PriorSet,
    panel: &TimeSeriesPanel,
    lams: &Penalties,
) -> Result<(Vec<f64>, LossTerms)> {
    let dims = theta.dims;
    let (d, m, lag) = (dims.vars, dims.latent, dims.lag);
    let lay = dims.layout();
    let p = &theta.flat;
    let (out, cache) = forward_internal(theta, priors, panel)?;
    let (terms, r) = loss_terms(&out, panel, priors, lams);
    let (n, t_len, _) = panel.values.dim();
    let n_terms = (n * (t_len - lag) * d) as f64;

    let mut grad = vec![0.0; lay.total];

    // dL/dW_eff per t: MSE + acyclicity + soft penalty
    let mut g_weff = Array3::<f64>::zeros((t_len, d, d));
    for t in lag..t_len {
        for s in 0..n {
            for j in 0..d {
                let rv = r[[s, t, j]];
                for i in 0..d {
                    g_weff[[t, i, j]] -= 2.0 / n_terms * panel.values[[s, t, i]] * rv;
                }
            }
        }
    }
    for t in 0..t_len {
        let w_t = out.w_eff.index_axis(Axis(0), t);
        let gd = linalg::acyclicity_grad(&w_t, d);
        for i in 0..d {
            for j in 0..d {
                g_weff[[t, i, j]] += lams.lambda_dag / t_len as f64 * gd[[i, j]]
                    + lams.lambda_w / t_len as f64
                        * sign0(w_t[[i, j]])
                        * priors.l_soft[[t, i, j]] as f64;
            }
        }
    }

    // dL/dA through the static mask
    for tau in 1..=lag {
        for i in 0..d {
            for j in 0..d {
                let mut g = 0.0;
                for t in lag..t_len {
                    for s in 0..n {
                        g -= 2.0 / n_terms * panel.values[[s, t - tau, i]] * r[[s, t, j]];
                    }
                }
                g += lams.lambda_a
                    * sign0(out.a_eff[[tau - 1, i, j]])
                    * priors.l_soft_a[[tau - 1, i, j]] as f64;
                grad[lay.a.start + ((tau - 1) * d + i) * d + j] =
                    g * priors.s_a[[tau - 1, i, j]] as f64;
            }
        }
    }

    // decoder backward: W_raw grads flow through the hard mask
    let dec_w = &p[lay.dec_w.clone()];
    let mut g_h = Array2::<f64>::zeros((t_len, m));
    for t in 0..t_len {
        let mut gy = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                gy[i * d + j] = if i == j {
                    0.0
                } else {
                    g_weff[[t, i, j]] * priors.s[[t, i, j]] as f64
                };
            }
        }
        let h_t = out.latents.row(t);
        outer_acc(&mut grad[lay.dec_w.clone()], &gy, h_t.as_slice().unwrap());
        for (g, v) in grad[lay.dec_b.clone()].iter_mut().zip(&gy) {
            *g += v;
        }
        let mut gh = vec![0.0; m];
        matvec_t_acc(dec_w, d * d, m, &gy, &mut gh);
        for (dst, v) in g_h.row_mut(t).iter_mut().zip(&gh) {
            *dst += v;
        }
    }

    // adjoint sweep through the unrolled RK4 steps
    let t0 = cache.t0;
    let mut adj: Vec<f64> = g_h.row(t_len - 1).to_vec();
    for (step_idx, t) in (t0..t_len.saturating_sub(1)).enumerate().rev() {
        let stages = &cache.stages[step_idx];
        let hat = adj;
        let mut dh = hat.clone();
        let mut dk: [Vec<f64>; 4] = [
            hat.iter().map(|v| v / 6.0).collect(),
            hat.iter().map(|v| v / 3.0).collect(),
            hat.iter().map(|v| v / 3.0).collect(),
            hat.iter().map(|v| v / 6.0).collect(),
        ];
        // stage 4: u4 = h + k3
        let gu4 = proc_backward(p, &lay, m, &stages[3], &dk[3].clone(), &mut grad);
        for i in 0..m {
            dh[i] += gu4[i];
            dk[2][i] += gu4[i];
        }
        // stage 3: u3 = h + 0.5 k2
        let gu3 = proc_backward(p, &lay, m, &stages[2], &dk[2].clone(), &mut grad);
        for i in 0..m {
            dh[i] += gu3[i];
            dk[1][i] += 0.5 * gu3[i];
        }
        // stage 2: u2 = h + 0.5 k1
        let gu2 = proc_backward(p, &lay, m, &stages[1], &dk[1].clone(), &mut grad);
        for i in 0..m {
            dh[i] += gu2[i];
            dk[0][i] += 0.5 * gu2[i];
        }
        // stage 1: u1 = h
        let gu1 = proc_backward(p, &lay, m, &stages[0], &dk[0].clone(), &mut grad);
        for i in 0..m {
            dh[i] += gu1[i];
        }
        adj = dh;
        for (a, g) in adj.iter_mut().zip(g_h.row(t)) {
            *a += g;
        }
    }
    // latents held before the anchor all alias h(t0)
    for t in 0..t0 {
        for (a, g) in adj.iter_mut().zip(g_h.row(t)) {
            *a += g;
        }
    }

    // encoder backward
    outer_acc(&mut grad[lay.enc_w2.clone()], &adj, &cache.enc_a1);
    for (g, v) in grad[lay.enc_b2.clone()].iter_mut().zip(&adj) {
        *g += v;
    }
    let mut gz1 = vec![0.0; m];
    matvec_t_acc(&p[lay.enc_w2.clone()], m, m, &adj, &mut gz1);
    for (g, a) in gz1.iter_mut().zip(&cache.enc_a1) {
        *g *= 1.0 - a * a;
    }
    outer_acc(&mut grad[lay.enc_w1.clone()], &gz1, &cache.x0);
    for (g, v) in grad[lay.enc_b1.clone()].iter_mut().zip(&gz1) {
        *g += v;
    }

    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite gradient"));
    }
    Ok((grad, terms))
}

/// E full-batch gradient-descent steps at rate eta; the returned trace holds
/// the loss evaluated before each update.
/// Global gradient-norm ceiling applied by [`local_train`].
const GRAD_CLIP: f64 = 100.0;

pub fn local_train(
    theta: &ThetaParams,
    priors: &PriorSet,
    panel: &TimeSeriesPanel,
    epochs: usize,
    eta: f64,
    lams: &Penalties,
) -> Result<(ThetaParams, Vec<LossTerms>)> {
    if epochs == 0 {
        return Err(Error::config("need at least one local epoch"));
    }
    if eta < 0.0 {
        return Err(Error::config("learning rate must be nonnegative"));
    }
    let mut current = theta.clone();
    let mut trace = Vec::with_capacity(epochs);
    for step in 0..epochs {
        let (mut g, terms) = gradient(&current, priors, panel, lams)?;
        if !terms.total.is_finite() {
            return Err(Error::numeric(format!(
                "loss became non-finite at local step {step}"
            )));
        }
        // clip the gradient norm: the acyclicity penalty is exponential in
        // the decoded weights, so a transient cycle would otherwise produce
        // an update large enough to destabilize the whole trajectory
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > GRAD_CLIP {
            let s = GRAD_CLIP / norm;
            for v in &mut g {
                *v *= s;
            }
        }
        for (w, gv) in current.flat.iter_mut().zip(&g) {
            *w -= eta * gv;
        }
        trace.push(terms);
    }
    Ok((current, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dism::{PriorMeta, PriorSet};
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    fn dense_priors(t_len: usize, d: usize, lag: usize) -> PriorSet {
        let mut s = Array3::<u8>::from_elem((t_len, d, d), 1);
        for t in 0..t_len {
            for i in 0..d {
                s[[t, i, i]] = 0;
            }
        }
        PriorSet {
            s,
            l_soft: Array3::zeros((t_len, d, d)),
            s_a: Array3::from_elem((lag, d, d), 1),
            l_soft_a: Array3::zeros((lag, d, d)),
            sampled_times: vec![lag.min(t_len - 1)],
            meta: PriorMeta {
                t_s: 1,
                delta_hard: 0.0,
                delta_local: 0.0,
                delta_hard_lag: 0.0,
                delta_local_lag: 0.0,
                ridge_scale: 1e-3,
                h: 8,
                sigma: 1.0,
                rff_seed: 0,
            },
        }
    }

    fn toy_panel(n: usize, t_len: usize, d: usize, seed: u64) -> TimeSeriesPanel {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).unwrap();
        TimeSeriesPanel {
            client_id: 0,
            values: Array3::from_shape_fn((n, t_len, d), |_| unit.sample(&mut rng)),
        }
    }

    fn dims(d: usize, lag: usize, m: usize) -> ModelDims {
        ModelDims {
            vars: d,
            lag,
            latent: m,
            w_enc: lag + 1,
        }
    }

    #[test]
    fn zero_mask_annihilates_w() {
        let dm = dims(3, 1, 4);
        let theta = ThetaParams::init(dm, 7).unwrap();
        let panel = toy_panel(5, 10, 3, 1);
        let mut priors = dense_priors(10, 3, 1);
        priors.s.fill(0);
        priors.s_a.fill(0);
        let out = forward(&theta, &priors, &panel).unwrap();
        assert!(out.w_eff.iter().all(|&v| v == 0.0));
        assert!(out.a_eff.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_mask_keeps_w_raw_off_diagonal() {
        let dm = dims(3, 1, 4);
        let theta = ThetaParams::init(dm, 7).unwrap();
        let panel = toy_panel(5, 10, 3, 1);
        let priors = dense_priors(10, 3, 1);
        let out = forward(&theta, &priors, &panel).unwrap();
        for t in 0..10 {
            for i in 0..3 {
                for j in 0..3 {
                    if i == j {
                        assert_eq!(out.w_eff[[t, i, j]], 0.0);
                    } else {
                        assert_eq!(out.w_eff[[t, i, j]], out.w_raw[[t, i, j]]);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_processor_gives_constant_trajectory() {
        let dm = dims(2, 1, 4);
        let mut theta = ThetaParams::init(dm, 3).unwrap();
        let lay = dm.layout();
        for v in &mut theta.flat[lay.proc_w1.start..lay.proc_b2.end] {
            *v = 0.0;
        }
        let panel = toy_panel(4, 8, 2, 2);
        let priors = dense_priors(8, 2, 1);
        let out = forward(&theta, &priors, &panel).unwrap();
        for t in 1..8 {
            for i in 0..2 {
                for j in 0..2 {
                    assert_abs_diff_eq!(
                        out.w_raw[[t, i, j]],
                        out.w_raw[[0, i, j]],
                        epsilon = 1e-14
                    );
                }
            }
        }
    }

    #[test]
    fn zero_model_loss_is_mean_square() {
        let dm = dims(2, 1, 4);
        let mut theta = ThetaParams::init(dm, 3).unwrap();
        let lay = dm.layout();
        for v in &mut theta.flat[lay.dec_w.start..lay.a.end] {
            *v = 0.0;
        }
        let panel = toy_panel(6, 9, 2, 5);
        let priors = dense_priors(9, 2, 1);
        let terms = loss(&theta, &priors, &panel, &Penalties::default()).unwrap();
        let v2: f64 = panel
            .values
            .slice(ndarray::s![.., 1.., ..])
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            / (6.0 * 8.0 * 2.0);
        assert_abs_diff_eq!(terms.mse, v2, epsilon = 1e-12);
        assert_eq!(terms.soft_w, 0.0);
        assert_eq!(terms.soft_a, 0.0);
        assert_abs_diff_eq!(terms.dag, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn truncated_acyclicity_matches_matrix_exponential_on_cycle() {
        // 2-cycle: exact tr(exp(W .* W)) = 2 cosh(|ab|); a high-degree
        // truncation must agree to double precision
        let a = 0.6_f64;
        let b = -0.35_f64;
        let w = ndarray::array![[0.0, a], [b, 0.0]];
        let exact = 2.0 * (a * b).abs().cosh() - 2.0;
        let h = linalg::acyclicity_penalty(&w.view(), 16);
        assert_abs_diff_eq!(h, exact, epsilon = 1e-12);
    }

    fn fd_check(seed: u64) {
        let dm = dims(3, 1, 8);
        let mut theta = ThetaParams::init(dm, seed).unwrap();
        // random nonzero lag tensor so the soft-A path is exercised away
        // from the |x| kink
        let lay = dm.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        for v in &mut theta.flat[lay.a.clone()] {
            *v = rng.random_range(-0.4..0.4);
        }
        let panel = toy_panel(6, 12, 3, seed.wrapping_add(9));
        let mut priors = dense_priors(12, 3, 1);
        // knock out a few entries and flag a few soft ones
        priors.s[[4, 0, 1]] = 0;
        priors.s[[4, 1, 0]] = 0;
        priors.s_a[[0, 2, 2]] = 0;
        priors.l_soft[[6, 0, 2]] = 1;
        priors.l_soft_a[[0, 1, 1]] = 1;
        let lams = Penalties {
            lambda_w: 1e-2,
            lambda_a: 1e-2,
            lambda_dag: 1.0,
        };
        let (g, _) = gradient(&theta, &priors, &panel, &lams).unwrap();
        let eps = 1e-5;
        for idx in 0..theta.flat.len() {
            let mut plus = theta.clone();
            plus.flat[idx] += eps;
            let mut minus = theta.clone();
            minus.flat[idx] -= eps;
            let lp = loss(&plus, &priors, &panel, &lams).unwrap().total;
            let lm = loss(&minus, &priors, &panel, &lams).unwrap().total;
            let fd = (lp - lm) / (2.0 * eps);
            let denom = g[idx].abs().max(fd.abs()).max(1e-3);
            assert!(
                (g[idx] - fd).abs() / denom <= 1e-4,
                "coord {idx}: analytic {} vs fd {}",
                g[idx],
                fd
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        fd_check(11);
        fd_check(12);
    }

    #[test]
    fn masked_coordinates_get_zero_gradient() {
        let dm = dims(3, 1, 4);
        let theta = ThetaParams::init(dm, 21).unwrap();
        let panel = toy_panel(5, 10, 3, 22);
        let mut priors = dense_priors(10, 3, 1);
        priors.s_a[[0, 1, 2]] = 0;
        let (g, _) = gradient(&theta, &priors, &panel, &Penalties::default()).unwrap();
        let lay = dm.layout();
        assert_eq!(g[lay.a.start + (0 * 3 + 1) * 3 + 2], 0.0);
    }

    #[test]
    fn rk4_matches_matrix_exponential_for_linear_dynamics() {
        // make the processor effectively linear: hidden scale eps shrinks the
        // tanh into its linear regime, the output layer scales back by 1/eps
        let m = 4;
        let dm = ModelDims {
            vars: 2,
            lag: 0,
            latent: m,
            w_enc: 1,
        };
        let mut theta = ThetaParams::init(dm, 0).unwrap();
        let lay = dm.layout();
        theta.flat.iter_mut().for_each(|v| *v = 0.0);
        let mat = [
            [0.10, -0.20, 0.05, 0.0],
            [0.15, 0.00, -0.10, 0.02],
            [0.00, 0.12, -0.05, -0.08],
            [0.03, 0.00, 0.09, 0.04],
        ];
        let eps = 1e-4;
        for r in 0..m {
            for c in 0..m {
                theta.flat[lay.proc_w1.start + r * (m + 1) + c] = eps * mat[r][c];
            }
            for c in 0..m {
                theta.flat[lay.proc_w2.start + r * m + c] = if r == c { 1.0 / eps } else { 0.0 };
            }
        }
        // encoder: zero weights, bias fixes h0
        let h0 = [0.8, -0.3, 0.5, 0.1];
        for (i, &v) in h0.iter().enumerate() {
            theta.flat[lay.enc_b2.start + i] = v;
        }
        let t_len = 9;
        let panel = toy_panel(3, t_len, 2, 5);
        let priors = dense_priors(t_len, 2, 0);
        let out = forward(&theta, &priors, &panel).unwrap();

        // dense matrix exponential by scaling and squaring
        let a = ndarray::arr2(&mat);
        let steps = (t_len - 1) as f64;
        let scaled = a.mapv(|v| v * steps / 1024.0);
        let mut em = Array2::<f64>::eye(m);
        let mut term = Array2::<f64>::eye(m);
        for p in 1..=12 {
            term = term.dot(&scaled) / p as f64;
            em = em + &term;
        }
        for _ in 0..10 {
            em = em.dot(&em);
        }
        let want = em.dot(&ndarray::arr1(&h0));
        for i in 0..m {
            assert_abs_diff_eq!(out.latents[[t_len - 1, i]], want[i], epsilon = 1e-3);
        }
    }

    #[test]
    fn local_train_eta_zero_is_identity_and_descends_otherwise() {
        let dm = dims(3, 1, 6);
        let theta = ThetaParams::init(dm, 33).unwrap();
        let panel = toy_panel(10, 12, 3, 34);
        let priors = dense_priors(12, 3, 1);
        let lams = Penalties::default();
        assert!(local_train(&theta, &priors, &panel, 0, 0.1, &lams).is_err());
        let (same, _) = local_train(&theta, &priors, &panel, 1, 0.0, &lams).unwrap();
        assert_eq!(same.flat, theta.flat);

        let before = loss(&theta, &priors, &panel, &lams).unwrap().total;
        let (trained, _) = local_train(&theta, &priors, &panel, 50, 1e-2, &lams).unwrap();
        let after = loss(&trained, &priors, &panel, &lams).unwrap().total;
        assert!(after <= before, "loss should not increase: {before} -> {after}");
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("theta.ddck");
        let theta = ThetaParams::init(dims(4, 2, 8), 99).unwrap();
        theta.save(&path).unwrap();
        let back = ThetaParams::load(&path).unwrap();
        assert_eq!(back.dims, theta.dims);
        assert!(back
            .flat
            .iter()
            .zip(&theta.flat)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn mask_application_is_idempotent() {
        let dm = dims(3, 1, 4);
        let theta = ThetaParams::init(dm, 50).unwrap();
        let panel = toy_panel(4, 8, 3, 51);
        let mut priors = dense_priors(8, 3, 1);
        priors.s[[2, 0, 1]] = 0;
        let out = forward(&theta, &priors, &panel).unwrap();
        // re-applying the mask changes nothing
        for t in 0..8 {
            for i in 0..3 {
                for j in 0..3 {
                    let again = if i == j {
                        0.0
                    } else {
                        out.w_eff[[t, i, j]] * priors.s[[t, i, j]] as f64
                    };
                    assert_eq!(again, out.w_eff[[t, i, j]]);
                }
            }
        }
    }
}
