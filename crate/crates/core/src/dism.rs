//! Server-side skeleton mining.
//!
//! Pools client feature moments per sampled time step, runs conditional
//! independence tests on the pooled (and per-client) statistics, smooths the
//! per-client indicator series over time, and emits the hard/soft prior
//! masks consumed by the trajectory-optimization phase.
//!
//! The client index enters every pooled conditioning set as a surrogate
//! variable with one-hot features, so dependence that is explained by client
//! identity alone (spatial confounding) is structurally removed.

use ndarray::{Array1, Array2, Array3, Array4, Array5, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{make_rff, time_slice_stats, RffParams, Standardizer, StatPacket};
use crate::linalg;
use crate::synth::TimeSeriesPanel;

/// Test threshold: fixed override or calibrated against a simulated null.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdSpec {
    Fixed(f64),
    Calibrated,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DismConfig {
    /// Temporal sampling stride T_S; constraints are computed every T_S steps.
    pub t_s: usize,
    /// Feature dimension of the random Fourier map.
    pub h: usize,
    /// Kernel bandwidth on standardized data.
    pub sigma: f64,
    pub delta_hard: ThresholdSpec,
    pub delta_local: ThresholdSpec,
    /// Ridge on the conditioning block: eps = ridge_scale * tr(C_zz) / dim.
    pub ridge_scale: f64,
    /// Null draws used when a threshold is calibrated.
    pub calib_draws: usize,
    pub calib_quantile: f64,
    pub seed: u64,
}

impl Default for DismConfig {
    fn default() -> Self {
        DismConfig {
            t_s: 1,
            h: 32,
            sigma: 1.0,
            delta_hard: ThresholdSpec::Calibrated,
            delta_local: ThresholdSpec::Calibrated,
            ridge_scale: 1e-3,
            calib_draws: 200,
            calib_quantile: 0.95,
            seed: 0,
        }
    }
}

/// Mining output: dynamic hard/soft masks per time step, static lag masks,
/// and the bookkeeping needed to reproduce the run.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSet {
    pub s: Array3<u8>,
    pub l_soft: Array3<u8>,
    pub s_a: Array3<u8>,
    pub l_soft_a: Array3<u8>,
    pub sampled_times: Vec<usize>,
    pub meta: PriorMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorMeta {
    pub t_s: usize,
    pub delta_hard: f64,
    pub delta_local: f64,
    pub delta_hard_lag: f64,
    pub delta_local_lag: f64,
    pub ridge_scale: f64,
    pub h: usize,
    pub sigma: f64,
    pub rff_seed: u64,
}

impl PriorSet {
    pub fn steps(&self) -> usize {
        self.s.shape()[0]
    }
    pub fn vars(&self) -> usize {
        self.s.shape()[1]
    }
    pub fn lag(&self) -> usize {
        self.s_a.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let (t_len, d) = (self.steps(), self.vars());
        for t in 0..t_len {
            for i in 0..d {
                if self.s[[t, i, i]] != 0 {
                    return Err(Error::format("hard mask has a contemporaneous self-loop"));
                }
                for j in 0..d {
                    if self.l_soft[[t, i, j]] > self.s[[t, i, j]] {
                        return Err(Error::format("soft mask not nested inside hard mask"));
                    }
                }
            }
        }
        for (ls, s) in self.l_soft_a.iter().zip(self.s_a.iter()) {
            if ls > s {
                return Err(Error::format("static soft mask not nested inside hard mask"));
            }
        }
        Ok(())
    }
}

/// Per-sampled-time raw dependence indicators, `values[t_idx, k, i, j]`,
/// 1 = dependence detected at client k.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorSeries {
    pub values: Array4<u8>,
}

// --- pooled moments ------------------------------------------------------

/// n-weighted pooled uncentered moments for one time slice, plus the
/// per-client moments needed to assemble the client-surrogate blocks.
#[derive(Debug, Clone)]
pub struct GlobalMoments {
    pub t: usize,
    pub n_total: usize,
    pub client_n: Vec<usize>,
    pub client_mean1: Vec<Array2<f64>>,
    pub client_m2: Vec<Array4<f64>>,
    pub mean1: Array2<f64>,
    pub m2: Array4<f64>,
}

impl GlobalMoments {
    pub fn vars(&self) -> usize {
        self.mean1.nrows()
    }
    pub fn h(&self) -> usize {
        self.mean1.ncols()
    }
    pub fn clients(&self) -> usize {
        self.client_n.len()
    }
}

/// Pools packets for one sampled time step.
pub fn aggregate_moments(packets: &[StatPacket]) -> Result<GlobalMoments> {
    let first = packets.first().ok_or_else(|| Error::config("no packets"))?;
    let (t, d, h) = (first.t, first.vars(), first.h());
    let mut n_total = 0usize;
    for p in packets {
        if p.t != t {
            return Err(Error::config("packets disagree on time index"));
        }
        if p.rff_seed != first.rff_seed {
            return Err(Error::config("packets disagree on RFF seed"));
        }
        if p.vars() != d || p.h() != h {
            return Err(Error::shape("packets disagree on dimensions"));
        }
        n_total += p.n;
    }
    let nf = n_total as f64;
    let mut mean1 = Array2::<f64>::zeros((d, h));
    let mut m2 = Array4::<f64>::zeros((d, d, h, h));
    for p in packets {
        let w = p.n as f64 / nf;
        mean1.scaled_add(w, &p.moment_1);
        m2.scaled_add(w, &p.moment_2);
    }
    Ok(GlobalMoments {
        t,
        n_total,
        client_n: packets.iter().map(|p| p.n).collect(),
        client_mean1: packets.iter().map(|p| p.moment_1.clone()).collect(),
        client_m2: packets.iter().map(|p| p.moment_2.clone()).collect(),
        mean1,
        m2,
    })
}

/// Pooled lag moments (over clients and, for static priors, over sampled
/// times as well).
#[derive(Debug, Clone)]
pub struct LagMoments {
    pub n_total: usize,
    pub client_n: Vec<usize>,
    pub mean1: Array2<f64>,
    pub m2: Array4<f64>,
    pub lag_mean1: Array3<f64>,
    pub lag_m2: Array5<f64>,
    pub client_mean1: Vec<Array2<f64>>,
    pub client_m2: Vec<Array4<f64>>,
    pub client_lag_mean1: Vec<Array3<f64>>,
    pub client_lag_m2: Vec<Array5<f64>>,
}

/// Pools lag statistics; `groups[k]` holds the packets of client k across
/// sampled times. Within- and cross-client pooling is n-weighted.
pub fn pool_lag_moments(groups: &[Vec<&StatPacket>]) -> Result<LagMoments> {
    let first = groups
        .iter()
        .flat_map(|g| g.iter())
        .next()
        .ok_or_else(|| Error::config("no packets"))?;
    let (d, h, lag) = (first.vars(), first.h(), first.lag());
    let mut n_total = 0usize;
    let mut client_n = Vec::with_capacity(groups.len());
    for g in groups {
        let mut n_k = 0usize;
        for p in g {
            if p.vars() != d || p.h() != h || p.lag() != lag {
                return Err(Error::shape("packets disagree on dimensions"));
            }
            if p.rff_seed != first.rff_seed {
                return Err(Error::config("packets disagree on RFF seed"));
            }
            n_k += p.n;
        }
        client_n.push(n_k);
        n_total += n_k;
    }
    if n_total == 0 {
        return Err(Error::config("no samples in lag pooling"));
    }
    let nf = n_total as f64;
    let mut mean1 = Array2::<f64>::zeros((d, h));
    let mut m2 = Array4::<f64>::zeros((d, d, h, h));
    let mut lag_mean1 = Array3::<f64>::zeros((lag, d, h));
    let mut lag_m2 = Array5::<f64>::zeros((lag, d, d, h, h));
    let mut client_mean1 = Vec::with_capacity(groups.len());
    let mut client_m2 = Vec::with_capacity(groups.len());
    let mut client_lag_mean1 = Vec::with_capacity(groups.len());
    let mut client_lag_m2 = Vec::with_capacity(groups.len());
    for (g, &n_k) in groups.iter().zip(&client_n) {
        let mut cm = Array2::<f64>::zeros((d, h));
        let mut cm2 = Array4::<f64>::zeros((d, d, h, h));
        let mut clm = Array3::<f64>::zeros((lag, d, h));
        let mut clm2 = Array5::<f64>::zeros((lag, d, d, h, h));
        for p in g {
            let w = p.n as f64 / nf;
            mean1.scaled_add(w, &p.moment_1);
            m2.scaled_add(w, &p.moment_2);
            lag_mean1.scaled_add(w, &p.lag_moment_1);
            lag_m2.scaled_add(w, &p.lag_moment);
            let wk = p.n as f64 / n_k.max(1) as f64;
            cm.scaled_add(wk, &p.moment_1);
            cm2.scaled_add(wk, &p.moment_2);
            clm.scaled_add(wk, &p.lag_moment_1);
            clm2.scaled_add(wk, &p.lag_moment);
        }
        client_mean1.push(cm);
        client_m2.push(cm2);
        client_lag_mean1.push(clm);
        client_lag_m2.push(clm2);
    }
    Ok(LagMoments {
        n_total,
        client_n,
        mean1,
        m2,
        lag_mean1,
        lag_m2,
        client_mean1,
        client_m2,
        client_lag_mean1,
        client_lag_m2,
    })
}

// --- the conditional-independence statistic ------------------------------

/// Centered covariance block `E[phi_x phi_y^T] - m_x m_y^T`.
fn centered(
    m2: ndarray::ArrayView2<f64>,
    mx: ndarray::ArrayView1<f64>,
    my: ndarray::ArrayView1<f64>,
) -> Array2<f64> {
    let mut out = m2.to_owned();
    for a in 0..mx.len() {
        for b in 0..my.len() {
            out[[a, b]] -= mx[a] * my[b];
        }
    }
    out
}

/// Moments of a single test instance, abstracted over whether X is a
/// contemporaneous or a lagged variable. The variable list held here is
/// `[Z_1 .. Z_q, Y]` (Y last); all entries are uncentered feature moments.
struct TestMoments {
    n_total: usize,
    /// client weights n_k / n
    p: Vec<f64>,
    mu_x: Array1<f64>,
    mu_x_k: Vec<Array1<f64>>,
    /// pooled means, indices 0..q are Z, index q is Y
    mu: Vec<Array1<f64>>,
    mu_k: Vec<Vec<Array1<f64>>>,
    /// `xm_k[k][v] = E_k[phi(X) phi(V_v)^T]`
    xm_k: Vec<Vec<Array2<f64>>>,
    /// `zm_k[k][v][w] = E_k[phi(V_v) phi(V_w)^T]`
    zm_k: Vec<Vec<Vec<Array2<f64>>>>,
}

impl TestMoments {
    fn h(&self) -> usize {
        self.mu_x.len()
    }
    fn clients(&self) -> usize {
        self.p.len()
    }
    fn z_count(&self) -> usize {
        self.mu.len() - 1
    }

    fn pooled_xm(&self, v: usize) -> Array2<f64> {
        let h = self.h();
        let mut out = Array2::<f64>::zeros((h, h));
        for (k, &pk) in self.p.iter().enumerate() {
            out.scaled_add(pk, &self.xm_k[k][v]);
        }
        out
    }

    fn pooled_zm(&self, v: usize, w: usize) -> Array2<f64> {
        let h = self.h();
        let mut out = Array2::<f64>::zeros((h, h));
        for (k, &pk) in self.p.iter().enumerate() {
            out.scaled_add(pk, &self.zm_k[k][v][w]);
        }
        out
    }
}

/// The normalized statistic
/// `n * ||C_xy|z||_F^2 / (tr(C_xx|z) * tr(C_yy|z))` with
/// `C_xy|z = C_xy - C_xz (C_zz + eps I)^{-1} C_zy` and analogous residual
/// self-covariance traces. The normalization divides out how much of X and Y
/// the conditioning explains, so the null level stays comparable across
/// pairs whether or not Z nearly determines them; the traces come for free
/// because the paired feature map has exactly unit norm
/// (`tr E[phi phi^T] = 1`).
///
/// Without the surrogate, the conditioning features are the plain RFF blocks
/// of the Z variables. With the surrogate, the conditioning features are the
/// one-hot client block U plus the tensor-product blocks `phi(Z_v) (x) U_k`
/// (one h-wide block per Z variable per client), so the feature regression
/// can express client-specific conditional means — dependence explained
/// jointly by Z and client identity is removed, not just additive effects.
fn conditional_statistic(tm: &TestMoments, use_surrogate: bool, ridge_scale: f64) -> Result<f64> {
    let h = tm.h();
    let k = tm.clients();
    let q = tm.z_count();
    let y = q; // index of Y in the variable list
    let mu_y = &tm.mu[y];

    let c_xy = centered(tm.pooled_xm(y).view(), tm.mu_x.view(), mu_y.view());
    // unit-norm features: tr(C_xx) = 1 - ||mu_x||^2, same for Y
    let tr_xx = 1.0 - tm.mu_x.iter().map(|v| v * v).sum::<f64>();
    let tr_yy = 1.0 - mu_y.iter().map(|v| v * v).sum::<f64>();
    let dim = if use_surrogate { q * h * k + k } else { q * h };
    if dim == 0 {
        return statistic_from_blocks(tm.n_total, c_xy, None, None, None, tr_xx, tr_yy, ridge_scale);
    }

    let mut c_xz = Array2::<f64>::zeros((h, dim));
    let mut c_zy = Array2::<f64>::zeros((dim, h));
    let mut c_zz = Array2::<f64>::zeros((dim, dim));

    if !use_surrogate {
        for v in 0..q {
            let r = v * h..(v + 1) * h;
            c_xz.slice_mut(ndarray::s![.., r.clone()]).assign(&centered(
                tm.pooled_xm(v).view(),
                tm.mu_x.view(),
                tm.mu[v].view(),
            ));
            c_zy.slice_mut(ndarray::s![r.clone(), ..]).assign(&centered(
                tm.pooled_zm(v, y).view(),
                tm.mu[v].view(),
                mu_y.view(),
            ));
            for w in 0..q {
                let rc = w * h..(w + 1) * h;
                c_zz.slice_mut(ndarray::s![r.clone(), rc]).assign(&centered(
                    tm.pooled_zm(v, w).view(),
                    tm.mu[v].view(),
                    tm.mu[w].view(),
                ));
            }
        }
        return statistic_from_blocks(
            tm.n_total,
            c_xy,
            Some(c_xz),
            Some(c_zz),
            Some(c_zy),
            tr_xx,
            tr_yy,
            ridge_scale,
        );
    }

    // surrogate layout: [ (v=0,k=0) .. (v=0,k=K-1), (v=1,k=0), ..., U ]
    let block = |v: usize, c: usize| (v * k + c) * h..(v * k + c + 1) * h;
    let u_off = q * h * k;
    for v in 0..q {
        for c in 0..k {
            let pk = tm.p[c];
            let muv_c = &tm.mu_k[c][v];
            // Cov(X, phi(Z_v) 1_c) = p_c E_c[phi_x phi_v^T] - mu_x (p_c mu_{v,c})^T
            let mut xz = tm.xm_k[c][v].clone() * pk;
            for a in 0..h {
                for b in 0..h {
                    xz[[a, b]] -= tm.mu_x[a] * pk * muv_c[b];
                }
            }
            c_xz.slice_mut(ndarray::s![.., block(v, c)]).assign(&xz);
            // Cov(phi(Z_v) 1_c, Y)
            let mut zy = tm.zm_k[c][v][y].clone() * pk;
            for a in 0..h {
                for b in 0..h {
                    zy[[a, b]] -= pk * muv_c[a] * mu_y[b];
                }
            }
            c_zy.slice_mut(ndarray::s![block(v, c), ..]).assign(&zy);
            // Cov with the other per-client blocks (same client only in the
            // moment term; means always interact)
            for w in 0..q {
                for c2 in 0..k {
                    let pk2 = tm.p[c2];
                    let muw_c2 = &tm.mu_k[c2][w];
                    let mut zz = if c == c2 {
                        tm.zm_k[c][v][w].clone() * pk
                    } else {
                        Array2::<f64>::zeros((h, h))
                    };
                    for a in 0..h {
                        for b in 0..h {
                            zz[[a, b]] -= pk * pk2 * muv_c[a] * muw_c2[b];
                        }
                    }
                    c_zz.slice_mut(ndarray::s![block(v, c), block(w, c2)])
                        .assign(&zz);
                }
            }
            // Cov(phi(Z_v) 1_c, U_c2) = p_c (delta_{c,c2} - p_c2) mu_{v,c}
            for c2 in 0..k {
                let coef = pk * (if c == c2 { 1.0 } else { 0.0 } - tm.p[c2]);
                for a in 0..h {
                    c_zz[[block(v, c).start + a, u_off + c2]] = coef * muv_c[a];
                    c_zz[[u_off + c2, block(v, c).start + a]] = coef * muv_c[a];
                }
            }
        }
    }
    // U rows/cols against X and Y, and Cov(U, U)
    for c in 0..k {
        let pk = tm.p[c];
        for a in 0..h {
            c_xz[[a, u_off + c]] = pk * (tm.mu_x_k[c][a] - tm.mu_x[a]);
            c_zy[[u_off + c, a]] = pk * (tm.mu_k[c][y][a] - mu_y[a]);
        }
        for c2 in 0..k {
            let pk2 = tm.p[c2];
            c_zz[[u_off + c, u_off + c2]] = if c == c2 { pk - pk * pk2 } else { -pk * pk2 };
        }
    }
    statistic_from_blocks(
        tm.n_total,
        c_xy,
        Some(c_xz),
        Some(c_zz),
        Some(c_zy),
        tr_xx,
        tr_yy,
        ridge_scale,
    )
}

/// Floor for the residual-variance traces in the denominator; degenerate
/// (fully explained or constant) variables otherwise divide by ~0.
const TRACE_FLOOR: f64 = 1e-10;

#[allow(clippy::too_many_arguments)]
fn statistic_from_blocks(
    n: usize,
    c_xy: Array2<f64>,
    c_xz: Option<Array2<f64>>,
    c_zz: Option<Array2<f64>>,
    c_zy: Option<Array2<f64>>,
    tr_xx: f64,
    tr_yy: f64,
    ridge_scale: f64,
) -> Result<f64> {
    let h = c_xy.ncols();
    let (resid, tr_x, tr_y) = match (c_xz, c_zz, c_zy) {
        (Some(c_xz), Some(mut c_zz), Some(c_zy)) => {
            let q = c_zz.nrows();
            let eps = (ridge_scale * c_zz.diag().sum() / q as f64).max(1e-12);
            for i in 0..q {
                c_zz[[i, i]] += eps;
            }
            // one factorization for both regressions: stack [C_zy | C_zx]
            let rhs = ndarray::concatenate![Axis(1), c_zy.view(), c_xz.t()];
            let sol = linalg::spd_solve(&c_zz.view(), &rhs.view()).map_err(|_| {
                Error::numeric("singular regularized conditioning block (degenerate features)")
            })?;
            let sol_zy = sol.slice(ndarray::s![.., ..h]);
            let sol_zx = sol.slice(ndarray::s![.., h..]);
            let resid = &c_xy - &c_xz.dot(&sol_zy);
            // tr(C_xz K^-1 C_zx) and tr(C_yz K^-1 C_zy)
            let expl_x: f64 = c_xz.iter().zip(sol_zx.t().iter()).map(|(a, b)| a * b).sum();
            let expl_y: f64 = c_zy.iter().zip(sol_zy.iter()).map(|(a, b)| a * b).sum();
            (resid, tr_xx - expl_x, tr_yy - expl_y)
        }
        _ => (c_xy, tr_xx, tr_yy),
    };
    let denom = tr_x.max(TRACE_FLOOR) * tr_y.max(TRACE_FLOOR);
    Ok(n as f64 * linalg::frobenius_sq(&resid.view()) / denom)
}

/// Federated conditional-independence statistic on pooled moments; `z`
/// lists the conditioning variables and `use_surrogate` switches on the
/// client-surrogate conditioning (U plus per-client feature blocks).
pub fn fcit_statistic(
    gm: &GlobalMoments,
    i: usize,
    j: usize,
    z: &[usize],
    use_surrogate: bool,
    ridge_scale: f64,
) -> Result<f64> {
    if i == j || z.contains(&i) || z.contains(&j) {
        return Err(Error::config("conditioning set must exclude the tested pair"));
    }
    let k = gm.clients();
    // variable list: Z then Y
    let vars: Vec<usize> = z.iter().copied().chain([j]).collect();
    let tm = TestMoments {
        n_total: gm.n_total,
        p: gm
            .client_n
            .iter()
            .map(|&n| n as f64 / gm.n_total as f64)
            .collect(),
        mu_x: gm.mean1.row(i).to_owned(),
        mu_x_k: (0..k).map(|c| gm.client_mean1[c].row(i).to_owned()).collect(),
        mu: vars.iter().map(|&v| gm.mean1.row(v).to_owned()).collect(),
        mu_k: (0..k)
            .map(|c| {
                vars.iter()
                    .map(|&v| gm.client_mean1[c].row(v).to_owned())
                    .collect()
            })
            .collect(),
        xm_k: (0..k)
            .map(|c| {
                vars.iter()
                    .map(|&v| {
                        gm.client_m2[c]
                            .index_axis(Axis(0), i)
                            .index_axis(Axis(0), v)
                            .to_owned()
                    })
                    .collect()
            })
            .collect(),
        zm_k: (0..k)
            .map(|c| {
                vars.iter()
                    .map(|&v| {
                        vars.iter()
                            .map(|&w| {
                                gm.client_m2[c]
                                    .index_axis(Axis(0), v)
                                    .index_axis(Axis(0), w)
                                    .to_owned()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect(),
    };
    conditional_statistic(&tm, use_surrogate, ridge_scale)
}

/// Lagged statistic: X is variable `i` at lag `tau`, Y is variable `j`
/// contemporaneous, Z are contemporaneous variables (plus the surrogate
/// blocks when enabled).
pub fn fcit_lag_statistic(
    lm: &LagMoments,
    tau: usize,
    i: usize,
    j: usize,
    z: &[usize],
    use_surrogate: bool,
    ridge_scale: f64,
) -> Result<f64> {
    if tau == 0 || tau > lm.lag_mean1.shape()[0] {
        return Err(Error::config("lag index out of range"));
    }
    if z.contains(&j) {
        return Err(Error::config("conditioning set must exclude the target"));
    }
    let k = lm.client_n.len();
    let vars: Vec<usize> = z.iter().copied().chain([j]).collect();
    let tm = TestMoments {
        n_total: lm.n_total,
        p: lm
            .client_n
            .iter()
            .map(|&n| n as f64 / lm.n_total as f64)
            .collect(),
        mu_x: lm.lag_mean1.index_axis(Axis(0), tau - 1).row(i).to_owned(),
        mu_x_k: (0..k)
            .map(|c| {
                lm.client_lag_mean1[c]
                    .index_axis(Axis(0), tau - 1)
                    .row(i)
                    .to_owned()
            })
            .collect(),
        mu: vars.iter().map(|&v| lm.mean1.row(v).to_owned()).collect(),
        mu_k: (0..k)
            .map(|c| {
                vars.iter()
                    .map(|&v| lm.client_mean1[c].row(v).to_owned())
                    .collect()
            })
            .collect(),
        xm_k: (0..k)
            .map(|c| {
                vars.iter()
                    .map(|&v| {
                        lm.client_lag_m2[c]
                            .index_axis(Axis(0), tau - 1)
                            .index_axis(Axis(0), i)
                            .index_axis(Axis(0), v)
                            .to_owned()
                    })
                    .collect()
            })
            .collect(),
        zm_k: (0..k)
            .map(|c| {
                vars.iter()
                    .map(|&v| {
                        vars.iter()
                            .map(|&w| {
                                lm.client_m2[c]
                                    .index_axis(Axis(0), v)
                                    .index_axis(Axis(0), w)
                                    .to_owned()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect(),
    };
    conditional_statistic(&tm, use_surrogate, ridge_scale)
}


/// Hard mask for one pooled slice: `S_ij = 0` iff the pooled conditional
/// statistic (conditioning on all remaining variables plus the client
/// surrogate) falls below `delta_hard`. Diagonal forced to 0.
pub fn compute_hard_mask(gm: &GlobalMoments, delta_hard: f64, ridge_scale: f64) -> Result<Array2<u8>> {
    let d = gm.vars();
    let mut s = Array2::<u8>::zeros((d, d));
    for i in 0..d {
        for j in i + 1..d {
            let z: Vec<usize> = (0..d).filter(|&v| v != i && v != j).collect();
            let stat = fcit_statistic(gm, i, j, &z, true, ridge_scale)?;
            let bit = if stat >= delta_hard { 1 } else { 0 };
            s[[i, j]] = bit;
            s[[j, i]] = bit;
        }
    }
    Ok(s)
}

/// Client-local dependence indicator: same statistic on the client's own
/// moments (no surrogate; client identity is constant locally).
pub fn local_kci_indicator(
    packet: &StatPacket,
    i: usize,
    j: usize,
    delta_local: f64,
    ridge_scale: f64,
) -> Result<u8> {
    let gm = aggregate_moments(std::slice::from_ref(packet))?;
    let d = gm.vars();
    let z: Vec<usize> = (0..d).filter(|&v| v != i && v != j).collect();
    let stat = fcit_statistic(&gm, i, j, &z, false, ridge_scale)?;
    Ok(if stat >= delta_local { 1 } else { 0 })
}

// --- temporal correction and interpolation -------------------------------

fn median_of(sorted: &mut [f64]) -> f64 {
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Sliding median over the sampled-time axis of each (i, j, k) indicator
/// series; isolated spikes (`00100`, `11011`) are removed. The window widens
/// from 3 to 5 where the client's omega for either endpoint exceeds its own
/// robust baseline (median + 3 MAD across sampled times), so noisy stretches
/// are smoothed harder. Boundaries use shrunken windows; even-length windows
/// keep the original value on a tie.
pub fn temporal_filter(series: &IndicatorSeries, omegas: &Array3<f64>) -> IndicatorSeries {
    let shape = series.values.dim();
    let (n_s, k, d, _) = shape;
    if n_s < 3 {
        return series.clone();
    }
    // robust per (client, variable) noise baseline
    let mut noisy = Array3::<bool>::from_elem((n_s, k, d), false);
    for kk in 0..k {
        for dd in 0..d {
            let vals: Vec<f64> = (0..n_s).map(|t| omegas[[t, kk, dd]]).collect();
            let med = median_of(&mut vals.clone());
            let mut devs: Vec<f64> = vals.iter().map(|v| (v - med).abs()).collect();
            let mad = median_of(&mut devs);
            let thresh = med + 3.0 * mad;
            for t in 0..n_s {
                if omegas[[t, kk, dd]] > thresh + 1e-12 {
                    noisy[[t, kk, dd]] = true;
                }
            }
        }
    }
    let mut out = series.values.clone();
    for kk in 0..k {
        for i in 0..d {
            for j in 0..d {
                for t in 0..n_s {
                    let widen = noisy[[t, kk, i]] || noisy[[t, kk, j]];
                    let half = if widen { 2 } else { 1 };
                    let lo = t.saturating_sub(half);
                    let hi = (t + half + 1).min(n_s);
                    let len = hi - lo;
                    let ones: usize = (lo..hi)
                        .map(|u| series.values[[u, kk, i, j]] as usize)
                        .sum();
                    out[[t, kk, i, j]] = if 2 * ones > len {
                        1
                    } else if 2 * ones < len {
                        0
                    } else {
                        series.values[[t, kk, i, j]]
                    };
                }
            }
        }
    }
    IndicatorSeries { values: out }
}

/// The same temporal consistency correction for the pooled hard-mask
/// series `[n_sampled, D, D]`: a sliding width-3 median over sampled times
/// fills transient drops inside stable dependence runs and clears isolated
/// activations, exactly the spike patterns the indicator filter removes.
/// Boundaries use shrunken windows; ties keep the original value.
pub fn filter_hard_masks(s_series: &Array3<u8>) -> Array3<u8> {
    let (n_s, d, _) = s_series.dim();
    if n_s < 3 {
        return s_series.clone();
    }
    let mut out = s_series.clone();
    for i in 0..d {
        for j in 0..d {
            for t in 0..n_s {
                let lo = t.saturating_sub(1);
                let hi = (t + 2).min(n_s);
                let len = hi - lo;
                let ones: usize = (lo..hi).map(|u| s_series[[u, i, j]] as usize).sum();
                out[[t, i, j]] = if 2 * ones > len {
                    1
                } else if 2 * ones < len {
                    0
                } else {
                    s_series[[t, i, j]]
                };
            }
        }
    }
    out
}

/// For each t in `0..t_len`, the index of the latest sampled time at or
/// before t; times before the first sample inherit the first sample.
pub fn zero_order_hold(sampled: &[usize], t_len: usize) -> Vec<usize> {
    assert!(!sampled.is_empty());
    (0..t_len)
        .map(|t| {
            let mut idx = 0;
            for (s_idx, &s_t) in sampled.iter().enumerate() {
                if s_t <= t {
                    idx = s_idx;
                } else {
                    break;
                }
            }
            idx
        })
        .collect()
}

/// Soft mask: `L_ij = S_ij * (1 - min_k I_ij_k)` — a surviving edge is
/// penalized iff at least one client found it independent.
pub fn compute_soft_mask(s: &Array2<u8>, indicators: &Array3<u8>) -> Array2<u8> {
    let (k, d, _) = indicators.dim();
    let mut l = Array2::<u8>::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            let min_k = (0..k).map(|c| indicators[[c, i, j]]).min().unwrap_or(0);
            l[[i, j]] = s[[i, j]] * (1 - min_k);
        }
    }
    l
}

/// Static lag priors from packets pooled over clients and sampled times.
pub fn static_lag_priors(
    groups: &[Vec<&StatPacket>],
    delta_hard: f64,
    delta_local: f64,
    ridge_scale: f64,
) -> Result<(Array3<u8>, Array3<u8>)> {
    let pooled = pool_lag_moments(groups)?;
    let d = pooled.mean1.nrows();
    let lag = pooled.lag_mean1.shape()[0];
    let mut s_a = Array3::<u8>::zeros((lag, d, d));
    let mut l_a = Array3::<u8>::zeros((lag, d, d));
    if lag == 0 {
        return Ok((s_a, l_a));
    }
    // per-client time-pooled moments for the local indicators
    let per_client: Vec<LagMoments> = groups
        .iter()
        .map(|g| pool_lag_moments(std::slice::from_ref(g)))
        .collect::<Result<_>>()?;
    for tau in 1..=lag {
        for i in 0..d {
            for j in 0..d {
                let z: Vec<usize> = (0..d).filter(|&v| v != j).collect();
                let stat = fcit_lag_statistic(&pooled, tau, i, j, &z, true, ridge_scale)?;
                if stat >= delta_hard {
                    s_a[[tau - 1, i, j]] = 1;
                    let mut min_ind = 1u8;
                    for cm in &per_client {
                        let local =
                            fcit_lag_statistic(cm, tau, i, j, &z, false, ridge_scale)?;
                        if local < delta_local {
                            min_ind = 0;
                            break;
                        }
                    }
                    l_a[[tau - 1, i, j]] = 1 - min_ind;
                }
            }
        }
    }
    Ok((s_a, l_a))
}

// --- threshold calibration ------------------------------------------------

fn quantile(mut xs: Vec<f64>, q: f64) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((q * xs.len() as f64).ceil() as usize).clamp(1, xs.len()) - 1;
    xs[idx]
}

/// Copy of `panel` with variable `var`'s sample rows shuffled, which breaks
/// that variable's dependence on every other variable while keeping its
/// marginal distribution and its own temporal structure intact.
fn permute_var(panel: &TimeSeriesPanel, var: usize, rng: &mut ChaCha8Rng) -> TimeSeriesPanel {
    let (n, t_len, _) = panel.values.dim();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut values = panel.values.clone();
    for (s_new, &s_old) in idx.iter().enumerate() {
        for t in 0..t_len {
            values[[s_new, t, var]] = panel.values[[s_old, t, var]];
        }
    }
    TimeSeriesPanel {
        client_id: panel.client_id,
        values,
    }
}

/// The pooled lagged statistic averages moments over sampled times; its null
/// level is insensitive to how many slices are pooled once the sample count
/// dwarfs the conditioning dimension, so calibration caps the pooled slices
/// to bound its cost.
const CALIB_MAX_TIMES: usize = 3;

/// Null quantile of the pooled contemporaneous statistic, estimated by a
/// permutation null on one held-out slice of the real data: each draw
/// shuffles one variable's sample rows within every client, enforcing its
/// independence while preserving marginals, client proportions, and the
/// conditioning dimensionality of the production tests. Each permutation
/// yields one null statistic per partner variable, pooled over rotating
/// permuted variables until `draws` statistics are collected.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_pooled_threshold(
    panels: &[TimeSeriesPanel],
    t: usize,
    rff: &RffParams,
    std: &Standardizer,
    use_surrogate: bool,
    ridge_scale: f64,
    draws: usize,
    q: f64,
    seed: u64,
) -> Result<f64> {
    let d = panels
        .first()
        .map(|p| p.vars())
        .ok_or_else(|| Error::config("calibration needs at least one panel"))?;
    if d < 2 {
        return Err(Error::config("calibration needs at least two variables"));
    }
    let perms = draws.div_ceil(d - 1).max(1);
    let stats: Vec<Vec<f64>> = (0..perms)
        .into_par_iter()
        .map(|p| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (p as u64).wrapping_mul(0x517c_c1b7));
            let v = p % d;
            let packets: Vec<StatPacket> = panels
                .iter()
                .map(|panel| time_slice_stats(&permute_var(panel, v, &mut rng), t, 0, rff, std))
                .collect::<Result<_>>()?;
            let gm = aggregate_moments(&packets)?;
            (0..d)
                .filter(|&j| j != v)
                .map(|j| {
                    let z: Vec<usize> = (0..d).filter(|&w| w != v && w != j).collect();
                    fcit_statistic(&gm, v, j, &z, use_surrogate, ridge_scale)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok(quantile(stats.into_iter().flatten().collect(), q))
}

/// Null quantile for the pooled lagged statistic, by the same permutation
/// scheme: one variable is shuffled per draw (the same sample permutation at
/// every time step, so only its cross-variable links break) and the lagged
/// statistic is computed against every partner after pooling a capped number
/// of sampled slices.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_lag_threshold(
    panels: &[TimeSeriesPanel],
    sampled: &[usize],
    lag: usize,
    rff: &RffParams,
    std: &Standardizer,
    use_surrogate: bool,
    ridge_scale: f64,
    draws: usize,
    q: f64,
    seed: u64,
) -> Result<f64> {
    let d = panels
        .first()
        .map(|p| p.vars())
        .ok_or_else(|| Error::config("calibration needs at least one panel"))?;
    if d < 2 || lag == 0 || sampled.is_empty() {
        return Err(Error::config(
            "lag calibration needs two variables, a positive lag, and sampled times",
        ));
    }
    let times: Vec<usize> = sampled.iter().copied().take(CALIB_MAX_TIMES).collect();
    let perms = draws.div_ceil(d - 1).max(1);
    let stats: Vec<Vec<f64>> = (0..perms)
        .into_par_iter()
        .map(|p| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (p as u64).wrapping_mul(0x2545_f491));
            let v = p % d;
            let groups: Vec<Vec<StatPacket>> = panels
                .iter()
                .map(|panel| {
                    let shuffled = permute_var(panel, v, &mut rng);
                    times
                        .iter()
                        .map(|&t| time_slice_stats(&shuffled, t, lag, rff, std))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?;
            let refs: Vec<Vec<&StatPacket>> =
                groups.iter().map(|g| g.iter().collect()).collect();
            let lm = pool_lag_moments(&refs)?;
            (0..d)
                .filter(|&j| j != v)
                .map(|j| {
                    let z: Vec<usize> = (0..d).filter(|&w| w != j).collect();
                    fcit_lag_statistic(&lm, 1, v, j, &z, use_surrogate, ridge_scale)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok(quantile(stats.into_iter().flatten().collect(), q))
}

// --- orchestration --------------------------------------------------------

/// Byte accounting for the mining phase: packet bytes actually serialized
/// upstream plus the broadcast standardizer downstream.
#[derive(Debug, Clone, Default)]
pub struct DismTelemetry {
    pub bytes_up: usize,
    pub bytes_down: usize,
    pub delta_hard: f64,
    pub delta_local: f64,
    pub delta_hard_lag: f64,
    pub delta_local_lag: f64,
}

/// Runs the whole mining phase over in-process clients.
pub fn run_dism(
    panels: &[TimeSeriesPanel],
    lag: usize,
    config: &DismConfig,
) -> Result<(PriorSet, DismTelemetry)> {
    let first = panels.first().ok_or_else(|| Error::config("no panels"))?;
    let (t_len, d) = (first.steps(), first.vars());
    if t_len <= lag {
        return Err(Error::config("series too short for the lag order"));
    }
    for p in panels {
        if p.steps() != t_len || p.vars() != d {
            return Err(Error::shape("panels disagree on T or D"));
        }
        p.validate()?;
    }
    if config.t_s == 0 {
        return Err(Error::config("sampling rate must be >= 1"));
    }
    if d < 2 {
        return Err(Error::config("need at least two variables"));
    }

    let mut telemetry = DismTelemetry::default();

    // preliminary moment exchange: global standardizer broadcast to clients
    let std = Standardizer::fit(panels, lag)?;
    telemetry.bytes_up += panels.len() * (2 * d + 1) * 8;
    telemetry.bytes_down += panels.len() * 2 * d * 8;

    let rff = make_rff(config.h, config.sigma, config.seed)?;
    // the lag warm-up has no lagged slices, so sampling starts at index L
    let sampled: Vec<usize> = (lag..t_len).step_by(config.t_s).collect();
    let n_s = sampled.len();
    let k = panels.len();

    // client-side packets (parallel across clients and sampled times),
    // serialized and re-parsed so the wire format is what the server sees
    let jobs: Vec<(usize, usize)> = (0..k)
        .flat_map(|kk| sampled.iter().map(move |&t| (kk, t)))
        .collect();
    let raw: Vec<Vec<u8>> = jobs
        .par_iter()
        .map(|&(kk, t)| Ok(time_slice_stats(&panels[kk], t, lag, &rff, &std)?.to_bytes()))
        .collect::<Result<_>>()?;
    telemetry.bytes_up += raw.iter().map(|b| b.len()).sum::<usize>();
    let mut packets: Vec<Vec<StatPacket>> = vec![Vec::new(); k];
    for (bytes, &(kk, _)) in raw.iter().zip(&jobs) {
        packets[kk].push(StatPacket::from_bytes(bytes)?.0);
    }

    // thresholds: permutation-calibrated on the first sampled (held-out)
    // slice unless fixed overrides are configured
    let calib_t = sampled[0];
    let largest: &TimeSeriesPanel = panels
        .iter()
        .max_by_key(|p| p.n_samples())
        .expect("at least one panel");
    let delta_hard = match config.delta_hard {
        ThresholdSpec::Fixed(v) => v,
        ThresholdSpec::Calibrated => calibrate_pooled_threshold(
            panels,
            calib_t,
            &rff,
            &std,
            true,
            config.ridge_scale,
            config.calib_draws,
            config.calib_quantile,
            config.seed.wrapping_add(1),
        )?,
    };
    let delta_local = match config.delta_local {
        ThresholdSpec::Fixed(v) => v,
        ThresholdSpec::Calibrated => {
            // calibrate on the largest client; the statistic grows with n
            // under dependence, so this is the conservative choice
            calibrate_pooled_threshold(
                std::slice::from_ref(largest),
                calib_t,
                &rff,
                &std,
                false,
                config.ridge_scale,
                config.calib_draws,
                config.calib_quantile,
                config.seed.wrapping_add(2),
            )?
        }
    };
    let (delta_hard_lag, delta_local_lag) = if lag > 0 {
        let dh = match config.delta_hard {
            ThresholdSpec::Fixed(v) => v,
            ThresholdSpec::Calibrated => calibrate_lag_threshold(
                panels,
                &sampled,
                lag,
                &rff,
                &std,
                true,
                config.ridge_scale,
                config.calib_draws,
                config.calib_quantile,
                config.seed.wrapping_add(3),
            )?,
        };
        let dl = match config.delta_local {
            ThresholdSpec::Fixed(v) => v,
            ThresholdSpec::Calibrated => calibrate_lag_threshold(
                std::slice::from_ref(largest),
                &sampled,
                lag,
                &rff,
                &std,
                false,
                config.ridge_scale,
                config.calib_draws,
                config.calib_quantile,
                config.seed.wrapping_add(4),
            )?,
        };
        (dh, dl)
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    telemetry.delta_hard = delta_hard;
    telemetry.delta_local = delta_local;
    telemetry.delta_hard_lag = delta_hard_lag;
    telemetry.delta_local_lag = delta_local_lag;

    // dynamic priors per sampled time
    struct SliceResult {
        s: Array2<u8>,
        indicators: Array3<u8>,
        omega: Array2<f64>,
    }
    let slices: Vec<SliceResult> = (0..n_s)
        .into_par_iter()
        .map(|ti| {
            let at_t: Vec<StatPacket> = packets.iter().map(|g| g[ti].clone()).collect();
            let gm = aggregate_moments(&at_t)?;
            let s = compute_hard_mask(&gm, delta_hard, config.ridge_scale)?;
            let mut indicators = Array3::<u8>::zeros((k, d, d));
            let mut omega = Array2::<f64>::zeros((k, d));
            for (kk, pkt) in at_t.iter().enumerate() {
                for i in 0..d {
                    omega[[kk, i]] = pkt.omega[i];
                    for j in i + 1..d {
                        let ind = local_kci_indicator(pkt, i, j, delta_local, config.ridge_scale)?;
                        indicators[[kk, i, j]] = ind;
                        indicators[[kk, j, i]] = ind;
                    }
                }
            }
            Ok(SliceResult { s, indicators, omega })
        })
        .collect::<Result<_>>()?;

    let mut ind_series = Array4::<u8>::zeros((n_s, k, d, d));
    let mut omegas = Array3::<f64>::zeros((n_s, k, d));
    for (ti, sl) in slices.iter().enumerate() {
        ind_series
            .index_axis_mut(Axis(0), ti)
            .assign(&sl.indicators);
        omegas.index_axis_mut(Axis(0), ti).assign(&sl.omega);
    }
    let corrected = temporal_filter(&IndicatorSeries { values: ind_series }, &omegas);

    // the hard-mask series gets the same spike correction over sampled times
    let mut s_series = Array3::<u8>::zeros((n_s, d, d));
    for (ti, sl) in slices.iter().enumerate() {
        s_series.index_axis_mut(Axis(0), ti).assign(&sl.s);
    }
    let s_series = filter_hard_masks(&s_series);

    // interpolate to every t and derive soft masks
    let hold = zero_order_hold(&sampled, t_len);
    let mut s_full = Array3::<u8>::zeros((t_len, d, d));
    let mut l_full = Array3::<u8>::zeros((t_len, d, d));
    for t in 0..t_len {
        let ti = hold[t];
        let s_t = s_series.index_axis(Axis(0), ti).to_owned();
        let l = compute_soft_mask(&s_t, &corrected.values.index_axis(Axis(0), ti).to_owned());
        s_full.index_axis_mut(Axis(0), t).assign(&s_t);
        l_full.index_axis_mut(Axis(0), t).assign(&l);
    }

    // static lag priors
    let (s_a, l_a) = if lag > 0 {
        let groups: Vec<Vec<&StatPacket>> =
            packets.iter().map(|g| g.iter().collect()).collect();
        static_lag_priors(&groups, delta_hard_lag, delta_local_lag, config.ridge_scale)?
    } else {
        (
            Array3::<u8>::zeros((0, d, d)),
            Array3::<u8>::zeros((0, d, d)),
        )
    };

    let priors = PriorSet {
        s: s_full,
        l_soft: l_full,
        s_a,
        l_soft_a: l_a,
        sampled_times: sampled,
        meta: PriorMeta {
            t_s: config.t_s,
            delta_hard,
            delta_local,
            delta_hard_lag,
            delta_local_lag,
            ridge_scale: config.ridge_scale,
            h: config.h,
            sigma: config.sigma,
            rff_seed: config.seed,
        },
    };
    priors.validate()?;
    Ok((priors, telemetry))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use approx::assert_abs_diff_eq;

    fn rff() -> RffParams {
        make_rff(16, 1.0, 42).unwrap()
    }

    #[test]
    fn single_packet_aggregation_is_identity() {
        let panel = synth::TimeSeriesPanel {
            client_id: 0,
            values: Array3::from_shape_fn((5, 2, 2), |(s, t, d)| {
                (s as f64) * 0.3 + (t as f64) - (d as f64) * 0.7
            }),
        };
        let pkt = time_slice_stats(&panel, 1, 1, &rff(), &Standardizer::identity(2)).unwrap();
        let gm = aggregate_moments(std::slice::from_ref(&pkt)).unwrap();
        assert_eq!(gm.mean1, pkt.moment_1);
        assert_eq!(gm.m2, pkt.moment_2);
    }

    #[test]
    fn split_panel_pools_to_whole_panel_covariance() {
        let whole = synth::TimeSeriesPanel {
            client_id: 0,
            values: Array3::from_shape_fn((40, 1, 3), |(s, _, d)| {
                ((s * 7 + d * 3) as f64 * 0.37).sin()
            }),
        };
        let std = Standardizer::identity(3);
        let p = rff();
        let whole_pkt = time_slice_stats(&whole, 0, 0, &p, &std).unwrap();
        let parts: Vec<StatPacket> = [(0, 15), (15, 40)]
            .iter()
            .map(|&(a, b)| {
                let sub = synth::TimeSeriesPanel {
                    client_id: 0,
                    values: whole.values.slice(ndarray::s![a..b, .., ..]).to_owned(),
                };
                time_slice_stats(&sub, 0, 0, &p, &std).unwrap()
            })
            .collect();
        let gm = aggregate_moments(&parts).unwrap();
        for (a, b) in gm.m2.iter().zip(whole_pkt.moment_2.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        for (a, b) in gm.mean1.iter().zip(whole_pkt.moment_1.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn aggregation_rejects_mixed_times() {
        let panel = synth::TimeSeriesPanel {
            client_id: 0,
            values: Array3::from_shape_fn((4, 3, 2), |(s, t, d)| (s + t + d) as f64 * 0.2),
        };
        let std = Standardizer::identity(2);
        let a = time_slice_stats(&panel, 1, 1, &rff(), &std).unwrap();
        let b = time_slice_stats(&panel, 2, 1, &rff(), &std).unwrap();
        assert!(aggregate_moments(&[a, b]).is_err());
    }

    #[test]
    fn copy_variable_statistic_matches_self_covariance() {
        let n = 50;
        // both variables are the same signal, so C_01 = C_00
        let values = Array3::from_shape_fn((n, 1, 2), |(s, _, _)| ((s as f64) * 0.61).sin());
        let panel = synth::TimeSeriesPanel { client_id: 0, values };
        let pkt = time_slice_stats(&panel, 0, 0, &rff(), &Standardizer::identity(2)).unwrap();
        let gm = aggregate_moments(std::slice::from_ref(&pkt)).unwrap();
        let stat_xy = fcit_statistic(&gm, 0, 1, &[], false, 1e-3).unwrap();
        let stat_xx = fcit_statistic(&gm, 0, 0, &[], false, 1e-3);
        assert!(stat_xx.is_err()); // i == j rejected
        // statistic equals n * ||C_00||_F^2 / tr(C_00)^2 computed by hand,
        // where tr(C_00) = 1 - ||mu_0||^2 by the unit-norm feature identity
        let mut c00 = 0.0;
        for a in 0..16 {
            for b in 0..16 {
                let c = pkt.moment_2[[0, 0, a, b]] - pkt.moment_1[[0, a]] * pkt.moment_1[[0, b]];
                c00 += c * c;
            }
        }
        let tr = 1.0 - pkt.moment_1.row(0).iter().map(|v| v * v).sum::<f64>();
        assert_abs_diff_eq!(stat_xy, n as f64 * c00 / (tr * tr), epsilon = 1e-9);
        assert!(stat_xy > 0.0);
    }

    #[test]
    fn chain_conditioning_blocks_endpoints() {
        let data = synth::chain_samples(2000, 0.8, 0.8, 0.3, 5);
        let panel = synth::TimeSeriesPanel {
            client_id: 0,
            values: data.insert_axis(Axis(1)),
        };
        let std = Standardizer::fit(std::slice::from_ref(&panel), 0).unwrap();
        let pkt = time_slice_stats(&panel, 0, 0, &rff(), &std).unwrap();
        let gm = aggregate_moments(std::slice::from_ref(&pkt)).unwrap();
        let uncond = fcit_statistic(&gm, 0, 2, &[], false, 1e-3).unwrap();
        let cond = fcit_statistic(&gm, 0, 2, &[1], false, 1e-3).unwrap();
        assert!(
            cond < uncond / 10.0,
            "conditioning should collapse the statistic: {uncond} -> {cond}"
        );
    }

    #[test]
    fn spike_patterns_are_removed() {
        // the canonical 00100 and 11011 single-spike series
        let mut values = Array4::<u8>::zeros((5, 1, 2, 2));
        for (t, &v) in [0u8, 0, 1, 0, 0].iter().enumerate() {
            values[[t, 0, 0, 1]] = v;
        }
        for (t, &v) in [1u8, 1, 0, 1, 1].iter().enumerate() {
            values[[t, 0, 1, 0]] = v;
        }
        let omegas = Array3::<f64>::ones((5, 1, 2));
        let out = temporal_filter(&IndicatorSeries { values }, &omegas);
        for t in 0..5 {
            assert_eq!(out.values[[t, 0, 0, 1]], 0, "00100 spike must vanish");
            assert_eq!(out.values[[t, 0, 1, 0]], 1, "11011 dip must fill");
        }
    }

    #[test]
    fn constant_series_unchanged_and_short_series_identity() {
        let values = Array4::<u8>::ones((4, 1, 1, 1));
        let omegas = Array3::<f64>::ones((4, 1, 1));
        let out = temporal_filter(
            &IndicatorSeries {
                values: values.clone(),
            },
            &omegas,
        );
        assert_eq!(out.values, values);

        let mut short = Array4::<u8>::zeros((2, 1, 1, 1));
        short[[1, 0, 0, 0]] = 1;
        let out = temporal_filter(
            &IndicatorSeries {
                values: short.clone(),
            },
            &Array3::<f64>::ones((2, 1, 1)),
        );
        assert_eq!(out.values, short);
    }

    #[test]
    fn zero_order_hold_definition() {
        assert_eq!(zero_order_hold(&[0, 3], 6), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(zero_order_hold(&[2], 4), vec![0, 0, 0, 0]);
        assert_eq!(
            zero_order_hold(&[0, 1, 2, 3], 4),
            vec![0, 1, 2, 3],
            "stride one is the identity"
        );
    }

    #[test]
    fn soft_mask_truth_table() {
        // all eight (S, I1, I2) combinations of Eq-style logic
        for s_bit in [0u8, 1] {
            for i1 in [0u8, 1] {
                for i2 in [0u8, 1] {
                    let s = Array2::from_elem((1, 1), s_bit);
                    let ind = Array3::from_shape_vec((2, 1, 1), vec![i1, i2]).unwrap();
                    let l = compute_soft_mask(&s, &ind);
                    let want = s_bit * (1 - i1.min(i2));
                    assert_eq!(l[[0, 0]], want, "S={s_bit} I=({i1},{i2})");
                }
            }
        }
    }
}
