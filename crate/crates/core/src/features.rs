//! Client-side random-Fourier-feature statistics.
//!
//! Each scalar variable is mapped through a shared cosine feature map and
//! only uncentered moments of the features leave the client. Uploading
//! uncentered moments plus means (rather than centered covariances) keeps
//! n-weighted pooling exact when client means differ; the server centers
//! after pooling.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Array3, Array4, Array5};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::synth::TimeSeriesPanel;

/// Shared random feature map for scalars; identical seed gives identical
/// parameters on every client, which is what makes server-side pooling of
/// the moments meaningful.
#[derive(Debug, Clone, PartialEq)]
pub struct RffParams {
    pub h: usize,
    /// `h / 2` frequencies; each contributes a cos/sin feature pair.
    pub frequencies: Vec<f64>,
    pub bandwidth: f64,
    pub seed: u64,
}

/// Feature map `x -> sqrt(2/h) [cos(w_1 x), sin(w_1 x), ..., sin(w_{h/2} x)]`
/// with `w ~ N(0, 1/sigma^2)`. The paired variant keeps the kernel estimate
/// unbiased and makes `||phi(x)||^2 = 1` hold exactly for every input, so
/// feature-variance traces are known without extra uploaded moments.
pub fn make_rff(h: usize, sigma: f64, seed: u64) -> Result<RffParams> {
    if h < 2 || h % 2 != 0 {
        return Err(Error::config("rff feature dimension must be even and >= 2"));
    }
    if sigma <= 0.0 {
        return Err(Error::config("rff bandwidth must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let freq = Normal::new(0.0, 1.0 / sigma).map_err(|e| Error::numeric(e.to_string()))?;
    let frequencies = (0..h / 2).map(|_| freq.sample(&mut rng)).collect();
    Ok(RffParams {
        h,
        frequencies,
        bandwidth: sigma,
        seed,
    })
}

pub fn rff_map(x: f64, params: &RffParams) -> Array1<f64> {
    let scale = (2.0 / params.h as f64).sqrt();
    Array1::from_iter(params.frequencies.iter().flat_map(|&w| {
        let (s, c) = (w * x).sin_cos();
        [scale * c, scale * s]
    }))
}

/// Per-variable affine standardization broadcast by the server after a
/// preliminary moment exchange; kernel bandwidth stays defensible on
/// standardized data.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(vars: usize) -> Self {
        Standardizer {
            mean: vec![0.0; vars],
            std: vec![1.0; vars],
        }
    }

    /// Pools per-variable first and second moments over all clients,
    /// skipping the warm-up steps.
    pub fn fit(panels: &[TimeSeriesPanel], skip_steps: usize) -> Result<Self> {
        let vars = panels
            .first()
            .ok_or_else(|| Error::config("no panels"))?
            .vars();
        let mut sum = vec![0.0f64; vars];
        let mut sumsq = vec![0.0f64; vars];
        let mut count = 0usize;
        for p in panels {
            let (n, t_len, d) = (p.n_samples(), p.steps(), p.vars());
            if d != vars {
                return Err(Error::shape("panels disagree on variable count"));
            }
            for s in 0..n {
                for t in skip_steps..t_len {
                    for v in 0..d {
                        let x = p.values[[s, t, v]];
                        sum[v] += x;
                        sumsq[v] += x * x;
                    }
                    count += 1;
                }
            }
        }
        if count < 2 {
            return Err(Error::config("not enough data to standardize"));
        }
        let nf = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sumsq
            .iter()
            .zip(&mean)
            .map(|(&sq, &m)| {
                let var = (sq / nf - m * m).max(0.0);
                if var < 1e-12 {
                    1.0
                } else {
                    var.sqrt()
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    #[inline]
    pub fn apply(&self, x: f64, var: usize) -> f64 {
        (x - self.mean[var]) / self.std[var]
    }
}

/// The per-client, per-sampled-time upload. Size is independent of the
/// client's sample count; no raw samples leave the client.
#[derive(Debug, Clone, PartialEq)]
pub struct StatPacket {
    pub client_id: usize,
    pub t: usize,
    pub n: usize,
    pub rff_seed: u64,
    /// `[D, h]` feature means at slice t.
    pub moment_1: Array2<f64>,
    /// `[D, D, h, h]` uncentered pair moments at slice t.
    pub moment_2: Array4<f64>,
    /// `[L, D, D, h, h]` uncentered moments between slice t-tau and t.
    pub lag_moment: Array5<f64>,
    /// `[L, D, h]` feature means at the lagged slices.
    pub lag_moment_1: Array3<f64>,
    /// `[D]` unbiased per-variable variance of the (standardized) values
    /// at slice t; the server uses it to steer the temporal filter.
    pub omega: Vec<f64>,
}

impl StatPacket {
    pub fn vars(&self) -> usize {
        self.moment_1.nrows()
    }
    pub fn h(&self) -> usize {
        self.moment_1.ncols()
    }
    pub fn lag(&self) -> usize {
        self.lag_moment_1.shape()[0]
    }
}

/// Feature matrix `[n, d*h]` of all variables at one slice, variable-major
/// column blocks.
fn stacked_features(
    panel: &TimeSeriesPanel,
    t: usize,
    params: &RffParams,
    std: &Standardizer,
) -> Array2<f64> {
    let (n, d, h) = (panel.n_samples(), panel.vars(), params.h);
    let scale = (2.0 / h as f64).sqrt();
    let mut f = Array2::<f64>::zeros((n, d * h));
    for s in 0..n {
        for v in 0..d {
            let x = std.apply(panel.values[[s, t, v]], v);
            for (c, &w) in params.frequencies.iter().enumerate() {
                let (sn, cs) = (w * x).sin_cos();
                f[[s, v * h + 2 * c]] = scale * cs;
                f[[s, v * h + 2 * c + 1]] = scale * sn;
            }
        }
    }
    f
}

/// Computes the upload for one client at one sampled time step.
pub fn time_slice_stats(
    panel: &TimeSeriesPanel,
    t: usize,
    lag: usize,
    params: &RffParams,
    std: &Standardizer,
) -> Result<StatPacket> {
    let (n, t_len, d) = (panel.n_samples(), panel.steps(), panel.vars());
    if t < lag || t >= t_len {
        return Err(Error::config(format!(
            "time slice {t} needs lag {lag} history within series of length {t_len}"
        )));
    }
    if n < 2 {
        return Err(Error::config("need at least 2 samples per client"));
    }
    let h = params.h;
    let nf = n as f64;

    // Stacked features `[n, d*h]` so all pair moments come from one product.
    let cur = stacked_features(panel, t, params, std);
    let lagged: Vec<Array2<f64>> = (1..=lag)
        .map(|tau| stacked_features(panel, t - tau, params, std))
        .collect();

    let mut moment_1 = Array2::<f64>::zeros((d, h));
    let col_sums = cur.sum_axis(ndarray::Axis(0));
    for v in 0..d {
        for c in 0..h {
            moment_1[[v, c]] = col_sums[v * h + c] / nf;
        }
    }
    let big = cur.t().dot(&cur) / nf; // [(d*h), (d*h)]
    let mut moment_2 = Array4::<f64>::zeros((d, d, h, h));
    for i in 0..d {
        for j in 0..d {
            moment_2
                .index_axis_mut(ndarray::Axis(0), i)
                .index_axis_mut(ndarray::Axis(0), j)
                .assign(&big.slice(ndarray::s![i * h..(i + 1) * h, j * h..(j + 1) * h]));
        }
    }
    let mut lag_moment = Array5::<f64>::zeros((lag, d, d, h, h));
    let mut lag_moment_1 = Array3::<f64>::zeros((lag, d, h));
    for tau in 1..=lag {
        let past = &lagged[tau - 1];
        let sums = past.sum_axis(ndarray::Axis(0));
        for v in 0..d {
            for c in 0..h {
                lag_moment_1[[tau - 1, v, c]] = sums[v * h + c] / nf;
            }
        }
        let cross = past.t().dot(&cur) / nf;
        for i in 0..d {
            for j in 0..d {
                lag_moment
                    .index_axis_mut(ndarray::Axis(0), tau - 1)
                    .index_axis_mut(ndarray::Axis(0), i)
                    .index_axis_mut(ndarray::Axis(0), j)
                    .assign(&cross.slice(ndarray::s![i * h..(i + 1) * h, j * h..(j + 1) * h]));
            }
        }
    }

    let mut omega = vec![0.0f64; d];
    for v in 0..d {
        let mut mean = 0.0;
        for s in 0..n {
            mean += std.apply(panel.values[[s, t, v]], v);
        }
        mean /= nf;
        let mut var = 0.0;
        for s in 0..n {
            let x = std.apply(panel.values[[s, t, v]], v) - mean;
            var += x * x;
        }
        omega[v] = var / (nf - 1.0);
    }

    let pkt = StatPacket {
        client_id: panel.client_id,
        t,
        n,
        rff_seed: params.seed,
        moment_1,
        moment_2,
        lag_moment,
        lag_moment_1,
        omega,
    };
    if pkt.moment_2.iter().any(|v| !v.is_finite()) || pkt.moment_1.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite statistics"));
    }
    Ok(pkt)
}

// --- wire format: length-prefixed binary record -------------------------

impl StatPacket {
    /// Serialized length-prefixed record; the federation layer accounts
    /// communication bytes from exactly this encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body: Vec<u8> = Vec::new();
        body.write_u32::<LittleEndian>(self.client_id as u32).unwrap();
        body.write_u32::<LittleEndian>(self.t as u32).unwrap();
        body.write_u32::<LittleEndian>(self.n as u32).unwrap();
        body.write_u64::<LittleEndian>(self.rff_seed).unwrap();
        body.write_u32::<LittleEndian>(self.vars() as u32).unwrap();
        body.write_u32::<LittleEndian>(self.h() as u32).unwrap();
        body.write_u32::<LittleEndian>(self.lag() as u32).unwrap();
        for &v in self
            .moment_1
            .iter()
            .chain(self.moment_2.iter())
            .chain(self.lag_moment.iter())
            .chain(self.lag_moment_1.iter())
            .chain(self.omega.iter())
        {
            body.write_f64::<LittleEndian>(v).unwrap();
        }
        let mut out = Vec::with_capacity(body.len() + 4);
        out.write_u32::<LittleEndian>(body.len() as u32).unwrap();
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<(StatPacket, usize)> {
        let mut rd = std::io::Cursor::new(buf);
        let len = rd.read_u32::<LittleEndian>()? as usize;
        if buf.len() < len + 4 {
            return Err(Error::format("truncated stat packet"));
        }
        let client_id = rd.read_u32::<LittleEndian>()? as usize;
        let t = rd.read_u32::<LittleEndian>()? as usize;
        let n = rd.read_u32::<LittleEndian>()? as usize;
        let rff_seed = rd.read_u64::<LittleEndian>()?;
        let d = rd.read_u32::<LittleEndian>()? as usize;
        let h = rd.read_u32::<LittleEndian>()? as usize;
        let lag = rd.read_u32::<LittleEndian>()? as usize;
        let mut take = |count: usize| -> Result<Vec<f64>> {
            let mut v = Vec::with_capacity(count);
            for _ in 0..count {
                v.push(rd.read_f64::<LittleEndian>()?);
            }
            Ok(v)
        };
        let moment_1 = Array2::from_shape_vec((d, h), take(d * h)?)
            .map_err(|e| Error::format(e.to_string()))?;
        let moment_2 = Array4::from_shape_vec((d, d, h, h), take(d * d * h * h)?)
            .map_err(|e| Error::format(e.to_string()))?;
        let lag_moment = Array5::from_shape_vec((lag, d, d, h, h), take(lag * d * d * h * h)?)
            .map_err(|e| Error::format(e.to_string()))?;
        let lag_moment_1 = Array3::from_shape_vec((lag, d, h), take(lag * d * h)?)
            .map_err(|e| Error::format(e.to_string()))?;
        let omega = take(d)?;
        Ok((
            StatPacket {
                client_id,
                t,
                n,
                rff_seed,
                moment_1,
                moment_2,
                lag_moment,
                lag_moment_1,
                omega,
            },
            len + 4,
        ))
    }
}
