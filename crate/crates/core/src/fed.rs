//! Federation orchestrator: the round loop (broadcast, local training,
//! n-weighted averaging) and the two-phase main procedure, with byte-level
//! communication accounting.
//!
//! Clients are simulated in-process, but every object crossing the
//! client/server boundary goes through explicit serialization, so the byte
//! counts are what a real transport would carry. Raw panels never cross the
//! boundary — only statistic packets, parameter vectors, and warm-up means.

use std::path::Path;
use std::time::Instant;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::Array3;
use rayon::prelude::*;

use crate::dism::{run_dism, DismConfig, DismTelemetry, PriorSet};
use crate::error::{Error, Result};
use crate::node::{
    forward, local_train, loss, LossTerms, ModelDims, Penalties, ThetaParams,
};
use crate::synth::TimeSeriesPanel;

/// One federated round's bookkeeping.
#[derive(Debug, Clone)]
pub struct RoundLog {
    pub round: usize,
    /// Per-client loss trace across the local epochs of this round.
    pub client_traces: Vec<Vec<LossTerms>>,
    pub bytes_up: usize,
    pub bytes_down: usize,
    pub wall_secs: f64,
    /// n-weighted client loss at the aggregated parameters.
    pub global_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DctoConfig {
    pub rounds: usize,
    pub epochs: usize,
    pub eta: f64,
    pub penalties: Penalties,
    pub latent: usize,
    /// Encoder window; defaults to L + 1 when `None`.
    pub w_enc: Option<usize>,
    pub seed: u64,
}

impl Default for DctoConfig {
    fn default() -> Self {
        DctoConfig {
            rounds: 20,
            epochs: 5,
            eta: 1e-2,
            penalties: Penalties::default(),
            latent: 16,
            w_enc: None,
            seed: 0,
        }
    }
}

/// Final output of the trajectory phase.
#[derive(Debug, Clone)]
pub struct GraphEstimate {
    pub w_eff: Array3<f64>,
    pub a_eff: Array3<f64>,
    pub priors: PriorSet,
    pub theta: ThetaParams,
}

/// n-weighted average of identically shaped flat parameter vectors.
pub fn fedavg(client_params: &[Vec<f64>], weights: &[usize]) -> Result<Vec<f64>> {
    let first = client_params
        .first()
        .ok_or_else(|| Error::config("fedavg over no clients"))?;
    if client_params.len() != weights.len() {
        return Err(Error::shape("one weight per client required"));
    }
    let total: usize = weights.iter().sum();
    if total == 0 {
        return Err(Error::config("total sample weight must be positive"));
    }
    let mut out = vec![0.0; first.len()];
    for (params, &n) in client_params.iter().zip(weights) {
        if params.len() != first.len() {
            return Err(Error::shape("client parameter layouts differ"));
        }
        let w = n as f64 / total as f64;
        for (o, v) in out.iter_mut().zip(params) {
            *o += w * v;
        }
    }
    Ok(out)
}

// --- wire format for parameter broadcast/upload -----------------------------

fn theta_to_bytes(theta: &ThetaParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * 4 + 8 + theta.flat.len() * 8);
    for v in [
        theta.dims.vars,
        theta.dims.lag,
        theta.dims.latent,
        theta.dims.w_enc,
    ] {
        out.write_u32::<LE>(v as u32).unwrap();
    }
    out.write_u64::<LE>(theta.flat.len() as u64).unwrap();
    for &v in &theta.flat {
        out.write_f64::<LE>(v).unwrap();
    }
    out
}

fn theta_from_bytes(bytes: &[u8]) -> Result<ThetaParams> {
    let mut r = bytes;
    let vars = r.read_u32::<LE>()? as usize;
    let lag = r.read_u32::<LE>()? as usize;
    let latent = r.read_u32::<LE>()? as usize;
    let w_enc = r.read_u32::<LE>()? as usize;
    let len = r.read_u64::<LE>()? as usize;
    let mut flat = vec![0.0; len];
    r.read_f64_into::<LE>(&mut flat)?;
    let dims = ModelDims {
        vars,
        lag,
        latent,
        w_enc,
    };
    if flat.len() != dims.param_len() {
        return Err(Error::format("parameter message does not match its shape"));
    }
    Ok(ThetaParams { dims, flat })
}

// --- the round loop -----------------------------------------------------------

/// Runs Algorithm-style federated trajectory optimization and decodes the
/// final masked estimate on the server.
pub fn run_dcto(
    priors: &PriorSet,
    panels: &[TimeSeriesPanel],
    cfg: &DctoConfig,
) -> Result<(GraphEstimate, Vec<RoundLog>)> {
    run_dcto_from(priors, panels, cfg, None)
}

/// As [`run_dcto`], but optionally resuming from a checkpoint: `init` carries
/// the aggregated parameters and the number of rounds already completed.
/// Rounds are Markovian in the parameters, so a resumed run reproduces an
/// uninterrupted one bit-exactly.
pub fn run_dcto_from(
    priors: &PriorSet,
    panels: &[TimeSeriesPanel],
    cfg: &DctoConfig,
    init: Option<(ThetaParams, usize)>,
) -> Result<(GraphEstimate, Vec<RoundLog>)> {
    if cfg.rounds == 0 || cfg.epochs == 0 {
        return Err(Error::config("rounds and local epochs must be >= 1"));
    }
    if cfg.eta < 0.0 {
        return Err(Error::config("learning rate must be nonnegative"));
    }
    let first = panels.first().ok_or_else(|| Error::config("no panels"))?;
    let (t_len, d) = (first.steps(), first.vars());
    if priors.steps() != t_len || priors.vars() != d {
        return Err(Error::shape("priors not shaped for the panels"));
    }
    let lag = priors.lag();
    let w_enc = cfg.w_enc.unwrap_or(lag + 1);
    let dims = ModelDims {
        vars: d,
        lag,
        latent: cfg.latent,
        w_enc,
    };
    let weights: Vec<usize> = panels.iter().map(|p| p.n_samples()).collect();

    // server initialization (or checkpoint), broadcast every round
    let (mut theta, start_round) = match init {
        Some((theta, done)) => {
            if theta.dims != dims {
                return Err(Error::shape("checkpoint dimensions do not match the run"));
            }
            if done > cfg.rounds {
                return Err(Error::config("checkpoint is ahead of the requested round count"));
            }
            (theta, done)
        }
        None => (ThetaParams::init(dims, cfg.seed)?, 0),
    };
    let mut logs = Vec::with_capacity(cfg.rounds - start_round);
    for round in start_round..cfg.rounds {
        let start = Instant::now();
        let broadcast = theta_to_bytes(&theta);
        let bytes_down = broadcast.len() * panels.len();

        let results: Vec<(Vec<u8>, Vec<LossTerms>)> = panels
            .par_iter()
            .map(|panel| {
                let local_theta = theta_from_bytes(&broadcast)?;
                let (trained, trace) =
                    local_train(&local_theta, priors, panel, cfg.epochs, cfg.eta, &cfg.penalties)?;
                Ok((theta_to_bytes(&trained), trace))
            })
            .collect::<Result<_>>()?;
        let bytes_up: usize = results.iter().map(|(b, _)| b.len()).sum();
        let client_params: Vec<Vec<f64>> = results
            .iter()
            .map(|(b, _)| theta_from_bytes(b).map(|t| t.flat))
            .collect::<Result<_>>()?;
        theta.flat = fedavg(&client_params, &weights)?;

        let total_n: usize = weights.iter().sum();
        let global_loss = panels
            .par_iter()
            .zip(&weights)
            .map(|(panel, &n)| {
                loss(&theta, priors, panel, &cfg.penalties)
                    .map(|t| t.total * n as f64 / total_n as f64)
            })
            .try_reduce(|| 0.0, |a, b| Ok(a + b))?;

        logs.push(RoundLog {
            round,
            client_traces: results.into_iter().map(|(_, t)| t).collect(),
            bytes_up,
            bytes_down,
            wall_secs: start.elapsed().as_secs_f64(),
            global_loss,
        });
    }

    // final server-side decode: the encoder is fed the n-weighted pooled
    // warm-up mean, uploaded by each client as one small message
    let total_n: usize = weights.iter().sum();
    let mut pooled = Array3::<f64>::zeros((1, t_len, d));
    for (panel, &n) in panels.iter().zip(&weights) {
        let w = n as f64 / total_n as f64;
        for s in 0..panel.n_samples() {
            for t in 0..w_enc {
                for v in 0..d {
                    pooled[[0, t, v]] += w * panel.values[[s, t, v]] / panel.n_samples() as f64;
                }
            }
        }
    }
    if let Some(last) = logs.last_mut() {
        last.bytes_up += panels.len() * (w_enc * d + 1) * 8;
    }
    let anchor = TimeSeriesPanel {
        client_id: 0,
        values: pooled,
    };
    let out = forward(&theta, priors, &anchor)?;
    Ok((
        GraphEstimate {
            w_eff: out.w_eff,
            a_eff: out.a_eff,
            priors: priors.clone(),
            theta,
        },
        logs,
    ))
}

/// Two-phase main procedure: mine priors, then fit the trajectory under them.
pub struct PipelineOutput {
    pub priors: PriorSet,
    pub estimate: GraphEstimate,
    pub round_logs: Vec<RoundLog>,
    pub dism_telemetry: DismTelemetry,
}

pub fn run_pipeline(
    panels: &[TimeSeriesPanel],
    lag: usize,
    dism_cfg: &DismConfig,
    dcto_cfg: &DctoConfig,
) -> Result<PipelineOutput> {
    let (priors, dism_telemetry) = run_dism(panels, lag, dism_cfg)?;
    let (estimate, round_logs) = run_dcto(&priors, panels, dcto_cfg)?;
    Ok(PipelineOutput {
        priors,
        estimate,
        round_logs,
        dism_telemetry,
    })
}

// --- CSV emitters ---------------------------------------------------------------

/// Per-round, per-client summary (one row per client per round):
/// `round,client,local_loss,bytes_up,bytes_down,wall_secs,global_loss`.
pub fn write_round_log_csv(path: &Path, logs: &[RoundLog]) -> Result<()> {
    let mut text = String::from("round,client,local_loss,bytes_up,bytes_down,wall_secs,global_loss\n");
    for l in logs {
        for (client, trace) in l.client_traces.iter().enumerate() {
            let local = trace.last().map_or(f64::NAN, |t| t.total);
            text.push_str(&format!(
                "{},{},{:.9},{},{},{:.6},{:.9}\n",
                l.round, client, local, l.bytes_up, l.bytes_down, l.wall_secs, l.global_loss
            ));
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Loss curve: `round,client,step,total,mse,dag,soft_w,soft_a`.
pub fn write_loss_curve_csv(path: &Path, logs: &[RoundLog]) -> Result<()> {
    let mut text = String::from("round,client,step,total,mse,dag,soft_w,soft_a\n");
    for l in logs {
        for (client, trace) in l.client_traces.iter().enumerate() {
            for (step, t) in trace.iter().enumerate() {
                text.push_str(&format!(
                    "{},{},{},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
                    l.round, client, step, t.total, t.mse, t.dag, t.soft_w, t.soft_a
                ));
            }
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}
