//! Command-line driver for the federated causal-discovery pipeline.
//!
//! Subcommands cover dataset generation (`synth`), the skeleton-mining phase
//! (`dism`), federated trajectory optimization (`dcto`), evaluation against
//! ground truth (`eval`), and the whole chain in sequence (`pipeline`). A
//! single TOML experiment config drives every command; individual fields can
//! be overridden from the command line. The effective config is echoed next
//! to every artifact so a run is reconstructible from its output directory.
//!
//! Exit codes: 0 success, 2 configuration/shape error, 3 numeric failure,
//! 4 format/IO error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::{Array3, Axis};

use ddic_core::config::ExperimentConfig;
use ddic_core::dism::{run_dism, PriorSet};
use ddic_core::error::{Error, Result};
use ddic_core::fed::{
    run_dcto_from, write_loss_curve_csv, write_round_log_csv, GraphEstimate, RoundLog,
};
use ddic_core::io;
use ddic_core::metrics::evaluate;
use ddic_core::node::ThetaParams;
use ddic_core::synth::{self, GroundTruth, TimeSeriesPanel};

/// Environment variable naming the default output root.
const OUT_ENV: &str = "DDIC_OUT";

#[derive(Parser)]
#[command(name = "ddic", version, about = "Federated dynamic causal discovery")]
struct Cli {
    /// Cap the internal worker thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-client dataset with ground truth.
    Synth(SynthArgs),
    /// Mine hard/soft prior masks from a dataset.
    Dism(DismArgs),
    /// Train the masked trajectory model under federated averaging.
    Dcto(DctoArgs),
    /// Score a graph estimate against ground truth and held-out data.
    Eval(EvalArgs),
    /// Run synth, dism, dcto, and eval in sequence.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output_dir`, then the
    /// DDIC_OUT environment variable, then the current directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Default)]
struct DismOverrides {
    /// Temporal sampling stride (constraints every T_S steps).
    #[arg(long)]
    t_s: Option<usize>,
    /// Random-feature dimension.
    #[arg(long)]
    h: Option<usize>,
    /// Kernel bandwidth on standardized data.
    #[arg(long)]
    sigma: Option<f64>,
    /// Fixed pooled-test threshold (skips null calibration).
    #[arg(long)]
    delta_hard: Option<f64>,
    /// Fixed client-local threshold (skips null calibration).
    #[arg(long)]
    delta_local: Option<f64>,
    /// Ridge scale on the conditioning block.
    #[arg(long)]
    ridge_scale: Option<f64>,
}

impl DismOverrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = self.t_s {
            cfg.dism.t_s = v;
        }
        if let Some(v) = self.h {
            cfg.dism.h = v;
        }
        if let Some(v) = self.sigma {
            cfg.dism.sigma = v;
        }
        if let Some(v) = self.delta_hard {
            cfg.dism.delta_hard = Some(v);
        }
        if let Some(v) = self.delta_local {
            cfg.dism.delta_local = Some(v);
        }
        if let Some(v) = self.ridge_scale {
            cfg.dism.ridge_scale = v;
        }
    }
}

#[derive(Args, Default)]
struct DctoOverrides {
    /// Federated rounds.
    #[arg(long)]
    rounds: Option<usize>,
    /// Local epochs per round.
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    eta: Option<f64>,
    /// Soft penalty weight on flagged contemporaneous edges.
    #[arg(long)]
    lambda_w: Option<f64>,
    /// Soft penalty weight on flagged lag edges.
    #[arg(long)]
    lambda_a: Option<f64>,
    /// Acyclicity penalty weight.
    #[arg(long)]
    lambda_dag: Option<f64>,
    /// Latent dimension of the trajectory model.
    #[arg(long)]
    latent: Option<usize>,
    /// Encoder warm-up window (defaults to lag + 1).
    #[arg(long)]
    w_enc: Option<usize>,
}

impl DctoOverrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = self.rounds {
            cfg.dcto.rounds = v;
        }
        if let Some(v) = self.epochs {
            cfg.dcto.epochs = v;
        }
        if let Some(v) = self.eta {
            cfg.dcto.eta = v;
        }
        if let Some(v) = self.lambda_w {
            cfg.dcto.lambda_w = v;
        }
        if let Some(v) = self.lambda_a {
            cfg.dcto.lambda_a = v;
        }
        if let Some(v) = self.lambda_dag {
            cfg.dcto.lambda_dag = v;
        }
        if let Some(v) = self.latent {
            cfg.dcto.latent = v;
        }
        if let Some(v) = self.w_enc {
            cfg.dcto.w_enc = Some(v);
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Also export one CSV file per client.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct DismArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset file produced by `synth`.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    overrides: DismOverrides,
}

#[derive(Args)]
struct DctoArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset file produced by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Prior file produced by `dism`.
    #[arg(long)]
    priors: PathBuf,
    /// Resume from a checkpoint written by an earlier `dcto` run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: DctoOverrides,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Graph estimate produced by `dcto`.
    #[arg(long)]
    estimate: PathBuf,
    /// Held-out dataset used for forecast errors.
    #[arg(long)]
    data: PathBuf,
    /// Ground-truth file produced by `synth`.
    #[arg(long)]
    truth: PathBuf,
    /// Threshold on |W| for the structural Hamming distance.
    #[arg(long)]
    shd_threshold: Option<f64>,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    common: Common,
    /// Also export one CSV file per client.
    #[arg(long)]
    csv: bool,
    #[command(flatten)]
    dism: DismOverrides,
    #[command(flatten)]
    dcto: DctoOverrides,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // ignore the error if a global pool already exists
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    let result = match cli.cmd {
        Cmd::Synth(a) => cmd_synth(&a),
        Cmd::Dism(a) => cmd_dism(&a),
        Cmd::Dcto(a) => cmd_dcto(&a),
        Cmd::Eval(a) => cmd_eval(&a),
        Cmd::Pipeline(a) => cmd_pipeline(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

// --- shared plumbing --------------------------------------------------------

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn resolve_out(common: &Common, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Writes the effective config next to the artifacts of a command.
fn echo_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

// --- synth -------------------------------------------------------------------

fn write_synth_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    panels: &[TimeSeriesPanel],
    truth: &GroundTruth,
    csv: bool,
) -> Result<()> {
    io::write_dataset(&dir.join("dataset.ddic"), panels, cfg.scenario.lag)?;
    io::write_scenario_sidecar(&dir.join("dataset.toml"), &cfg.scenario)?;
    io::write_ground_truth(&dir.join("truth.ddgt"), truth)?;
    if csv {
        for panel in panels {
            io::export_csv(&dir.join(format!("client_{}.csv", panel.client_id)), panel)?;
        }
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let dir = resolve_out(&args.common, &cfg)?;
    let mut scenario = cfg.scenario.clone();
    scenario.seed = scenario.seed.wrapping_add(cfg.seed);
    let (panels, truth) = synth::generate(&scenario)?;
    write_synth_outputs(&dir, &cfg, &panels, &truth, args.csv)?;
    echo_config(&dir, &cfg)?;
    println!(
        "wrote dataset: {} clients x {} samples, T={} D={} L={}",
        panels.len(),
        panels[0].n_samples(),
        panels[0].steps(),
        panels[0].vars(),
        cfg.scenario.lag
    );
    Ok(())
}

// --- dism --------------------------------------------------------------------

/// Human-readable mask summary: dimensions, thresholds, and which pairs were
/// structurally removed or soft-flagged.
fn mask_summary(priors: &PriorSet) -> String {
    let (t_len, d, lag) = (priors.steps(), priors.vars(), priors.lag());
    let mut out = String::new();
    out.push_str(&format!(
        "prior masks: T={t_len} D={d} L={lag}, {} sampled times (stride {})\n",
        priors.sampled_times.len(),
        priors.meta.t_s
    ));
    out.push_str(&format!(
        "thresholds: delta_hard={:.6} delta_local={:.6} delta_hard_lag={:.6} delta_local_lag={:.6}\n",
        priors.meta.delta_hard,
        priors.meta.delta_local,
        priors.meta.delta_hard_lag,
        priors.meta.delta_local_lag
    ));
    out.push_str("contemporaneous pairs (i -> j):\n");
    for i in 0..d {
        for j in 0..d {
            if i == j {
                continue;
            }
            let removed = (0..t_len).filter(|&t| priors.s[[t, i, j]] == 0).count();
            let flagged = (0..t_len).filter(|&t| priors.l_soft[[t, i, j]] == 1).count();
            if removed == t_len {
                out.push_str(&format!("  {i} -> {j}: removed (S=0 at every t)\n"));
            } else if removed > 0 || flagged > 0 {
                out.push_str(&format!(
                    "  {i} -> {j}: S=0 at {removed}/{t_len} t, soft-flagged at {flagged}/{t_len} t\n"
                ));
            }
        }
    }
    if lag > 0 {
        out.push_str("lag entries (i at t-tau -> j):\n");
        for tau in 1..=lag {
            for i in 0..d {
                for j in 0..d {
                    let s = priors.s_a[[tau - 1, i, j]];
                    let l = priors.l_soft_a[[tau - 1, i, j]];
                    if s == 0 {
                        out.push_str(&format!("  tau={tau} {i} -> {j}: removed\n"));
                    } else if l == 1 {
                        out.push_str(&format!("  tau={tau} {i} -> {j}: soft-flagged\n"));
                    }
                }
            }
        }
    }
    out
}

fn cmd_dism(args: &DismArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    args.overrides.apply(&mut cfg);
    cfg.validate()?;
    let dir = resolve_out(&args.common, &cfg)?;
    let (panels, lag) = io::read_dataset(&args.data)?;
    let dism_cfg = cfg.dism.to_config(cfg.seed);
    let (priors, telemetry) = run_dism(&panels, lag, &dism_cfg)?;
    io::write_priors(&dir.join("priors.ddpr"), &priors)?;
    let summary = mask_summary(&priors);
    std::fs::write(dir.join("mask_summary.txt"), &summary)?;
    echo_config(&dir, &cfg)?;
    print!("{summary}");
    println!(
        "bytes up: {}  bytes down: {}",
        telemetry.bytes_up, telemetry.bytes_down
    );
    Ok(())
}

// --- dcto --------------------------------------------------------------------

/// Sidecar tracking how many federated rounds a checkpoint has completed.
fn write_checkpoint(dir: &Path, theta: &ThetaParams, rounds_done: usize) -> Result<()> {
    theta.save(&dir.join("checkpoint.ddck"))?;
    std::fs::write(
        dir.join("checkpoint.toml"),
        format!("rounds_done = {rounds_done}\n"),
    )?;
    Ok(())
}

fn read_rounds_done(ckpt: &Path) -> Result<usize> {
    let sidecar = ckpt.with_extension("toml");
    let text = std::fs::read_to_string(&sidecar)?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| Error::format(format!("bad checkpoint sidecar: {e}")))?;
    table
        .get("rounds_done")
        .and_then(|v| v.as_integer())
        .map(|v| v as usize)
        .ok_or_else(|| Error::format("checkpoint sidecar lacks rounds_done"))
}

fn write_dcto_outputs(
    dir: &Path,
    estimate: &GraphEstimate,
    logs: &[RoundLog],
    rounds_done: usize,
) -> Result<()> {
    io::write_graph_estimate(
        &dir.join("estimate.ddge"),
        &estimate.w_eff,
        &estimate.a_eff,
        &estimate.priors,
    )?;
    write_checkpoint(dir, &estimate.theta, rounds_done)?;
    write_round_log_csv(&dir.join("round_log.csv"), logs)?;
    write_loss_curve_csv(&dir.join("loss_curve.csv"), logs)?;
    Ok(())
}

fn cmd_dcto(args: &DctoArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    args.overrides.apply(&mut cfg);
    cfg.validate()?;
    let dir = resolve_out(&args.common, &cfg)?;
    let (panels, _) = io::read_dataset(&args.data)?;
    let priors = io::read_priors(&args.priors)?;
    let dcto_cfg = cfg.dcto.to_config(cfg.seed);
    let init = match &args.resume {
        Some(ckpt) => Some((ThetaParams::load(ckpt)?, read_rounds_done(ckpt)?)),
        None => None,
    };
    let (estimate, logs) = run_dcto_from(&priors, &panels, &dcto_cfg, init)?;
    write_dcto_outputs(&dir, &estimate, &logs, dcto_cfg.rounds)?;
    echo_config(&dir, &cfg)?;
    let last = logs.last().map_or(f64::NAN, |l| l.global_loss);
    println!(
        "trained {} rounds, final global loss {last:.6}",
        dcto_cfg.rounds
    );
    Ok(())
}

// --- eval --------------------------------------------------------------------

/// Merges all clients of a dataset into one held-out panel for forecasting.
fn merge_panels(panels: &[TimeSeriesPanel]) -> Result<TimeSeriesPanel> {
    let first = panels.first().ok_or_else(|| Error::config("no panels"))?;
    let (t_len, d) = (first.steps(), first.vars());
    let total: usize = panels.iter().map(|p| p.n_samples()).sum();
    let mut values = Array3::<f64>::zeros((total, t_len, d));
    let mut row = 0;
    for p in panels {
        for s in 0..p.n_samples() {
            values
                .index_axis_mut(Axis(0), row)
                .assign(&p.values.index_axis(Axis(0), s));
            row += 1;
        }
    }
    Ok(TimeSeriesPanel {
        client_id: 0,
        values,
    })
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(v) = args.shd_threshold {
        cfg.eval.shd_threshold = v;
    }
    cfg.validate()?;
    let dir = resolve_out(&args.common, &cfg)?;
    let (w_eff, a_eff, priors) = io::read_graph_estimate(&args.estimate)?;
    let truth = io::read_ground_truth(&args.truth)?;
    let (panels, _) = io::read_dataset(&args.data)?;
    let held_out = merge_panels(&panels)?;
    let report = evaluate(
        &w_eff,
        &a_eff,
        &truth,
        &held_out,
        Some(&priors),
        cfg.eval.shd_threshold,
    )?;
    report.write_series_csv(&dir.join("eval_series.csv"))?;
    report.write_summary_csv(&dir.join("eval_summary.csv"))?;
    let text = report.render_text();
    std::fs::write(dir.join("eval.txt"), &text)?;
    echo_config(&dir, &cfg)?;
    print!("{text}");
    Ok(())
}

// --- pipeline ------------------------------------------------------------------

fn cmd_pipeline(args: &PipelineArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    args.dism.apply(&mut cfg);
    args.dcto.apply(&mut cfg);
    cfg.validate()?;
    let dir = resolve_out(&args.common, &cfg)?;

    let mut scenario = cfg.scenario.clone();
    scenario.seed = scenario.seed.wrapping_add(cfg.seed);
    let (panels, truth) = synth::generate(&scenario)?;
    write_synth_outputs(&dir, &cfg, &panels, &truth, args.csv)?;

    let dism_cfg = cfg.dism.to_config(cfg.seed);
    let (priors, telemetry) = run_dism(&panels, scenario.lag, &dism_cfg)?;
    io::write_priors(&dir.join("priors.ddpr"), &priors)?;
    std::fs::write(dir.join("mask_summary.txt"), mask_summary(&priors))?;

    let dcto_cfg = cfg.dcto.to_config(cfg.seed);
    let (estimate, logs) = run_dcto_from(&priors, &panels, &dcto_cfg, None)?;
    write_dcto_outputs(&dir, &estimate, &logs, dcto_cfg.rounds)?;

    // held-out panel from the same scenario under a disjoint seed
    let mut held_spec = scenario.clone();
    held_spec.seed = scenario.seed.wrapping_add(0x9e37_79b9);
    let (held_panels, _) = synth::generate(&held_spec)?;
    let held_out = merge_panels(&held_panels)?;
    let report = evaluate(
        &estimate.w_eff,
        &estimate.a_eff,
        &truth,
        &held_out,
        Some(&priors),
        cfg.eval.shd_threshold,
    )?;
    report.write_series_csv(&dir.join("eval_series.csv"))?;
    report.write_summary_csv(&dir.join("eval_summary.csv"))?;
    let text = report.render_text();
    std::fs::write(dir.join("eval.txt"), &text)?;
    echo_config(&dir, &cfg)?;

    print!("{text}");
    println!(
        "mining bytes up/down: {}/{}",
        telemetry.bytes_up, telemetry.bytes_down
    );
    Ok(())
}
