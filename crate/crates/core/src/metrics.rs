//! Structure-recovery and forecasting evaluation against ground truth.

use std::path::Path;

use ndarray::{Array3, ArrayView2, Axis};

use crate::dism::PriorSet;
use crate::error::{Error, Result};
use crate::synth::{GroundTruth, TimeSeriesPanel};

// --- ranking metrics --------------------------------------------------------

/// Tie-averaged rank AUROC. `None` when the labels are degenerate (no
/// positives or no negatives).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // average ranks over tie groups (ranks are 1-based)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Area under the precision-recall curve by step-wise interpolation, with
/// equal scores grouped into a single threshold step.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut area = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if labels[idx] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Some(area)
}

/// Off-diagonal edge-detection AUROC for one time slice: scores `|est|`
/// against the support of the truth slice.
pub fn edge_auroc(est: &ArrayView2<f64>, truth: &ArrayView2<f64>) -> Option<f64> {
    let (scores, labels) = off_diagonal_pairs(est, truth);
    auroc(&scores, &labels)
}

pub fn edge_auprc(est: &ArrayView2<f64>, truth: &ArrayView2<f64>) -> Option<f64> {
    let (scores, labels) = off_diagonal_pairs(est, truth);
    auprc(&scores, &labels)
}

fn off_diagonal_pairs(est: &ArrayView2<f64>, truth: &ArrayView2<f64>) -> (Vec<f64>, Vec<bool>) {
    let d = est.nrows();
    let mut scores = Vec::with_capacity(d * (d - 1));
    let mut labels = Vec::with_capacity(d * (d - 1));
    for i in 0..d {
        for j in 0..d {
            if i != j {
                scores.push(est[[i, j]].abs());
                labels.push(truth[[i, j]] != 0.0);
            }
        }
    }
    (scores, labels)
}

/// Structural Hamming distance between the thresholded estimate support and
/// the truth support, off-diagonal entries only.
pub fn shd(est: &ArrayView2<f64>, truth: &ArrayView2<f64>, threshold: f64) -> usize {
    let d = est.nrows();
    let mut count = 0;
    for i in 0..d {
        for j in 0..d {
            if i != j && ((est[[i, j]].abs() > threshold) != (truth[[i, j]] != 0.0)) {
                count += 1;
            }
        }
    }
    count
}

// --- forecasting --------------------------------------------------------------

/// One-step forecast errors of the reconstruction identity on a held-out
/// panel, averaged over samples, t >= L, and variables.
pub fn forecast_errors(
    w_eff: &Array3<f64>,
    a_eff: &Array3<f64>,
    panel: &TimeSeriesPanel,
) -> Result<(f64, f64)> {
    let (n, t_len, d) = panel.values.dim();
    let lag = a_eff.shape()[0];
    if w_eff.dim() != (t_len, d, d) || a_eff.shape()[1] != d {
        return Err(Error::shape("estimate tensors do not match the panel"));
    }
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    for s in 0..n {
        for t in lag..t_len {
            for j in 0..d {
                let mut pred = 0.0;
                for i in 0..d {
                    pred += panel.values[[s, t, i]] * w_eff[[t, i, j]];
                }
                for tau in 1..=lag {
                    for i in 0..d {
                        pred += panel.values[[s, t - tau, i]] * a_eff[[tau - 1, i, j]];
                    }
                }
                let e = panel.values[[s, t, j]] - pred;
                abs_sum += e.abs();
                sq_sum += e * e;
                count += 1;
            }
        }
    }
    let cf = count as f64;
    Ok((abs_sum / cf, (sq_sum / cf).sqrt()))
}

// --- mask agreement --------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionRecall {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

fn precision_recall(pred: impl Iterator<Item = bool>, truth: impl Iterator<Item = bool>) -> PrecisionRecall {
    let mut tp = 0usize;
    let mut pred_pos = 0usize;
    let mut actual_pos = 0usize;
    for (p, t) in pred.zip(truth) {
        if p {
            pred_pos += 1;
        }
        if t {
            actual_pos += 1;
        }
        if p && t {
            tp += 1;
        }
    }
    PrecisionRecall {
        precision: (pred_pos > 0).then(|| tp as f64 / pred_pos as f64),
        recall: (actual_pos > 0).then(|| tp as f64 / actual_pos as f64),
    }
}

/// Agreement of a mined prior set with the generator's oracles, split by
/// category: hard-mask removals (confounder detection) and soft-mask flags
/// (inconsistency detection), dynamic and static.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskReport {
    pub dynamic_removal: PrecisionRecall,
    pub dynamic_soft: PrecisionRecall,
    pub static_removal: PrecisionRecall,
    pub static_soft: PrecisionRecall,
}

pub fn mask_report(priors: &PriorSet, truth: &GroundTruth) -> Result<MaskReport> {
    if priors.s.dim() != truth.oracle_s.dim() || priors.s_a.dim() != truth.oracle_s_a.dim() {
        return Err(Error::shape("prior and oracle mask shapes differ"));
    }
    let d = priors.vars();
    let off_diag = |m: &Array3<u8>, removal: bool| -> Vec<bool> {
        let mut out = Vec::new();
        for t in 0..m.shape()[0] {
            for i in 0..d {
                for j in 0..d {
                    if i != j {
                        let bit = m[[t, i, j]] != 0;
                        out.push(if removal { !bit } else { bit });
                    }
                }
            }
        }
        out
    };
    let all = |m: &Array3<u8>, removal: bool| -> Vec<bool> {
        m.iter()
            .map(|&v| if removal { v == 0 } else { v != 0 })
            .collect()
    };
    Ok(MaskReport {
        dynamic_removal: precision_recall(
            off_diag(&priors.s, true).into_iter(),
            off_diag(&truth.oracle_s, true).into_iter(),
        ),
        dynamic_soft: precision_recall(
            off_diag(&priors.l_soft, false).into_iter(),
            off_diag(&truth.oracle_l, false).into_iter(),
        ),
        static_removal: precision_recall(
            all(&priors.s_a, true).into_iter(),
            all(&truth.oracle_s_a, true).into_iter(),
        ),
        static_soft: precision_recall(
            all(&priors.l_soft_a, false).into_iter(),
            all(&truth.oracle_l_a, false).into_iter(),
        ),
    })
}

// --- the full report ---------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub auroc_t: Vec<Option<f64>>,
    pub auprc_t: Vec<Option<f64>>,
    pub shd_t: Vec<usize>,
    pub auroc_mean: Option<f64>,
    pub auprc_mean: Option<f64>,
    pub shd_total: usize,
    pub lag_auroc: Option<f64>,
    pub mae: f64,
    pub rmse: f64,
    pub masks: Option<MaskReport>,
}

fn mean_opt(xs: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = xs.iter().flatten().copied().collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Scores a graph estimate against the truth and a held-out panel.
pub fn evaluate(
    w_eff: &Array3<f64>,
    a_eff: &Array3<f64>,
    truth: &GroundTruth,
    held_out: &TimeSeriesPanel,
    priors: Option<&PriorSet>,
    shd_threshold: f64,
) -> Result<EvalReport> {
    let t_len = w_eff.shape()[0];
    if truth.w_true.dim() != w_eff.dim() || truth.a_true.dim() != a_eff.dim() {
        return Err(Error::shape("estimate and truth tensors differ in shape"));
    }
    let mut auroc_t = Vec::with_capacity(t_len);
    let mut auprc_t = Vec::with_capacity(t_len);
    let mut shd_t = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let est = w_eff.index_axis(Axis(0), t);
        let tru = truth.w_true.index_axis(Axis(0), t);
        auroc_t.push(edge_auroc(&est, &tru));
        auprc_t.push(edge_auprc(&est, &tru));
        shd_t.push(shd(&est, &tru, shd_threshold));
    }
    // lag tensor scored as one flat ranking problem (self-lags are legal)
    let lag_scores: Vec<f64> = a_eff.iter().map(|v| v.abs()).collect();
    let lag_labels: Vec<bool> = truth.a_true.iter().map(|&v| v != 0.0).collect();
    let lag_auroc = auroc(&lag_scores, &lag_labels);

    let (mae, rmse) = forecast_errors(w_eff, a_eff, held_out)?;
    let masks = priors.map(|p| mask_report(p, truth)).transpose()?;

    Ok(EvalReport {
        auroc_mean: mean_opt(&auroc_t),
        auprc_mean: mean_opt(&auprc_t),
        shd_total: shd_t.iter().sum(),
        auroc_t,
        auprc_t,
        shd_t,
        lag_auroc,
        mae,
        rmse,
        masks,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl EvalReport {
    /// Per-time series as CSV (`t,auroc,auprc,shd`).
    pub fn write_series_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from("t,auroc,auprc,shd\n");
        for t in 0..self.auroc_t.len() {
            text.push_str(&format!(
                "{t},{},{},{}\n",
                fmt_opt(self.auroc_t[t]),
                fmt_opt(self.auprc_t[t]),
                self.shd_t[t]
            ));
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Summary as CSV key/value rows.
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from("metric,value\n");
        text.push_str(&format!("auroc_mean,{}\n", fmt_opt(self.auroc_mean)));
        text.push_str(&format!("auprc_mean,{}\n", fmt_opt(self.auprc_mean)));
        text.push_str(&format!("lag_auroc,{}\n", fmt_opt(self.lag_auroc)));
        text.push_str(&format!("shd_total,{}\n", self.shd_total));
        text.push_str(&format!("mae,{:.6}\n", self.mae));
        text.push_str(&format!("rmse,{:.6}\n", self.rmse));
        if let Some(m) = &self.masks {
            let mut push = |name: &str, pr: &PrecisionRecall| {
                text.push_str(&format!("{name}_precision,{}\n", fmt_opt(pr.precision)));
                text.push_str(&format!("{name}_recall,{}\n", fmt_opt(pr.recall)));
            };
            push("dynamic_removal", &m.dynamic_removal);
            push("dynamic_soft", &m.dynamic_soft);
            push("static_removal", &m.static_removal);
            push("static_soft", &m.static_soft);
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "edge detection:  AUROC {}  AUPRC {}  (mean over {} steps)\n",
            fmt_opt(self.auroc_mean),
            fmt_opt(self.auprc_mean),
            self.auroc_t.len()
        ));
        s.push_str(&format!("lag detection:   AUROC {}\n", fmt_opt(self.lag_auroc)));
        s.push_str(&format!("structure:       SHD {}\n", self.shd_total));
        s.push_str(&format!(
            "forecast:        MAE {:.6}  RMSE {:.6}\n",
            self.mae, self.rmse
        ));
        if let Some(m) = &self.masks {
            s.push_str(&format!(
                "mask removal:    dyn P {} R {}  static P {} R {}\n",
                fmt_opt(m.dynamic_removal.precision),
                fmt_opt(m.dynamic_removal.recall),
                fmt_opt(m.static_removal.precision),
                fmt_opt(m.static_removal.recall)
            ));
            s.push_str(&format!(
                "mask soft flags: dyn P {} R {}  static P {} R {}\n",
                fmt_opt(m.dynamic_soft.precision),
                fmt_opt(m.dynamic_soft.recall),
                fmt_opt(m.static_soft.precision),
                fmt_opt(m.static_soft.recall)
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array3};
    use proptest::prelude::*;

    #[test]
    fn auroc_hand_cases() {
        // perfect ranking
        assert_abs_diff_eq!(
            auroc(&[0.9, 0.1, 0.5], &[true, false, true]).unwrap(),
            1.0
        );
        // constant scores tie-average to chance
        assert_abs_diff_eq!(
            auroc(&[0.3, 0.3, 0.3, 0.3], &[true, false, true, false]).unwrap(),
            0.5
        );
        // worst ranking
        assert_abs_diff_eq!(auroc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
        // degenerate labels
        assert!(auroc(&[0.1, 0.9], &[true, true]).is_none());
    }

    #[test]
    fn auprc_hand_cases() {
        assert_abs_diff_eq!(
            auprc(&[0.9, 0.1, 0.5], &[true, false, true]).unwrap(),
            1.0
        );
        // desc order P, N, P: 0.5*1 + 0.5*(2/3)
        assert_abs_diff_eq!(
            auprc(&[0.9, 0.8, 0.1], &[true, false, true]).unwrap(),
            0.5 + 0.5 * (2.0 / 3.0),
            epsilon = 1e-12
        );
        assert!(auprc(&[0.2, 0.4], &[false, false]).is_none());
    }

    proptest! {
        /// AUROC is invariant under strictly monotone transforms of
        /// nonnegative scores (cube preserves order).
        #[test]
        fn auroc_monotone_invariant(
            scores in proptest::collection::vec(0.0_f64..10.0, 4..40),
            seed in 0u64..1000,
        ) {
            let labels: Vec<bool> = scores
                .iter()
                .enumerate()
                .map(|(i, _)| (i as u64).wrapping_mul(seed + 7) % 3 == 0)
                .collect();
            let cubed: Vec<f64> = scores.iter().map(|v| v.powi(3)).collect();
            let a = auroc(&scores, &labels);
            let b = auroc(&cubed, &labels);
            match (a, b) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                (None, None) => {}
                _ => prop_assert!(false, "degeneracy must agree"),
            }
        }
    }

    #[test]
    fn shd_identity_and_symmetry() {
        let a = array![[0.0, 0.5, 0.0], [0.0, 0.0, 0.2], [0.0, 0.0, 0.0]];
        let b = array![[0.0, 0.0, 0.3], [0.0, 0.0, 0.2], [0.0, 0.0, 0.0]];
        assert_eq!(shd(&a.view(), &a.view(), 0.1), 0);
        assert_eq!(shd(&a.view(), &b.view(), 0.1), shd(&b.view(), &a.view(), 0.1));
        assert_eq!(shd(&a.view(), &b.view(), 0.1), 2);
    }

    #[test]
    fn forecast_zero_estimate_is_signal_rms() {
        let panel = TimeSeriesPanel {
            client_id: 0,
            values: Array3::from_shape_fn((4, 6, 2), |(s, t, d)| {
                ((s + 2 * t + 3 * d) as f64 * 0.7).sin()
            }),
        };
        let w = Array3::<f64>::zeros((6, 2, 2));
        let a = Array3::<f64>::zeros((1, 2, 2));
        let (mae, rmse) = forecast_errors(&w, &a, &panel).unwrap();
        let vals: Vec<f64> = panel
            .values
            .slice(ndarray::s![.., 1.., ..])
            .iter()
            .copied()
            .collect();
        let want_rmse =
            (vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64).sqrt();
        assert_abs_diff_eq!(rmse, want_rmse, epsilon = 1e-12);
        assert!(mae <= rmse + 1e-12, "Jensen: mae <= rmse");
    }

    #[test]
    fn forecast_with_true_tensors_hits_noise_floor() {
        use crate::synth::{generate, Dynamics, ScenarioSpec};
        let spec = ScenarioSpec {
            vars: 4,
            steps: 30,
            lag: 1,
            clients: 1,
            samples_per_client: 500,
            sparsity: 0.5,
            dynamics: Dynamics::Constant,
            confounded_edges: vec![],
            inconsistent_edges: vec![],
            inconsistent_lag_edges: vec![],
            noise_burst: None,
            noise_std: 0.1,
            seed: 42,
        };
        let (panels, truth) = generate(&spec).unwrap();
        let (_, rmse) = forecast_errors(&truth.w_true, &truth.a_true, &panels[0]).unwrap();
        assert!(
            (rmse - 0.1).abs() / 0.1 < 0.1,
            "rmse {rmse} should sit near the noise level 0.1"
        );
    }

    #[test]
    fn mask_report_perfect_and_degenerate() {
        use crate::dism::PriorMeta;
        let t_len = 3;
        let d = 3;
        let mut s = Array3::<u8>::from_elem((t_len, d, d), 1);
        for t in 0..t_len {
            for i in 0..d {
                s[[t, i, i]] = 0;
            }
            s[[t, 1, 2]] = 0;
            s[[t, 2, 1]] = 0;
        }
        let mut l = Array3::<u8>::zeros((t_len, d, d));
        l[[1, 0, 1]] = 1;
        let priors = PriorSet {
            s: s.clone(),
            l_soft: l.clone(),
            s_a: Array3::from_elem((1, d, d), 1),
            l_soft_a: Array3::zeros((1, d, d)),
            sampled_times: vec![0],
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
        };
        let truth = GroundTruth {
            w_true: Array3::zeros((t_len, d, d)),
            a_true: Array3::zeros((1, d, d)),
            oracle_s: s,
            oracle_l: l,
            oracle_s_a: Array3::from_elem((1, d, d), 1),
            oracle_l_a: Array3::zeros((1, d, d)),
        };
        let report = mask_report(&priors, &truth).unwrap();
        assert_eq!(report.dynamic_removal.precision, Some(1.0));
        assert_eq!(report.dynamic_removal.recall, Some(1.0));
        assert_eq!(report.dynamic_soft.precision, Some(1.0));
        assert_eq!(report.dynamic_soft.recall, Some(1.0));
        // no static removals exist in truth or priors
        assert_eq!(report.static_removal.precision, None);
        assert_eq!(report.static_removal.recall, None);

        // all-ones S / all-zero L has removal recall 0
        let mut lax = priors.clone();
        lax.s.fill(1);
        lax.l_soft.fill(0);
        for t in 0..t_len {
            for i in 0..d {
                lax.s[[t, i, i]] = 0;
            }
        }
        let lax_report = mask_report(&lax, &truth).unwrap();
        assert_eq!(lax_report.dynamic_removal.recall, Some(0.0));
    }
}
