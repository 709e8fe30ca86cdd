//! Ground-truth dynamic linear SCM generator.
//!
//! Data follow `V^t = V^t W^(t) + sum_tau V^(t-tau) A^(tau) + u_k + eps^t`
//! per client, where `W^(t)` is strictly upper triangular in the generating
//! (identity) topological order, the lag tensor `A` is static, `u_k` carries
//! client-specific confounder shifts, and `eps` is i.i.d. Gaussian. The
//! module also derives oracle masks directly from the scenario bookkeeping
//! so that the mining phase can be scored without inference.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

const DATA_STREAM_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Edge-trajectory family for the contemporaneous weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dynamics {
    Constant,
    Sinusoid,
    Piecewise,
}

/// A pair confounded by a client-specific latent shift: `strength[k]` is
/// added to both endpoints on client `k` (constant within the client, so
/// samples stay i.i.d. and the dependence is purely cross-client).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfoundedEdge {
    pub i: usize,
    pub j: usize,
    pub strengths: Vec<f64>,
}

/// A true contemporaneous edge whose coefficient is zeroed on the listed
/// clients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InconsistentEdge {
    pub i: usize,
    pub j: usize,
    pub absent_clients: Vec<usize>,
}

/// Same as [`InconsistentEdge`] for a lagged edge `(tau, i, j)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InconsistentLagEdge {
    pub tau: usize,
    pub i: usize,
    pub j: usize,
    pub absent_clients: Vec<usize>,
}

/// Extra noise of the given amplitude on all variables of one client over a
/// half-open time window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseBurst {
    pub client: usize,
    pub window: (usize, usize),
    pub amplitude: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    /// Variable count D.
    pub vars: usize,
    /// Series length T.
    pub steps: usize,
    /// Lag order L.
    pub lag: usize,
    /// Client count K.
    pub clients: usize,
    /// Samples per client n_k.
    pub samples_per_client: usize,
    /// Fraction of nonzero edges in [0, 1].
    pub sparsity: f64,
    pub dynamics: Dynamics,
    #[serde(default)]
    pub confounded_edges: Vec<ConfoundedEdge>,
    #[serde(default)]
    pub inconsistent_edges: Vec<InconsistentEdge>,
    #[serde(default)]
    pub inconsistent_lag_edges: Vec<InconsistentLagEdge>,
    #[serde(default)]
    pub noise_burst: Option<NoiseBurst>,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    pub seed: u64,
}

fn default_noise_std() -> f64 {
    0.1
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vars < 2 {
            return Err(Error::config("need at least 2 variables"));
        }
        if self.steps <= self.lag {
            return Err(Error::config("series length must exceed lag order"));
        }
        if self.clients == 0 {
            return Err(Error::config("need at least one client"));
        }
        if self.samples_per_client < 2 {
            return Err(Error::config("need n_k >= 2 per client"));
        }
        if !(0.0..=1.0).contains(&self.sparsity) {
            return Err(Error::config("sparsity must lie in [0, 1]"));
        }
        if self.noise_std <= 0.0 {
            return Err(Error::config("noise_std must be positive"));
        }
        for e in &self.confounded_edges {
            if e.i == e.j || e.i >= self.vars || e.j >= self.vars {
                return Err(Error::config("confounded edge indices out of range"));
            }
            if e.strengths.len() != self.clients {
                return Err(Error::config("confounded edge needs one strength per client"));
            }
        }
        for e in &self.inconsistent_edges {
            if e.i >= e.j || e.j >= self.vars {
                return Err(Error::config(
                    "inconsistent edges must satisfy i < j < D (identity topological order)",
                ));
            }
            if e.absent_clients.iter().any(|&k| k >= self.clients) {
                return Err(Error::config("inconsistent edge client out of range"));
            }
        }
        for e in &self.inconsistent_lag_edges {
            if e.tau == 0 || e.tau > self.lag || e.i >= self.vars || e.j >= self.vars {
                return Err(Error::config("inconsistent lag edge out of range"));
            }
            if e.absent_clients.iter().any(|&k| k >= self.clients) {
                return Err(Error::config("inconsistent lag edge client out of range"));
            }
        }
        if let Some(b) = &self.noise_burst {
            if b.client >= self.clients || b.window.0 >= b.window.1 || b.window.1 > self.steps {
                return Err(Error::config("noise burst window out of range"));
            }
        }
        Ok(())
    }
}

/// One client's raw data: `values[sample, t, d]`.
#[derive(Debug, Clone)]
pub struct TimeSeriesPanel {
    pub client_id: usize,
    pub values: Array3<f64>,
}

impl TimeSeriesPanel {
    pub fn n_samples(&self) -> usize {
        self.values.shape()[0]
    }
    pub fn steps(&self) -> usize {
        self.values.shape()[1]
    }
    pub fn vars(&self) -> usize {
        self.values.shape()[2]
    }
    pub fn validate(&self) -> Result<()> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("panel contains non-finite values"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Contemporaneous weights, time-varying, shared across clients: `[T, D, D]`.
    pub w_true: Array3<f64>,
    /// Lagged weights, static: `[L, D, D]` (`a_true[tau-1]` holds lag tau).
    pub a_true: Array3<f64>,
    pub oracle_s: Array3<u8>,
    pub oracle_l: Array3<u8>,
    pub oracle_s_a: Array3<u8>,
    pub oracle_l_a: Array3<u8>,
}

/// Structure draw shared by data generation and oracle bookkeeping.
struct Structure {
    /// (i, j, base coeff, phase, alt coeff for piecewise), i < j.
    contemp: Vec<(usize, usize, f64, f64, f64)>,
    /// (tau, i, j, coeff), tau in 1..=L.
    lagged: Vec<(usize, usize, usize, f64)>,
}

fn draw_coeff(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let mag = rng.random_range(lo..hi);
    if rng.random_bool(0.5) {
        mag
    } else {
        -mag
    }
}

fn draw_structure(spec: &ScenarioSpec) -> Structure {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.vars;

    let confounded: Vec<(usize, usize)> = spec
        .confounded_edges
        .iter()
        .map(|e| (e.i.min(e.j), e.i.max(e.j)))
        .collect();
    let forced: Vec<(usize, usize)> = spec.inconsistent_edges.iter().map(|e| (e.i, e.j)).collect();

    let mut pairs: Vec<(usize, usize)> = (0..d)
        .flat_map(|i| (i + 1..d).map(move |j| (i, j)))
        .filter(|p| !confounded.contains(p) && !forced.contains(p))
        .collect();
    let total_pairs = d * (d - 1) / 2;
    let want = ((spec.sparsity * total_pairs as f64).round() as usize).min(pairs.len());
    // partial Fisher-Yates
    for idx in 0..want {
        let swap = rng.random_range(idx..pairs.len());
        pairs.swap(idx, swap);
    }
    let mut support: Vec<(usize, usize)> = pairs[..want].to_vec();
    support.extend(forced.iter().copied());
    support.sort_unstable();

    let contemp = support
        .into_iter()
        .map(|(i, j)| {
            let c = draw_coeff(&mut rng, 0.3, 0.8);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let c2 = draw_coeff(&mut rng, 0.3, 0.8);
            (i, j, c, phase, c2)
        })
        .collect();

    let mut lag_slots: Vec<(usize, usize, usize)> = (1..=spec.lag)
        .flat_map(|tau| (0..d).flat_map(move |i| (0..d).map(move |j| (tau, i, j))))
        .filter(|&(tau, i, j)| {
            !spec
                .inconsistent_lag_edges
                .iter()
                .any(|e| (e.tau, e.i, e.j) == (tau, i, j))
        })
        .collect();
    let lag_want =
        ((spec.sparsity * (spec.lag * d * d) as f64 / 2.0).round() as usize).min(lag_slots.len());
    for idx in 0..lag_want {
        let swap = rng.random_range(idx..lag_slots.len());
        lag_slots.swap(idx, swap);
    }
    let mut lag_support: Vec<(usize, usize, usize)> = lag_slots[..lag_want].to_vec();
    lag_support.extend(spec.inconsistent_lag_edges.iter().map(|e| (e.tau, e.i, e.j)));
    lag_support.sort_unstable();

    let lagged = lag_support
        .into_iter()
        .map(|(tau, i, j)| (tau, i, j, draw_coeff(&mut rng, 0.2, 0.5)))
        .collect();

    Structure { contemp, lagged }
}

fn build_w_true(spec: &ScenarioSpec, st: &Structure) -> Array3<f64> {
    let (t_len, d) = (spec.steps, spec.vars);
    let mut w = Array3::<f64>::zeros((t_len, d, d));
    for &(i, j, c, phase, c2) in &st.contemp {
        for t in 0..t_len {
            let v = match spec.dynamics {
                Dynamics::Constant => c,
                Dynamics::Sinusoid => {
                    c * (0.5
                        + 0.5
                            * (std::f64::consts::TAU * t as f64 / t_len as f64 + phase).sin())
                }
                Dynamics::Piecewise => {
                    if t < t_len / 2 {
                        c
                    } else {
                        c2
                    }
                }
            };
            w[[t, i, j]] = v;
        }
    }
    w
}

fn build_a_true(spec: &ScenarioSpec, st: &Structure) -> Array3<f64> {
    let mut a = Array3::<f64>::zeros((spec.lag, spec.vars, spec.vars));
    for &(tau, i, j, c) in &st.lagged {
        a[[tau - 1, i, j]] = c;
    }
    a
}

/// Generates panels for all clients plus the ground truth.
pub fn generate(spec: &ScenarioSpec) -> Result<(Vec<TimeSeriesPanel>, GroundTruth)> {
    spec.validate()?;
    let st = draw_structure(spec);
    let w_true = build_w_true(spec, &st);
    let a_true = build_a_true(spec, &st);

    // Divergence guards: lag recursion and contemporaneous pathway.
    let abs_lag_sum = a_true
        .axis_iter(Axis(0))
        .fold(Array2::<f64>::zeros((spec.vars, spec.vars)), |acc, a| {
            acc + a.mapv(f64::abs)
        });
    if linalg::spectral_radius(&abs_lag_sum.view(), 200) >= 1.0 {
        return Err(Error::config(
            "lag weights make the linear recursion divergent (spectral radius >= 1)",
        ));
    }
    for t in 0..spec.steps {
        let inv = contemporaneous_inverse(&w_true.index_axis(Axis(0), t));
        if linalg::operator_norm(&inv.view(), 100) > 5.0 {
            return Err(Error::config(format!(
                "contemporaneous pathway too strong at t={t} (||(I-W)^-1|| > 5)"
            )));
        }
    }

    let (oracle_s, oracle_l, oracle_s_a, oracle_l_a) = oracle_masks(spec)?;

    let mut data_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(DATA_STREAM_SALT));
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::numeric(e.to_string()))?;
    let unit = Normal::new(0.0, 1.0).unwrap();

    let mut panels = Vec::with_capacity(spec.clients);
    for k in 0..spec.clients {
        // per-client confounder shift u_k[d]
        let mut shift = vec![0.0f64; spec.vars];
        for e in &spec.confounded_edges {
            shift[e.i] += e.strengths[k];
            shift[e.j] += e.strengths[k];
        }
        // client-local weight copies with inconsistent edges zeroed
        let mut w_k = w_true.clone();
        for e in &spec.inconsistent_edges {
            if e.absent_clients.contains(&k) {
                for t in 0..spec.steps {
                    w_k[[t, e.i, e.j]] = 0.0;
                }
            }
        }
        let mut a_k = a_true.clone();
        for e in &spec.inconsistent_lag_edges {
            if e.absent_clients.contains(&k) {
                a_k[[e.tau - 1, e.i, e.j]] = 0.0;
            }
        }

        let mut values = Array3::<f64>::zeros((spec.samples_per_client, spec.steps, spec.vars));
        for s in 0..spec.samples_per_client {
            for t in 0..spec.steps {
                if t < spec.lag {
                    for d in 0..spec.vars {
                        values[[s, t, d]] = unit.sample(&mut data_rng);
                    }
                    continue;
                }
                let burst = spec
                    .noise_burst
                    .as_ref()
                    .filter(|b| b.client == k && t >= b.window.0 && t < b.window.1);
                let mut base = vec![0.0f64; spec.vars];
                for d in 0..spec.vars {
                    let mut v = shift[d] + noise.sample(&mut data_rng);
                    if let Some(b) = burst {
                        v += b.amplitude * unit.sample(&mut data_rng);
                    }
                    for tau in 1..=spec.lag {
                        for i in 0..spec.vars {
                            v += values[[s, t - tau, i]] * a_k[[tau - 1, i, d]];
                        }
                    }
                    base[d] = v;
                }
                // solve V = V W + base in topological (index) order
                for d in 0..spec.vars {
                    let mut v = base[d];
                    for p in 0..d {
                        v += values[[s, t, p]] * w_k[[t, p, d]];
                    }
                    values[[s, t, d]] = v;
                }
            }
        }
        let panel = TimeSeriesPanel { client_id: k, values };
        panel.validate()?;
        panels.push(panel);
    }

    Ok((
        panels,
        GroundTruth {
            w_true,
            a_true,
            oracle_s,
            oracle_l,
            oracle_s_a,
            oracle_l_a,
        },
    ))
}

fn contemporaneous_inverse(w: &ArrayView2<f64>) -> Array2<f64> {
    // (I - W)^-1 for strictly upper-triangular W via forward substitution.
    let d = w.nrows();
    let mut inv = Array2::<f64>::zeros((d, d));
    for col in 0..d {
        inv[[col, col]] = 1.0;
        for row in col + 1..d {
            // entry (col, row): influence of col on row through the graph
            let mut v = 0.0;
            for p in col..row {
                v += inv[[col, p]] * w[[p, row]];
            }
            inv[[col, row]] = v;
        }
    }
    inv
}

/// Expected mining output, computed from scenario bookkeeping alone.
///
/// `oracle_s[t, i, j] = 1` iff i and j are dependent given the remaining
/// contemporaneous variables and the client index (the confounder shifts are
/// constants given the client, so they never induce dependence here); the
/// decision is d-separation on the unrolled true graph. `oracle_l` flags
/// surviving edges listed as spatially inconsistent. Lag oracles condition
/// on the contemporaneous variables other than the target.
pub fn oracle_masks(
    spec: &ScenarioSpec,
) -> Result<(Array3<u8>, Array3<u8>, Array3<u8>, Array3<u8>)> {
    spec.validate()?;
    let st = draw_structure(spec);
    let d = spec.vars;
    let contemp_support: Vec<(usize, usize)> =
        st.contemp.iter().map(|&(i, j, ..)| (i, j)).collect();
    let lag_support: Vec<(usize, usize, usize)> =
        st.lagged.iter().map(|&(tau, i, j, _)| (tau, i, j)).collect();

    let unrolled = UnrolledGraph::new(d, spec.lag, &contemp_support, &lag_support);

    let mut s_slice = Array2::<u8>::zeros((d, d));
    for i in 0..d {
        for j in i + 1..d {
            let cond: Vec<usize> = (0..d)
                .filter(|&v| v != i && v != j)
                .map(|v| unrolled.node(unrolled.last_slice(), v))
                .collect();
            let dep = unrolled.d_connected(
                unrolled.node(unrolled.last_slice(), i),
                unrolled.node(unrolled.last_slice(), j),
                &cond,
            );
            let bit = if dep { 1 } else { 0 };
            s_slice[[i, j]] = bit;
            s_slice[[j, i]] = bit;
        }
    }

    // Support is time-constant in all trajectory families, so the per-t
    // oracle is the slice oracle repeated.
    let mut oracle_s = Array3::<u8>::zeros((spec.steps, d, d));
    let mut oracle_l = Array3::<u8>::zeros((spec.steps, d, d));
    for t in 0..spec.steps {
        for i in 0..d {
            for j in 0..d {
                oracle_s[[t, i, j]] = s_slice[[i, j]];
            }
        }
        for e in &spec.inconsistent_edges {
            if s_slice[[e.i, e.j]] == 1 {
                oracle_l[[t, e.i, e.j]] = 1;
                oracle_l[[t, e.j, e.i]] = 1;
            }
        }
    }

    let mut oracle_s_a = Array3::<u8>::zeros((spec.lag, d, d));
    let mut oracle_l_a = Array3::<u8>::zeros((spec.lag, d, d));
    for tau in 1..=spec.lag {
        for i in 0..d {
            for j in 0..d {
                let cond: Vec<usize> = (0..d)
                    .filter(|&v| v != j)
                    .map(|v| unrolled.node(unrolled.last_slice(), v))
                    .collect();
                let x = unrolled.node(unrolled.last_slice() - tau, i);
                let y = unrolled.node(unrolled.last_slice(), j);
                if unrolled.d_connected(x, y, &cond) {
                    oracle_s_a[[tau - 1, i, j]] = 1;
                }
            }
        }
    }
    for e in &spec.inconsistent_lag_edges {
        if oracle_s_a[[e.tau - 1, e.i, e.j]] == 1 {
            oracle_l_a[[e.tau - 1, e.i, e.j]] = 1;
        }
    }

    Ok((oracle_s, oracle_l, oracle_s_a, oracle_l_a))
}

/// The true graph unrolled over enough slices that ancestor paths saturate.
struct UnrolledGraph {
    vars: usize,
    slices: usize,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
}

impl UnrolledGraph {
    fn new(
        vars: usize,
        lag: usize,
        contemp: &[(usize, usize)],
        lagged: &[(usize, usize, usize)],
    ) -> Self {
        let slices = (vars * lag.max(1) + 2).min(60);
        let n = vars * slices;
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        let mut add = |from: usize, to: usize| {
            parents[to].push(from);
            children[from].push(to);
        };
        for s in 0..slices {
            for &(i, j) in contemp {
                add(s * vars + i, s * vars + j);
            }
            for &(tau, i, j) in lagged {
                if s >= tau {
                    add((s - tau) * vars + i, s * vars + j);
                }
            }
        }
        UnrolledGraph {
            vars,
            slices,
            parents,
            children,
        }
    }

    fn node(&self, slice: usize, var: usize) -> usize {
        slice * self.vars + var
    }

    fn last_slice(&self) -> usize {
        self.slices - 1
    }

    /// Bayes-ball d-connection query.
    fn d_connected(&self, x: usize, y: usize, cond: &[usize]) -> bool {
        let n = self.parents.len();
        let mut in_cond = vec![false; n];
        for &c in cond {
            in_cond[c] = true;
        }
        // ancestors of conditioning set (for collider openings)
        let mut anc_of_cond = vec![false; n];
        let mut stack: Vec<usize> = cond.to_vec();
        while let Some(v) = stack.pop() {
            if anc_of_cond[v] {
                continue;
            }
            anc_of_cond[v] = true;
            stack.extend(self.parents[v].iter().copied());
        }

        // visited[(node, direction)]: direction 0 = arrived from child (up),
        // 1 = arrived from parent (down)
        let mut visited = vec![[false; 2]; n];
        let mut queue: Vec<(usize, usize)> = vec![(x, 0)];
        while let Some((v, dir)) = queue.pop() {
            if visited[v][dir] {
                continue;
            }
            visited[v][dir] = true;
            if v == y && !in_cond[v] {
                return true;
            }
            if dir == 0 {
                // trail arrives against the arrow: may continue to parents
                // and to children if v is not conditioned
                if !in_cond[v] {
                    for &p in &self.parents[v] {
                        queue.push((p, 0));
                    }
                    for &c in &self.children[v] {
                        queue.push((c, 1));
                    }
                }
            } else {
                // trail arrives along the arrow into v
                if !in_cond[v] {
                    for &c in &self.children[v] {
                        queue.push((c, 1));
                    }
                }
                if anc_of_cond[v] {
                    // collider (or conditioned node) opens the path upward
                    for &p in &self.parents[v] {
                        queue.push((p, 0));
                    }
                }
            }
        }
        false
    }
}

/// Panels for the two-client confounded-triple scenario: per client k,
/// `V2 = 0.5 V1 + 0.2 a_k + b_k + eps` and `V3 = 0.2 V1 + 0.4 a_k + c_k + eps`,
/// i.i.d. across samples and time steps. The shared per-client constant `a_k`
/// shifts both V2 and V3, inducing a purely cross-client dependence.
pub fn confounded_triple_panels(
    n_k: usize,
    steps: usize,
    a: &[f64],
    b: &[f64],
    c: &[f64],
    noise_std: f64,
    seed: u64,
) -> Vec<TimeSeriesPanel> {
    assert_eq!(a.len(), b.len());
    assert_eq!(a.len(), c.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let noise = Normal::new(0.0, noise_std).unwrap();
    a.iter()
        .zip(b)
        .zip(c)
        .enumerate()
        .map(|(k, ((&ak, &bk), &ck))| {
            let mut values = Array3::<f64>::zeros((n_k, steps, 3));
            for s in 0..n_k {
                for t in 0..steps {
                    let v1 = unit.sample(&mut rng);
                    values[[s, t, 0]] = v1;
                    values[[s, t, 1]] = 0.5 * v1 + 0.2 * ak + bk + noise.sample(&mut rng);
                    values[[s, t, 2]] = 0.2 * v1 + 0.4 * ak + ck + noise.sample(&mut rng);
                }
            }
            TimeSeriesPanel { client_id: k, values }
        })
        .collect()
}

/// i.i.d. draws from the chain `X -> Z -> Y`, returned as `[n, 3]` rows
/// `(x, z, y)` with `z = c1 x + eps`, `y = c2 z + eps`.
pub fn chain_samples(n: usize, c1: f64, c2: f64, noise_std: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let noise = Normal::new(0.0, noise_std).unwrap();
    let mut out = Array2::<f64>::zeros((n, 3));
    for s in 0..n {
        let x = unit.sample(&mut rng);
        let z = c1 * x + noise.sample(&mut rng);
        let y = c2 * z + noise.sample(&mut rng);
        out[[s, 0]] = x;
        out[[s, 1]] = z;
        out[[s, 2]] = y;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn base_spec() -> ScenarioSpec {
        ScenarioSpec {
            vars: 4,
            steps: 20,
            lag: 1,
            clients: 2,
            samples_per_client: 16,
            sparsity: 0.4,
            dynamics: Dynamics::Sinusoid,
            confounded_edges: vec![],
            inconsistent_edges: vec![],
            inconsistent_lag_edges: vec![],
            noise_burst: None,
            noise_std: 0.1,
            seed: 7,
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = base_spec();
        let (p1, g1) = generate(&spec).unwrap();
        let (p2, g2) = generate(&spec).unwrap();
        assert_eq!(p1[0].values, p2[0].values);
        assert_eq!(g1.w_true, g2.w_true);
    }

    #[test]
    fn lag_structure_invariant_under_longer_series() {
        let spec = base_spec();
        let mut longer = spec.clone();
        longer.steps *= 2;
        let (_, g1) = generate(&spec).unwrap();
        let (_, g2) = generate(&longer).unwrap();
        assert_eq!(g1.a_true, g2.a_true);
    }

    #[test]
    fn sinusoid_varies_value_not_support() {
        let (_, g) = generate(&base_spec()).unwrap();
        let t0 = g.w_true.index_axis(Axis(0), 0);
        let t5 = g.w_true.index_axis(Axis(0), 5);
        let mut saw_edge = false;
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(t0[[i, j]] != 0.0, t5[[i, j]] != 0.0);
                if t0[[i, j]] != 0.0 {
                    saw_edge = true;
                    assert!(t0[[i, j]] != t5[[i, j]]);
                }
            }
        }
        assert!(saw_edge);
    }

    #[test]
    fn w_true_upper_triangular() {
        let (_, g) = generate(&base_spec()).unwrap();
        for t in 0..20 {
            for i in 0..4 {
                for j in 0..=i {
                    assert_eq!(g.w_true[[t, i, j]], 0.0);
                }
            }
        }
    }

    #[test]
    fn empty_graph_is_pure_noise() {
        let mut spec = base_spec();
        spec.sparsity = 0.0;
        let (panels, g) = generate(&spec).unwrap();
        assert!(g.w_true.iter().all(|&v| v == 0.0));
        assert!(g.a_true.iter().all(|&v| v == 0.0));
        assert!(g.oracle_s.iter().all(|&v| v == 0));
        assert!(g.oracle_l.iter().all(|&v| v == 0));
        // pure noise: sample variance near noise_std^2 past warm-up
        let col = panels[0].values.index_axis(Axis(1), 5);
        let var = col.column(0).iter().map(|v| v * v).sum::<f64>() / 16.0;
        assert!(var < 0.2, "pure noise variance too large: {var}");
    }

    #[test]
    fn confounded_pair_without_edge_is_oracle_removed() {
        let mut spec = base_spec();
        spec.sparsity = 0.0; // no other edges, so no collider can reconnect the pair
        spec.confounded_edges = vec![ConfoundedEdge {
            i: 1,
            j: 2,
            strengths: vec![0.8, -0.8],
        }];
        let (oracle_s, ..) = oracle_masks(&spec).unwrap();
        for t in 0..spec.steps {
            assert_eq!(oracle_s[[t, 1, 2]], 0);
            assert_eq!(oracle_s[[t, 2, 1]], 0);
        }
    }

    #[test]
    fn inconsistent_edge_flagged_in_soft_oracle() {
        let mut spec = base_spec();
        spec.inconsistent_edges = vec![InconsistentEdge {
            i: 0,
            j: 3,
            absent_clients: vec![1],
        }];
        let (oracle_s, oracle_l, ..) = oracle_masks(&spec).unwrap();
        assert_eq!(oracle_s[[4, 0, 3]], 1);
        assert_eq!(oracle_l[[4, 0, 3]], 1);
    }

    #[test]
    fn confounder_shift_matches_hand_value() {
        // a = 0.1, b = 0.2 -> shift on V2 is 0.22; opposite signs flip it.
        let panels =
            confounded_triple_panels(4000, 2, &[0.1, -0.1], &[0.2, -0.2], &[0.5, -0.5], 0.05, 3);
        for (k, want) in [(0usize, 0.22f64), (1, -0.22)] {
            let v = &panels[k].values;
            let mut acc = 0.0;
            let n = v.shape()[0] * v.shape()[1];
            for s in 0..v.shape()[0] {
                for t in 0..v.shape()[1] {
                    acc += v[[s, t, 1]] - 0.5 * v[[s, t, 0]];
                }
            }
            assert_abs_diff_eq!(acc / n as f64, want, epsilon = 0.01);
        }
    }

    #[test]
    fn confounder_sign_flip_preserves_within_client_covariance() {
        let mut spec = base_spec();
        spec.confounded_edges = vec![ConfoundedEdge {
            i: 0,
            j: 2,
            strengths: vec![0.6, -0.3],
        }];
        let mut flipped = spec.clone();
        flipped.confounded_edges[0].strengths = vec![-0.6, 0.3];
        let (p1, _) = generate(&spec).unwrap();
        let (p2, _) = generate(&flipped).unwrap();
        // identical noise stream: values differ by a per-variable constant,
        // so within-client covariance at any slice is exactly preserved
        for k in 0..2 {
            let a = p1[k].values.index_axis(Axis(1), 10);
            let b = p2[k].values.index_axis(Axis(1), 10);
            let cov = |m: ndarray::ArrayView2<f64>, i: usize, j: usize| {
                let n = m.nrows() as f64;
                let mi = m.column(i).sum() / n;
                let mj = m.column(j).sum() / n;
                m.column(i)
                    .iter()
                    .zip(m.column(j))
                    .map(|(x, y)| (x - mi) * (y - mj))
                    .sum::<f64>()
                    / n
            };
            assert_abs_diff_eq!(cov(a, 0, 2), cov(b, 0, 2), epsilon = 1e-10);
        }
    }

    #[test]
    fn divergent_lag_spec_rejected() {
        let mut spec = base_spec();
        spec.vars = 6;
        spec.lag = 3;
        spec.sparsity = 1.0;
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn chain_oracle_blocks_endpoints() {
        // X -> Z -> Y: endpoints dependent given nothing is irrelevant here;
        // conditioned on Z (the full-conditioning policy) they separate.
        let spec = ScenarioSpec {
            vars: 3,
            steps: 4,
            lag: 0,
            clients: 1,
            samples_per_client: 4,
            sparsity: 0.0,
            dynamics: Dynamics::Constant,
            confounded_edges: vec![],
            inconsistent_edges: vec![
                InconsistentEdge { i: 0, j: 1, absent_clients: vec![] },
                InconsistentEdge { i: 1, j: 2, absent_clients: vec![] },
            ],
            inconsistent_lag_edges: vec![],
            noise_burst: None,
            noise_std: 0.1,
            seed: 1,
        };
        let (oracle_s, ..) = oracle_masks(&spec).unwrap();
        assert_eq!(oracle_s[[0, 0, 1]], 1);
        assert_eq!(oracle_s[[0, 1, 2]], 1);
        assert_eq!(oracle_s[[0, 0, 2]], 0);
    }
}
