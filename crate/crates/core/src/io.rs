//! On-disk artifact formats.
//!
//! All binary files are little-endian with a 4-byte magic and a u16 version:
//!
//! * dataset (`DDIC`): K, D, T, L as u32, per-client n_k as u32, then the
//!   panel values as f64 in `[client][sample][t][d]` order
//! * ground truth (`DDGT`): T, D, L, then W `[T,D,D]`, A `[L,D,D]` as f64,
//!   then the four oracle masks bit-packed
//! * prior set (`DDPR`): T, D, L, sampled times, threshold metadata, then the
//!   four masks bit-packed
//! * checkpoint / flat tensor (`DDCK`): dimension header, then the flat f64
//!   payload — round-trips bit-exactly
//! * graph estimate (`DDGE`): T, D, L, W and A tensors, then an embedded
//!   prior-set block
//!
//! Scenario echoes are TOML sidecars; CSV export is one file per client with
//! columns `sample,t,V1..VD`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::{Array3, Axis};

use crate::dism::{PriorMeta, PriorSet};
use crate::error::{Error, Result};
use crate::synth::{GroundTruth, ScenarioSpec, TimeSeriesPanel};

const VERSION: u16 = 1;

// --- small helpers --------------------------------------------------------

/// Packs a bit tensor (values 0/1) into bytes, LSB-first.
pub fn pack_bits(bits: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (idx, &b) in bits.iter().enumerate() {
        if b != 0 {
            out[idx / 8] |= 1 << (idx % 8);
        }
    }
    out
}

/// Inverse of [`pack_bits`] for a known bit count.
pub fn unpack_bits(bytes: &[u8], n: usize) -> Result<Vec<u8>> {
    if bytes.len() != n.div_ceil(8) {
        return Err(Error::format("bit-packed payload has the wrong length"));
    }
    Ok((0..n).map(|i| (bytes[i / 8] >> (i % 8)) & 1).collect())
}

fn write_header(w: &mut impl Write, magic: &[u8; 4]) -> Result<()> {
    w.write_all(magic)?;
    w.write_u16::<LE>(VERSION)?;
    Ok(())
}

fn read_header(r: &mut impl Read, magic: &[u8; 4], what: &str) -> Result<()> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got)?;
    if &got != magic {
        return Err(Error::format(format!("not a {what} file (bad magic)")));
    }
    let v = r.read_u16::<LE>()?;
    if v != VERSION {
        return Err(Error::format(format!("unsupported {what} version {v}")));
    }
    Ok(())
}

fn write_f64s(w: &mut impl Write, xs: impl IntoIterator<Item = f64>) -> Result<()> {
    for x in xs {
        w.write_f64::<LE>(x)?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LE>(&mut out)?;
    Ok(out)
}

fn write_mask(w: &mut impl Write, mask: &Array3<u8>) -> Result<()> {
    let bits: Vec<u8> = mask.iter().copied().collect();
    w.write_all(&pack_bits(&bits))?;
    Ok(())
}

fn read_mask(r: &mut impl Read, shape: (usize, usize, usize)) -> Result<Array3<u8>> {
    let n = shape.0 * shape.1 * shape.2;
    let mut bytes = vec![0u8; n.div_ceil(8)];
    r.read_exact(&mut bytes)?;
    let bits = unpack_bits(&bytes, n)?;
    Array3::from_shape_vec(shape, bits).map_err(|e| Error::shape(e.to_string()))
}

// --- dataset ---------------------------------------------------------------

pub fn write_dataset(path: &Path, panels: &[TimeSeriesPanel], lag: usize) -> Result<()> {
    let first = panels
        .first()
        .ok_or_else(|| Error::config("cannot write an empty dataset"))?;
    let (t_len, d) = (first.steps(), first.vars());
    for p in panels {
        if p.steps() != t_len || p.vars() != d {
            return Err(Error::shape("panels disagree on T or D"));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, b"DDIC")?;
    w.write_u32::<LE>(panels.len() as u32)?;
    w.write_u32::<LE>(d as u32)?;
    w.write_u32::<LE>(t_len as u32)?;
    w.write_u32::<LE>(lag as u32)?;
    for p in panels {
        w.write_u32::<LE>(p.n_samples() as u32)?;
    }
    for p in panels {
        write_f64s(&mut w, p.values.iter().copied())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(Vec<TimeSeriesPanel>, usize)> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r, b"DDIC", "dataset")?;
    let k = r.read_u32::<LE>()? as usize;
    let d = r.read_u32::<LE>()? as usize;
    let t_len = r.read_u32::<LE>()? as usize;
    let lag = r.read_u32::<LE>()? as usize;
    let ns: Vec<usize> = (0..k)
        .map(|_| r.read_u32::<LE>().map(|n| n as usize))
        .collect::<std::io::Result<_>>()?;
    let mut panels = Vec::with_capacity(k);
    for (client_id, &n) in ns.iter().enumerate() {
        let data = read_f64s(&mut r, n * t_len * d)?;
        let values =
            Array3::from_shape_vec((n, t_len, d), data).map_err(|e| Error::shape(e.to_string()))?;
        panels.push(TimeSeriesPanel { client_id, values });
    }
    Ok((panels, lag))
}

/// Scenario echo next to every artifact, so a run is reconstructible from
/// its output directory alone.
pub fn write_scenario_sidecar(path: &Path, spec: &ScenarioSpec) -> Result<()> {
    let text = toml::to_string_pretty(spec).map_err(|e| Error::format(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_scenario_sidecar(path: &Path) -> Result<ScenarioSpec> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::format(e.to_string()))
}

/// CSV export of one client panel, columns `sample,t,V1..VD`.
pub fn export_csv(path: &Path, panel: &TimeSeriesPanel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "sample,t")?;
    for d in 1..=panel.vars() {
        write!(w, ",V{d}")?;
    }
    writeln!(w)?;
    for (s, sample) in panel.values.axis_iter(Axis(0)).enumerate() {
        for (t, row) in sample.axis_iter(Axis(0)).enumerate() {
            write!(w, "{s},{t}")?;
            for v in row.iter() {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

// --- ground truth -----------------------------------------------------------

pub fn write_ground_truth(path: &Path, truth: &GroundTruth) -> Result<()> {
    let (t_len, d, _) = truth.w_true.dim();
    let lag = truth.a_true.shape()[0];
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, b"DDGT")?;
    w.write_u32::<LE>(t_len as u32)?;
    w.write_u32::<LE>(d as u32)?;
    w.write_u32::<LE>(lag as u32)?;
    write_f64s(&mut w, truth.w_true.iter().copied())?;
    write_f64s(&mut w, truth.a_true.iter().copied())?;
    write_mask(&mut w, &truth.oracle_s)?;
    write_mask(&mut w, &truth.oracle_l)?;
    write_mask(&mut w, &truth.oracle_s_a)?;
    write_mask(&mut w, &truth.oracle_l_a)?;
    w.flush()?;
    Ok(())
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r, b"DDGT", "ground-truth")?;
    let t_len = r.read_u32::<LE>()? as usize;
    let d = r.read_u32::<LE>()? as usize;
    let lag = r.read_u32::<LE>()? as usize;
    let w = Array3::from_shape_vec((t_len, d, d), read_f64s(&mut r, t_len * d * d)?)
        .map_err(|e| Error::shape(e.to_string()))?;
    let a = Array3::from_shape_vec((lag, d, d), read_f64s(&mut r, lag * d * d)?)
        .map_err(|e| Error::shape(e.to_string()))?;
    Ok(GroundTruth {
        w_true: w,
        a_true: a,
        oracle_s: read_mask(&mut r, (t_len, d, d))?,
        oracle_l: read_mask(&mut r, (t_len, d, d))?,
        oracle_s_a: read_mask(&mut r, (lag, d, d))?,
        oracle_l_a: read_mask(&mut r, (lag, d, d))?,
    })
}

// --- prior set ---------------------------------------------------------------

fn encode_priors(w: &mut impl Write, priors: &PriorSet) -> Result<()> {
    let (t_len, d, lag) = (priors.steps(), priors.vars(), priors.lag());
    w.write_u32::<LE>(t_len as u32)?;
    w.write_u32::<LE>(d as u32)?;
    w.write_u32::<LE>(lag as u32)?;
    w.write_u32::<LE>(priors.sampled_times.len() as u32)?;
    for &t in &priors.sampled_times {
        w.write_u32::<LE>(t as u32)?;
    }
    let m = &priors.meta;
    w.write_u32::<LE>(m.t_s as u32)?;
    w.write_u32::<LE>(m.h as u32)?;
    w.write_u64::<LE>(m.rff_seed)?;
    write_f64s(
        w,
        [
            m.delta_hard,
            m.delta_local,
            m.delta_hard_lag,
            m.delta_local_lag,
            m.ridge_scale,
            m.sigma,
        ],
    )?;
    write_mask(w, &priors.s)?;
    write_mask(w, &priors.l_soft)?;
    write_mask(w, &priors.s_a)?;
    write_mask(w, &priors.l_soft_a)?;
    Ok(())
}

fn decode_priors(r: &mut impl Read) -> Result<PriorSet> {
    let t_len = r.read_u32::<LE>()? as usize;
    let d = r.read_u32::<LE>()? as usize;
    let lag = r.read_u32::<LE>()? as usize;
    let n_sampled = r.read_u32::<LE>()? as usize;
    let sampled_times: Vec<usize> = (0..n_sampled)
        .map(|_| r.read_u32::<LE>().map(|t| t as usize))
        .collect::<std::io::Result<_>>()?;
    let t_s = r.read_u32::<LE>()? as usize;
    let h = r.read_u32::<LE>()? as usize;
    let rff_seed = r.read_u64::<LE>()?;
    let f = read_f64s(r, 6)?;
    let priors = PriorSet {
        s: read_mask(r, (t_len, d, d))?,
        l_soft: read_mask(r, (t_len, d, d))?,
        s_a: read_mask(r, (lag, d, d))?,
        l_soft_a: read_mask(r, (lag, d, d))?,
        sampled_times,
        meta: PriorMeta {
            t_s,
            delta_hard: f[0],
            delta_local: f[1],
            delta_hard_lag: f[2],
            delta_local_lag: f[3],
            ridge_scale: f[4],
            h,
            sigma: f[5],
            rff_seed,
        },
    };
    priors.validate()?;
    Ok(priors)
}

pub fn write_priors(path: &Path, priors: &PriorSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, b"DDPR")?;
    encode_priors(&mut w, priors)?;
    w.flush()?;
    Ok(())
}

pub fn read_priors(path: &Path) -> Result<PriorSet> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r, b"DDPR", "prior-set")?;
    decode_priors(&mut r)
}

// --- checkpoints (flat tensors with a shape header) ---------------------------

pub fn write_flat_tensor(path: &Path, dims: &[u32], data: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, b"DDCK")?;
    w.write_u32::<LE>(dims.len() as u32)?;
    for &d in dims {
        w.write_u32::<LE>(d)?;
    }
    w.write_u64::<LE>(data.len() as u64)?;
    write_f64s(&mut w, data.iter().copied())?;
    w.flush()?;
    Ok(())
}

pub fn read_flat_tensor(path: &Path) -> Result<(Vec<u32>, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r, b"DDCK", "checkpoint")?;
    let nd = r.read_u32::<LE>()? as usize;
    let dims: Vec<u32> = (0..nd)
        .map(|_| r.read_u32::<LE>())
        .collect::<std::io::Result<_>>()?;
    let len = r.read_u64::<LE>()? as usize;
    let data = read_f64s(&mut r, len)?;
    Ok((dims, data))
}

// --- graph estimate ------------------------------------------------------------

/// Final output of the trajectory phase: masked contemporaneous trajectory
/// and static lag tensor, with the priors that produced them.
pub fn write_graph_estimate(
    path: &Path,
    w_eff: &Array3<f64>,
    a_eff: &Array3<f64>,
    priors: &PriorSet,
) -> Result<()> {
    let (t_len, d, _) = w_eff.dim();
    let lag = a_eff.shape()[0];
    if priors.steps() != t_len || priors.vars() != d || priors.lag() != lag {
        return Err(Error::shape("graph estimate and priors disagree on dims"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, b"DDGE")?;
    w.write_u32::<LE>(t_len as u32)?;
    w.write_u32::<LE>(d as u32)?;
    w.write_u32::<LE>(lag as u32)?;
    write_f64s(&mut w, w_eff.iter().copied())?;
    write_f64s(&mut w, a_eff.iter().copied())?;
    encode_priors(&mut w, priors)?;
    w.flush()?;
    Ok(())
}

pub fn read_graph_estimate(path: &Path) -> Result<(Array3<f64>, Array3<f64>, PriorSet)> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r, b"DDGE", "graph-estimate")?;
    let t_len = r.read_u32::<LE>()? as usize;
    let d = r.read_u32::<LE>()? as usize;
    let lag = r.read_u32::<LE>()? as usize;
    let w = Array3::from_shape_vec((t_len, d, d), read_f64s(&mut r, t_len * d * d)?)
        .map_err(|e| Error::shape(e.to_string()))?;
    let a = Array3::from_shape_vec((lag, d, d), read_f64s(&mut r, lag * d * d)?)
        .map_err(|e| Error::shape(e.to_string()))?;
    let priors = decode_priors(&mut r)?;
    Ok((w, a, priors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use tempfile::tempdir;

    fn panel(client_id: usize, n: usize, t: usize, d: usize) -> TimeSeriesPanel {
        TimeSeriesPanel {
            client_id,
            values: Array3::from_shape_fn((n, t, d), |(a, b, c)| {
                ((a * 31 + b * 7 + c) as f64).sin() * 3.7 - 0.1
            }),
        }
    }

    #[test]
    fn bit_packing_roundtrip() {
        let bits: Vec<u8> = (0..37).map(|i| ((i * 5) % 3 == 0) as u8).collect();
        let packed = pack_bits(&bits);
        assert_eq!(packed.len(), 5);
        assert_eq!(unpack_bits(&packed, 37).unwrap(), bits);
        assert!(unpack_bits(&packed, 45).is_err());
    }

    #[test]
    fn dataset_roundtrip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("data.ddic");
        let panels = vec![panel(0, 4, 6, 3), panel(1, 7, 6, 3)];
        write_dataset(&path, &panels, 2).unwrap();
        let (back, lag) = read_dataset(&path).unwrap();
        assert_eq!(lag, 2);
        assert_eq!(back.len(), 2);
        for (a, b) in back.iter().zip(&panels) {
            assert_eq!(a.client_id, b.client_id);
            // bit-exact comparison, not approximate
            assert!(a
                .values
                .iter()
                .zip(b.values.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn dataset_rejects_wrong_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bogus");
        std::fs::write(&path, b"NOPE\x01\x00rest").unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Format(_))));
    }

    #[test]
    fn csv_row_count_and_header() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c0.csv");
        let p = panel(0, 3, 4, 2);
        export_csv(&path, &p).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "sample,t,V1,V2");
        assert_eq!(lines.len(), 1 + 3 * 4);
        assert!(lines[1].starts_with("0,0,"));
    }

    #[test]
    fn priors_roundtrip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.ddpr");
        let t_len = 5;
        let d = 3;
        let s = Array3::from_shape_fn((t_len, d, d), |(t, i, j)| {
            (i != j && (t + i + 2 * j) % 3 != 0) as u8
        });
        let l = s.mapv(|v| v & 1) * Array3::from_shape_fn((t_len, d, d), |(t, i, j)| {
            ((t + i + j) % 2) as u8
        });
        let priors = PriorSet {
            s: s.clone(),
            l_soft: l,
            s_a: Array3::from_elem((2, d, d), 1),
            l_soft_a: Array3::from_shape_fn((2, d, d), |(a, i, j)| ((a + i + j) % 2) as u8),
            sampled_times: vec![1, 3],
            meta: PriorMeta {
                t_s: 2,
                delta_hard: 1.25,
                delta_local: 0.5,
                delta_hard_lag: 2.0,
                delta_local_lag: 1.0,
                ridge_scale: 1e-3,
                h: 32,
                sigma: 1.0,
                rff_seed: 99,
            },
        };
        write_priors(&path, &priors).unwrap();
        let back = read_priors(&path).unwrap();
        assert_eq!(back, priors);
    }

    #[test]
    fn flat_tensor_preserves_bit_patterns() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("theta.ddck");
        let data = vec![0.0, -0.0, 1.5e-310, f64::MAX, -7.25, 1e-17];
        write_flat_tensor(&path, &[2, 3], &data).unwrap();
        let (dims, back) = read_flat_tensor(&path).unwrap();
        assert_eq!(dims, vec![2, 3]);
        assert!(back
            .iter()
            .zip(&data)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn ground_truth_and_estimate_roundtrip() {
        let dir = tempdir().unwrap();
        let gt = GroundTruth {
            w_true: Array3::from_shape_fn((4, 2, 2), |(t, i, j)| (t + i) as f64 * 0.1 - j as f64),
            a_true: Array3::from_shape_fn((1, 2, 2), |(_, i, j)| (i * 2 + j) as f64 * 0.3),
            oracle_s: Array3::from_elem((4, 2, 2), 1),
            oracle_l: Array3::zeros((4, 2, 2)),
            oracle_s_a: Array3::from_elem((1, 2, 2), 1),
            oracle_l_a: Array3::zeros((1, 2, 2)),
        };
        let path = dir.path().join("gt.ddgt");
        write_ground_truth(&path, &gt).unwrap();
        let back = read_ground_truth(&path).unwrap();
        assert_eq!(back.w_true, gt.w_true);
        assert_eq!(back.a_true, gt.a_true);
        assert_eq!(back.oracle_s, gt.oracle_s);
        assert_eq!(back.oracle_l_a, gt.oracle_l_a);

        let priors = PriorSet {
            s: Array3::from_shape_fn((4, 2, 2), |(_, i, j)| (i != j) as u8),
            l_soft: Array3::zeros((4, 2, 2)),
            s_a: Array3::from_elem((1, 2, 2), 1),
            l_soft_a: Array3::zeros((1, 2, 2)),
            sampled_times: vec![1],
            meta: PriorMeta {
                t_s: 4,
                delta_hard: 1.0,
                delta_local: 1.0,
                delta_hard_lag: 1.0,
                delta_local_lag: 1.0,
                ridge_scale: 1e-3,
                h: 8,
                sigma: 1.0,
                rff_seed: 0,
            },
        };
        let epath = dir.path().join("est.ddge");
        write_graph_estimate(&epath, &gt.w_true, &gt.a_true, &priors).unwrap();
        let (w, a, p) = read_graph_estimate(&epath).unwrap();
        assert_eq!(w, gt.w_true);
        assert_eq!(a, gt.a_true);
        assert_eq!(p, priors);
    }

    #[test]
    fn scenario_sidecar_roundtrip() {
        use crate::synth::{Dynamics, ScenarioSpec};
        let dir = tempdir().unwrap();
        let path = dir.path().join("scenario.toml");
        let spec = ScenarioSpec {
            vars: 4,
            steps: 20,
            lag: 1,
            clients: 2,
            samples_per_client: 50,
            sparsity: 0.4,
            dynamics: Dynamics::Sinusoid,
            confounded_edges: vec![],
            inconsistent_edges: vec![],
            inconsistent_lag_edges: vec![],
            noise_burst: None,
            noise_std: 0.1,
            seed: 7,
        };
        write_scenario_sidecar(&path, &spec).unwrap();
        let back = read_scenario_sidecar(&path).unwrap();
        assert_eq!(back.vars, 4);
        assert_eq!(back.seed, 7);
        assert_eq!(back.dynamics, Dynamics::Sinusoid);
    }
}
