//! Mode-collapse diagnostics: per-step state extraction, feature export and
//! the A-distance between two feature populations.

use std::fmt::{self, Write as _};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::{derive_seed, Dataset};
use crate::error::{Error, Result};
use crate::modecell::{BusNoise, CellStep};
use crate::network::{rollout, ModeRnn};
use crate::tensor::kernels::global_avg_pool;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FeatureKind {
    Slot(usize),
    Bus,
    /// Importance weights of one slot, concatenated over the four gates.
    Omega(usize),
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureKind::Slot(n) => write!(f, "slot_{n}"),
            FeatureKind::Bus => f.write_str("bus"),
            FeatureKind::Omega(n) => write!(f, "omega_{n}"),
        }
    }
}

impl FeatureKind {
    pub fn parse(s: &str) -> Option<Self> {
        if s == "bus" {
            return Some(FeatureKind::Bus);
        }
        if let Some(n) = s.strip_prefix("slot_") {
            return n.parse().ok().map(FeatureKind::Slot);
        }
        s.strip_prefix("omega_")?
            .parse()
            .ok()
            .map(FeatureKind::Omega)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub sequence_id: usize,
    pub mode_label: u8,
    pub layer: usize,
    pub time: usize,
    pub kind: FeatureKind,
    pub vector: Vec<f64>,
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let s = t.shape();
    let d = s[1..].iter().product::<usize>();
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

/// GAP-pooled slot, bus and importance-weight vectors for every sequence,
/// layer and step, using deterministic (mean) bus initialisation.
///
/// Records are ordered by sequence, then time, then layer, then kind
/// (slots, bus, weights). Equal-fusion models carry no importance weights
/// and emit no `omega_*` records.
pub fn extract_states(
    model: &ModeRnn,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<Vec<FeatureRecord>> {
    let batch_size = batch_size.max(1);
    let mut out = Vec::new();
    let mut start = 0;
    while start < dataset.len() {
        let end = (start + batch_size).min(dataset.len());
        let idx: Vec<usize> = (start..end).collect();
        let batch = dataset.batch(&idx)?;
        let mut keyed: Vec<(usize, usize, usize, FeatureKind, Vec<f64>)> = Vec::new();
        let mut failure: Option<Error> = None;
        let mut observe = |tape: &Tape, t: usize, l: usize, step: &CellStep| {
            let mut push = |kind: FeatureKind, v: Vec<Vec<f64>>| {
                for (b, vector) in v.into_iter().enumerate() {
                    keyed.push((b, t, l, kind, vector));
                }
            };
            let pooled = |v| global_avg_pool(tape.value(v)).map(|g| rows(&g));
            let res = (|| -> Result<()> {
                for (n, &s) in step.slots.slots.iter().enumerate() {
                    push(FeatureKind::Slot(n), pooled(s)?);
                }
                push(FeatureKind::Bus, pooled(step.bus.bus)?);
                let num_slots = step.omega.omega.first().map_or(0, Vec::len);
                for n in 0..num_slots {
                    let mut per_seq: Vec<Vec<f64>> = Vec::new();
                    for gate in &step.omega.omega {
                        for (b, r) in rows(tape.value(gate[n])).into_iter().enumerate() {
                            match per_seq.get_mut(b) {
                                Some(v) => v.extend(r),
                                None => per_seq.push(r),
                            }
                        }
                    }
                    push(FeatureKind::Omega(n), per_seq);
                }
                Ok(())
            })();
            if let Err(e) = res {
                failure.get_or_insert(e);
            }
        };
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        rollout(
            model,
            &mut tape,
            &p,
            &batch,
            BusNoise::Mean,
            Some(&mut observe),
        )?;
        if let Some(e) = failure {
            return Err(e);
        }
        keyed.sort_by_key(|k| (k.0, k.1, k.2, k.3));
        out.extend(
            keyed
                .into_iter()
                .map(|(b, time, layer, kind, vector)| FeatureRecord {
                    sequence_id: start + b,
                    mode_label: batch.labels[b],
                    layer,
                    time,
                    kind,
                    vector,
                }),
        );
        start = end;
    }
    Ok(out)
}

pub const FEATURE_HEADER: &str = "sequence_id,mode_label,layer,time,kind";

/// Feature CSV: fixed columns, then `d0..d{k-1}` with `k` the widest vector.
/// Shorter vectors leave trailing fields empty.
pub fn write_features<W: Write>(records: &[FeatureRecord], mut w: W) -> std::io::Result<()> {
    let width = records.iter().map(|r| r.vector.len()).max().unwrap_or(0);
    let mut line = String::from(FEATURE_HEADER);
    for d in 0..width {
        let _ = write!(line, ",d{d}");
    }
    writeln!(w, "{line}")?;
    for r in records {
        line.clear();
        let _ = write!(
            line,
            "{},{},{},{},{}",
            r.sequence_id, r.mode_label, r.layer, r.time, r.kind
        );
        for v in &r.vector {
            let _ = write!(line, ",{v}");
        }
        for _ in r.vector.len()..width {
            line.push(',');
        }
        writeln!(w, "{line}")?;
    }
    w.flush()
}

pub fn export_features(records: &[FeatureRecord], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_features(records, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn read_features<R: BufRead>(r: R) -> Result<Vec<FeatureRecord>> {
    let mut lines = r.lines();
    let bad = |line: usize, msg: String| Error::Format {
        offset: line as u64,
        msg: format!("feature csv line {line}: {msg}"),
    };
    let header = lines
        .next()
        .transpose()
        .map_err(|e| bad(1, e.to_string()))?
        .ok_or_else(|| bad(1, "missing header".into()))?;
    if !header.starts_with(FEATURE_HEADER) {
        return Err(bad(1, format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let line = line.map_err(|e| bad(n, e.to_string()))?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 5 {
            return Err(bad(n, "too few fields".into()));
        }
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| bad(n, format!("{s:?}: {e}")))
        };
        let vector = f[5..]
            .iter()
            .take_while(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|e| bad(n, format!("{s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(FeatureRecord {
            sequence_id: int(f[0])?,
            mode_label: f[1]
                .parse()
                .map_err(|e| bad(n, format!("{:?}: {e}", f[1])))?,
            layer: int(f[2])?,
            time: int(f[3])?,
            kind: FeatureKind::parse(f[4])
                .ok_or_else(|| bad(n, format!("unknown kind {:?}", f[4])))?,
            vector,
        });
    }
    Ok(out)
}

pub fn import_features(path: &Path) -> Result<Vec<FeatureRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_features(BufReader::new(f))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    /// Fraction of each side used for training.
    pub split: f64,
    pub epochs: usize,
    pub lr: f64,
    pub min_samples: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            split: 0.5,
            epochs: 500,
            lr: 0.1,
            min_samples: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ADistanceResult {
    /// Held-out error before symmetrisation.
    pub raw_epsilon: f64,
    /// `min(ε, 1−ε)`.
    pub epsilon: f64,
    pub d_a: f64,
}

/// `d_A = 2(1−2ε)` after folding `ε` into `[0, 0.5]`.
pub fn a_distance_from_error(raw_epsilon: f64) -> ADistanceResult {
    let epsilon = raw_epsilon.min(1.0 - raw_epsilon);
    ADistanceResult {
        raw_epsilon,
        epsilon,
        d_a: 2.0 * (1.0 - 2.0 * epsilon),
    }
}

fn sigmoid(z: f64) -> f64 {
    crate::tensor::kernels::sigmoid(z)
}

/// Linear logistic probe separating `a` (label 0) from `b` (label 1).
pub fn a_distance<R: Rng + ?Sized>(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    cfg: &ProbeConfig,
    rng: &mut R,
) -> Result<ADistanceResult> {
    if a.len() < cfg.min_samples || b.len() < cfg.min_samples {
        return Err(Error::contract(format!(
            "a_distance needs at least {} samples per side, got {} and {}",
            cfg.min_samples,
            a.len(),
            b.len()
        )));
    }
    if !(cfg.split > 0.0 && cfg.split < 1.0) {
        return Err(Error::config(
            "split",
            format!("{} not in (0, 1)", cfg.split),
        ));
    }
    let dim = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != dim) {
        return Err(Error::shape("a_distance: feature vectors differ in length"));
    }
    let split_side = |side: &[Vec<f64>], rng: &mut R| {
        let mut idx: Vec<usize> = (0..side.len()).collect();
        idx.shuffle(rng);
        let k = ((side.len() as f64 * cfg.split).round() as usize).clamp(1, side.len() - 1);
        let (tr, te) = idx.split_at(k);
        (tr.to_vec(), te.to_vec())
    };
    let (a_tr, a_te) = split_side(a, rng);
    let (b_tr, b_te) = split_side(b, rng);
    let train: Vec<(&[f64], f64)> = a_tr
        .iter()
        .map(|&i| (a[i].as_slice(), 0.0))
        .chain(b_tr.iter().map(|&i| (b[i].as_slice(), 1.0)))
        .collect();
    let test: Vec<(&[f64], f64)> = a_te
        .iter()
        .map(|&i| (a[i].as_slice(), 0.0))
        .chain(b_te.iter().map(|&i| (b[i].as_slice(), 1.0)))
        .collect();

    let n = train.len() as f64;
    let mut mean = vec![0.0; dim];
    for (x, _) in &train {
        mean.iter_mut().zip(*x).for_each(|(m, v)| *m += v / n);
    }
    let mut std = vec![0.0; dim];
    for (x, _) in &train {
        for d in 0..dim {
            std[d] += (x[d] - mean[d]).powi(2) / n;
        }
    }
    let std: Vec<f64> = std
        .into_iter()
        .map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 })
        .collect();
    let standardize =
        |x: &[f64]| -> Vec<f64> { (0..dim).map(|d| (x[d] - mean[d]) / std[d]).collect() };
    let xs: Vec<Vec<f64>> = train.iter().map(|(x, _)| standardize(x)).collect();

    let mut w = vec![0.0; dim];
    let mut bias = 0.0;
    let mut gw = vec![0.0; dim];
    for _ in 0..cfg.epochs {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for (x, (_, y)) in xs.iter().zip(&train) {
            let z = bias + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let r = sigmoid(z) - y;
            gw.iter_mut().zip(x).for_each(|(g, v)| *g += r * v);
            gb += r;
        }
        w.iter_mut()
            .zip(&gw)
            .for_each(|(wi, g)| *wi -= cfg.lr * g / n);
        bias -= cfg.lr * gb / n;
    }

    let wrong = test
        .iter()
        .filter(|(x, y)| {
            let z = bias
                + standardize(x)
                    .iter()
                    .zip(&w)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            let pred = if z >= 0.0 { 1.0 } else { 0.0 };
            pred != *y
        })
        .count();
    Ok(a_distance_from_error(wrong as f64 / test.len() as f64))
}

/// Pairwise A-distance between modes for one feature kind and layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeDistanceMatrix {
    pub kind: FeatureKind,
    pub layer: usize,
    pub modes: Vec<u8>,
    /// `d_a[i][j]`; diagonal entries compare a mode against a disjoint
    /// resample of itself.
    pub d_a: Vec<Vec<f64>>,
}

pub fn mode_distance_matrix(
    records: &[FeatureRecord],
    kind: FeatureKind,
    layer: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ModeDistanceMatrix> {
    let mut modes: Vec<u8> = records.iter().map(|r| r.mode_label).collect();
    modes.sort_unstable();
    modes.dedup();
    if modes.len() < 2 {
        return Err(Error::contract(format!(
            "mode distance matrix needs at least 2 modes, found {}",
            modes.len()
        )));
    }
    let feats: Vec<Vec<Vec<f64>>> = modes
        .iter()
        .map(|&m| {
            records
                .iter()
                .filter(|r| r.mode_label == m && r.kind == kind && r.layer == layer)
                .map(|r| r.vector.clone())
                .collect()
        })
        .collect();
    let k = modes.len();
    let mut d_a = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i..k {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, (i * k + j) as u64));
            let r = if i == j {
                let mut v = feats[i].clone();
                v.shuffle(&mut rng);
                let (x, y) = v.split_at(v.len() / 2);
                a_distance(x, y, cfg, &mut rng)?
            } else {
                a_distance(&feats[i], &feats[j], cfg, &mut rng)?
            };
            d_a[i][j] = r.d_a;
            d_a[j][i] = r.d_a;
        }
    }
    Ok(ModeDistanceMatrix {
        kind,
        layer,
        modes,
        d_a,
    })
}

impl ModeDistanceMatrix {
    /// Lines `d_a.<kind>.layer<l>.<mi>.<mj>=value`.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (i, mi) in self.modes.iter().enumerate() {
            for (j, mj) in self.modes.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "d_a.{}.layer{}.{mi}.{mj}={}",
                    self.kind, self.layer, self.d_a[i][j]
                );
            }
        }
        out
    }
}
