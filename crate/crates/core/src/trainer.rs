//! Adam training loop, evaluation and checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::datagen::{derive_seed, Dataset, SequenceBatch};
use crate::error::{Error, Result};
use crate::metrics::{MetricAccumulator, MetricReport, MetricsConfig};
use crate::modecell::BusNoise;
use crate::network::{forward_sequence, ModeRnn, SequencePredictor};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Stream indices mixed into the run seed.
const INIT_STREAM: u64 = 0x494e_4954;
const NOISE_STREAM: u64 = 0x4e4f_4953;
const ORDER_STREAM: u64 = 0x4f52_4452;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub max_iters: u64,
    /// Checkpoint period in iterations; 0 disables periodic checkpoints.
    pub eval_every: u64,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 8,
            max_iters: 1000,
            eval_every: 0,
            seed: 0,
            grad_clip: Some(10.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |k: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(k, format!("must be positive, got {v}")))
            }
        };
        positive("lr", self.lr)?;
        positive("eps", self.eps)?;
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(k, format!("must lie in [0, 1), got {b}")));
            }
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            positive("grad_clip", c)?;
        }
        Ok(())
    }
}

/// Seeded parameter initialisation shared by every entry point.
pub fn init_model(config: crate::network::ModeRnnConfig, seed: u64) -> Result<ModeRnn> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, INIT_STREAM));
    ModeRnn::new(config, &mut rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape()
            || p.shape() != state.m[i].shape()
            || p.shape() != state.v[i].shape()
        {
            return Err(Error::shape(format!(
                "adam: tensor {i} param {:?} grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *pi -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Batch positions come from a stream of per-epoch permutations that
/// depends only on `(seed, dataset length)`.
#[derive(Clone, Debug)]
pub struct BatchOrder {
    seed: u64,
    len: usize,
    epoch: Option<(u64, Vec<usize>)>,
}

impl BatchOrder {
    pub fn new(seed: u64, len: usize) -> Self {
        Self {
            seed,
            len,
            epoch: None,
        }
    }

    fn permutation(&mut self, epoch: u64) -> &[usize] {
        if self.epoch.as_ref().map(|e| e.0) != Some(epoch) {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(self.seed, ORDER_STREAM), epoch));
            let mut p: Vec<usize> = (0..self.len).collect();
            p.shuffle(&mut rng);
            self.epoch = Some((epoch, p));
        }
        &self.epoch.as_ref().expect("just set").1
    }

    /// Dataset indices for iteration `it` (0-based).
    pub fn batch(&mut self, it: u64, batch: usize) -> Vec<usize> {
        let n = self.len as u64;
        (0..batch as u64)
            .map(|k| {
                let pos = it * batch as u64 + k;
                self.permutation(pos / n)[(pos % n) as usize]
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub loss: f64,
    pub grad_norm: f64,
}

pub const LOSS_HEADER: &str = "iteration,loss,grad_norm";

pub fn loss_csv(trace: &[LossRecord]) -> String {
    let mut out = format!("{LOSS_HEADER}\n");
    for r in trace {
        let _ = writeln!(out, "{},{},{}", r.iteration, r.loss, r.grad_norm);
    }
    out
}

/// Model, optimiser and every piece of state needed to resume exactly.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: ModeRnn,
    pub train: TrainConfig,
    pub adam: AdamState,
    /// Completed iterations.
    pub iteration: u64,
    /// Resolved configuration stored in checkpoints.
    pub config_text: String,
    noise_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: ModeRnn, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let config_text = RunConfig::from_parts(&model.config, &train)?.to_text();
        Ok(Self {
            adam: AdamState::new(model.params.tensors()),
            noise_rng: ChaCha8Rng::seed_from_u64(derive_seed(train.seed, NOISE_STREAM)),
            model,
            train,
            iteration: 0,
            config_text,
        })
    }

    /// One optimisation step on the batch chosen by `order`.
    pub fn step(&mut self, data: &Dataset, order: &mut BatchOrder) -> Result<LossRecord> {
        let idx = order.batch(self.iteration, self.train.batch);
        let batch = data.batch(&idx)?;
        let it = self.iteration + 1;
        let fwd = forward_sequence(&self.model, &batch, BusNoise::Sample(&mut self.noise_rng))?;
        let loss = fwd.tape.value(fwd.loss).item();
        if !loss.is_finite() {
            return Err(self.non_finite(it, loss, None));
        }
        let grads = fwd.tape.backward(fwd.loss)?;
        let mut grads = fwd.params.collect_grads(&grads, &fwd.tape);
        let grad_norm = global_norm(&grads);
        if !grad_norm.is_finite() {
            return Err(self.non_finite(it, loss, Some(&grads)));
        }
        if let Some(clip) = self.train.grad_clip {
            if grad_norm > clip {
                let s = clip / grad_norm;
                grads
                    .iter_mut()
                    .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
            }
        }
        adam_step(
            self.model.params.tensors_mut(),
            &grads,
            &mut self.adam,
            &self.train,
        )?;
        self.iteration = it;
        Ok(LossRecord {
            iteration: it,
            loss,
            grad_norm,
        })
    }

    fn non_finite(&self, iteration: u64, loss: f64, grads: Option<&[Tensor]>) -> Error {
        let mut dump = format!("loss={loss}");
        if let Some(grads) = grads {
            for (name, g) in self.model.params.names().iter().zip(grads) {
                if !g.all_finite() {
                    let _ = write!(dump, "; non-finite gradient in {name}");
                }
            }
        }
        for (name, p) in self
            .model
            .params
            .names()
            .iter()
            .zip(self.model.params.tensors())
        {
            if !p.all_finite() {
                let _ = write!(dump, "; non-finite parameter {name}");
            }
        }
        Error::NonFinite { iteration, dump }
    }

    /// Train until `train.max_iters`; `on_step` sees each record and may
    /// write checkpoints.
    pub fn run(
        &mut self,
        data: &Dataset,
        mut on_step: impl FnMut(&Trainer, &LossRecord) -> Result<()>,
    ) -> Result<Vec<LossRecord>> {
        if self.iteration >= self.train.max_iters {
            return Ok(Vec::new());
        }
        if data.is_empty() {
            return Err(Error::contract("training needs a non-empty dataset"));
        }
        let mut order = BatchOrder::new(self.train.seed, data.len());
        let mut trace = Vec::new();
        while self.iteration < self.train.max_iters {
            let rec = self.step(data, &mut order)?;
            on_step(self, &rec)?;
            trace.push(rec);
        }
        Ok(trace)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config_text.clone(),
            iteration: self.iteration,
            rng_seed: self.noise_rng.get_seed(),
            rng_stream: self.noise_rng.get_stream(),
            rng_word_pos: self.noise_rng.get_word_pos(),
            names: self.model.params.names().to_vec(),
            params: self.model.params.tensors().to_vec(),
            adam: self.adam.clone(),
        }
    }

    /// Rebuild a trainer from a checkpoint; `config.max_iters` may then be
    /// raised to continue.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let run = RunConfig::parse(&ckpt.config)?;
        let mut model = init_model(run.model_config()?, run.seed)?;
        ckpt.load_into(&mut model)?;
        let mut noise_rng = ChaCha8Rng::from_seed(ckpt.rng_seed);
        noise_rng.set_stream(ckpt.rng_stream);
        noise_rng.set_word_pos(ckpt.rng_word_pos);
        let adam = ckpt.adam.clone();
        if adam.m.len() != ckpt.params.len() {
            return Err(Error::contract(
                "checkpoint optimiser state does not match parameters",
            ));
        }
        Ok(Self {
            model,
            train: run.train_config(),
            adam,
            iteration: ckpt.iteration,
            config_text: ckpt.config.clone(),
            noise_rng,
        })
    }
}

/// Convenience wrapper: fresh trainer, full run.
pub fn train(
    model: ModeRnn,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Trainer, Vec<LossRecord>)> {
    let mut t = Trainer::new(model, cfg.clone())?;
    let trace = t.run(data, |_, _| Ok(()))?;
    Ok((t, trace))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub iteration: u64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
    pub adam: AdamState,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated checkpoint reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Format {
            offset: at as u64,
            msg: format!("{what} is not UTF-8"),
        })
    }

    fn f64s(&mut self, shape: &[usize], what: &str) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).unwrap_or(usize::MAX), what)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data)
    }
}

impl Checkpoint {
    /// Little-endian layout: magic, version, config text, iteration, rng
    /// state, parameters (name, shape, values), Adam step and moments.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, self.config.len() as u32);
        out.extend_from_slice(self.config.as_bytes());
        put_u64(&mut out, self.iteration);
        out.extend_from_slice(&self.rng_seed);
        put_u64(&mut out, self.rng_stream);
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        put_u32(&mut out, self.params.len() as u32);
        for (name, p) in self.names.iter().zip(&self.params) {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, p.ndim() as u32);
            for &d in p.shape() {
                put_u64(&mut out, d as u64);
            }
            put_f64s(&mut out, p);
        }
        put_u64(&mut out, self.adam.step);
        for t in self.adam.m.iter().chain(&self.adam.v) {
            put_f64s(&mut out, t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic, expected MCKP".into(),
            });
        }
        let version = c.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let config = c.string("config")?;
        let iteration = c.u64("iteration")?;
        let rng_seed: [u8; 32] = c.take(32, "rng seed")?.try_into().expect("32 bytes");
        let rng_stream = c.u64("rng stream")?;
        let rng_word_pos =
            u128::from_le_bytes(c.take(16, "rng position")?.try_into().expect("16 bytes"));
        let count = c.u32("parameter count")? as usize;
        let mut names = Vec::with_capacity(count.min(1 << 16));
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = c.string("parameter name")?;
            let ndim = c.u32("rank")? as usize;
            let shape = (0..ndim)
                .map(|_| c.u64("dimension").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            params.push(c.f64s(&shape, &name)?);
            names.push(name);
        }
        let step = c.u64("adam step")?;
        let mut moments = Vec::with_capacity(2 * count);
        for i in 0..2 * count {
            moments.push(c.f64s(params[i % count].shape(), "adam moment")?);
        }
        if c.pos != bytes.len() {
            return Err(Error::Format {
                offset: c.pos as u64,
                msg: format!("{} trailing bytes", bytes.len() - c.pos),
            });
        }
        let v = moments.split_off(count);
        Ok(Self {
            config,
            iteration,
            rng_seed,
            rng_stream,
            rng_word_pos,
            names,
            params,
            adam: AdamState {
                m: moments,
                v,
                step,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.to_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copy parameters into `model`, checking names and shapes.
    pub fn load_into(&self, model: &mut ModeRnn) -> Result<()> {
        if self.names != model.params.names() {
            return Err(Error::contract(format!(
                "checkpoint has {} parameters that do not match the configured model ({})",
                self.names.len(),
                model.params.names().len()
            )));
        }
        let ids: Vec<_> = model.params.ids().collect();
        for (id, p) in ids.into_iter().zip(&self.params) {
            model
                .params
                .set(id, p.clone())
                .map_err(|e| Error::contract(e.to_string()))?;
        }
        Ok(())
    }

    /// Model with the checkpoint's configuration and parameters.
    pub fn model(&self) -> Result<ModeRnn> {
        let run = RunConfig::parse(&self.config)?;
        let mut model = init_model(run.model_config()?, run.seed)?;
        self.load_into(&mut model)?;
        Ok(model)
    }
}

/// Ground-truth horizon `[B, P, c, H, W]` of a batch.
pub fn horizon_targets(batch: &SequenceBatch, pred_len: usize) -> Result<Tensor> {
    let s = batch.frames.shape();
    if s.len() != 5 || pred_len > s[1] {
        return Err(Error::shape(format!(
            "cannot take {pred_len} frames from {s:?}"
        )));
    }
    let frame: usize = s[2..].iter().product();
    let mut data = Vec::with_capacity(s[0] * pred_len * frame);
    for b in 0..s[0] {
        let start = (b * s[1] + s[1] - pred_len) * frame;
        data.extend_from_slice(&batch.frames.data()[start..start + pred_len * frame]);
    }
    Tensor::new(&[s[0], pred_len, s[2], s[3], s[4]], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_mode: BTreeMap<u8, MetricReport>,
    pub overall: MetricReport,
}

/// Metrics per mode label and overall; batches of `batch_size` sequences.
pub fn evaluate(
    model: &dyn SequencePredictor,
    data: &Dataset,
    metrics: &MetricsConfig,
    batch_size: usize,
) -> Result<EvalReport> {
    let p = model.pred_len();
    let mut overall = MetricAccumulator::new(p, metrics.clone());
    let mut per_mode: BTreeMap<u8, MetricAccumulator> = BTreeMap::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk)?;
        let pred = model.predict(&batch)?;
        let target = horizon_targets(&batch, p)?;
        if pred.shape() != target.shape() {
            return Err(Error::shape(format!(
                "predictor returned {:?}, expected {:?}",
                pred.shape(),
                target.shape()
            )));
        }
        for (b, &label) in batch.labels.iter().enumerate() {
            let (ps, ts) = (pred.index_first(b), target.index_first(b));
            overall.add_sequence(&ps, &ts)?;
            per_mode
                .entry(label)
                .or_insert_with(|| MetricAccumulator::new(p, metrics.clone()))
                .add_sequence(&ps, &ts)?;
        }
    }
    Ok(EvalReport {
        per_mode: per_mode.into_iter().map(|(k, v)| (k, v.finish())).collect(),
        overall: overall.finish(),
    })
}

pub const EVAL_HEADER: &str = "mode,count,mse,mse_frame,psnr,ssim,csi";

impl EvalReport {
    fn rows(&self) -> impl Iterator<Item = (String, &MetricReport)> {
        self.per_mode
            .iter()
            .map(|(m, r)| (format!("mode-{m}"), r))
            .chain(std::iter::once(("overall".to_string(), &self.overall)))
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{EVAL_HEADER}\n");
        for (name, r) in self.rows() {
            let a = &r.aggregate;
            let _ = writeln!(
                out,
                "{name},{},{},{},{},{},{}",
                r.count, a.mse, a.mse_frame, a.psnr, a.ssim, a.csi
            );
        }
        out
    }

    /// Aligned table with one row per mode and an overall row.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<10} {:>6} {:>12} {:>12} {:>9} {:>8} {:>8}\n",
            "mode", "count", "MSE", "MSE/frame", "PSNR", "SSIM", "CSI"
        );
        for (name, r) in self.rows() {
            let a = &r.aggregate;
            let _ = writeln!(
                out,
                "{:<10} {:>6} {:>12.4} {:>12.4} {:>9.3} {:>8.4} {:>8.4}",
                name, r.count, a.mse, a.mse_frame, a.psnr, a.ssim, a.csi
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = vec![Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
        let g = vec![Tensor::zeros(&[3])];
        let mut s = AdamState::new(&p);
        let before = p.clone();
        adam_step(&mut p, &g, &mut s, &TrainConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let cfg = TrainConfig {
            lr: 0.1,
            ..TrainConfig::default()
        };
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut s, &cfg).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p[0].item() - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut s = AdamState::new(&p);
        assert!(adam_step(
            &mut p,
            &[Tensor::zeros(&[3])],
            &mut s,
            &TrainConfig::default()
        )
        .is_err());
    }

    #[test]
    fn batch_order_covers_each_epoch() {
        let mut o = BatchOrder::new(3, 10);
        let mut seen: Vec<usize> = (0..5).flat_map(|it| o.batch(it, 2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let mut o2 = BatchOrder::new(3, 10);
        assert_eq!(o2.batch(7, 3), BatchOrder::new(3, 10).batch(7, 3));
    }

    #[test]
    fn checkpoint_bytes_round_trip() {
        let p = vec![Tensor::new(&[2, 1], vec![1.5, -0.25]).unwrap()];
        let ck = Checkpoint {
            config: "seed = 1\n".into(),
            iteration: 9,
            rng_seed: [7; 32],
            rng_stream: 3,
            rng_word_pos: 1 << 70,
            names: vec!["w".into()],
            adam: AdamState::new(&p),
            params: p,
        };
        let b = ck.to_bytes();
        let back = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), b);
        let err = Checkpoint::from_bytes(&b[..b.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }
}
