//! Stacked ModeRNN predictor with a space-to-depth frame codec.

use rand::Rng;

use crate::datagen::SequenceBatch;
use crate::error::{Error, Result};
use crate::modecell::{
    init_slot_bus, modecell_step, BusNoise, CellStep, FusionMode, HiddenState, ModeCellConfig,
    ModeCellParams,
};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::{kernels, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModeRnnConfig {
    pub layers: usize,
    /// Hidden width `d_h` of every layer.
    pub hidden: usize,
    pub patch: usize,
    pub input_len: usize,
    pub pred_len: usize,
    pub image_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub num_slots: usize,
    pub ffn_hidden: usize,
    pub fusion: FusionMode,
}

impl Default for ModeRnnConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 64,
            patch: 4,
            input_len: 10,
            pred_len: 10,
            image_channels: 1,
            image_height: 64,
            image_width: 64,
            num_slots: ModeCellConfig::DEFAULT_SLOTS,
            ffn_hidden: 16,
            fusion: FusionMode::Adaptive,
        }
    }
}

impl ModeRnnConfig {
    pub fn seq_len(&self) -> usize {
        self.input_len + self.pred_len
    }

    /// Channels of an encoded frame.
    pub fn encoded_channels(&self) -> usize {
        self.image_channels * self.patch * self.patch
    }

    /// Per-layer cell configs; layer 0 reads encoded frames, deeper layers
    /// read the hidden state below.
    pub fn cell_configs(&self) -> Result<Vec<ModeCellConfig>> {
        self.validate()?;
        Ok((0..self.layers)
            .map(|l| ModeCellConfig {
                num_slots: self.num_slots,
                d_x: if l == 0 {
                    self.encoded_channels()
                } else {
                    self.hidden
                },
                d_h: self.hidden,
                height: self.image_height / self.patch,
                width: self.image_width / self.patch,
                ffn_hidden: self.ffn_hidden,
                fusion: self.fusion,
            })
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("patch", self.patch),
            ("input_len", self.input_len),
            ("pred_len", self.pred_len),
            ("image_channels", self.image_channels),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.image_height % self.patch != 0
            || self.image_width % self.patch != 0
            || self.image_height == 0
            || self.image_width == 0
        {
            return Err(Error::config(
                "patch",
                format!(
                    "frame {}x{} is not divisible by patch {}",
                    self.image_height, self.image_width, self.patch
                ),
            ));
        }
        Ok(())
    }
}

pub fn encode_frame(frame: &Tensor, patch: usize) -> Result<Tensor> {
    kernels::space_to_depth(frame, patch)
}

/// 1×1 conv of the top hidden state followed by depth-to-space.
pub fn decode_frame(
    hidden_top: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    patch: usize,
) -> Result<Tensor> {
    let y = kernels::conv2d(hidden_top, weight, Some(bias))?;
    kernels::depth_to_space(&y, patch)
}

#[derive(Clone, Debug)]
pub struct ModeRnn {
    pub config: ModeRnnConfig,
    pub params: ParamStore,
    pub cells: Vec<ModeCellParams>,
    pub decoder_weight: crate::params::ParamId,
    pub decoder_bias: crate::params::ParamId,
}

impl ModeRnn {
    pub fn new<R: Rng + ?Sized>(config: ModeRnnConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let cells = config
            .cell_configs()?
            .into_iter()
            .enumerate()
            .map(|(l, cfg)| ModeCellParams::new(cfg, &mut params, &format!("cell{l}"), rng))
            .collect::<Result<Vec<_>>>()?;
        let out_c = config.encoded_channels();
        let decoder_weight = params.add_fan_in(
            "decoder.weight",
            &[out_c, config.hidden, 1, 1],
            config.hidden,
            rng,
        );
        let decoder_bias = params.add_fan_in("decoder.bias", &[out_c], config.hidden, rng);
        Ok(Self {
            config,
            params,
            cells,
            decoder_weight,
            decoder_bias,
        })
    }
}

/// Called after every cell step with `(tape, time, layer, step)`.
pub type StepObserver<'a> = dyn FnMut(&Tape, usize, usize, &CellStep) + 'a;

pub struct Rollout {
    /// Mean squared error over the prediction horizon.
    pub loss: Var,
    /// One `[B,c,H,W]` frame per predicted time step.
    pub predictions: Vec<Var>,
}

/// Unroll the model over a batch on `tape` with parameters `p`.
///
/// Steps `t = 0..T-1` each predict frame `t+1`. Ground truth feeds the first
/// layer while `t < input_len`; afterwards the previous prediction does.
pub fn rollout(
    model: &ModeRnn,
    tape: &mut Tape,
    p: &BoundParams,
    batch: &SequenceBatch,
    mut noise: BusNoise<'_>,
    mut observer: Option<&mut StepObserver<'_>>,
) -> Result<Rollout> {
    let cfg = &model.config;
    let fs = batch.frames.shape();
    if fs.len() != 5 || fs[1] != cfg.seq_len() {
        return Err(Error::contract(format!(
            "sequence batch {fs:?} must have {} frames",
            cfg.seq_len()
        )));
    }
    if fs[2] != cfg.image_channels || fs[3] != cfg.image_height || fs[4] != cfg.image_width {
        return Err(Error::shape(format!(
            "frames {:?} do not match model {}x{}x{}",
            &fs[2..],
            cfg.image_channels,
            cfg.image_height,
            cfg.image_width
        )));
    }
    let b = fs[0];
    let (h, w) = (cfg.image_height / cfg.patch, cfg.image_width / cfg.patch);

    let mut hidden = Vec::with_capacity(cfg.layers);
    let mut buses = Vec::with_capacity(cfg.layers);
    for cell in &model.cells {
        hidden.push(HiddenState {
            hidden: tape.constant(Tensor::zeros(&[b, cfg.hidden, h, w])),
        });
        let n = match &mut noise {
            BusNoise::Mean => BusNoise::Mean,
            BusNoise::Sample(rng) => BusNoise::Sample(&mut **rng),
        };
        buses.push(init_slot_bus(cell, tape, p, b, n)?);
    }

    let mut predictions = Vec::with_capacity(cfg.pred_len);
    let mut sq_sum: Option<Var> = None;
    let mut prev_pred: Option<Var> = None;
    for t in 0..cfg.seq_len() - 1 {
        let frame = match prev_pred {
            Some(pred) if t >= cfg.input_len => pred,
            _ => tape.constant(batch.frames.index_second(t)),
        };
        let mut x = tape.space_to_depth(frame, cfg.patch)?;
        for (l, cell) in model.cells.iter().enumerate() {
            let step = modecell_step(cell, tape, p, x, hidden[l], buses[l])?;
            if let Some(obs) = observer.as_mut() {
                obs(tape, t, l, &step);
            }
            hidden[l] = step.hidden;
            buses[l] = step.bus;
            x = step.hidden.hidden;
        }
        let y = tape.conv2d(
            x,
            p.var(model.decoder_weight),
            Some(p.var(model.decoder_bias)),
        )?;
        let pred = tape.depth_to_space(y, cfg.patch)?;
        if t + 1 >= cfg.input_len {
            let target = tape.constant(batch.frames.index_second(t + 1));
            let diff = tape.sub(pred, target)?;
            let sq = tape.mul(diff, diff)?;
            let s = tape.sum(sq);
            sq_sum = Some(match sq_sum {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
            predictions.push(pred);
        }
        prev_pred = Some(pred);
    }
    let per_frame = cfg.image_channels * cfg.image_height * cfg.image_width;
    let denom = (b * cfg.pred_len * per_frame) as f64;
    let loss = tape.scale(sq_sum.expect("pred_len ≥ 1"), 1.0 / denom);
    Ok(Rollout { loss, predictions })
}

pub struct SequenceForward {
    pub tape: Tape,
    pub params: BoundParams,
    pub loss: Var,
    /// `[B, pred_len, c, H, W]`, raw decoder output.
    pub predictions: Tensor,
}

pub fn forward_sequence(
    model: &ModeRnn,
    batch: &SequenceBatch,
    noise: BusNoise<'_>,
) -> Result<SequenceForward> {
    let mut tape = Tape::new();
    let params = model.params.bind(&mut tape);
    let r = rollout(model, &mut tape, &params, batch, noise, None)?;
    let frames: Vec<Tensor> = r
        .predictions
        .iter()
        .map(|&v| tape.value(v).clone())
        .collect();
    let predictions = Tensor::stack_second(&frames)?;
    Ok(SequenceForward {
        tape,
        params,
        loss: r.loss,
        predictions,
    })
}

/// Mean squared error between `predictions` `[B,P,c,H,W]` and the last `P`
/// frames of `batch`.
pub fn horizon_mse(predictions: &Tensor, batch: &SequenceBatch) -> Result<f64> {
    let ps = predictions.shape();
    let fs = batch.frames.shape();
    if ps.len() != 5 || fs.len() != 5 || ps[0] != fs[0] || ps[2..] != fs[2..] || ps[1] > fs[1] {
        return Err(Error::shape(format!("predictions {ps:?} vs frames {fs:?}")));
    }
    let offset = fs[1] - ps[1];
    let frame: usize = ps[2..].iter().product();
    let mut acc = 0.0;
    for b in 0..ps[0] {
        for t in 0..ps[1] {
            let p = &predictions.data()[(b * ps[1] + t) * frame..(b * ps[1] + t + 1) * frame];
            let g = &batch.frames.data()
                [(b * fs[1] + t + offset) * frame..(b * fs[1] + t + offset + 1) * frame];
            acc += p.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    Ok(acc / predictions.numel() as f64)
}

/// Anything that can roll out the prediction horizon for a batch.
pub trait SequencePredictor {
    /// `[B, pred_len, c, H, W]` predictions in `[0, 1]`.
    fn predict(&self, batch: &SequenceBatch) -> Result<Tensor>;

    fn pred_len(&self) -> usize;
}

impl SequencePredictor for ModeRnn {
    fn predict(&self, batch: &SequenceBatch) -> Result<Tensor> {
        let fwd = forward_sequence(self, batch, BusNoise::Mean)?;
        Ok(fwd.predictions.map(|v| v.clamp(0.0, 1.0)))
    }

    fn pred_len(&self) -> usize {
        self.config.pred_len
    }
}
