//! The ModeCell recurrent unit.
//!
//! One step runs three stages over the input state `x`, the previous hidden
//! state and the slot bus:
//!
//! 1. **Slot binding.** The bus is projected to queries and the input
//!    `I = [x, h_prev]` to keys and values (two depthwise-separable 3×3 convs
//!    each). Channels are split into `N` heads; each head attends over the
//!    `H·W` spatial tokens, and the head outputs are reshaped back to maps and
//!    passed through a per-slot conv–relu–conv network.
//! 2. **Adaptive slot fusion.** `GAP(I)` goes through a shared reduction layer
//!    and per-slot linear layers to give channel-wise importance weights `ω`.
//!    Each gate then fuses a sigmoid-gated residual on `I` with the slots,
//!    each weighted by `σ(ω ⊙ I)`.
//! 3. **Bus transition.** LSTM-style gates built from the fused features and
//!    `I` update the bus; the hidden state is `o ⊙ tanh(P ∗ bus)`, where `P`
//!    is a 1×1 projection to the hidden width.
//!
//! Attention and the binding networks are shared across gates; fusion layers
//! and gate convolutions are independent per gate.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// How slot features are weighted during fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// Learned importance weights `σ(ω ⊙ I)`.
    Adaptive,
    /// Every slot weighted by a constant 0.5 (`ω ≡ 0`); no fusion FFNs.
    Equal,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Adaptive => "adaptive",
            FusionMode::Equal => "equal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adaptive" => Some(FusionMode::Adaptive),
            "equal" => Some(FusionMode::Equal),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeCellConfig {
    pub num_slots: usize,
    pub d_x: usize,
    pub d_h: usize,
    pub height: usize,
    pub width: usize,
    pub ffn_hidden: usize,
    pub fusion: FusionMode,
}

impl ModeCellConfig {
    pub const DEFAULT_SLOTS: usize = 4;

    pub fn new(d_x: usize, d_h: usize, height: usize, width: usize) -> Self {
        Self {
            num_slots: Self::DEFAULT_SLOTS,
            d_x,
            d_h,
            height,
            width,
            ffn_hidden: 16,
            fusion: FusionMode::Adaptive,
        }
    }

    /// Channel width of `I`, the bus and every fused feature.
    pub fn channels(&self) -> usize {
        self.d_x + self.d_h
    }

    pub fn d_head(&self) -> usize {
        self.channels() / self.num_slots
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_slots", self.num_slots),
            ("d_x", self.d_x),
            ("d_h", self.d_h),
            ("height", self.height),
            ("width", self.width),
            ("ffn_hidden", self.ffn_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.channels() % self.num_slots != 0 {
            return Err(Error::config(
                "num_slots",
                format!(
                    "d_x + d_h = {} is not divisible by {} slots",
                    self.channels(),
                    self.num_slots
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Output = 2,
    Modulation = 3,
}

pub const GATES: [Gate; 4] = [Gate::Input, Gate::Forget, Gate::Output, Gate::Modulation];

impl Gate {
    pub fn name(self) -> &'static str {
        match self {
            Gate::Input => "i",
            Gate::Forget => "f",
            Gate::Output => "o",
            Gate::Modulation => "g",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight = store.add_fan_in(format!("{name}.weight"), &[cout, cin, k, k], fan_in, rng);
        let bias = bias.then(|| store.add_fan_in(format!("{name}.bias"), &[cout], fan_in, rng));
        Self { weight, bias }
    }

    pub fn apply(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.weight), self.bias.map(|b| p.var(b)))
    }
}

#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearLayer {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add_fan_in(format!("{name}.weight"), &[dout, din], din, rng),
            bias: store.add_fan_in(format!("{name}.bias"), &[dout], din, rng),
        }
    }

    pub fn apply(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.weight), p.var(self.bias))
    }
}

/// Depthwise 3×3 then pointwise 1×1 with bias.
#[derive(Clone, Debug)]
pub struct DsConv {
    pub depthwise: ParamId,
    pub pointwise: ParamId,
    pub bias: ParamId,
}

impl DsConv {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, rng: &mut R) -> Self {
        Self {
            depthwise: store.add_fan_in(format!("{name}.depthwise"), &[c, 1, 3, 3], 9, rng),
            pointwise: store.add_fan_in(format!("{name}.pointwise"), &[c, c, 1, 1], c, rng),
            bias: store.add_fan_in(format!("{name}.bias"), &[c], c, rng),
        }
    }

    pub fn apply(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        tape.depthwise_separable_conv2d(
            x,
            p.var(self.depthwise),
            p.var(self.pointwise),
            Some(p.var(self.bias)),
        )
    }
}

/// Query/key/value projection: two stacked depthwise-separable convolutions.
#[derive(Clone, Debug)]
pub struct Projection {
    pub stages: [DsConv; 2],
}

impl Projection {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, rng: &mut R) -> Self {
        Self {
            stages: [
                DsConv::new(store, &format!("{name}.0"), c, rng),
                DsConv::new(store, &format!("{name}.1"), c, rng),
            ],
        }
    }

    pub fn apply(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let y = self.stages[0].apply(tape, p, x)?;
        self.stages[1].apply(tape, p, y)
    }
}

/// Per-slot binding network: conv3×3 → relu → conv3×3.
#[derive(Clone, Debug)]
pub struct FfnBind {
    pub first: Conv,
    pub second: Conv,
}

impl FfnBind {
    pub fn apply(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let y = self.first.apply(tape, p, x)?;
        let y = tape.relu(y);
        self.second.apply(tape, p, y)
    }
}

#[derive(Clone, Debug)]
pub struct GateParams {
    /// One layer per slot (`ffn_hidden → d_x+d_h`); empty under equal fusion.
    pub ffn_fuse: Vec<LinearLayer>,
    /// `w_fuse[0]` acts on `I`, `w_fuse[n]` on slot `n`.
    pub w_fuse: Vec<Conv>,
    /// Fused-feature path of the gate pre-activation (no bias).
    pub w_f: Conv,
    /// Input path of the gate pre-activation, carrying the gate bias.
    pub w_i: Conv,
}

#[derive(Clone, Debug)]
pub struct ModeCellParams {
    pub config: ModeCellConfig,
    pub query: Projection,
    pub key: Projection,
    pub value: Projection,
    pub ffn_bind: Vec<FfnBind>,
    pub ffn_fuse_reduce: Option<LinearLayer>,
    pub gates: Vec<GateParams>,
    /// 1×1 projection of the bus to the hidden width inside the output tanh.
    pub out_proj: ParamId,
    pub bus_init_mean: ParamId,
    pub bus_init_logvar: ParamId,
}

pub const FORGET_BIAS_INIT: f64 = 1.0;
pub const BUS_LOGVAR_INIT: f64 = -4.0;

impl ModeCellParams {
    pub fn new<R: Rng + ?Sized>(
        config: ModeCellConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.channels();
        let dh = config.d_head();
        let n = config.num_slots;
        let query = Projection::new(store, &format!("{prefix}.query"), c, rng);
        let key = Projection::new(store, &format!("{prefix}.key"), c, rng);
        let value = Projection::new(store, &format!("{prefix}.value"), c, rng);
        let ffn_bind = (0..n)
            .map(|s| FfnBind {
                first: Conv::new(store, &format!("{prefix}.bind{s}.0"), dh, dh, 3, true, rng),
                second: Conv::new(store, &format!("{prefix}.bind{s}.1"), dh, dh, 3, true, rng),
            })
            .collect();
        let adaptive = config.fusion == FusionMode::Adaptive;
        let ffn_fuse_reduce = adaptive.then(|| {
            LinearLayer::new(
                store,
                &format!("{prefix}.fuse_reduce"),
                c,
                config.ffn_hidden,
                rng,
            )
        });
        let mut gates = Vec::with_capacity(4);
        for gate in GATES {
            let g = format!("{prefix}.gate_{}", gate.name());
            let ffn_fuse = if adaptive {
                (0..n)
                    .map(|s| {
                        LinearLayer::new(store, &format!("{g}.fuse{s}"), config.ffn_hidden, c, rng)
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let mut w_fuse = vec![Conv::new(
                store,
                &format!("{g}.w_fuse0"),
                c,
                c,
                3,
                true,
                rng,
            )];
            for s in 0..n {
                w_fuse.push(Conv::new(
                    store,
                    &format!("{g}.w_fuse{}", s + 1),
                    dh,
                    c,
                    3,
                    true,
                    rng,
                ));
            }
            let cout = if gate == Gate::Output { config.d_h } else { c };
            let w_f = Conv::new(store, &format!("{g}.w_f"), c, cout, 3, false, rng);
            let w_i = Conv::new(store, &format!("{g}.w_i"), c, cout, 3, true, rng);
            if gate == Gate::Forget {
                let b = w_i.bias.expect("gate input conv has a bias");
                *store.get_mut(b) = Tensor::full(&[cout], FORGET_BIAS_INIT);
            }
            gates.push(GateParams {
                ffn_fuse,
                w_fuse,
                w_f,
                w_i,
            });
        }
        let out_proj =
            store.add_fan_in(format!("{prefix}.out_proj"), &[config.d_h, c, 1, 1], c, rng);
        let bus_init_mean = store.add(format!("{prefix}.bus_mean"), Tensor::zeros(&[c]));
        let bus_init_logvar = store.add(
            format!("{prefix}.bus_logvar"),
            Tensor::full(&[c], BUS_LOGVAR_INIT),
        );
        Ok(Self {
            config,
            query,
            key,
            value,
            ffn_bind,
            ffn_fuse_reduce,
            gates,
            out_proj,
            bus_init_mean,
            bus_init_logvar,
        })
    }

    pub fn gate(&self, gate: Gate) -> &GateParams {
        &self.gates[gate as usize]
    }
}

/// Slot bus `𝓑`: `[B, d_x+d_h, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct SlotBusState {
    pub bus: Var,
}

/// Hidden state `𝓗`: `[B, d_h, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct HiddenState {
    pub hidden: Var,
}

/// `N` slot feature maps, each `[B, d_head, H, W]`.
#[derive(Clone, Debug)]
pub struct SlotSet {
    pub slots: Vec<Var>,
}

/// `omega[gate][n]`, each `[B, d_x+d_h]`; empty under equal fusion.
#[derive(Clone, Debug)]
pub struct ImportanceWeights {
    pub omega: Vec<Vec<Var>>,
}

#[derive(Clone, Debug)]
pub struct BindOutput {
    pub slots: SlotSet,
    /// `I = [x, h_prev]`.
    pub input: Var,
    /// Attention probabilities `[B·N, H·W, H·W]`, rows sum to one.
    pub attention: Var,
}

/// Noise source for the bus prior.
pub enum BusNoise<'a> {
    /// Use the prior mean.
    Mean,
    /// Reparameterised sample `mean + exp(logvar/2)·ε`.
    Sample(&'a mut dyn RngCore),
}

pub fn init_slot_bus(
    params: &ModeCellParams,
    tape: &mut Tape,
    p: &BoundParams,
    batch: usize,
    noise: BusNoise<'_>,
) -> Result<SlotBusState> {
    let cfg = &params.config;
    let (h, w) = (cfg.height, cfg.width);
    let mean = tape.broadcast_channels(p.var(params.bus_init_mean), batch, h, w)?;
    let bus = match noise {
        BusNoise::Mean => mean,
        BusNoise::Sample(rng) => {
            let half = tape.scale(p.var(params.bus_init_logvar), 0.5);
            let std = tape.exp(half);
            let std = tape.broadcast_channels(std, batch, h, w)?;
            let shape = [batch, cfg.channels(), h, w];
            let eps = Tensor::from_fn(&shape, |_| rng.sample(StandardNormal));
            let eps = tape.constant(eps);
            let scaled = tape.mul(std, eps)?;
            tape.add(mean, scaled)?
        }
    };
    Ok(SlotBusState { bus })
}

fn check_shape(tape: &Tape, v: Var, expected: &[usize], what: &str) -> Result<()> {
    let s = tape.value(v).shape();
    if s.len() != 4 || s[1..] != expected[1..] || (expected[0] != 0 && s[0] != expected[0]) {
        return Err(Error::shape(format!(
            "{what}: got {s:?}, expected [B, {:?}]",
            &expected[1..]
        )));
    }
    Ok(())
}

pub fn bind_slots(
    params: &ModeCellParams,
    tape: &mut Tape,
    p: &BoundParams,
    bus: SlotBusState,
    x: Var,
    h_prev: HiddenState,
) -> Result<BindOutput> {
    let cfg = &params.config;
    let (h, w) = (cfg.height, cfg.width);
    check_shape(tape, x, &[0, cfg.d_x, h, w], "cell input")?;
    let batch = tape.value(x).shape()[0];
    check_shape(tape, h_prev.hidden, &[batch, cfg.d_h, h, w], "hidden state")?;
    check_shape(tape, bus.bus, &[batch, cfg.channels(), h, w], "slot bus")?;

    let n = cfg.num_slots;
    let input = tape.concat_channels(&[x, h_prev.hidden])?;
    let q = params.query.apply(tape, p, bus.bus)?;
    let k = params.key.apply(tape, p, input)?;
    let v = params.value.apply(tape, p, input)?;
    let q = tape.heads_to_tokens(q, n)?;
    let k = tape.heads_to_tokens(k, n)?;
    let v = tape.heads_to_tokens(v, n)?;
    let scores = tape.matmul_t(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (cfg.d_head() as f64).sqrt());
    let attention = tape.softmax_lastdim(scores);
    let attended = tape.matmul(attention, v)?;
    let maps = tape.tokens_to_heads(attended, n, h, w)?;
    let raw = tape.split_channels(maps, n)?;
    let slots = raw
        .into_iter()
        .zip(&params.ffn_bind)
        .map(|(s, ffn)| ffn.apply(tape, p, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(BindOutput {
        slots: SlotSet { slots },
        input,
        attention,
    })
}

pub fn compute_importance_weights(
    params: &ModeCellParams,
    tape: &mut Tape,
    p: &BoundParams,
    input: Var,
) -> Result<ImportanceWeights> {
    let Some(reduce) = &params.ffn_fuse_reduce else {
        return Ok(ImportanceWeights { omega: Vec::new() });
    };
    let pooled = tape.global_avg_pool(input)?;
    let r = reduce.apply(tape, p, pooled)?;
    let r = tape.relu(r);
    let omega = params
        .gates
        .iter()
        .map(|g| g.ffn_fuse.iter().map(|l| l.apply(tape, p, r)).collect())
        .collect::<Result<Vec<Vec<Var>>>>()?;
    Ok(ImportanceWeights { omega })
}

pub fn adaptive_fuse(
    params: &ModeCellParams,
    tape: &mut Tape,
    p: &BoundParams,
    gate: Gate,
    input: Var,
    slots: &SlotSet,
    omega: &ImportanceWeights,
) -> Result<Var> {
    let gp = params.gate(gate);
    if slots.slots.len() != params.config.num_slots {
        return Err(Error::shape(format!(
            "fuse: {} slots, expected {}",
            slots.slots.len(),
            params.config.num_slots
        )));
    }
    let gate_in = tape.sigmoid(input);
    let residual = gp.w_fuse[0].apply(tape, p, input)?;
    let mut fused = tape.mul(gate_in, residual)?;
    for (n, &slot) in slots.slots.iter().enumerate() {
        let proj = gp.w_fuse[n + 1].apply(tape, p, slot)?;
        let term = match params.config.fusion {
            FusionMode::Adaptive => {
                let w = omega
                    .omega
                    .get(gate as usize)
                    .and_then(|g| g.get(n))
                    .ok_or_else(|| Error::shape("fuse: missing importance weights"))?;
                let weighted = tape.mul_channelwise(input, *w)?;
                let s = tape.sigmoid(weighted);
                tape.mul(s, proj)?
            }
            FusionMode::Equal => tape.scale(proj, 0.5),
        };
        fused = tape.add(fused, term)?;
    }
    Ok(fused)
}

pub fn gate_and_transition(
    params: &ModeCellParams,
    tape: &mut Tape,
    p: &BoundParams,
    fused: &[Var; 4],
    input: Var,
    bus_prev: SlotBusState,
) -> Result<(SlotBusState, HiddenState)> {
    let mut pre = Vec::with_capacity(4);
    for gate in GATES {
        let gp = params.gate(gate);
        let a = gp.w_f.apply(tape, p, fused[gate as usize])?;
        let b = gp.w_i.apply(tape, p, input)?;
        pre.push(tape.add(a, b)?);
    }
    let i = tape.sigmoid(pre[Gate::Input as usize]);
    let f = tape.sigmoid(pre[Gate::Forget as usize]);
    let o = tape.sigmoid(pre[Gate::Output as usize]);
    let g = tape.tanh(pre[Gate::Modulation as usize]);
    let keep = tape.mul(f, bus_prev.bus)?;
    let write = tape.mul(i, g)?;
    let bus = tape.add(keep, write)?;
    let proj = tape.conv2d(bus, p.var(params.out_proj), None)?;
    let squashed = tape.tanh(proj);
    let hidden = tape.mul(o, squashed)?;
    Ok((SlotBusState { bus }, HiddenState { hidden }))
}

#[derive(Clone, Debug)]
pub struct CellStep {
    pub hidden: HiddenState,
    pub bus: SlotBusState,
    pub slots: SlotSet,
    pub omega: ImportanceWeights,
    pub attention: Var,
    pub input: Var,
}

pub fn modecell_step(
    params: &ModeCellParams,
    tape: &mut Tape,
    p: &BoundParams,
    x: Var,
    h_prev: HiddenState,
    bus_prev: SlotBusState,
) -> Result<CellStep> {
    let bound = bind_slots(params, tape, p, bus_prev, x, h_prev)?;
    let omega = compute_importance_weights(params, tape, p, bound.input)?;
    let mut fused = [bound.input; 4];
    for gate in GATES {
        fused[gate as usize] =
            adaptive_fuse(params, tape, p, gate, bound.input, &bound.slots, &omega)?;
    }
    let (bus, hidden) = gate_and_transition(params, tape, p, &fused, bound.input, bus_prev)?;
    Ok(CellStep {
        hidden,
        bus,
        slots: bound.slots,
        omega,
        attention: bound.attention,
        input: bound.input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: ModeCellConfig, seed: u64) -> (ParamStore, ModeCellParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = ModeCellParams::new(cfg, &mut store, "cell", &mut rng).unwrap();
        (store, params)
    }

    fn small_cfg() -> ModeCellConfig {
        ModeCellConfig {
            num_slots: 2,
            d_x: 2,
            d_h: 2,
            height: 3,
            width: 2,
            ffn_hidden: 3,
            fusion: FusionMode::Adaptive,
        }
    }

    #[test]
    fn rejects_indivisible_split() {
        let mut cfg = small_cfg();
        cfg.num_slots = 3;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            ModeCellParams::new(cfg, &mut store, "c", &mut rng),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn param_count_depends_only_on_config() {
        let (a, _) = setup(small_cfg(), 1);
        let (b, _) = setup(small_cfg(), 2);
        assert_eq!(a.count(), b.count());
        assert_ne!(a, b);
        let mut equal = small_cfg();
        equal.fusion = FusionMode::Equal;
        let (c, _) = setup(equal, 1);
        assert!(c.count() < a.count());
    }

    #[test]
    fn deterministic_bus_init_ignores_rng() {
        let (store, params) = setup(small_cfg(), 3);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let a = init_slot_bus(&params, &mut tape, &p, 2, BusNoise::Mean).unwrap();
        let b = init_slot_bus(&params, &mut tape, &p, 2, BusNoise::Mean).unwrap();
        assert_eq!(tape.value(a.bus), tape.value(b.bus));
        assert_eq!(tape.value(a.bus).shape(), &[2, 4, 3, 2]);
    }

    #[test]
    fn bus_init_zero_variance_limit() {
        let (mut store, params) = setup(small_cfg(), 4);
        store
            .set(
                params.bus_init_mean,
                Tensor::new(&[4], vec![0.3, -1.0, 2.0, 0.0]).unwrap(),
            )
            .unwrap();
        store
            .set(params.bus_init_logvar, Tensor::full(&[4], -60.0))
            .unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let s = init_slot_bus(&params, &mut tape, &p, 2, BusNoise::Sample(&mut rng)).unwrap();
        let m = init_slot_bus(&params, &mut tape, &p, 2, BusNoise::Mean).unwrap();
        assert!(tape.value(s.bus).max_abs_diff(tape.value(m.bus)) < 1e-12);
    }

    #[test]
    fn bus_init_monte_carlo_moments() {
        let mut cfg = small_cfg();
        cfg.height = 10;
        cfg.width = 10;
        let (mut store, params) = setup(cfg, 5);
        store
            .set(params.bus_init_logvar, Tensor::zeros(&[4]))
            .unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // 100 batch × 100 pixels = 10⁴ samples per channel
        let s = init_slot_bus(&params, &mut tape, &p, 100, BusNoise::Sample(&mut rng)).unwrap();
        let v = tape.value(s.bus);
        for c in 0..4 {
            let xs: Vec<f64> = (0..100)
                .flat_map(|b| v.data()[(b * 4 + c) * 100..(b * 4 + c + 1) * 100].to_vec())
                .collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
            assert!(mean.abs() < 0.05, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 0.1, "channel {c} var {var}");
        }
    }

    #[test]
    fn step_shapes_and_hidden_bounds() {
        let (store, params) = setup(small_cfg(), 7);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = tape.constant(Tensor::rand_normal(&[2, 2, 3, 2], &mut rng));
        let h = HiddenState {
            hidden: tape.constant(Tensor::rand_normal(&[2, 2, 3, 2], &mut rng)),
        };
        let bus = init_slot_bus(&params, &mut tape, &p, 2, BusNoise::Sample(&mut rng)).unwrap();
        let step = modecell_step(&params, &mut tape, &p, x, h, bus).unwrap();
        assert_eq!(tape.value(step.hidden.hidden).shape(), &[2, 2, 3, 2]);
        assert_eq!(tape.value(step.bus.bus).shape(), &[2, 4, 3, 2]);
        assert!(tape
            .value(step.hidden.hidden)
            .data()
            .iter()
            .all(|v| v.abs() < 1.0));
        assert_eq!(step.slots.slots.len(), 2);
        assert_eq!(step.omega.omega.len(), 4);
        assert_eq!(tape.value(step.attention).shape(), &[4, 6, 6]);
    }

    #[test]
    fn mismatched_input_is_shape_error() {
        let (store, params) = setup(small_cfg(), 9);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 3, 3, 2]));
        let h = HiddenState {
            hidden: tape.constant(Tensor::zeros(&[1, 2, 3, 2])),
        };
        let bus = init_slot_bus(&params, &mut tape, &p, 1, BusNoise::Mean).unwrap();
        assert!(matches!(
            bind_slots(&params, &mut tape, &p, bus, x, h),
            Err(Error::Shape(_))
        ));
    }
}
