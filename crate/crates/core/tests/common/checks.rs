//! Measurement routines shared by the focused tests and the acceptance run.

use modernn::config::RunConfig;
use modernn::datagen::{generate_dataset, SpriteSequenceSpec};
use modernn::diagnostics::{a_distance, ProbeConfig};
use modernn::modecell::{
    adaptive_fuse, bind_slots, compute_importance_weights, gate_and_transition, modecell_step,
    BusNoise, FusionMode, HiddenState, ModeCellConfig, ModeCellParams, SlotBusState, GATES,
};
use modernn::network::{rollout, ModeRnn, ModeRnnConfig};
use modernn::params::{BoundParams, ParamStore};
use modernn::tensor::{grad_check, Tape, Tensor, Var};
use modernn::trainer::{init_model, train};
use modernn::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Map;

/// Toy training setup: 8×8 frames, 2+2 steps, two stacked cells.
pub const TRAIN_TINY: &str = "\
frame_size = 8
sprite_size = 3
speed_min = 0.5
speed_max = 1.0
seq_len = 4
input_len = 2
pred_len = 2
modes = 1,2
layers = 2
hidden = 8
patch = 2
num_slots = 4
ffn_hidden = 4
batch = 2
lr = 0.003
";

pub const SEEDS: u64 = 20;
pub const OP_TOL: f64 = 1e-4;
pub const H: f64 = 1e-5;
/// Step for whole-model checks; smaller steps drown the small attention
/// gradients in roundoff.
pub const MODEL_H: f64 = 1e-4;

/// `Σ out ⊙ R` for a fixed random `R`, so every output entry matters.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let r = Tensor::rand_uniform(tape.value(out).shape(), -1.0, 1.0, &mut rng);
    let r = tape.constant(r);
    let m = tape.mul(out, r)?;
    Ok(tape.sum(m))
}

fn rand(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}

/// Values bounded away from zero, for kinked ops.
fn rand_off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    rand(shape, rng).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

type OpCase = (
    &'static str,
    Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>,
    Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>,
);

pub fn op_cases() -> Vec<OpCase> {
    fn case(
        name: &'static str,
        inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
        f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
    ) -> OpCase {
        (name, Box::new(inputs), Box::new(f))
    }
    vec![
        case(
            "conv2d",
            |r| {
                vec![
                    rand(&[2, 3, 4, 5], r),
                    rand(&[2, 3, 3, 3], r),
                    rand(&[2], r),
                ]
            },
            |t, v| t.conv2d(v[0], v[1], Some(v[2])),
        ),
        case(
            "conv2d_1x1",
            |r| vec![rand(&[2, 3, 3, 3], r), rand(&[4, 3, 1, 1], r)],
            |t, v| t.conv2d(v[0], v[1], None),
        ),
        case(
            "depthwise_conv2d",
            |r| vec![rand(&[2, 3, 4, 4], r), rand(&[3, 1, 3, 3], r)],
            |t, v| t.depthwise_conv2d(v[0], v[1]),
        ),
        case(
            "depthwise_separable_conv2d",
            |r| {
                vec![
                    rand(&[1, 2, 4, 3], r),
                    rand(&[2, 1, 3, 3], r),
                    rand(&[3, 2, 1, 1], r),
                    rand(&[3], r),
                ]
            },
            |t, v| t.depthwise_separable_conv2d(v[0], v[1], v[2], Some(v[3])),
        ),
        case(
            "matmul_2d",
            |r| vec![rand(&[3, 4], r), rand(&[4, 2], r)],
            |t, v| t.matmul(v[0], v[1]),
        ),
        case(
            "matmul_batched_t",
            |r| vec![rand(&[2, 3, 4], r), rand(&[2, 5, 4], r)],
            |t, v| t.matmul_t(v[0], v[1], true),
        ),
        case(
            "linear",
            |r| vec![rand(&[3, 4], r), rand(&[2, 4], r), rand(&[2], r)],
            |t, v| t.linear(v[0], v[1], v[2]),
        ),
        case(
            "softmax_lastdim",
            |r| vec![rand(&[2, 3, 5], r).map(|x| 3.0 * x)],
            |t, v| Ok(t.softmax_lastdim(v[0])),
        ),
        case(
            "sigmoid",
            |r| vec![rand(&[2, 7], r).map(|x| 4.0 * x)],
            |t, v| Ok(t.sigmoid(v[0])),
        ),
        case(
            "tanh",
            |r| vec![rand(&[2, 7], r).map(|x| 2.0 * x)],
            |t, v| Ok(t.tanh(v[0])),
        ),
        case(
            "relu",
            |r| vec![rand_off_zero(&[3, 5], r)],
            |t, v| Ok(t.relu(v[0])),
        ),
        case("exp", |r| vec![rand(&[4, 3], r)], |t, v| Ok(t.exp(v[0]))),
        case(
            "global_avg_pool",
            |r| vec![rand(&[2, 3, 3, 4], r)],
            |t, v| t.global_avg_pool(v[0]),
        ),
        case(
            "concat_channels",
            |r| vec![rand(&[2, 1, 2, 2], r), rand(&[2, 3, 2, 2], r)],
            |t, v| t.concat_channels(&[v[0], v[1]]),
        ),
        case(
            "narrow_channels",
            |r| vec![rand(&[2, 5, 2, 2], r)],
            |t, v| t.narrow_channels(v[0], 1, 3),
        ),
        case(
            "split_channels",
            |r| vec![rand(&[2, 4, 2, 3], r)],
            |t, v| {
                let parts = t.split_channels(v[0], 2)?;
                let a = t.scale(parts[0], 2.0);
                let b = t.mul(parts[1], parts[1])?;
                t.concat_channels(&[a, b])
            },
        ),
        case(
            "reshape",
            |r| vec![rand(&[2, 6], r)],
            |t, v| t.reshape(v[0], &[3, 4]),
        ),
        case(
            "add",
            |r| vec![rand(&[3, 4], r), rand(&[3, 4], r)],
            |t, v| t.add(v[0], v[1]),
        ),
        case(
            "sub",
            |r| vec![rand(&[3, 4], r), rand(&[3, 4], r)],
            |t, v| t.sub(v[0], v[1]),
        ),
        case(
            "mul",
            |r| vec![rand(&[3, 4], r), rand(&[3, 4], r)],
            |t, v| t.mul(v[0], v[1]),
        ),
        case(
            "mul_self",
            |r| vec![rand(&[3, 4], r)],
            |t, v| t.mul(v[0], v[0]),
        ),
        case(
            "scale",
            |r| vec![rand(&[3, 4], r)],
            |t, v| Ok(t.scale(v[0], -1.7)),
        ),
        case(
            "mul_channelwise",
            |r| vec![rand(&[2, 3, 2, 2], r), rand(&[2, 3], r)],
            |t, v| t.mul_channelwise(v[0], v[1]),
        ),
        case(
            "broadcast_channels",
            |r| vec![rand(&[3], r)],
            |t, v| t.broadcast_channels(v[0], 2, 2, 3),
        ),
        case(
            "heads_to_tokens",
            |r| vec![rand(&[2, 4, 2, 3], r)],
            |t, v| t.heads_to_tokens(v[0], 2),
        ),
        case(
            "tokens_to_heads",
            |r| vec![rand(&[4, 6, 2], r)],
            |t, v| t.tokens_to_heads(v[0], 2, 2, 3),
        ),
        case(
            "space_to_depth",
            |r| vec![rand(&[2, 2, 4, 6], r)],
            |t, v| t.space_to_depth(v[0], 2),
        ),
        case(
            "depth_to_space",
            |r| vec![rand(&[2, 8, 2, 3], r)],
            |t, v| t.depth_to_space(v[0], 2),
        ),
        case("sum", |r| vec![rand(&[3, 4], r)], |t, v| Ok(t.sum(v[0]))),
        case("mean", |r| vec![rand(&[3, 4], r)], |t, v| Ok(t.mean(v[0]))),
    ]
}

/// Worst relative error per op over all seeds.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    op_cases()
        .into_iter()
        .map(|(name, inputs, f)| {
            let mut worst: f64 = 0.0;
            for seed in 0..SEEDS {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = inputs(&mut rng);
                let rep = grad_check(
                    |t: &mut Tape, v: &[Var]| {
                        let out = f(t, v)?;
                        project(t, out, seed)
                    },
                    &x,
                    H,
                    OP_TOL,
                    None,
                )
                .unwrap();
                worst = worst.max(rep.max_rel_err);
            }
            (name, worst)
        })
        .collect()
}

pub fn tiny_cell(fusion: FusionMode) -> ModeCellConfig {
    ModeCellConfig {
        num_slots: 2,
        d_x: 2,
        d_h: 2,
        height: 3,
        width: 3,
        ffn_hidden: 3,
        fusion,
    }
}

/// Max relative error of a cell step w.r.t. inputs, states and a sample of
/// every parameter.
pub fn modecell_step_error(fusion: FusionMode, seed: u64) -> f64 {
    let cfg = tiny_cell(fusion);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let params = ModeCellParams::new(cfg.clone(), &mut store, "cell", &mut rng).unwrap();
    let c = cfg.channels();
    let mut inputs = vec![
        rand(&[2, cfg.d_x, 3, 3], &mut rng),
        rand(&[2, cfg.d_h, 3, 3], &mut rng),
        rand(&[2, c, 3, 3], &mut rng),
    ];
    inputs.extend(store.tensors().iter().cloned());
    let rep = grad_check(
        |t: &mut Tape, v: &[Var]| {
            let p = BoundParams::from_vars(v[3..].to_vec());
            let step = modecell_step(
                &params,
                t,
                &p,
                v[0],
                HiddenState { hidden: v[1] },
                SlotBusState { bus: v[2] },
            )?;
            let a = project(t, step.hidden.hidden, 1)?;
            let b = project(t, step.bus.bus, 2)?;
            t.add(a, b)
        },
        &inputs,
        MODEL_H,
        1e-3,
        Some(6),
    )
    .unwrap();
    rep.max_rel_err
}

pub fn tiny_model_config() -> ModeRnnConfig {
    ModeRnnConfig {
        layers: 2,
        hidden: 8,
        patch: 2,
        input_len: 3,
        pred_len: 2,
        image_channels: 1,
        image_height: 8,
        image_width: 8,
        num_slots: 4,
        ffn_hidden: 4,
        fusion: FusionMode::Adaptive,
    }
}

/// Relative error of the sequence loss w.r.t. a sample of every parameter,
/// with sampled (fixed-noise) bus initialisation.
pub fn forward_sequence_error(seed: u64) -> f64 {
    let cfg = tiny_model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ModeRnn::new(cfg.clone(), &mut rng).unwrap();
    let spec = SpriteSequenceSpec {
        frame_size: 8,
        sprite_size: 3,
        seq_len: cfg.seq_len(),
        speed_range: (0.5, 1.0),
        seed,
        ..SpriteSequenceSpec::default()
    };
    let data = generate_dataset(&spec, 2).unwrap();
    let batch = data.batch(&[0, 1]).unwrap();
    let rep = grad_check(
        |t: &mut Tape, v: &[Var]| {
            let p = BoundParams::from_vars(v.to_vec());
            let mut noise_rng = ChaCha8Rng::seed_from_u64(99);
            Ok(rollout(
                &model,
                t,
                &p,
                &batch,
                BusNoise::Sample(&mut noise_rng),
                None,
            )?
            .loss)
        },
        model.params.tensors(),
        MODEL_H,
        1e-3,
        Some(4),
    )
    .unwrap();
    rep.max_rel_err
}

pub const TOL: f64 = 1e-10;

pub fn random_config(rng: &mut ChaCha8Rng) -> ModeCellConfig {
    let num_slots = [1, 2, 4][rng.gen_range(0..3)];
    // d_x + d_h must split evenly across slots.
    let d_x = rng.gen_range(1..=4);
    let total = num_slots * (d_x / num_slots + rng.gen_range(1..=2));
    let d_h = total - d_x;
    let cfg = ModeCellConfig {
        num_slots,
        d_x,
        d_h,
        height: rng.gen_range(2..=4),
        width: rng.gen_range(2..=4),
        ffn_hidden: rng.gen_range(1..=4),
        fusion: if rng.gen_bool(0.5) {
            FusionMode::Adaptive
        } else {
            FusionMode::Equal
        },
    };
    if cfg.validate().is_ok() {
        cfg
    } else {
        random_config(rng)
    }
}

pub struct Case {
    pub store: ParamStore,
    pub params: ModeCellParams,
    pub x: Tensor,
    pub h: Tensor,
    pub bus: Tensor,
}

pub fn case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = random_config(&mut rng);
    let mut store = ParamStore::new();
    let params = ModeCellParams::new(cfg.clone(), &mut store, "cell", &mut rng).unwrap();
    let batch = rng.gen_range(1..=3);
    let (hh, ww) = (cfg.height, cfg.width);
    Case {
        x: Tensor::rand_uniform(&[batch, cfg.d_x, hh, ww], -1.0, 1.0, &mut rng),
        h: Tensor::rand_uniform(&[batch, cfg.d_h, hh, ww], -1.0, 1.0, &mut rng),
        bus: Tensor::rand_uniform(&[batch, cfg.channels(), hh, ww], -1.0, 1.0, &mut rng),
        store,
        params,
    }
}

/// Worst absolute deviation between tape and loops across every stage.
pub fn stage_deviation(seed: u64) -> f64 {
    let c = case(seed);
    let mut tape = Tape::new();
    let p = c.store.bind(&mut tape);
    let x = tape.constant(c.x.clone());
    let h = HiddenState {
        hidden: tape.constant(c.h.clone()),
    };
    let bus = SlotBusState {
        bus: tape.constant(c.bus.clone()),
    };

    let bound = bind_slots(&c.params, &mut tape, &p, bus, x, h).unwrap();
    let oracle_bind = super::bind_slots(
        &c.params,
        &c.store,
        &Map::from_tensor(&c.bus),
        &Map::from_tensor(&c.x),
        &Map::from_tensor(&c.h),
    );
    let mut worst = oracle_bind.input.max_diff(tape.value(bound.input));
    for (o, &s) in oracle_bind.slots.iter().zip(&bound.slots.slots) {
        worst = worst.max(o.max_diff(tape.value(s)));
    }
    let att = tape.value(bound.attention).data().to_vec();
    let n = c.params.config.num_slots;
    let flat: Vec<f64> = oracle_bind
        .attention
        .iter()
        .flatten()
        .flatten()
        .flatten()
        .copied()
        .collect();
    assert_eq!(flat.len(), att.len());
    assert_eq!(oracle_bind.attention[0].len(), n);
    for (a, b) in flat.iter().zip(&att) {
        worst = worst.max((a - b).abs());
    }

    // Feed both implementations the same stage inputs from here on.
    let omega = compute_importance_weights(&c.params, &mut tape, &p, bound.input).unwrap();
    let oracle_omega = super::importance_weights(&c.params, &c.store, &oracle_bind.input);
    for (g, per_gate) in omega.omega.iter().enumerate() {
        for (slot, &w) in per_gate.iter().enumerate() {
            let expected: Vec<f64> = oracle_omega[g][slot].iter().flatten().copied().collect();
            for (a, b) in expected.iter().zip(tape.value(w).data()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    if c.params.config.fusion == FusionMode::Equal {
        assert!(omega.omega.is_empty() && oracle_omega.is_empty());
    }

    let slot_maps: Vec<Map> = bound
        .slots
        .slots
        .iter()
        .map(|&s| Map::from_tensor(tape.value(s)))
        .collect();
    let input_map = Map::from_tensor(tape.value(bound.input));
    let mut fused = [bound.input; 4];
    for gate in GATES {
        fused[gate as usize] = adaptive_fuse(
            &c.params,
            &mut tape,
            &p,
            gate,
            bound.input,
            &bound.slots,
            &omega,
        )
        .unwrap();
        let o = super::adaptive_fuse(
            &c.params,
            &c.store,
            gate,
            &input_map,
            &slot_maps,
            &oracle_omega,
        );
        worst = worst.max(o.max_diff(tape.value(fused[gate as usize])));
    }

    let fused_maps = GATES.map(|g| Map::from_tensor(tape.value(fused[g as usize])));
    let (new_bus, hidden) =
        gate_and_transition(&c.params, &mut tape, &p, &fused, bound.input, bus).unwrap();
    let (ob, oh) = super::gate_and_transition(
        &c.params,
        &c.store,
        &fused_maps,
        &input_map,
        &Map::from_tensor(&c.bus),
    );
    worst = worst.max(ob.max_diff(tape.value(new_bus.bus)));
    worst.max(oh.max_diff(tape.value(hidden.hidden)))
}

/// Worst `|Σ_q A[p, q] − 1|` over a recurrent run of `steps` cell steps.
pub fn attention_row_deviation(seed: u64, steps: usize) -> f64 {
    let c = case(seed);
    let cfg = c.params.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (mut h, mut bus) = (c.h, c.bus);
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        let mut tape = Tape::new();
        let p = c.store.bind(&mut tape);
        let xt = Tensor::rand_uniform(c.x.shape(), -2.0, 2.0, &mut rng);
        let x = tape.constant(xt);
        let hv = HiddenState {
            hidden: tape.constant(h),
        };
        let bv = SlotBusState {
            bus: tape.constant(bus),
        };
        let step = modecell_step(&c.params, &mut tape, &p, x, hv, bv).unwrap();
        let hw = cfg.height * cfg.width;
        for row in tape.value(step.attention).data().chunks(hw) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            assert!(row.iter().all(|&a| a >= 0.0));
        }
        h = tape.value(step.hidden.hidden).clone();
        bus = tape.value(step.bus.bus).clone();
    }
    worst
}

/// Final loss relative to the first, after overfitting one sequence.
pub fn overfit_ratio(iters: u64) -> f64 {
    let run = RunConfig::parse(&format!(
        "{TRAIN_TINY}frame_size = 16\nsprite_size = 6\nmax_iters = {iters}\nbatch = 1\nseed = 2\n"
    ))
    .unwrap();
    let data = generate_dataset(&run.data_spec(), 1).unwrap();
    let (_, trace) = train(
        init_model(run.model_config().unwrap(), run.seed).unwrap(),
        &data,
        &run.train_config(),
    )
    .unwrap();
    let tail: f64 = trace[trace.len() - 10..]
        .iter()
        .map(|r| r.loss)
        .sum::<f64>()
        / 10.0;
    tail / trace[0].loss
}

/// `n` points in `dim` dimensions around `mean` with unit variance.
pub fn cloud(rng: &mut ChaCha8Rng, n: usize, dim: usize, mean: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..dim)
                .map(|_| mean + rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// Largest `|d_a|` between two samples of one distribution over `seeds`.
pub fn same_distribution_max(seeds: u64) -> f64 {
    (0..seeds)
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + s);
            let a = cloud(&mut rng, 500, 4, 0.0);
            let b = cloud(&mut rng, 500, 4, 0.0);
            a_distance(&a, &b, &ProbeConfig::default(), &mut rng)
                .unwrap()
                .d_a
                .abs()
        })
        .fold(0.0, f64::max)
}
