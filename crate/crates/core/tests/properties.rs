use modernn::datagen::{generate_dataset, generate_sequence, step_sprite, SpriteSequenceSpec};
use modernn::metrics::{csi, mse, psnr_from_mse, ssim, MetricsConfig};
use modernn::modecell::{
    modecell_step, FusionMode, HiddenState, ModeCellConfig, ModeCellParams, SlotBusState,
};
use modernn::params::ParamStore;
use modernn::tensor::kernels::{concat_channels, conv2d, narrow_channels, softmax_lastdim};
use modernn::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(lo..hi, n).prop_map(move |v| Tensor::new(&shape, v).unwrap())
}

fn map4() -> impl Strategy<Value = Tensor> {
    (1usize..3, 1usize..4, 1usize..5, 1usize..5)
        .prop_flat_map(|(b, c, h, w)| tensor(vec![b, c, h, w], -5.0, 5.0))
}

fn image(h: usize, w: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..255.0f64, h * w)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>(), spread in 0.0..700.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::rand_uniform(&[rows, cols], -spread, spread, &mut rng);
        let y = softmax_lastdim(&x);
        for row in y.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn split_after_concat_is_identity(x in map4(), extra in 1usize..3) {
        let s = x.shape().to_vec();
        let y = Tensor::full(&[s[0], extra, s[2], s[3]], 0.5);
        let cat = concat_channels(&[&x, &y]).unwrap();
        prop_assert_eq!(narrow_channels(&cat, 0, s[1]).unwrap(), x.clone());
        prop_assert_eq!(narrow_channels(&cat, s[1], extra).unwrap(), y);
        let flat = x.reshape(&[x.numel()]).unwrap();
        prop_assert_eq!(flat.reshape(&s).unwrap(), x);
    }

    #[test]
    fn centered_delta_kernel_is_identity(x in map4()) {
        let c = x.shape()[1];
        let mut k = Tensor::zeros(&[c, c, 3, 3]);
        for i in 0..c {
            k.data_mut()[(i * c + i) * 9 + 4] = 1.0;
        }
        prop_assert_eq!(conv2d(&x, &k, None).unwrap(), x);
    }

    #[test]
    fn ops_are_deterministic(x in map4(), seed in any::<u64>()) {
        let c = x.shape()[1];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = Tensor::rand_uniform(&[2, c, 3, 3], -1.0, 1.0, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let kv = tape.leaf(k.clone());
            let y = tape.conv2d(xv, kv, None).unwrap();
            let y = tape.tanh(y);
            let l = tape.sum(y);
            let g = tape.backward(l).unwrap();
            (tape.value(y).clone(), g.wrt(xv, &tape), g.wrt(kv, &tape))
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn hidden_state_is_strictly_bounded(seed in any::<u64>(), scale in 0.1..50.0f64, adaptive in any::<bool>()) {
        let cfg = ModeCellConfig {
            num_slots: 2,
            d_x: 2,
            d_h: 2,
            height: 3,
            width: 3,
            ffn_hidden: 2,
            fusion: if adaptive { FusionMode::Adaptive } else { FusionMode::Equal },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = ModeCellParams::new(cfg, &mut store, "c", &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::rand_uniform(&[2, 2, 3, 3], -scale, scale, &mut rng));
        let h = tape.constant(Tensor::rand_uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng));
        let bus = tape.constant(Tensor::rand_uniform(&[2, 4, 3, 3], -scale, scale, &mut rng));
        let step = modecell_step(&params, &mut tape, &p, x, HiddenState { hidden: h }, SlotBusState { bus }).unwrap();
        prop_assert!(tape.value(step.hidden.hidden).data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn indivisible_channel_split_is_rejected(n in 1usize..6, d_x in 1usize..6, d_h in 1usize..6) {
        let cfg = ModeCellConfig { num_slots: n, ..ModeCellConfig::new(d_x, d_h, 2, 2) };
        let mut store = ParamStore::new();
        let built = ModeCellParams::new(cfg, &mut store, "c", &mut ChaCha8Rng::seed_from_u64(0));
        prop_assert_eq!(built.is_ok(), (d_x + d_h) % n == 0);
    }

    #[test]
    fn sprites_stay_inside_the_frame(x in 0.0..10.0f64, y in 0.0..10.0f64, vx in -40.0..40.0f64, vy in -40.0..40.0f64) {
        let (mut pos, mut vel) = ((x, y), (vx, vy));
        for _ in 0..50 {
            (pos, vel) = step_sprite(pos, vel, (10.0, 10.0));
            prop_assert!((0.0..=10.0).contains(&pos.0) && (0.0..=10.0).contains(&pos.1));
            prop_assert!(vel.0.abs() == vx.abs() && vel.1.abs() == vy.abs());
        }
    }

    #[test]
    fn generation_is_pure_and_bounded(seed in any::<u64>(), mode in 1u8..4) {
        let spec = SpriteSequenceSpec { seq_len: 6, ..SpriteSequenceSpec::small(seed) };
        let a = generate_sequence(&spec, mode, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = generate_sequence(&spec, mode, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        let s = spec.sprite_size;
        for frame in a.frames.chunks(16 * 16) {
            prop_assert!(frame.iter().all(|&p| p == 0 || p == 255));
            let lit = frame.iter().filter(|&&p| p > 0).count();
            prop_assert!(lit <= mode as usize * s * s);
        }
        prop_assert_eq!(generate_dataset(&spec, 3).unwrap(), generate_dataset(&spec, 3).unwrap());
    }

    #[test]
    fn csi_ignores_joint_permutations(a in image(4, 8), b in image(4, 8), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..a.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pa: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
        let pb: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
        prop_assert_eq!(csi(&a, &b, 128.0).unwrap(), csi(&pa, &pb, 128.0).unwrap());
    }

    #[test]
    fn psnr_decreases_with_mse(mut errs in prop::collection::vec(1e-6..1e5f64, 2..20)) {
        errs.sort_by(f64::total_cmp);
        errs.dedup();
        let p: Vec<f64> = errs.iter().map(|&e| psnr_from_mse(e, 255.0)).collect();
        prop_assert!(p.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn ssim_and_mse_are_symmetric(a in image(12, 13), b in image(12, 13)) {
        let cfg = MetricsConfig::default();
        let ab = ssim(&a, &b, 12, 13, &cfg).unwrap();
        let ba = ssim(&b, &a, 12, 13, &cfg).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
        prop_assert!((ssim(&a, &a, 12, 13, &cfg).unwrap() - 1.0).abs() <= 1e-9);
        prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
        prop_assert_eq!(mse(&a, &a).unwrap(), 0.0);
    }
}
