use gise_core::ttt::*;
use gise_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vector(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, d)
}

fn state_for(variant: TttVariant, d: usize, seed: u64) -> (TttConfig, TttState) {
    let cfg = match variant {
        TttVariant::Linear => TttConfig::linear(d),
        TttVariant::Mlp => TttConfig { h: 2 * d, ..TttConfig::mlp(d) },
    };
    let state = ttt_init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (cfg, state)
}

fn variant() -> impl Strategy<Value = TttVariant> {
    prop_oneof![Just(TttVariant::Linear), Just(TttVariant::Mlp)]
}

// Central differences on an O(1) loss carry ~1e-10 of roundoff, so tiny entries are compared on an absolute floor.
fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn inner_gradient_matches_finite_differences(
        v in variant(), (x, xt) in (1usize..=6).prop_flat_map(|d| (vector(d), vector(d))), seed in any::<u64>()
    ) {
        let (_, state) = state_for(v, x.len(), seed);
        let lg = ttt_loss_grad(&state, &x, &xt).unwrap();
        let eps = 1e-6;
        for (ti, g) in lg.grad.tensors().into_iter().enumerate() {
            for j in 0..g.len() {
                let mut p = state.clone();
                p.params.tensors_mut()[ti].data_mut()[j] += eps;
                let mut m = state.clone();
                m.params.tensors_mut()[ti].data_mut()[j] -= eps;
                let fd = (ttt_loss_grad(&p, &x, &xt).unwrap().loss - ttt_loss_grad(&m, &x, &xt).unwrap().loss) / (2.0 * eps);
                prop_assert!(rel(g.data()[j], fd) < 1e-5, "tensor {ti}[{j}]: {} vs {fd}", g.data()[j]);
            }
        }
    }

    #[test]
    fn scan_matches_per_token_loop(v in variant(), d in 1usize..=8, t in 0usize..=32, seed in any::<u64>()) {
        let (cfg, state) = state_for(v, d, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let data: Vec<f64> = (0..t * d).map(|i| ((i as f64) * 0.37 + seed as f64 * 1e-3).sin()).collect();
        let tokens = Tensor::new(&[t, d], data).unwrap();
        let (out, fin) = ttt_scan(&state, &tokens, &cfg, &mut rng.clone()).unwrap();
        let mut s = state.clone();
        let mut expect = Vec::new();
        for i in 0..t {
            let x = tokens.row(i);
            let (xt, _) = corrupt_token(x, cfg.mask_ratio, &mut rng);
            let lg = ttt_loss_grad(&s, x, &xt).unwrap();
            s = ttt_step(&s, &lg, cfg.eta).unwrap();
            expect.extend(ttt_apply(&s, x).unwrap());
        }
        prop_assert!(out.data().iter().zip(&expect).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(fin, s);
    }

    #[test]
    fn small_steps_descend(v in variant(), x in (1usize..=8).prop_flat_map(vector), eta in 1e-4f64..=1e-2, seed in any::<u64>()) {
        let (_, state) = state_for(v, x.len(), seed);
        let before = ttt_loss_grad(&state, &x, &x).unwrap();
        let next = ttt_step(&state, &before, eta).unwrap();
        let after = ttt_loss_grad(&next, &x, &x).unwrap();
        prop_assert!(after.loss <= before.loss, "{} > {}", after.loss, before.loss);
    }

    #[test]
    fn corruption_zeroes_exactly_the_reported_coordinates(x in (1usize..=16).prop_flat_map(vector), ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let (xt, idx) = corrupt_token(&x, ratio, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(idx.len(), (ratio * x.len() as f64).round() as usize);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        for i in 0..x.len() {
            let expected = if idx.contains(&i) { 0.0 } else { x[i] };
            prop_assert_eq!(xt[i].to_bits(), expected.to_bits());
        }
    }
}

#[test]
fn zero_loss_state_is_left_unchanged() {
    let d = 5;
    let mut w = Tensor::zeros(&[d, d]);
    for i in 0..d {
        w.data_mut()[i * d + i] = 1.0;
    }
    let state = TttState::new(TttParams::Linear { w, b: Tensor::zeros(&[d]) });
    let cfg = TttConfig { mask_ratio: 0.0, ..TttConfig::linear(d) };
    let tokens = Tensor::new(&[20, d], (0..100).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
    let (out, fin) = ttt_scan(&state, &tokens, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(fin.params, state.params);
    assert_eq!(fin.step_count, 20);
    assert!(out.bit_eq(&tokens));
}
