use modeprior::nnet::{adam_step, ema_update, global_norm, Activation, AdamState, Mlp, Params};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dims() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..6, 2..5)
}

fn net(dims: &[usize], seed: u64) -> Mlp {
    Mlp::new(dims, Activation::Tanh, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn filled(like: &Mlp, values: &[f64]) -> Mlp {
    let mut g = like.zeros_like();
    let mut i = 0;
    for t in g.tensors_mut() {
        for v in t.iter_mut() {
            *v = values[i % values.len()];
            i += 1;
        }
    }
    g
}

proptest! {
    #[test]
    fn layer_dimensions_chain(d in dims(), seed in any::<u64>()) {
        let m = net(&d, seed);
        prop_assert_eq!(m.dims(), d.clone());
        for w in m.layers().windows(2) {
            prop_assert_eq!(w[0].out_dim, w[1].in_dim);
            prop_assert_eq!(w[1].weights.len(), w[1].out_dim * w[1].in_dim);
        }
    }

    #[test]
    fn forward_shape_and_determinism(d in dims(), seed in any::<u64>(), x in prop::collection::vec(-3.0f64..3.0, 6)) {
        let m = net(&d, seed);
        let input = &x[..d[0].min(x.len())];
        prop_assume!(input.len() == d[0]);
        let a = m.forward(input).unwrap();
        prop_assert_eq!(a.len(), *d.last().unwrap());
        prop_assert_eq!(a, m.forward(input).unwrap());
        let mut longer = input.to_vec();
        longer.push(0.0);
        prop_assert!(m.forward(&longer).is_err());
    }

    #[test]
    fn clipped_update_norm_is_bounded(
        d in dims(),
        seed in any::<u64>(),
        g in prop::collection::vec(-1e3f64..1e3, 1..40),
        clip in 1e-3f64..10.0,
    ) {
        let mut m = net(&d, seed);
        let grads = filled(&m, &g);
        let mut st = AdamState::new(&m);
        let stats = adam_step(&mut m, &grads, &mut st, 1e-3, clip).unwrap();
        prop_assert!(stats.applied_norm <= clip + 1e-12);
        prop_assert!((stats.grad_norm - global_norm(&grads)).abs() <= 1e-9 * stats.grad_norm.max(1.0));
    }

    #[test]
    fn adam_moments_start_at_zero_and_steps_count(d in dims(), seed in any::<u64>(), n in 1usize..6) {
        let mut m = net(&d, seed);
        let mut st = AdamState::new(&m);
        prop_assert_eq!(st.step, 0);
        prop_assert!(st.first_moment.iter().chain(&st.second_moment).all(|t| t.iter().all(|&v| v == 0.0)));
        let grads = filled(&m, &[0.3, -0.1, 0.7]);
        for k in 1..=n {
            adam_step(&mut m, &grads, &mut st, 1e-3, 1.0).unwrap();
            prop_assert_eq!(st.step, k as u64);
        }
    }

    #[test]
    fn ema_converges_to_frozen_source(d in dims(), s1 in any::<u64>(), s2 in any::<u64>(), decay in 0.5f64..0.99) {
        let source = net(&d, s1);
        let mut target = net(&d, s2);
        let gap = |a: &Mlp, b: &Mlp| {
            a.tensors().iter().zip(b.tensors()).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max)
        };
        let start = gap(&source, &target);
        let mut prev = start;
        for _ in 0..2000 {
            ema_update(&mut target, &source, decay).unwrap();
            let now = gap(&source, &target);
            prop_assert!(now <= prev + 1e-15);
            prev = now;
        }
        prop_assert!(prev <= 1e-6 * start.max(1.0));
    }
}
