use std::collections::BTreeSet;

use bitadapt::quant::{
    quantize_activations, quantize_k, quantize_weights, sample_bitwidth_tasks, Bitwidth,
    BitwidthTask, BitwidthTaskSet,
};
use bitadapt_tensor::{Graph, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const KS: [u32; 9] = [1, 2, 3, 4, 5, 6, 7, 8, 16];

fn run(x: &[f32], f: impl Fn(&mut Graph<f32>, Var) -> Var) -> Vec<f32> {
    let mut g = Graph::new();
    let v = g.constant(Tensor::from_vec(x.to_vec()));
    let y = f(&mut g, v);
    g.value(y).data().to_vec()
}

/// Gradient of `sum(r ⊙ f(x))` with respect to `x`.
fn vjp(x: &[f32], r: &[f32], f: impl Fn(&mut Graph<f32>, Var) -> Var) -> Vec<f32> {
    let mut g = Graph::new();
    let v = g.param(Tensor::from_vec(x.to_vec()));
    let y = f(&mut g, v);
    let rv = g.constant(Tensor::from_vec(r.to_vec()));
    let p = g.mul(y, rv).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    g.grad(v).unwrap().data().to_vec()
}

fn distinct(v: &[f32]) -> usize {
    v.iter().map(|x| x.to_bits()).collect::<BTreeSet<_>>().len()
}

fn bits_of(k: u32) -> Bitwidth {
    Bitwidth::int(k as u8).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn quantize_k_lands_on_the_grid(x in prop::collection::vec(0.0f32..=1.0, 1..40), ki in 0usize..9) {
        let k = KS[ki];
        let n = ((1u64 << k) - 1) as f32;
        for v in run(&x, |g, v| quantize_k(g, v, k).unwrap()) {
            let i = (v * n).round();
            prop_assert!((0.0..=n).contains(&i));
            prop_assert_eq!(v, i / n);
        }
    }

    #[test]
    fn quantize_k_gradient_is_identity(
        x in prop::collection::vec(0.0f32..=1.0, 1..20),
        seed in any::<u64>(),
        ki in 0usize..9,
    ) {
        let k = KS[ki];
        let r: Vec<f32> = (0..x.len()).map(|i| (seed.wrapping_add(i as u64) % 17) as f32 - 8.0).collect();
        prop_assert_eq!(vjp(&x, &r, |g, v| quantize_k(g, v, k).unwrap()), r);
    }

    #[test]
    fn activation_gradient_passes_inside_the_clip_range(
        x in prop::collection::vec(-2.0f32..3.0, 1..20),
        ki in 0usize..9,
    ) {
        let k = KS[ki];
        let r: Vec<f32> = (0..x.len()).map(|i| 1.0 + i as f32).collect();
        let grad = vjp(&x, &r, |g, v| quantize_activations(g, v, bits_of(k)).unwrap());
        for ((xi, ri), gi) in x.iter().zip(&r).zip(&grad) {
            if *xi > 0.0 && *xi < 1.0 {
                prop_assert_eq!(gi, ri);
            } else if *xi < 0.0 || *xi > 1.0 {
                prop_assert_eq!(*gi, 0.0);
            }
        }
    }

    #[test]
    fn full_precision_is_a_bit_exact_identity(x in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..30)) {
        let w = run(&x, |g, v| quantize_weights(g, v, Bitwidth::Fp).unwrap());
        let a = run(&x, |g, v| quantize_activations(g, v, Bitwidth::Fp).unwrap());
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&w), bits(&x));
        prop_assert_eq!(bits(&a), bits(&x));
    }

    #[test]
    fn weight_outputs_are_bounded_with_few_levels(w in prop::collection::vec(-4.0f32..4.0, 2..60), ki in 1usize..9) {
        let k = KS[ki];
        let out = run(&w, |g, v| quantize_weights(g, v, bits_of(k)).unwrap());
        prop_assert!(out.iter().all(|v| (-1.0..=1.0).contains(v)));
        prop_assert!(distinct(&out) <= 1 << k);
        // re-quantizing never creates new levels
        let twice = run(&out, |g, v| quantize_weights(g, v, bits_of(k)).unwrap());
        prop_assert!(distinct(&twice) <= distinct(&out));
    }

    #[test]
    fn one_bit_weights_keep_the_mean_magnitude(w in prop::collection::vec(-4.0f32..4.0, 1..60)) {
        let out = run(&w, |g, v| quantize_weights(g, v, Bitwidth::Int(1)).unwrap());
        let mean_abs = w.iter().map(|v| v.abs() as f64).sum::<f64>() / w.len() as f64;
        let out_abs = out.iter().map(|v| v.abs() as f64).sum::<f64>() / w.len() as f64;
        prop_assert!((mean_abs - out_abs).abs() <= 1e-6 * mean_abs.max(1.0));
        prop_assert!(distinct(&out.iter().map(|v| v.abs()).collect::<Vec<_>>()) <= 1);
        for (a, b) in w.iter().zip(&out) {
            if *a != 0.0 {
                prop_assert_eq!(a.signum(), b.signum());
            }
        }
    }

    #[test]
    fn sampler_obeys_its_slot_rules(seed in any::<u64>(), m in 1usize..9, fix in any::<bool>()) {
        let ts = BitwidthTaskSet::symmetric(
            [1u8, 2, 3, 4, 5, 6, 7, 8, 16].iter().map(|&k| Bitwidth::Int(k)).chain([Bitwidth::Fp]).collect(),
        )
        .with_minor(vec![Bitwidth::Int(1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tasks = sample_bitwidth_tasks(&ts, m, &mut rng, fix).unwrap();
        prop_assert_eq!(tasks.len(), m);
        prop_assert!(tasks.iter().all(|t| !t.is_excluded() && ts.contains(*t)));
        if fix {
            prop_assert_eq!(tasks[0], BitwidthTask::FP);
        }
        if m >= 3 {
            prop_assert_eq!(tasks[1].b_w, Bitwidth::Int(1));
        }
    }
}

#[test]
fn worked_examples() {
    assert_eq!(
        run(&[0.3], |g, v| quantize_k(g, v, 2).unwrap()),
        vec![1.0 / 3.0]
    );
    assert_eq!(run(&[0.5], |g, v| quantize_k(g, v, 1).unwrap()), vec![1.0]);
    for k in KS {
        assert_eq!(
            run(&[0.0, 1.0], |g, v| quantize_k(g, v, k).unwrap()),
            vec![0.0, 1.0]
        );
    }
    let w = run(&[-1.0, 0.0, 1.0], |g, v| {
        quantize_weights(g, v, Bitwidth::Int(2)).unwrap()
    });
    assert_eq!(w[0], -1.0);
    assert!((w[1] - 1.0 / 3.0).abs() < 1e-6);
    assert_eq!(w[2], 1.0);
    assert_eq!(
        run(&[0.5, -1.5, 1.0], |g, v| quantize_weights(
            g,
            v,
            Bitwidth::Int(1)
        )
        .unwrap()),
        vec![1.0, -1.0, 1.0]
    );
    assert_eq!(
        run(&[1.7, 0.4], |g, v| quantize_activations(
            g,
            v,
            Bitwidth::Int(2)
        )
        .unwrap()),
        vec![1.0, 1.0 / 3.0]
    );
    let zero = run(&[0.0, 0.0], |g, v| {
        quantize_weights(g, v, Bitwidth::Int(2)).unwrap()
    });
    assert!((zero[0] - 1.0 / 3.0).abs() < 1e-6 && zero[0] == zero[1]);
}

#[test]
fn singleton_fp_set_repeats_fp() {
    let ts = BitwidthTaskSet::symmetric(vec![Bitwidth::Fp]);
    let tasks = sample_bitwidth_tasks(&ts, 3, &mut ChaCha8Rng::seed_from_u64(0), true).unwrap();
    assert_eq!(tasks, vec![BitwidthTask::FP; 3]);
}
