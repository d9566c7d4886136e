use bitadapt_tensor::gradcheck::grad_check;
use bitadapt_tensor::{Graph, Tensor, BN_EPS};
use proptest::prelude::*;

fn vec_in(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn softmax_rows_sum_to_one(data in vec_in(12, -30.0, 30.0), axis in 0usize..2) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[3, 4], data.iter().map(|&v| v as f32).collect()).unwrap());
        let y = g.softmax(x, axis).unwrap();
        let out = g.value(y).data();
        if axis == 1 {
            for r in 0..3 {
                let s: f64 = out[r * 4..(r + 1) * 4].iter().map(|&v| v as f64).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        } else {
            for c in 0..4 {
                let s: f64 = (0..3).map(|r| out[r * 4 + c] as f64).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn batch_norm_output_is_standardized(data in vec_in(2 * 3 * 9, -4.0, 4.0), shift in -10.0f64..10.0) {
        let mut g = Graph::<f32>::new();
        let vals = data.iter().map(|&v| (v + shift) as f32).collect();
        let x = g.constant(Tensor::new(&[2, 3, 3, 3], vals).unwrap());
        let gamma = g.constant(Tensor::full(&[3], 1.0));
        let beta = g.constant(Tensor::zeros(&[3]));
        let y = g.batch_norm(x, gamma, beta, BN_EPS).unwrap();
        let out = g.value(y).data();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|n| (0..9).map(move |k| (n * 3 + c) * 9 + k)).map(|i| out[i] as f64).collect();
            let mean = vals.iter().sum::<f64>() / 18.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
            prop_assert!(mean.abs() < 1e-4);
            // eps shrinks the variance by eps/σ²; inputs have σ² well above 1e-2
            prop_assert!((var - 1.0).abs() < 1e-3, "var {}", var);
        }
    }

    #[test]
    fn smooth_primitives_match_finite_differences(data in vec_in(6, -2.0, 2.0), seed in 0u64..1000) {
        let x0 = Tensor::new(&[2, 3], data).unwrap();
        let w: Vec<f64> = (0..6).map(|i| ((seed as f64 + 1.0) * (i as f64 + 0.5)).sin()).collect();
        let w = Tensor::new(&[2, 3], w).unwrap();
        let cases: Vec<(&str, Box<dyn Fn(&mut Graph<f64>, bitadapt_tensor::Var) -> bitadapt_tensor::Result<bitadapt_tensor::Var>>)> = vec![
            ("tanh", Box::new(|g, x| { let y = g.tanh(x); let r = g.constant(w.clone()); let p = g.mul(y, r)?; Ok(g.sum(p)) })),
            ("log_softmax", Box::new(|g, x| { let y = g.log_softmax(x, 1)?; let r = g.constant(w.clone()); let p = g.mul(y, r)?; Ok(g.sum(p)) })),
            ("softmax", Box::new(|g, x| { let y = g.softmax(x, 0)?; let r = g.constant(w.clone()); let p = g.mul(y, r)?; Ok(g.sum(p)) })),
            ("mean_of_product", Box::new(|g, x| { let r = g.constant(w.clone()); let p = g.mul(x, r)?; let p = g.mul(p, x)?; Ok(g.mean(p)) })),
            ("sq_dist", Box::new(|g, x| { let r = g.constant(w.clone()); let d = g.sq_dist(x, r)?; let s = g.tanh(d); Ok(g.sum(s)) })),
        ];
        for (name, f) in cases {
            let report = grad_check(f, &x0, 1e-5, 1e-3).unwrap();
            prop_assert!(report.passed(), "{}: {}", name, report.max_rel_error);
        }
    }
}
