use domainmix_core::diffcore::{affine_forward, relu_forward, softmax, AdamConfig, AdamState, Gradients, Matrix, Tape};
use domainmix_core::losses::{
    domain_balance_from_logits, domain_balance_loss, domain_classification_from_logits, identity_loss,
    kl_to_uniform, min_balance_constant, triplet_loss,
};
use domainmix_core::rng::SeedTree;
use proptest::prelude::*;
use rand::Rng;

fn matrix(rows: usize, cols: usize, range: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-range..range, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn shaped(range: f64) -> impl Strategy<Value = Matrix> {
    (1usize..6, 1usize..6).prop_flat_map(move |(r, c)| matrix(r, c, range))
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_row_shifts(x in shaped(50.0), shift in -100.0..100.0f64) {
        let p = softmax(&x);
        for row in p.row_iter() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let q = softmax(&x.map(|v| v + shift));
        prop_assert!(p.max_abs_diff(&q) < 1e-12);
    }

    #[test]
    fn extreme_inputs_stay_finite(x in shaped(1e6), w in matrix(5, 3, 1e6)) {
        let p = softmax(&x);
        prop_assert!(p.is_finite());
        prop_assert!(relu_forward(&x).is_finite());
        let xw = Matrix::from_vec(x.rows(), 5, (0..x.rows() * 5).map(|i| x.data()[i % x.data().len()]).collect()).unwrap();
        prop_assert!(affine_forward(&xw, &w, &Matrix::zeros(1, 3)).unwrap().is_finite());

        let two = Matrix::from_vec(x.rows(), 2, (0..x.rows() * 2).map(|i| x.data()[i % x.data().len()]).collect()).unwrap();
        let domains: Vec<usize> = (0..two.rows()).map(|i| i % 2).collect();
        let lg = domain_balance_from_logits(&two, std::f64::consts::LN_2 / 2.0);
        prop_assert!(lg.value.is_finite() && lg.grad.is_finite());
        let lg = domain_classification_from_logits(&two, &domains).unwrap();
        prop_assert!(lg.value.is_finite() && lg.grad.is_finite());
        let labels: Vec<usize> = (0..x.rows()).map(|i| i % x.cols()).collect();
        let lg = identity_loss(&x, &labels).unwrap();
        prop_assert!(lg.value.is_finite() && lg.grad.is_finite());
        prop_assert!(kl_to_uniform(&softmax(&two)).is_finite());

        let mut tape = Tape::new();
        let v = tape.param("x", &x);
        let n = tape.row_normalize(v);
        let s = tape.softmax(n);
        let r = Matrix::filled(x.rows(), x.cols(), 1.0);
        let out = tape.weighted_sum(s, &r).unwrap();
        prop_assert!(tape.backward(out, 1.0).unwrap().get("x").unwrap().is_finite());
    }

    #[test]
    fn triplet_is_translation_invariant(
        seed in any::<u64>(),
        shift in prop::collection::vec(-100.0..100.0f64, 3),
    ) {
        let mut rng = SeedTree::new(seed).rng("triplet");
        let labels = [0, 0, 1, 1, 2, 2];
        let f = Matrix::from_vec(6, 3, (0..18).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let mut g = f.clone();
        for i in 0..6 {
            for (v, s) in g.row_mut(i).iter_mut().zip(&shift) {
                *v += s;
            }
        }
        let a = triplet_loss(&f, &labels, 0.3).unwrap();
        let b = triplet_loss(&g, &labels, 0.3).unwrap();
        prop_assert!((a.value - b.value).abs() < 1e-9);
        prop_assert!(a.grad.max_abs_diff(&b.grad) < 1e-9);
    }
}

#[test]
fn domain_balance_is_nonnegative_and_zero_only_at_uniform() {
    let a = min_balance_constant(2);
    assert!((a - std::f64::consts::LN_2 / 2.0).abs() < 1e-15);
    let mut rng = SeedTree::new(11).rng("rows");
    for _ in 0..1000 {
        let p0: f64 = rng.gen_range(0.0..1.0);
        let row = Matrix::from_rows(&[[p0, 1.0 - p0]]).unwrap();
        let l = domain_balance_loss(&row, a);
        assert!(l >= -1e-15, "{p0}: {l}");
        if (p0 - 0.5).abs() > 1e-6 {
            assert!(l > 0.0, "{p0}: {l}");
        }
    }
    assert!(domain_balance_loss(&Matrix::from_rows(&[[0.5, 0.5]]).unwrap(), a).abs() < 1e-15);
}

#[test]
fn domain_balance_hand_value() {
    let l = domain_balance_loss(&Matrix::from_rows(&[[0.9, 0.1]]).unwrap(), std::f64::consts::LN_2 / 2.0);
    assert!((l - 0.3681).abs() < 1e-4);
}

#[test]
fn adam_is_bit_deterministic() {
    let mut rng = SeedTree::new(3).rng("adam");
    let w0 = Matrix::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let mut grads = Gradients::default();
    grads.insert("w", Matrix::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
    let run = || {
        let mut w = w0.clone();
        let mut opt = AdamState::new(AdamConfig::default());
        for _ in 0..5 {
            opt.step(&mut [("w", &mut w)], &grads).unwrap();
        }
        w
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
