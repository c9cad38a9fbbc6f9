use ndcl_core::numkit::{
    cosine_grad, cosine_sim, derive_seed, dot, finite_diff_grad, relative_error, softmax, softmax_backward, Rng,
};
use proptest::prelude::*;

#[test]
fn softmax_lands_on_simplex_across_scales() {
    let mut rng = Rng::new(3);
    for i in 0..10_000 {
        let k = 1 + rng.below(12);
        let scale = 10f64.powi(i % 7 - 2);
        let z: Vec<f64> = (0..k).map(|_| scale * rng.normal()).collect();
        let p = softmax(&z).unwrap();
        let sum: f64 = p.as_slice().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12, "sum {sum} for {z:?}");
        assert!(p.as_slice().iter().all(|&v| v >= 0.0));
        assert_eq!(argmax_of(p.as_slice()), argmax_of(&z));
    }
}

fn argmax_of(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}

#[test]
fn softmax_is_shift_invariant_and_survives_large_logits() {
    let p = softmax(&[1000.0, 999.0, -1000.0]).unwrap();
    let q = softmax(&[1.0, 0.0, -1999.0]).unwrap();
    for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn substreams_are_reproducible_and_distinct() {
    let draw = |rng: &mut Rng| (0..32).map(|_| rng.next_u64()).collect::<Vec<_>>();
    let root = Rng::new(42);
    let mut advanced = Rng::new(42);
    draw(&mut advanced);
    assert_eq!(draw(&mut root.substream("data")), draw(&mut advanced.substream("data")));
    assert_ne!(draw(&mut root.substream("data")), draw(&mut root.substream("init")));
    assert_ne!(draw(&mut Rng::new(42)), draw(&mut Rng::new(43)));
    assert_eq!(derive_seed(42, "data"), root.substream("data").seed());
}

proptest! {
    #[test]
    fn rng_streams_repeat_under_seed(seed in any::<u64>()) {
        let mut a = Rng::new(seed);
        let mut b = Rng::new(seed);
        for _ in 0..50 {
            prop_assert_eq!(a.normal().to_bits(), b.normal().to_bits());
            prop_assert_eq!(a.below(17), b.below(17));
        }
        prop_assert_eq!(a.beta(0.5, 0.5).unwrap().to_bits(), b.beta(0.5, 0.5).unwrap().to_bits());
    }

    #[test]
    fn cosine_gradient_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let k = 2 + rng.below(6);
        let a: Vec<f64> = (0..k).map(|_| rng.uniform_range(0.1, 1.0)).collect();
        let b: Vec<f64> = (0..k).map(|_| rng.uniform_range(0.1, 1.0)).collect();
        let analytic = cosine_grad(&a, &b).unwrap();
        let numeric = finite_diff_grad(|x| cosine_sim(x, &b).unwrap(), &a, 1e-6).unwrap();
        prop_assert!(relative_error(&analytic, &numeric) < 1e-6);
        let s = cosine_sim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0 + 1e-15).contains(&s));
    }

    #[test]
    fn softmax_backward_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let k = 2 + rng.below(6);
        let z: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
        let w: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
        let p = softmax(&z).unwrap();
        let analytic = softmax_backward(p.as_slice(), &w);
        let numeric = finite_diff_grad(|x| dot(softmax(x).unwrap().as_slice(), &w), &z, 1e-6).unwrap();
        prop_assert!(relative_error(&analytic, &numeric) < 1e-6);
    }
}
