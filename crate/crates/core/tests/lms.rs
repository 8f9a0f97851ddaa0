use lms_fd::params::Parameterized;
use lms_fd::{Binder, DiffGraph, LanguageId, LmsLinear, Matrix, Route, SynthesisMode};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn layer_strategy() -> impl Strategy<Value = (usize, usize, usize, usize, bool, bool, u64)> {
    (1usize..4, 1usize..5).prop_flat_map(|(d, l)| {
        let min = 2 * d;
        (
            min..min + 6,
            min..min + 6,
            Just(d),
            Just(l),
            any::<bool>(),
            any::<bool>(),
            any::<u64>(),
        )
    })
}

fn randomized(r: usize, c: usize, d: usize, l: usize, pair_wise: bool, shared: bool, seed: u64) -> LmsLinear<f64> {
    let mode = if pair_wise {
        SynthesisMode::PairWise
    } else {
        SynthesisMode::LanguageWise
    };
    let mut layer = LmsLinear::new(r, c, d, l, mode, shared, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    layer.visit_params_mut("", &mut |_, p| {
        *p = Matrix::randn(p.rows(), p.cols(), &mut rng);
    });
    layer
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn factored_forward_equals_synthesized_weight(
        (r, c, d, l, pw, sh, seed) in layer_strategy(),
        src in 0usize..4,
        tgt in 0usize..4,
        batch in 1usize..4,
    ) {
        let layer = randomized(r, c, d, l, pw, sh, seed);
        let (src, tgt) = (LanguageId(src % l), LanguageId(tgt % l));
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let x = Matrix::randn(batch, c, &mut rng);
        let routes: &[Route] = if sh { &[Route::Ls, Route::Shared] } else { &[Route::Ls] };
        for &route in routes {
            let mut g = DiffGraph::new();
            let mut b = Binder::new();
            let xv = g.constant(x.clone());
            let y = layer.forward_rows(&mut g, &mut b, xv, src, tgt, route).unwrap();
            // Oracle: materialize W + V·F from the stored factors.
            let (v, f) = layer.factors(src, tgt, route).unwrap();
            let w = layer.base().add(&v.matmul(f).unwrap()).unwrap();
            let want = x.matmul(&w.transpose()).unwrap();
            let scale = want.max_abs().max(1.0);
            prop_assert!(g.value(y).max_abs_diff(&want).unwrap() / scale < 1e-10);
        }
    }

    #[test]
    fn stored_factors_match_parameter_formula((r, c, d, l, pw, sh, seed) in layer_strategy()) {
        let layer = randomized(r, c, d, l, pw, sh, seed);
        let mut stored = 0;
        layer.visit_params("", &mut |_, p| stored += p.rows() * p.cols());
        let extra = d * (r + c) * (l + usize::from(sh));
        prop_assert_eq!(layer.extra_params(), extra);
        prop_assert_eq!(stored, r * c + extra);
    }

    #[test]
    fn language_wise_ignores_target((r, c, d, l, _pw, sh, seed) in layer_strategy(), src in 0usize..4) {
        let layer = randomized(r, c, d, l, false, sh, seed);
        let src = LanguageId(src % l);
        let reference = layer.synthesize(src, LanguageId(0)).unwrap();
        for t in 0..l {
            prop_assert_eq!(&layer.synthesize(src, LanguageId(t)).unwrap(), &reference);
        }
    }

    #[test]
    fn pair_wise_uses_source_vertical_and_target_flat((r, c, d, l, _pw, sh, seed) in layer_strategy(), src in 0usize..4, tgt in 0usize..4) {
        let layer = randomized(r, c, d, l, true, sh, seed);
        let (src, tgt) = (LanguageId(src % l), LanguageId(tgt % l));
        let (v, f) = layer.factors(src, tgt, Route::Ls).unwrap();
        prop_assert_eq!(v, layer.vertical(src).unwrap());
        prop_assert_eq!(f, layer.flat(tgt).unwrap());
    }
}
