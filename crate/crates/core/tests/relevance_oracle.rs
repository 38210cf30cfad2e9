//! Relevance propagation compared against a rule-by-rule loop version built
//! on the reference forward pass.

mod common;

use common::relevance::attention_relevance;
use common::{random_image, random_model, toy_config};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wegpipe::explain::{linear_relprop, relevance_propagate, RelevanceConfig};
use wegpipe::vit::ForwardPass;
use wegpipe::Tensor;

#[test]
fn one_block_relevance_matches_oracle() {
    for seed in 0..5 {
        let model = random_model(toy_config(1), seed);
        let image = random_image(3, 8, 8, 40 + seed);
        for class in 0..3 {
            let pass = ForwardPass::run(&model, &image, true, false).unwrap();
            let state = relevance_propagate(&model, &pass, class, &RelevanceConfig::default()).unwrap();
            let got = &state.attention[0];
            let want = attention_relevance(&model, &image, class);
            let n = got.shape()[1];
            let mut worst = 0.0f64;
            for (h, wm) in want.iter().enumerate() {
                for i in 0..n {
                    for j in 0..n {
                        worst = worst.max((got.data()[(h * n + i) * n + j] - wm[i][j]).abs());
                    }
                }
            }
            assert!(worst <= 1e-9, "seed {seed} class {class}: max abs diff {worst}");
            assert!(want.iter().flatten().flatten().any(|v| v.abs() > 1e-6));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn linear_rule_conserves_relevance(seed in any::<u64>(), n in 1usize..5, din in 1usize..8, dout in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = |r: usize, c: usize, lo: f64| {
            Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(lo..1.0)).collect()).unwrap()
        };
        // x, W of mixed sign; relevance of either sign
        let x = gen(n, din, -1.0);
        let w = gen(din, dout, -1.0);
        let r = gen(n, dout, -1.0);
        let out = linear_relprop(&x, &w, &r, 0.0).unwrap();

        // conservation holds for every output whose positive-part sum is non-degenerate
        let px = x.map(|v| v.max(0.0));
        let nx = x.map(|v| v.min(0.0));
        let z = px.matmul(&w.map(|v| v.max(0.0))).unwrap()
            .zip_map(&nx.matmul(&w.map(|v| v.min(0.0))).unwrap(), |a, b| a + b).unwrap();
        prop_assume!(z.data().iter().all(|v| v.abs() > 1e-3));
        let (before, after) = (r.sum(), out.sum());
        prop_assert!((before - after).abs() <= 1e-6 * before.abs().max(1e-12) + 1e-12,
            "before {before}, after {after}");
    }
}
