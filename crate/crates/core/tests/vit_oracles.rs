mod common;

use common::{random_image, random_model, reference_forward, toy_config};
use proptest::prelude::*;
use wegpipe::explain::class_score;
use wegpipe::vit::{forward, patchify, ForwardPass, ViTModel};
use wegpipe::Tensor;

#[test]
fn logits_match_loop_forward() {
    for (blocks, seed) in [(1, 1), (2, 7), (3, 11)] {
        let model = random_model(toy_config(blocks), seed);
        let image = random_image(3, 8, 8, seed + 100);
        let (logits, trace) = forward(&model, &image, true).unwrap();
        let reference = reference_forward(&model, &image);
        for (a, b) in logits.data().iter().zip(&reference.logits) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        let trace = trace.unwrap();
        for (m, acts) in trace.attention.iter().zip(&reference.blocks) {
            let n = m.shape()[1];
            for (h, head) in acts.heads.iter().enumerate() {
                for i in 0..n {
                    for j in 0..n {
                        let got = m.data()[(h * n + i) * n + j];
                        assert!((got - head.attn[i][j]).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

fn class_score_of(model: &ViTModel, image: &Tensor, class: usize) -> f64 {
    forward(model, image, false).unwrap().0.data()[class]
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let model = random_model(toy_config(2), 3);
    let image = random_image(3, 8, 8, 4);
    let class = 1;
    let mut pass = ForwardPass::run(&model, &image, false, true).unwrap();
    let score = class_score(&mut pass.graph, pass.logits, class).unwrap();
    pass.graph.backward(score).unwrap();
    let analytic: Vec<Tensor> = pass
        .params
        .iter()
        .map(|&v| pass.graph.grad(v).unwrap().clone())
        .collect();

    let eps = 1e-5;
    let mut worst = 0.0f64;
    let layout = ViTModel::param_layout(&model.config);
    for (pi, grad) in analytic.iter().enumerate() {
        for k in 0..grad.numel() {
            let mut plus = model.clone();
            plus.params_mut()[pi].data_mut()[k] += eps;
            let mut minus = model.clone();
            minus.params_mut()[pi].data_mut()[k] -= eps;
            let numeric =
                (class_score_of(&plus, &image, class) - class_score_of(&minus, &image, class)) / (2.0 * eps);
            let a = grad.data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-4, "{}[{k}]: analytic {a}, numeric {numeric}", layout[pi].0);
            worst = worst.max(err);
        }
    }
    assert!(worst < 1e-4);
}

fn unpatchify(rows: &Tensor, c: usize, size: usize, p: usize) -> Vec<f64> {
    let g = size / p;
    let mut out = vec![0.0; c * size * size];
    for gy in 0..g {
        for gx in 0..g {
            let row = rows.row(gy * g + gx);
            let mut idx = 0;
            for ch in 0..c {
                for y in 0..p {
                    for x in 0..p {
                        out[(ch * size + gy * p + y) * size + gx * p + x] = row[idx];
                        idx += 1;
                    }
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn patches_reassemble_to_image(seed in any::<u64>(), p in prop::sample::select(vec![1usize, 2, 4])) {
        let image = random_image(3, 8, 8, seed);
        let rows = patchify(&image, p).unwrap();
        prop_assert_eq!(rows.shape(), &[64 / (p * p), 3 * p * p]);
        prop_assert_eq!(unpatchify(&rows, 3, 8, p), image.data().to_vec());
    }
}
