mod common;

use common::*;
use tokuq::backend::{response_weights, Backend};
use tokuq::types::TokenSequence;

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

#[test]
fn bigram_gradient_matches_closed_form() {
    let (v, d) = (12, 5);
    let b = random_bigram(v, d, 3);
    for seed in 0..20 {
        let t = random_tokens(v, 3, 9, seed);
        let h = b.embed_tokens(&t).unwrap();
        let mut w = vec![0.0; t.len()];
        let mut r = Lcg(seed + 77);
        for x in &mut w[1..] {
            *x = r.unit();
        }
        let g = b.log_prob_gradient(&h, &t, &w).unwrap();

        // d/dh_{i-1} of w_i log softmax(U h_{i-1})[x_i] = w_i (U[x_i] - sum_v p_v U[v])
        let mut expect = vec![0.0; t.len() * d];
        for i in 1..t.len() {
            let logits: Vec<f64> = (0..v)
                .map(|k| (0..d).map(|j| b.unembedding_row(k)[j] * h.row(i - 1)[j]).sum())
                .collect();
            let p = softmax(&logits);
            let x = t.ids()[i] as usize;
            for j in 0..d {
                let mean: f64 = (0..v).map(|k| p[k] * b.unembedding_row(k)[j]).sum();
                expect[(i - 1) * d + j] += w[i] * (b.unembedding_row(x)[j] - mean);
            }
        }
        for (a, e) in g.as_slice().iter().zip(&expect) {
            assert!((a - e).abs() <= 1e-10, "seed {seed}: {a} vs {e}");
        }
    }
}

#[test]
fn bigram_gradient_matches_finite_differences() {
    let b = random_bigram(20, 6, 5);
    let t = random_tokens(20, 4, 10, 1);
    let h = b.embed_tokens(&t).unwrap();
    let w = response_weights(&t);
    let g = b.log_prob_gradient(&h, &t, &w).unwrap();
    let err = max_rel_err(g.as_slice(), &fd_gradient(&b, &h, &t, &w, 1e-5));
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn transformer_gradient_matches_finite_differences_on_five_configs() {
    // (vocab, dim, layers, heads, query, response)
    let configs = [
        (16, 4, 1, 1, 2, 6),
        (32, 8, 2, 2, 4, 8),
        (64, 16, 1, 4, 6, 10),
        (24, 12, 3, 3, 8, 16),
        (48, 16, 2, 2, 8, 16),
        (64, 8, 3, 4, 4, 20),
    ];
    for (i, &(v, d, l, heads, m, n)) in configs.iter().enumerate() {
        let model = model(v, d, l, heads, 32, 10 + i as u64);
        let t = random_tokens(v, m, n, 30 + i as u64);
        let h = model.embed_tokens(&t).unwrap();
        let w = response_weights(&t);
        let g = model.log_prob_gradient(&h, &t, &w).unwrap();
        let err = max_rel_err(g.as_slice(), &fd_gradient(&model, &h, &t, &w, 1e-5));
        assert!(err < 1e-4, "config {i}: max rel err {err}");
        assert!(g.frobenius_norm() > 0.0);
    }
}

#[test]
fn transformer_gradient_with_arbitrary_weights() {
    let model = model(20, 8, 2, 2, 32, 4);
    let t = TokenSequence::new(vec![1, 5, 3, 19, 0, 7, 7, 2], 1).unwrap();
    let h = model.embed_tokens(&t).unwrap();
    let w = vec![0.0, 0.3, -1.2, 0.0, 2.0, 0.5, -0.7, 1.1];
    let g = model.log_prob_gradient(&h, &t, &w).unwrap();
    let err = max_rel_err(g.as_slice(), &fd_gradient(&model, &h, &t, &w, 1e-5));
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn nonzero_first_weight_is_rejected() {
    let model = model(8, 4, 1, 1, 16, 0);
    let t = random_tokens(8, 2, 3, 0);
    let h = model.embed_tokens(&t).unwrap();
    let mut w = response_weights(&t);
    w[0] = 1.0;
    assert!(model.log_prob_gradient(&h, &t, &w).is_err());
}

#[test]
fn gradient_has_zero_rows_after_last_weighted_position() {
    let model = model(16, 8, 2, 2, 32, 2);
    let t = random_tokens(16, 3, 8, 2);
    let h = model.embed_tokens(&t).unwrap();
    let mut w = vec![0.0; t.len()];
    w[5] = 1.0;
    let g = model.log_prob_gradient(&h, &t, &w).unwrap();
    for row in 5..t.len() {
        assert!(g.row(row).iter().all(|&x| x == 0.0), "row {row}");
    }
}
