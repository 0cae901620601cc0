use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::params::ParamGroups;
use crate::tokenizer::{TokenSequence, CLS};

fn tiny() -> EncoderConfig {
    EncoderConfig {
        n_layers: 1,
        n_heads: 2,
        model_dim: 8,
        ffn_dim: 16,
        vocab_size: 20,
        max_len: 5,
        pooling: Pooling::Cls,
    }
}

/// Large random weights everywhere (including norms and biases) so every
/// code path carries signal during finite-difference checks.
fn rough_params(config: &EncoderConfig, seed: u64) -> EncoderParams {
    let mut p = init_params(config, seed).unwrap();
    let mut rng = crate::util::rng(seed ^ 0xabcdef);
    let normal = Normal::new(0.0, 0.5).unwrap();
    for (name, g) in p.groups_mut() {
        for x in g.iter_mut() {
            *x = normal.sample(&mut rng);
            if name.contains("gamma") {
                *x += 1.0;
            }
        }
    }
    p
}

fn seqs() -> Vec<TokenSequence> {
    vec![
        TokenSequence::from_ids(vec![CLS, 7, 2, 11, 19]),
        TokenSequence { ids: vec![CLS, 5, 9, 13], attention_mask: vec![1, 1, 1, 0] },
        TokenSequence::from_ids(vec![CLS, 6]),
    ]
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = crate::util::rng(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Central-difference check of `grads` against `loss` for every entry of
/// every parameter group; returns the worst `(group, relative error)`.
fn fd_check(
    params: &EncoderParams,
    grads: &EncoderParams,
    loss: impl Fn(&EncoderParams) -> f64,
) -> Vec<(String, f64)> {
    let eps = 1e-5;
    let mut work = params.clone();
    let analytic: Vec<Vec<f64>> = grads.groups().iter().map(|(_, g)| g.to_vec()).collect();
    let names: Vec<String> = params.groups().into_iter().map(|(n, _)| n).collect();
    let mut out = Vec::new();
    for (gi, name) in names.iter().enumerate() {
        let len = analytic[gi].len();
        let mut worst: f64 = 0.0;
        for i in 0..len {
            let orig = work.groups()[gi].1[i];
            work.groups_mut()[gi].1[i] = orig + eps;
            let up = loss(&work);
            work.groups_mut()[gi].1[i] = orig - eps;
            let down = loss(&work);
            work.groups_mut()[gi].1[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[gi][i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let err = if (a - numeric).abs() < 1e-9 { 0.0 } else { (a - numeric).abs() / denom };
            worst = worst.max(err);
        }
        out.push((name.clone(), worst));
    }
    out
}

fn assert_fd(results: &[(String, f64)]) {
    for (name, err) in results {
        assert!(*err < 1e-4, "group {name}: relative error {err:e}");
    }
}

#[test]
fn hidden_state_gradients_match_finite_differences() {
    let p = rough_params(&tiny(), 1);
    let seqs = seqs();
    let (hidden, trace) = forward(&p, &seqs).unwrap();
    let weights = random_matrix(hidden.nrows(), hidden.ncols(), 2);
    let mut grads = p.zeros_like();
    backward(&p, &trace, &weights, &mut grads).unwrap();
    let loss = |q: &EncoderParams| (forward(q, &seqs).unwrap().0 * &weights).sum();
    assert_fd(&fd_check(&p, &grads, loss));
}

#[test]
fn score_head_gradients_match_finite_differences() {
    let p = rough_params(&tiny(), 3);
    let seqs = seqs();
    let coef = [0.7, -1.3, 0.4];
    let (_, trace) = score_cls(&p, &seqs).unwrap();
    let mut grads = p.zeros_like();
    backward_scores(&p, &trace, &coef, &mut grads).unwrap();
    let loss = |q: &EncoderParams| {
        let (s, _) = score_cls(q, &seqs).unwrap();
        s.iter().zip(coef).map(|(a, b)| a * b).sum::<f64>()
    };
    assert_fd(&fd_check(&p, &grads, loss));
}

#[test]
fn mlm_gradients_match_finite_differences() {
    let p = rough_params(&tiny(), 4);
    let seqs = seqs();
    let rows = [1usize, 3, 6, 10];
    let (hidden, trace) = forward(&p, &seqs).unwrap();
    let logits = mlm_logits(&p, &hidden, &rows).unwrap();
    let weights = random_matrix(logits.nrows(), logits.ncols(), 5);
    let mut grads = p.zeros_like();
    backward_mlm(&p, &trace, &rows, &weights, &mut grads).unwrap();
    let loss = |q: &EncoderParams| {
        let (h, _) = forward(q, &seqs).unwrap();
        (mlm_logits(q, &h, &rows).unwrap() * &weights).sum()
    };
    assert_fd(&fd_check(&p, &grads, loss));
}

#[test]
fn pooled_embedding_gradients_match_finite_differences() {
    for pooling in [Pooling::Cls, Pooling::Mean] {
        let config = EncoderConfig { pooling, ..tiny() };
        let p = rough_params(&config, 6);
        let seqs = seqs();
        let (emb, trace) = embed_text(&p, &seqs).unwrap();
        let weights = random_matrix(emb.nrows(), emb.ncols(), 7);
        let mut grads = p.zeros_like();
        backward_embeddings(&p, &trace, &weights, &mut grads).unwrap();
        let loss = |q: &EncoderParams| (embed_text(q, &seqs).unwrap().0 * &weights).sum();
        assert_fd(&fd_check(&p, &grads, loss));
    }
}

#[test]
fn init_is_deterministic_with_unit_norm_scales() {
    let cfg = EncoderConfig::desk(300);
    let a = init_params(&cfg, 9).unwrap();
    assert_eq!(a, init_params(&cfg, 9).unwrap());
    assert_ne!(a, init_params(&cfg, 10).unwrap());
    for l in &a.layers {
        assert!(l.ln1_gamma.iter().chain(&l.ln2_gamma).all(|&g| g == 1.0));
        assert!(l.ln1_beta.iter().chain(&l.ln2_beta).all(|&b| b == 0.0));
    }
}

#[test]
fn embedding_init_mean_near_zero() {
    let cfg = EncoderConfig { vocab_size: 2000, ..EncoderConfig::desk(2000) };
    let p = init_params(&cfg, 1).unwrap();
    assert!(p.token_emb.len() >= 100_000);
    let mean = p.token_emb.mean().unwrap();
    assert!(mean.abs() < 0.01, "{mean}");
}

#[test]
fn invalid_configs_rejected() {
    assert!(init_params(&EncoderConfig { n_heads: 3, ..tiny() }, 0).is_err());
    assert!(init_params(&EncoderConfig { vocab_size: 0, ..tiny() }, 0).is_err());
    assert!(init_params(&EncoderConfig { n_layers: 0, ..tiny() }, 0).is_ok());
}

#[test]
fn depth_zero_is_embedding_sum() {
    let cfg = EncoderConfig { n_layers: 0, ..tiny() };
    let p = init_params(&cfg, 2).unwrap();
    let seq = TokenSequence::from_ids(vec![CLS, 4, 8]);
    let (h, _) = forward(&p, std::slice::from_ref(&seq)).unwrap();
    for (pos, &id) in seq.ids.iter().enumerate() {
        let expected = &p.token_emb.row(id as usize) + &p.pos_emb.row(pos);
        assert_eq!(h.row(pos), expected);
    }
    // distinct first tokens give distinct CLS-pooled embeddings at depth 0
    let a = TokenSequence::from_ids(vec![5, 4]);
    let b = TokenSequence::from_ids(vec![6, 4]);
    let (e, _) = embed_text(&p, &[a, b]).unwrap();
    assert_ne!(e.row(0), e.row(1));
}

#[test]
fn attention_rows_are_distributions() {
    let p = rough_params(&tiny(), 8);
    let (_, trace) = forward(&p, &seqs()).unwrap();
    for lt in &trace.layers {
        for (i, probs) in lt.probs.iter().enumerate() {
            let seg = i / 2;
            let (start, len) = trace.segments[seg];
            let mask = &trace.mask[start..start + len];
            for row in probs.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
                for (&pv, &m) in row.iter().zip(mask) {
                    if m == 0 {
                        assert_eq!(pv, 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn padded_positions_do_not_leak() {
    let p = rough_params(&tiny(), 9);
    let a = TokenSequence { ids: vec![CLS, 5, 9, 13, 2], attention_mask: vec![1, 1, 1, 0, 0] };
    let mut b = a.clone();
    b.ids[3] = 17;
    b.ids[4] = 8;
    let (ha, _) = forward(&p, std::slice::from_ref(&a)).unwrap();
    let (hb, _) = forward(&p, std::slice::from_ref(&b)).unwrap();
    for r in 0..3 {
        assert_eq!(ha.row(r), hb.row(r));
    }
}

#[test]
fn packing_does_not_change_results() {
    let p = rough_params(&tiny(), 10);
    let all = seqs();
    let (scores, _) = score_cls(&p, &all).unwrap();
    for (i, s) in all.iter().enumerate() {
        let (alone, _) = score_cls(&p, std::slice::from_ref(s)).unwrap();
        assert_eq!(alone[0].to_bits(), scores[i].to_bits());
    }
}

#[test]
fn score_contracts() {
    let mut p = init_params(&tiny(), 1).unwrap();
    let seqs = seqs();
    let (a, _) = score_cls(&p, &seqs).unwrap();
    let (b, _) = score_cls(&p, &seqs).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|s| s.is_finite()));
    p.score_w.fill(0.0);
    let (z, _) = score_cls(&p, &seqs).unwrap();
    assert!(z.iter().all(|&s| s == 0.0));
    let bad = TokenSequence::from_ids(vec![7, 8]);
    assert!(matches!(score_cls(&p, &[bad]), Err(crate::Error::Contract(_))));
}

#[test]
fn forward_validates_inputs() {
    let p = init_params(&tiny(), 1).unwrap();
    let long = TokenSequence::from_ids(vec![CLS; 6]);
    assert!(forward(&p, &[long]).is_err());
    let oov = TokenSequence::from_ids(vec![CLS, 20]);
    assert!(forward(&p, &[oov]).is_err());
    let (h, _) = forward(&p, &seqs()).unwrap();
    assert_eq!(h.dim(), (11, 8));
    assert!(mlm_logits(&p, &h, &[11]).is_err());
}

#[test]
fn mlm_logit_properties() {
    let mut p = init_params(&tiny(), 2).unwrap();
    let zero = Array2::zeros((1, 8));
    let logits = mlm_logits(&p, &zero, &[0]).unwrap();
    assert_eq!(logits.dim(), (1, 20));
    assert!(logits.iter().all(|&l| l == 0.0));

    // tied weights: nudging token 7's embedding row moves only logit 7
    let (h, _) = forward(&p, &seqs()).unwrap();
    let base = mlm_logits(&p, &h, &[0, 2]).unwrap();
    let dir = h.row(0).to_owned();
    p.token_emb.row_mut(7).scaled_add(1e-6, &dir);
    let moved = mlm_logits(&p, &h, &[0, 2]).unwrap();
    let delta = (moved[[0, 7]] - base[[0, 7]]) / 1e-6;
    assert!((delta - dir.dot(&dir)).abs() < 1e-6 * dir.dot(&dir).max(1.0));
    for v in (0..20).filter(|&v| v != 7) {
        assert_eq!(moved[[0, v]], base[[0, v]]);
    }
}

#[test]
fn backward_is_linear_in_upstream() {
    let p = rough_params(&tiny(), 12);
    let (h, trace) = forward(&p, &seqs()).unwrap();
    let mut zero = p.zeros_like();
    backward(&p, &trace, &Array2::zeros(h.raw_dim()), &mut zero).unwrap();
    assert!(zero.groups().iter().all(|(_, g)| g.iter().all(|&x| x == 0.0)));

    let a = random_matrix(h.nrows(), h.ncols(), 1);
    let b = random_matrix(h.nrows(), h.ncols(), 2);
    let mut ga = p.zeros_like();
    let mut gb = p.zeros_like();
    let mut gab = p.zeros_like();
    backward(&p, &trace, &a, &mut ga).unwrap();
    backward(&p, &trace, &b, &mut gb).unwrap();
    backward(&p, &trace, &(&a + &b), &mut gab).unwrap();
    ga.add_scaled(&gb, 1.0);
    for ((_, x), (_, y)) in ga.groups().iter().zip(gab.groups()) {
        for (u, v) in x.iter().zip(y) {
            assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
        }
    }
}

#[test]
fn backward_rejects_mismatched_trace() {
    let p = init_params(&tiny(), 1).unwrap();
    let other = init_params(&EncoderConfig { n_layers: 2, ..tiny() }, 1).unwrap();
    let (h, trace) = forward(&p, &seqs()).unwrap();
    let mut g = other.zeros_like();
    assert!(matches!(
        backward(&other, &trace, &Array2::zeros(h.raw_dim()), &mut g),
        Err(crate::Error::Contract(_))
    ));
}
