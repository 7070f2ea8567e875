mod common;

use common::*;
use mlmass::error::Error;
use mlmass::model::gradcheck::grad_check;
use mlmass::model::{
    backward, beam_decode, forward, greedy_decode, greedy_decode_batch, ModelConfig, ModelParams, OutputFilter,
    RunMode,
};
use mlmass::subword::PAD;
use mlmass::Objective;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup() -> (mlmass::CorpusRegistry, mlmass::Vocabulary, ModelParams<f64>) {
    let r = small_registry(30, 1);
    let v = vocab_for(&r, 40);
    let params = ModelParams::<f64>::init(tiny_config(&v, 16), 7).unwrap();
    (r, v, params)
}

#[test]
fn finite_differences_match_backward() {
    let (r, v, params) = setup();
    for objective in [Objective::Translation, Objective::Mass] {
        let batch = batch_of(&r, &v, objective, 3, 2);
        let report = grad_check(&params, &batch, 1e-5, 1e-6).unwrap();
        assert!(
            report.max_rel_error() < 1e-4,
            "{objective:?}: {:e}",
            report.max_rel_error()
        );
    }
}

#[test]
fn zero_loss_mask_gives_zero_loss_and_gradients() {
    let (r, v, params) = setup();
    let mut batch = batch_of(&r, &v, Objective::Translation, 1, 2);
    for row in &mut batch.loss_mask {
        row.iter_mut().for_each(|m| *m = 0);
    }
    let (res, grads) = backward(&params, &batch, RunMode::eval(), 1.0).unwrap();
    assert_eq!(res.loss, 0.0);
    assert_eq!(res.token_count, 0);
    assert!(grads.tensors.iter().flatten().all(|&g| g == 0.0));
}

#[test]
fn fresh_model_loss_is_near_log_vocab() {
    let (r, v, _) = setup();
    let cfg = ModelConfig {
        vocab_size: 1000,
        ..tiny_config(&v, 32)
    };
    let params = ModelParams::<f64>::init(cfg, 3).unwrap();
    let batch = batch_of(&r, &v, Objective::Translation, 8, 3);
    let res = forward(&params, &batch, RunMode::eval()).unwrap();
    let ln_v = 1000f64.ln();
    assert!((res.loss - ln_v).abs() < 0.2 * ln_v, "{} vs {ln_v}", res.loss);
    assert_eq!(res.logits.rows, batch.rows() * batch.dec_len());
    assert_eq!(res.logits.cols, 1000);
}

#[test]
fn row_permutation_permutes_logits() {
    let (r, v, params) = setup();
    let batch = batch_of(&r, &v, Objective::Mass, 4, 5);
    let order = [2, 0, 3, 1];
    let a = forward(&params, &batch, RunMode::eval()).unwrap();
    let b = forward(&params, &batch.select_rows(&order), RunMode::eval()).unwrap();
    assert!((a.loss - b.loss).abs() < 1e-12);
    let len = batch.dec_len();
    for (new, &old) in order.iter().enumerate() {
        for p in 0..len {
            let x = a.logits.row(old * len + p);
            let y = b.logits.row(new * len + p);
            assert!(x.iter().zip(y).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }
}

#[test]
fn extra_encoder_padding_changes_nothing() {
    let (r, v, params) = setup();
    let batch = batch_of(&r, &v, Objective::Translation, 3, 6);
    let mut padded = batch.clone();
    for (ids, pos) in padded.enc_ids.iter_mut().zip(&mut padded.enc_pos) {
        ids.extend([PAD; 3]);
        pos.extend([0; 3]);
    }
    let a = forward(&params, &batch, RunMode::eval()).unwrap();
    let b = forward(&params, &padded, RunMode::eval()).unwrap();
    assert!((a.loss - b.loss).abs() < 1e-12);
    assert!(a.logits.data.iter().zip(&b.logits.data).all(|(x, y)| (x - y).abs() < 1e-12));
}

#[test]
fn decoder_is_causal() {
    let (r, v, params) = setup();
    let batch = batch_of(&r, &v, Objective::Translation, 1, 8);
    let len = batch.dec_len();
    assert!(len >= 3);
    let cut = len - 1;
    let mut changed = batch.clone();
    changed.dec_in_ids[0][cut] = v.first_regular_id() + 1;
    let a = forward(&params, &batch, RunMode::eval()).unwrap();
    let b = forward(&params, &changed, RunMode::eval()).unwrap();
    for p in 0..cut {
        assert_eq!(a.logits.row(p), b.logits.row(p));
    }
    assert_ne!(a.logits.row(cut), b.logits.row(cut));
}

#[test]
fn tied_gradient_is_sum_of_untied_gradients() {
    let (r, v, tied) = setup();
    let batch = batch_of(&r, &v, Objective::Translation, 2, 9);
    let cfg = ModelConfig {
        tie_embeddings: false,
        ..tied.config
    };
    let mut untied = ModelParams::<f64>::init(cfg, 7).unwrap();
    for spec in &tied.specs {
        let dst = untied.id_of(&spec.name).unwrap();
        let src = tied.id_of(&spec.name).unwrap();
        untied.tensor_mut(dst).copy_from_slice(tied.tensor(src));
    }
    let out = untied.id_of("output").unwrap();
    let embed = untied.id_of("embed").unwrap();
    let table = tied.tensor(tied.id_of("embed").unwrap()).to_vec();
    untied.tensor_mut(out).copy_from_slice(&table);

    let (a, ga) = backward(&tied, &batch, RunMode::eval(), 1.0).unwrap();
    let (b, gb) = backward(&untied, &batch, RunMode::eval(), 1.0).unwrap();
    assert!((a.loss - b.loss).abs() < 1e-12);
    let tied_grad = ga.tensor(tied.id_of("embed").unwrap());
    for (i, g) in tied_grad.iter().enumerate() {
        let sum = gb.tensor(embed)[i] + gb.tensor(out)[i];
        assert!((g - sum).abs() < 1e-12);
    }
}

#[test]
fn gradients_scale_with_loss_scale() {
    let (r, v, params) = setup();
    let batch = batch_of(&r, &v, Objective::Mass, 2, 10);
    let (_, g1) = backward(&params, &batch, RunMode::eval(), 1.0).unwrap();
    let (_, g3) = backward(&params, &batch, RunMode::eval(), 3.0).unwrap();
    for (a, b) in g1.tensors.iter().flatten().zip(g3.tensors.iter().flatten()) {
        assert!((3.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn out_of_range_position_is_an_error() {
    let (r, v, params) = setup();
    let mut batch = batch_of(&r, &v, Objective::Translation, 1, 11);
    batch.enc_pos[0][0] = params.config.max_positions as u32;
    match forward(&params, &batch, RunMode::eval()) {
        Err(Error::PositionOutOfRange { position, max }) => {
            assert_eq!(position, max);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn out_of_range_token_is_an_error() {
    let (r, v, params) = setup();
    let mut batch = batch_of(&r, &v, Objective::Translation, 1, 11);
    batch.enc_ids[0][0] = v.len() as u32;
    assert!(matches!(
        forward(&params, &batch, RunMode::eval()),
        Err(Error::TokenOutOfRange { .. })
    ));
}

#[test]
fn dropout_is_reproducible_per_seed() {
    let (r, v, mut params) = setup();
    params.config.dropout = 0.3;
    let batch = batch_of(&r, &v, Objective::Translation, 2, 12);
    let run = |seed| {
        let mode = RunMode {
            dropout: Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        forward(&params, &batch, mode).unwrap().loss
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

fn random_sources(v: &mlmass::Vocabulary, n: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(1..8);
            (0..len)
                .map(|_| rng.gen_range(v.first_regular_id()..v.len() as u32))
                .collect()
        })
        .collect()
}

#[test]
fn beam_of_one_without_penalty_equals_greedy() {
    let (_, v, params) = setup();
    let filter = OutputFilter {
        first_regular: v.first_regular_id(),
    };
    let tag = v.tag_id("xa").unwrap();
    for src in random_sources(&v, 100, 3) {
        let g = greedy_decode(&params, &src, tag, 12, filter).unwrap();
        let b = beam_decode(&params, &src, tag, 1, 12, 0.0, filter).unwrap();
        assert_eq!(g, b.best);
    }
}

#[test]
fn batched_greedy_matches_single_greedy() {
    let (_, v, params) = setup();
    let filter = OutputFilter {
        first_regular: v.first_regular_id(),
    };
    let tag = v.tag_id("xb").unwrap();
    let srcs = random_sources(&v, 12, 4);
    let batched = greedy_decode_batch(&params, &srcs, tag, 10, filter).unwrap();
    for (src, out) in srcs.iter().zip(&batched) {
        assert_eq!(&greedy_decode(&params, src, tag, 10, filter).unwrap(), out);
        assert!(out.iter().all(|&id| id >= v.first_regular_id()));
        assert!(out.len() <= 10);
    }
}

#[test]
fn beam_best_has_highest_score() {
    let (_, v, params) = setup();
    let filter = OutputFilter {
        first_regular: v.first_regular_id(),
    };
    let tag = v.tag_id("en").unwrap();
    for src in random_sources(&v, 10, 5) {
        let out = beam_decode(&params, &src, tag, 4, 8, 0.6, filter).unwrap();
        let best = out.finished[0].score(0.6);
        assert!(out.finished.iter().all(|h| h.score(0.6) <= best));
        assert_eq!(out.best, out.finished[0].tokens);
        assert!(out.expansions > 0);
    }
}

#[test]
fn zero_steps_decode_to_nothing() {
    let (_, v, params) = setup();
    let filter = OutputFilter {
        first_regular: v.first_regular_id(),
    };
    let tag = v.tag_id("xa").unwrap();
    let src = vec![v.first_regular_id()];
    assert!(greedy_decode(&params, &src, tag, 0, filter).unwrap().is_empty());
    assert!(beam_decode(&params, &src, tag, 3, 0, 0.0, filter).unwrap().best.is_empty());
}
