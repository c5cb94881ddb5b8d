//! Finite-difference checks of full-model losses (2 layers, d_model 16,
//! vocabulary 50, sequence length 8) in train mode, dropout included.
//!
//! Parameters are drawn uniformly around the initialization so that no ReLU
//! pre-activation sits within a step of its kink. Central differences at
//! step 1e-5 resolve the loss only to about `ulp(loss) / 2e-5`, so entries
//! smaller than `RESOLVABLE` are compared but excluded from the bound.

use dapt_core::masking::{MaskedBatch, IGNORE};
use dapt_core::model::{EncoderConfig, Model, TokenBatch};
use dapt_core::numerics::{grad_check_report, GradCheckReport, Mode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;
const RESOLVABLE: f64 = 1e-6;

fn generic_point(tie: bool) -> Model {
    let mut model = Model::init(EncoderConfig {
        num_layers: 2,
        d_model: 16,
        num_heads: 4,
        d_ff: 32,
        vocab_size: 50,
        max_len: 8,
        tie_mlm_head: tie,
        seed: 2024,
        ..EncoderConfig::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for p in model.params.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    model
}

fn masked_batch() -> MaskedBatch {
    let input_ids = vec![
        2, 17, 4, 33, 9, 4, 21, 3, //
        2, 8, 41, 4, 12, 30, 3, 0,
    ];
    let mut labels = vec![IGNORE; 16];
    for (pos, label) in [(2, 19), (5, 6), (6, 21), (11, 44), (12, 13)] {
        labels[pos] = label;
    }
    MaskedBatch { batch: 2, seq: 8, input_ids, labels, wwm_flags: vec![false, true] }
}

fn mlm_report(tie: bool) -> GradCheckReport {
    let mut model = generic_point(tie);
    for p in model.params.iter_mut() {
        p.trainable = !Model::is_classifier_param(&p.name);
    }
    let batch = masked_batch();
    let base = model.clone();
    grad_check_report(&mut model.params, FD_STEP, |params, g| {
        let mut local = base.clone();
        local.params = params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(local.mlm_loss_graph(g, &batch, 0, Mode::Train, &mut rng)?.expect("batch has labels"))
    })
    .unwrap()
}

fn assert_resolvable(name: &str, r: &GradCheckReport) {
    let (err, n) = r.max_rel_error_above(RESOLVABLE);
    println!(
        "{name}: all {} entries {:.2e} (worst {}[{}] {:.3e} vs {:.3e}); {} entries ≥ {RESOLVABLE:e}: {:.2e}",
        r.entries_checked, r.max_rel_error, r.worst_param, r.worst_index, r.analytic, r.numeric, n, err
    );
    assert!(n * 2 > r.entries_checked, "too few resolvable entries: {n}");
    assert!(err < TOLERANCE, "{name}: {err}");
}

#[test]
fn mlm_loss_gradients_match_finite_differences() {
    assert_resolvable("mlm", &mlm_report(false));
}

#[test]
fn tied_mlm_head_gradients_match_finite_differences() {
    assert_resolvable("mlm tied", &mlm_report(true));
}

#[test]
fn classifier_bce_gradients_match_finite_differences() {
    let mut model = generic_point(false);
    for p in model.params.iter_mut() {
        p.trainable = !p.name.starts_with("mlm.");
    }
    let seqs = vec![
        vec![2, 11, 12, 13, 14, 15, 16, 3],
        vec![2, 20, 21, 3],
        vec![2, 30, 31, 32, 33, 3],
        vec![2, 40, 41, 42, 3],
    ];
    let tokens = TokenBatch::from_sequences(&seqs, 0).unwrap();
    let labels = [1.0, 0.0, 1.0, 0.0];
    let base = model.clone();
    let r = grad_check_report(&mut model.params, FD_STEP, |params, g| {
        // Batch-norm statistics mutate during the forward pass, so every
        // evaluation starts from the same copy.
        let mut local = base.clone();
        local.params = params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = local.encode_graph(g, &tokens, Mode::Train, &mut rng)?;
        let z = local.classifier_logits_graph(g, enc.hidden, tokens.batch, tokens.seq, Mode::Train, &mut rng)?;
        g.bce_with_logits(z, &labels)
    })
    .unwrap();
    assert_resolvable("bce", &r);
}
