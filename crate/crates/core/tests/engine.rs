use sparse_pi::engine::{run_inference, Backend, MaskStructure, RunMode, SparsitySource};
use sparse_pi::kvcache::CacheStrategy;
use sparse_pi::model::{random_prompt, reference_decode, EncodedModel, ModelConfig, ModelWeights};
use sparse_pi::protocols::RunConfig;
use sparse_pi::ring::FixedPointCodec;
use sparse_pi::transport::phase;

fn tiny(seed: u64) -> EncodedModel {
    ModelWeights::random(&ModelConfig::tiny(), seed).unwrap().encode(&FixedPointCodec::default()).unwrap()
}

fn oracle(backend: Backend, cache: CacheStrategy) -> RunMode {
    RunMode { backend, sparsity: SparsitySource::Oracle, cache, ..RunMode::default() }
}

#[test]
fn dense_matches_plaintext_reference() {
    let m = tiny(3);
    let prompt = random_prompt(m.config.vocab, 6, 1);
    let (want, toks) = reference_decode(&m, &prompt, 3).unwrap();
    let got = run_inference(&m, &prompt, 3, &RunMode::dense(), &RunConfig::seeded(9)).unwrap();
    assert_eq!(got.logits, want);
    assert_eq!(got.tokens, toks);
}

#[test]
fn oracle_sparse_matches_dense_for_every_backend_and_cache() {
    let m = tiny(4);
    let prompt = random_prompt(m.config.vocab, 5, 2);
    let dense = run_inference(&m, &prompt, 3, &RunMode::dense(), &RunConfig::seeded(1)).unwrap();
    for backend in [Backend::Sparse, Backend::SpGemm] {
        for cache in CacheStrategy::ALL {
            let out = run_inference(&m, &prompt, 3, &oracle(backend, cache), &RunConfig::seeded(1)).unwrap();
            assert_eq!(out.logits, dense.logits, "{backend:?} {cache:?}");
            assert_eq!(out.tokens, dense.tokens);
        }
    }
}

#[test]
fn oracle_ffn_mask_is_sparse_and_cheaper() {
    let m = tiny(5);
    let prompt = random_prompt(m.config.vocab, 4, 3);
    let dense = run_inference(&m, &prompt, 2, &RunMode::dense(), &RunConfig::seeded(1)).unwrap();
    let sparse = run_inference(&m, &prompt, 2, &oracle(Backend::Sparse, CacheStrategy::Merged), &RunConfig::seeded(1)).unwrap();
    let last = sparse.steps.last().unwrap();
    for l in &last.layers {
        assert!(l.ffn_nnz < l.ffn_width / 2, "{l:?}");
    }
    let fc = |o: &sparse_pi::engine::InferenceOutput| {
        o.ledger.phase(phase::FC1).total_elements() + o.ledger.phase(phase::FC2).total_elements()
    };
    assert!(fc(&sparse) < fc(&dense));
    assert!(sparse.setup_elements() > 0);
    assert_eq!(dense.setup_elements(), 0);
}

#[test]
fn predictor_masks_change_logits_only_slightly() {
    let m = tiny(6);
    let prompt = random_prompt(m.config.vocab, 4, 4);
    let codec = FixedPointCodec::default();
    let dense = run_inference(&m, &prompt, 1, &RunMode::dense(), &RunConfig::seeded(2)).unwrap();
    let pred = run_inference(&m, &prompt, 1, &RunMode::default(), &RunConfig::seeded(2)).unwrap();
    let a = dense.logits[0].decode(&codec);
    let b = pred.logits[0].decode(&codec);
    let scale = a.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let err = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(err < scale, "max error {err} vs logit scale {scale}");
}

#[test]
fn synthetic_masks_hit_the_requested_sparsity() {
    let m = tiny(7);
    let prompt = random_prompt(m.config.vocab, 4, 5);
    let mode = RunMode {
        sparsity: SparsitySource::Synthetic { ffn_sparsity: 0.75, mha_sparsity: 0.5, structure: MaskStructure::Column },
        ..RunMode::default()
    };
    let out = run_inference(&m, &prompt, 2, &mode, &RunConfig::seeded(3)).unwrap();
    for step in &out.steps {
        for l in &step.layers {
            assert_eq!(l.ffn_nnz * 4, l.ffn_width);
        }
    }
    // decode steps: one token, half the heads
    assert!(out.steps[1..].iter().all(|s| s.layers.iter().all(|l| l.head_cells == m.config.heads / 2)));
}

#[test]
fn same_seed_same_everything() {
    let m = tiny(8);
    let prompt = random_prompt(m.config.vocab, 4, 6);
    let a = run_inference(&m, &prompt, 2, &RunMode::default(), &RunConfig::seeded(11)).unwrap();
    let b = run_inference(&m, &prompt, 2, &RunMode::default(), &RunConfig::seeded(11)).unwrap();
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.ledger, b.ledger);
    assert_eq!(a.steps, b.steps);
}

#[test]
fn rejects_bad_inputs() {
    let m = tiny(9);
    assert!(run_inference(&m, &[], 1, &RunMode::dense(), &RunConfig::seeded(0)).is_err());
    assert!(run_inference(&m, &[m.config.vocab], 1, &RunMode::dense(), &RunConfig::seeded(0)).is_err());
    assert!(run_inference(&m, &[0], m.config.max_positions, &RunMode::dense(), &RunConfig::seeded(0)).is_err());
}
