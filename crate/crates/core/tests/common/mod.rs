#![allow(dead_code)]

use std::sync::Arc;

use proptest::prelude::*;
use sled_core::models::{ModelProfile, SeededCategoricalModel, SeededConfig, StaticModel};
use sled_core::protocol::{Message, VerifyRequest, VerifyResponse};
use sled_core::{ProbVector, RngStream, TokenId};

/// A distribution with every entry at least `floor` before normalization.
pub fn random_probs(rng: &mut RngStream, vocab: usize, floor: f64) -> ProbVector {
    let raw: Vec<f64> = (0..vocab).map(|_| floor + rng.uniform().powi(2)).collect();
    let total: f64 = raw.iter().sum();
    ProbVector::new(raw.into_iter().map(|p| p / total).collect()).unwrap()
}

pub fn static_model(name: &str, p: ProbVector) -> Arc<StaticModel> {
    Arc::new(StaticModel::new(name, p))
}

/// Context-dependent (draft, target) pair over `vocab` tokens.
pub fn seeded_pair(
    seed: u64,
    vocab: usize,
    window: usize,
    noise: f64,
    concentration: f64,
) -> (Arc<SeededCategoricalModel>, Arc<SeededCategoricalModel>) {
    let base = SeededConfig {
        vocab_size: vocab,
        seed,
        noise_seed: seed ^ 0xD1CE,
        noise_scale: 0.0,
        concentration,
        eos_token: TokenId(0),
        eos_floor: 0.0,
        context_window: window,
    };
    let target =
        SeededCategoricalModel::new(base.clone(), ModelProfile::unprofiled("target")).unwrap();
    let draft = SeededCategoricalModel::new(
        SeededConfig {
            noise_scale: noise,
            ..base
        },
        ModelProfile::unprofiled("draft"),
    )
    .unwrap();
    (Arc::new(draft), Arc::new(target))
}

pub fn arb_token() -> impl Strategy<Value = TokenId> {
    any::<u32>().prop_map(TokenId)
}

pub fn arb_prob() -> impl Strategy<Value = f64> {
    prop_oneof![
        Just(1.0),
        (1u64..=1u64 << 53).prop_map(|k| k as f64 / (1u64 << 53) as f64),
    ]
}

pub fn arb_verify_request() -> impl Strategy<Value = VerifyRequest> {
    (any::<u64>(), any::<u64>(), any::<u64>(), 1usize..40).prop_flat_map(|(s, r, b, n)| {
        (
            prop::collection::vec(arb_token(), n),
            prop::collection::vec(arb_prob(), n),
        )
            .prop_map(move |(tokens, draft_probs)| VerifyRequest {
                session_id: s,
                request_id: r,
                base_position: b,
                tokens,
                draft_probs,
            })
    })
}

pub fn arb_message() -> impl Strategy<Value = Message> {
    prop_oneof![
        (
            any::<u64>(),
            prop::collection::vec(arb_token(), 0..50),
            "[a-z0-9\\-]{0,20}|\\PC{0,8}"
        )
            .prop_map(|(session_id, prompt_tokens, draft_model_name)| {
                Message::SessionInit {
                    session_id,
                    prompt_tokens,
                    draft_model_name,
                }
            }),
        arb_verify_request().prop_map(Message::VerifyRequest),
        (
            any::<u64>(),
            any::<u64>(),
            any::<u16>(),
            any::<u32>(),
            any::<bool>()
        )
            .prop_map(|(session_id, request_id, accepted_count, tok, has)| {
                Message::VerifyResponse(VerifyResponse {
                    session_id,
                    request_id,
                    accepted_count,
                    corrective_token: has.then_some(TokenId(tok)),
                })
            }),
        any::<u64>().prop_map(|session_id| Message::SessionClose { session_id }),
    ]
}
