mod support;

use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sskgqa_core::candidates::EnumConfig;
use sskgqa_core::classifier::{
    accuracy, rotate_fuse, train_classifier, ClassifierModel, ClassifierTrainConfig,
};
use sskgqa_core::embeddings::{EmbeddingKind, EmbeddingTable};
use sskgqa_core::encoder::{Encoder, EncoderShape, ModelError, Vocab};
use sskgqa_core::kg::{EntityId, KnowledgeGraph};
use sskgqa_core::pipeline::rank_examples;
use sskgqa_core::query_graph::QueryGraph;
use sskgqa_core::ranker::{
    negative_pool, rank_candidates, train_on_pools, train_ranker, triplet_loss, GraphScorer,
    RankTrainConfig, RankerModel, TripletPool,
};
use sskgqa_core::tokens::tokenize_question;
use sskgqa_numerics::{ParamStore, Tensor};

const WORDS: [&str; 10] = [
    "who", "film", "directed", "by", "genre", "of", "the", "year", "[CLS]", "[SEP]",
];

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn tiny_ranker_config(seed: u64, heads: usize) -> RankTrainConfig {
    RankTrainConfig {
        d_model: 4,
        d_out: 4,
        heads,
        ff: 6,
        max_positions: 8,
        seed,
        ..RankTrainConfig::default()
    }
}

fn tiny_classifier(seed: u64, heads: usize) -> ClassifierModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table =
        Arc::new(EmbeddingTable::random(EmbeddingKind::ComplEx, 5, 1, 4, &mut rng).unwrap());
    let cfg = ClassifierTrainConfig {
        d_model: 4,
        heads,
        ff: 6,
        max_positions: 8,
        seed,
        ..ClassifierTrainConfig::default()
    };
    let vocab = Vocab::build([WORDS.map(str::to_owned).to_vec()].iter());
    ClassifierModel::new(
        &cfg,
        vocab,
        &sskgqa_core::structures::Taxonomy::builtin(),
        table,
    )
    .unwrap()
}

proptest! {
    #[test]
    fn fusion_matches_complex_arithmetic(seed in any::<u64>(), half in prop::sample::select(vec![1usize, 4, 32])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h: Vec<f64> = (0..2 * half).map(|_| rng.random_range(-3.0..3.0)).collect();
        let q: Vec<f64> = (0..2 * half).map(|_| rng.random_range(-3.0..3.0)).collect();
        let got = rotate_fuse(&h, &q).unwrap();
        for (a, b) in got.iter().zip(support::complex_fuse(&h, &q)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_sum_to_one(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = tiny_classifier(seed, 2);
        let tokens = support::random_tokens(&mut rng, &WORDS, 6);
        let p = model.classify(&tokens, EntityId(rng.random_range(0..5))).unwrap();
        prop_assert_eq!(p.len(), 6);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_logit_shift_keeps_argmax(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut model = tiny_classifier(seed, 0);
        let tokens = toks("who directed the film");
        let before = model.predict(&tokens, EntityId(1)).unwrap();
        let store = model.store_mut();
        let bias = store.ids().find(|&id| store.name(id) == "classifier.bias").unwrap();
        store.get_mut(bias).data_mut().iter_mut().for_each(|b| *b += shift);
        prop_assert_eq!(model.predict(&tokens, EntityId(1)).unwrap(), before);
    }

    #[test]
    fn satisfied_margin_has_zero_loss(seed in any::<u64>(), margin in 0.1f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p: Vec<f64> = q.iter().map(|x| x + rng.random_range(-0.1..0.1)).collect();
        let dir: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scale = (distance(&q, &p) + margin + 0.5) / dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        let n: Vec<f64> = q.iter().zip(&dir).map(|(x, d)| x + d * scale).collect();
        prop_assert_eq!(triplet_loss(&q, &p, &n, margin).unwrap(), 0.0);
    }
}

#[test]
fn fusion_rejects_bad_widths() {
    assert!(rotate_fuse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).is_err());
    assert!(rotate_fuse(&[1.0, 2.0], &[1.0, 2.0, 3.0, 4.0]).is_err());
    assert_eq!(
        rotate_fuse(&[1.5, -2.0], &[0.0, 0.0]).unwrap(),
        vec![1.5, -2.0]
    );
}

#[test]
fn encoder_zero_embeddings_give_zero_and_empty_input_fails() {
    let vocab = Vocab::build([toks("a b c")].iter());
    let shape = EncoderShape {
        d_model: 4,
        d_out: 3,
        heads: 0,
        ff: 4,
        max_positions: 8,
    };
    let mut store = ParamStore::new();
    let enc = Encoder::new(shape, vocab, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(matches!(
        enc.encode(&store, &[]),
        Err(ModelError::EmptySequence)
    ));
    *store.get_mut(enc.token_embeddings()) = Tensor::zeros(4, 4);
    assert_eq!(enc.encode(&store, &toks("a b zzz")).unwrap(), vec![0.0; 3]);
}

#[test]
fn zero_head_is_uniform() {
    let mut model = tiny_classifier(4, 2);
    model.zero_head();
    for tokens in [toks("who"), toks("genre of the film directed by who")] {
        let p = model.classify(&tokens, EntityId(3)).unwrap();
        assert!(p.iter().all(|&x| x == 1.0 / 6.0), "{p:?}");
    }
    assert!(model.classify(&toks("who"), EntityId(99)).is_err());
}

#[test]
fn classifier_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let labels: Vec<String> = sskgqa_core::structures::Taxonomy::builtin()
        .labels()
        .map(str::to_owned)
        .collect();
    for i in 0..20 {
        let mut model = tiny_classifier(i, [0, 1, 2][i as usize % 3]);
        let batch: Vec<_> = (0..2)
            .map(|_| sskgqa_core::classifier::ClassifierExample {
                tokens: support::random_tokens(&mut rng, &WORDS, 5),
                topic: EntityId(rng.random_range(0..5)),
                label: labels[rng.random_range(0..labels.len())].clone(),
            })
            .collect();
        let (_, grads) = model.loss_and_grads(&batch).unwrap();
        let err = support::gradient_error(
            &mut model,
            ClassifierModel::store_mut,
            |m| m.loss_and_grads(&batch).unwrap().0,
            &grads,
        );
        assert!(err < 1e-4, "instance {i}: relative error {err}");
    }
}

#[test]
fn separable_fixture_is_learned_within_fifty_epochs() {
    let fx = support::separable_fixture(5);
    let cfg = support::separable_config();
    assert_eq!(cfg.epochs, 50);
    let before = (*fx.entities).clone();
    let (model, history) =
        train_classifier(&fx.examples, &fx.taxonomy, fx.entities.clone(), &cfg).unwrap();
    assert_eq!(history.len(), 50);
    assert_eq!(accuracy(&model, &fx.examples).unwrap(), 1.0);
    assert_eq!(*model.entities(), before);
}

#[test]
fn entity_table_bytes_survive_training() {
    let fx = support::separable_fixture(6);
    let mut bytes = Vec::new();
    fx.entities.write(&mut bytes).unwrap();
    let cfg = ClassifierTrainConfig {
        epochs: 3,
        ..support::separable_config()
    };
    let (model, _) =
        train_classifier(&fx.examples, &fx.taxonomy, fx.entities.clone(), &cfg).unwrap();
    let mut after = Vec::new();
    model.entities().write(&mut after).unwrap();
    assert_eq!(bytes, after);
    let mut again = Vec::new();
    fx.entities.write(&mut again).unwrap();
    assert_eq!(bytes, again);
}

#[test]
fn one_example_loss_decreases_and_training_is_deterministic() {
    let fx = support::separable_fixture(7);
    let one = &fx.examples[..1];
    let cfg = ClassifierTrainConfig {
        epochs: 5,
        dropout: 0.0,
        ..support::separable_config()
    };
    let (_, history) = train_classifier(one, &fx.taxonomy, fx.entities.clone(), &cfg).unwrap();
    for w in history.windows(2) {
        assert!(w[1] < w[0], "{history:?}");
    }
    let (a, ha) = train_classifier(&fx.examples, &fx.taxonomy, fx.entities.clone(), &cfg).unwrap();
    let (b, hb) = train_classifier(&fx.examples, &fx.taxonomy, fx.entities.clone(), &cfg).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(a.store().values(), b.store().values());
}

#[test]
fn unknown_label_is_rejected() {
    let fx = support::separable_fixture(8);
    let mut bad = fx.examples[..2].to_vec();
    bad[1].label = "SS9".into();
    let cfg = ClassifierTrainConfig {
        epochs: 1,
        ..support::separable_config()
    };
    assert!(matches!(
        train_classifier(&bad, &fx.taxonomy, fx.entities.clone(), &cfg),
        Err(ModelError::UnknownLabel(_))
    ));
}

#[test]
fn checkpoints_reload_to_identical_outputs() {
    let fx = support::separable_fixture(9);
    let cfg = ClassifierTrainConfig {
        epochs: 2,
        ..support::separable_config()
    };
    let (model, _) =
        train_classifier(&fx.examples, &fx.taxonomy, fx.entities.clone(), &cfg).unwrap();
    let mut buf = Vec::new();
    model.write(&mut buf).unwrap();
    let back = ClassifierModel::read(&buf[..], fx.entities.clone()).unwrap();
    let ex = &fx.examples[3];
    // The payload is 32-bit, so a reload matches to f32 precision and is then stable.
    let (a, b) = (
        model.classify(&ex.tokens, ex.topic).unwrap(),
        back.classify(&ex.tokens, ex.topic).unwrap(),
    );
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-5));
    let mut rewritten = Vec::new();
    back.write(&mut rewritten).unwrap();
    assert_eq!(buf, rewritten);
    assert!(ClassifierModel::read(&buf[1..], fx.entities.clone()).is_err());

    let ranker = RankerModel::new(
        &tiny_ranker_config(1, 2),
        Vocab::build([toks("who film")].iter()),
    )
    .unwrap();
    let mut buf = Vec::new();
    ranker.write(&mut buf).unwrap();
    let back = RankerModel::read(&buf[..]).unwrap();
    let (a, b) = (
        ranker.encode_sequence(&toks("who film x")).unwrap(),
        back.encode_sequence(&toks("who film x")).unwrap(),
    );
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-5));
    let mut rewritten = Vec::new();
    back.write(&mut rewritten).unwrap();
    assert_eq!(buf, rewritten);
}

#[test]
fn ranker_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let vocab = Vocab::build([WORDS.map(str::to_owned).to_vec()].iter());
    for i in 0..20 {
        let mut model = RankerModel::new(
            &tiny_ranker_config(i, [0, 1, 2][i as usize % 3]),
            vocab.clone(),
        )
        .unwrap();
        let q = support::random_tokens(&mut rng, &WORDS, 6);
        let p = support::random_tokens(&mut rng, &WORDS, 6);
        let negs: Vec<Vec<String>> = (0..3)
            .map(|_| support::random_tokens(&mut rng, &WORDS, 6))
            .collect();
        let (_, grads) = model.loss_and_grads(&q, &p, &negs, 1.0).unwrap();
        let err = support::gradient_error(
            &mut model,
            RankerModel::store_mut,
            |m| m.loss_and_grads(&q, &p, &negs, 1.0).unwrap().0,
            &grads,
        );
        assert!(err < 1e-4, "instance {i}: relative error {err}");
    }
}

#[test]
fn scores_are_never_positive_and_identity_scores_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let model = RankerModel::new(
        &tiny_ranker_config(2, 2),
        Vocab::build([WORDS.map(str::to_owned).to_vec()].iter()),
    )
    .unwrap();
    for _ in 0..50 {
        let q = support::random_tokens(&mut rng, &WORDS, 6);
        let g = support::random_tokens(&mut rng, &WORDS, 6);
        assert!(model.score_candidate(&q, &g).unwrap() <= 0.0);
        assert_eq!(model.score_candidate(&q, &q).unwrap(), 0.0);
        assert!(model
            .encode_sequence(&q)
            .unwrap()
            .iter()
            .all(|x| x.is_finite()));
    }
}

fn one_question_pool() -> TripletPool {
    TripletPool {
        question: toks("[CLS] who directed the film [SEP]"),
        positive: toks("[CLS] film directed by [SEP]"),
        negatives: vec![
            toks("[CLS] film genre [SEP]"),
            toks("[CLS] film year [SEP]"),
            toks("[CLS] film of genre [SEP]"),
        ],
    }
}

#[test]
fn training_pulls_question_towards_positive() {
    let pool = one_question_pool();
    let cfg = RankTrainConfig {
        epochs: 100,
        batch_size: 1,
        dropout: 0.0,
        ..tiny_ranker_config(4, 2)
    };
    let (untrained, _) = train_on_pools(
        std::slice::from_ref(&pool),
        &RankTrainConfig {
            epochs: 0,
            ..cfg.clone()
        },
    )
    .unwrap();
    let (trained, report) = train_on_pools(std::slice::from_ref(&pool), &cfg).unwrap();
    assert_eq!(report.losses.len(), 100);
    let d = |m: &RankerModel| {
        distance(
            &m.encode_sequence(&pool.question).unwrap(),
            &m.encode_sequence(&pool.positive).unwrap(),
        )
    };
    assert!(d(&trained) < d(&untrained));
    let positive = trained
        .score_candidate(&pool.question, &pool.positive)
        .unwrap();
    for n in &pool.negatives {
        assert!(positive > trained.score_candidate(&pool.question, n).unwrap());
    }
}

#[test]
fn oversized_negative_count_uses_every_negative() {
    let pool = one_question_pool();
    let cfg = RankTrainConfig {
        negatives: 500,
        epochs: 2,
        ..tiny_ranker_config(5, 1)
    };
    let (_, report) = train_on_pools(
        &[
            pool.clone(),
            TripletPool {
                negatives: vec![],
                ..pool
            },
        ],
        &cfg,
    )
    .unwrap();
    assert_eq!(report.skipped, 1);
    assert_eq!(report.losses.len(), 2);
}

#[test]
fn five_question_fixture_is_ranked_perfectly() {
    let (kg, questions) = support::ranker_fixture();
    let (examples, skipped) = rank_examples(&questions, &kg);
    assert_eq!((examples.len(), skipped), (5, 0));
    let enum_cfg = EnumConfig::default();
    let cfg = support::ranker_fixture_config();
    let (model, report) = train_ranker(&examples, &kg, &enum_cfg, &cfg).unwrap();
    assert_eq!(report.skipped, 0);
    for ex in &examples {
        let pool = negative_pool(ex, &kg, &enum_cfg).unwrap();
        let mut cands: Vec<QueryGraph> = sskgqa_core::structures::filter(
            &sskgqa_core::candidates::enumerate(
                &kg,
                ex.gold.topic_entity(),
                &EnumConfig {
                    max_hops: 1,
                    ..enum_cfg.clone()
                },
            )
            .unwrap()
            .graphs,
            &sskgqa_core::structures::SemanticStructure::abstract_graph(&ex.gold),
        );
        assert_eq!(cands.len(), pool.negatives.len() + 1);
        cands.reverse();
        let ranked = rank_candidates(&model, &ex.question, &cands, &kg).unwrap();
        assert_eq!(ranked[0].canonical, ex.gold.canonical(), "{}", ex.question);
    }
    let (again, report_again) = train_ranker(&examples, &kg, &enum_cfg, &cfg).unwrap();
    assert_eq!(report.losses, report_again.losses);
    assert_eq!(model.store().values(), again.store().values());
}

#[test]
fn candidates_are_encoded_once_per_pass() {
    let (kg, questions) = support::ranker_fixture();
    let topic = kg.entity(&questions[0].topic_entity).unwrap();
    let cands = sskgqa_core::candidates::enumerate(&kg, topic, &EnumConfig::default())
        .unwrap()
        .graphs;
    assert!(cands.len() > 5);
    let tokens: Vec<Vec<String>> = cands
        .iter()
        .map(|g| g.serialize_tokens(&kg).unwrap())
        .collect();
    let model = RankerModel::new(&tiny_ranker_config(6, 2), Vocab::build(tokens.iter())).unwrap();
    model.reset_encoder_calls();
    model
        .score_all(&questions[0].question, &cands, &kg)
        .unwrap();
    assert_eq!(model.encoder_calls(), cands.len() + 1);
    model.reset_encoder_calls();
    rank_candidates(&model, &questions[0].question, &cands, &kg).unwrap();
    assert_eq!(model.encoder_calls(), cands.len() + 1);
}

struct Constant;

impl GraphScorer for Constant {
    fn score_all(
        &self,
        _: &str,
        cands: &[QueryGraph],
        _: &KnowledgeGraph,
    ) -> Result<Vec<f64>, ModelError> {
        Ok(vec![0.5; cands.len()])
    }
}

#[test]
fn ties_go_to_the_smaller_canonical_form_and_order_is_input_free() {
    let (kg, questions) = support::ranker_fixture();
    let topic = kg.entity(&questions[1].topic_entity).unwrap();
    let mut cands = sskgqa_core::candidates::enumerate(&kg, topic, &EnumConfig::default())
        .unwrap()
        .graphs;
    let smallest = cands.iter().map(QueryGraph::canonical).min().unwrap();
    let ranked = rank_candidates(&Constant, "q", &cands, &kg).unwrap();
    assert_eq!(ranked[0].canonical, smallest);

    let scorer = support::HashScorer(1);
    let order = |c: &[QueryGraph]| -> Vec<String> {
        rank_candidates(&scorer, "q", c, &kg)
            .unwrap()
            .into_iter()
            .map(|r| r.canonical)
            .collect()
    };
    let base = order(&cands);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..5 {
        rand::seq::SliceRandom::shuffle(&mut cands[..], &mut rng);
        assert_eq!(order(&cands), base);
    }
    assert!(matches!(
        rank_candidates(&scorer, "q", &[], &kg),
        Err(ModelError::NoCandidates)
    ));
    assert_eq!(
        sskgqa_core::ranker::top1(&scorer, "q", &cands[..1], &kg).unwrap(),
        cands[0]
    );
}

#[test]
fn question_tokens_keep_the_raw_text() {
    assert!(tokenize_question("Who directed Blue Harbor?")
        .iter()
        .any(|t| t.eq_ignore_ascii_case("harbor")));
}
