//! Invariants of the fairness metrics, losses and encoder over random inputs.

mod common;

use ibbr::bias::{label, BiasLabel, BiasLexicon};
use ibbr::corpus::{DataPair, Passage};
use ibbr::encoder::{EncoderConfig, EncoderParams};
use ibbr::losses::{ranking_loss_scores, total_loss, FairnessConfig, Regularizer, ScoredPair};
use ibbr::metrics::{bootstrap_significance, delta_a_prf, disparity_contributions, query_rab, rab};
use proptest::prelude::*;
use rand::Rng;

fn lexicon() -> BiasLexicon {
    BiasLexicon::default_english()
}

fn word() -> impl Strategy<Value = String> {
    let lex = lexicon();
    let mut pool: Vec<String> = lex.male_words().iter().take(6).cloned().collect();
    pool.extend(lex.female_words().iter().take(6).cloned());
    pool.extend(["the", "river", "bank", "city", "paris"].map(String::from));
    prop::sample::select(pool)
}

fn passage_text() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 0..12).prop_map(|w| w.join(" "))
}

/// A pair over arbitrary passages with grid scores (ties included).
fn pair_strategy() -> impl Strategy<Value = (Vec<String>, Vec<f64>, usize)> {
    (2usize..=10).prop_flat_map(|k| {
        (
            prop::collection::vec(passage_text(), k),
            prop::collection::vec((-16i32..=16).prop_map(|v| v as f64 / 8.0), k),
            0..k,
        )
    })
}

fn build(texts: &[String], scores: &[f64], clicked: usize, lex: &BiasLexicon) -> ScoredPair {
    let ids: Vec<String> = (0..texts.len()).map(|j| format!("p{j}")).collect();
    let labels: Vec<BiasLabel> = texts
        .iter()
        .map(|t| label(&Passage::new("p", t.as_str()), lex))
        .collect();
    let pair = DataPair::new("q", ids, clicked).unwrap();
    ScoredPair::new(pair, scores.to_vec(), &labels).unwrap()
}

fn monotone(x: f64, which: usize) -> f64 {
    match which {
        0 => 2.0 * x + 1.0,
        1 => x.exp(),
        2 => x * x * x,
        _ => x.atan(),
    }
}

proptest! {
    #[test]
    fn lexicon_swap_negates_magnitude_label_and_rab(
        pairs in prop::collection::vec(pair_strategy(), 1..8),
        t in 1usize..12,
    ) {
        let lex = lexicon();
        let swapped = lex.swapped();
        let a: Vec<ScoredPair> = pairs.iter().map(|(x, s, c)| build(x, s, *c, &lex)).collect();
        let b: Vec<ScoredPair> = pairs.iter().map(|(x, s, c)| build(x, s, *c, &swapped)).collect();
        for (pa, pb) in a.iter().zip(&b) {
            for j in 0..pa.scores.len() {
                prop_assert_eq!(pa.magnitudes[j], -pb.magnitudes[j]);
                prop_assert_eq!(pa.bias_labels[j], -pb.bias_labels[j]);
            }
            prop_assert_eq!(query_rab(pa, t), -query_rab(pb, t));
        }
        prop_assert_eq!(rab(&a, t), -rab(&b, t));
    }

    #[test]
    fn delta_a_prf_ignores_monotone_transforms(
        pairs in prop::collection::vec(pair_strategy(), 1..12),
        which in 0usize..4,
    ) {
        let lex = lexicon();
        let a: Vec<ScoredPair> = pairs.iter().map(|(x, s, c)| build(x, s, *c, &lex)).collect();
        let b: Vec<ScoredPair> = pairs
            .iter()
            .map(|(x, s, c)| {
                let t: Vec<f64> = s.iter().map(|&v| monotone(v, which)).collect();
                build(x, &t, *c, &lex)
            })
            .collect();
        prop_assert_eq!(delta_a_prf(&a), delta_a_prf(&b));
    }

    #[test]
    fn all_neutral_passages_give_zero_rab(
        k in 2usize..10,
        scores in prop::collection::vec(-5.0f64..5.0, 10),
        t in 1usize..15,
    ) {
        let texts: Vec<String> = (0..k).map(|j| format!("the river {j}")).collect();
        let sp = build(&texts, &scores[..k], 0, &lexicon());
        prop_assert_eq!(query_rab(&sp, t), 0.0);
        prop_assert_eq!(rab(&[sp], t), 0.0);
    }

    #[test]
    fn ranking_gradient_sums_to_zero(
        scores in prop::collection::vec(-20.0f64..20.0, 2..10),
        c in 0usize..10,
    ) {
        let c = c % scores.len();
        let l = ranking_loss_scores(&scores, c);
        prop_assert!(l.value >= 0.0);
        prop_assert!(l.grad.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn zero_lambda_total_equals_ranking_only(
        pairs in prop::collection::vec(pair_strategy(), 1..10),
        pd in any::<bool>(),
    ) {
        let lex = lexicon();
        let batch: Vec<ScoredPair> = pairs.iter().map(|(x, s, c)| build(x, s, *c, &lex)).collect();
        let fair = FairnessConfig {
            regularizer: if pd { Regularizer::Pd } else { Regularizer::Ts },
            lambda_value: 0.0,
            ..FairnessConfig::default()
        };
        let a = total_loss(&batch, &fair, None).unwrap();
        let b = total_loss(&batch, &FairnessConfig::default(), None).unwrap();
        prop_assert_eq!(a.score_grads, b.score_grads);
        prop_assert_eq!(a.ranking, b.value);
    }

    #[test]
    fn encoder_gradient_is_linear_in_upstream(
        q in passage_text(),
        d in passage_text(),
        u in -3.0f64..3.0,
        v in -3.0f64..3.0,
        seed in any::<u64>(),
    ) {
        let cfg = EncoderConfig { dim: 8, emb_dim: 4, vocab_buckets: 64, shared_towers: seed % 2 == 0 };
        let params = EncoderParams::new(cfg, seed).unwrap();
        let (qt, dt) = (ibbr::corpus::tokenize(&q), ibbr::corpus::tokenize(&d));
        let mut two = params.zero_grads();
        params.backward_sim(&qt, &dt, u, &mut two);
        params.backward_sim(&qt, &dt, v, &mut two);
        let mut one = params.zero_grads();
        params.backward_sim(&qt, &dt, u + v, &mut one);
        for (a, b) in two.slices().iter().zip(one.slices()) {
            for (x, y) in a.iter().zip(b) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }
}

/// Random rankers show no significant group gap on an unbiased corpus.
#[test]
fn random_ranker_on_unbiased_corpus_has_no_significant_gap() {
    let spec = ibbr::corpus::SynthSpec {
        num_queries: 200,
        bias_strength: 0.0,
        ..ibbr::corpus::SynthSpec::default()
    };
    let corpus = ibbr::corpus::generate_synthetic(&spec).unwrap();
    let labels = ibbr::bias::label_collection(&corpus.collection, &corpus.lexicon);
    let mut r = common::rng(5);
    let scored: Vec<ScoredPair> = corpus
        .pairs
        .iter()
        .map(|p| {
            let scores = (0..p.k()).map(|_| r.gen::<f64>()).collect();
            let l: Vec<BiasLabel> = p.candidates.iter().map(|c| labels[c]).collect();
            ScoredPair::new(p.clone(), scores, &l).unwrap()
        })
        .collect();
    let contrib = disparity_contributions(&scored).unwrap();
    let zeros = vec![0.0; contrib.len()];
    let p = bootstrap_significance(&contrib, &zeros, 2000, 1).unwrap();
    assert!(p > 0.05, "p = {p}, gap = {:?}", delta_a_prf(&scored));
}
