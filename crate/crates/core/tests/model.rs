mod common;

use ircan_core::editing::{apply_edit, EditPlan};
use ircan_core::harness::greedy_generate;
use ircan_core::data::pseudo_words;
use ircan_core::model::{load_checkpoint, save, DType, FfnKind, NeuronSite, Overrides, Tokenizer};
use proptest::prelude::*;

#[test]
fn checkpoint_file_round_trip_gives_identical_logits() {
    let (model, _) = common::random_model(2, 8, FfnKind::Plain, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ircn");
    save(&model, &path, DType::F64).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let toks = model.encode("kavo pulo is").unwrap_or_else(|_| vec![1, 2, 3]);
    let a = model.logits(&toks).unwrap();
    let b = back.logits(&toks).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    for (name, t) in model.weights() {
        assert_eq!(t, back.weight(name).unwrap(), "{name}");
    }
}

#[test]
fn edited_checkpoint_keeps_its_edit_state() {
    let (model, _) = common::random_model(1, 8, FfnKind::Gated, 2);
    let edited = apply_edit(&model, &EditPlan::reweight(vec![NeuronSite::new(0, 3)], 0.0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.ircn");
    save(&edited, &path, DType::F64).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let restored = ircan_core::editing::revert(&back).unwrap();
    for (name, t) in model.weights() {
        assert_eq!(t, restored.weight(name).unwrap(), "{name}");
    }
}

#[test]
fn synthetic_corpus_round_trips_through_the_tokenizer() {
    let data = common::small_data(9);
    let tok = common::tokenizer_for(&data);
    for line in &data.corpus {
        let ids = tok.tokenize(line).unwrap();
        assert_eq!(&tok.detokenize(&ids).unwrap(), line);
    }
    // every value word is one token, so answers are single-step
    for f in &data.facts {
        assert_eq!(tok.tokenize(&f.value).unwrap().len(), 1, "{}", f.value);
    }
}

#[test]
fn training_recalls_facts_and_context_moves_activations() {
    let (model, data) = common::trained_model();
    let mut hits = 0;
    for f in &data.facts {
        let prompt = model.encode(&format!("{} {} is", f.entity, f.relation)).unwrap();
        let out = greedy_generate(&model, &prompt, 1).unwrap();
        if model.tokenizer().decode_raw(&out).trim() == f.value {
            hits += 1;
        }
    }
    assert!(
        hits * 10 >= data.facts.len() * 8,
        "recall {hits}/{}",
        data.facts.len()
    );
    let ex = &data.completion[0];
    let cq = model.encode(&format!("{} {}", ex.context, ex.question)).unwrap();
    let q = model.encode(&ex.question).unwrap();
    let (tc, tq) = (model.record_activations(&cq).unwrap(), model.record_activations(&q).unwrap());
    let differs = model.config().sites().any(|s| tc.get(s) != tq.get(s));
    assert!(differs);
}

#[test]
fn one_layer_outgoing_scale_equals_scaled_activation() {
    for ffn in [FfnKind::Plain, FfnKind::Gated] {
        let (model, _) = common::random_model(1, 8, ffn, 4);
        let toks = [3, 7, 1, 9, 4];
        let site = NeuronSite::new(0, 5);
        let v = model.record_activations(&toks).unwrap().get(site);
        for beta in [0.0, 0.5, 2.0, 3.0] {
            let edited = apply_edit(&model, &EditPlan::reweight(vec![site], beta)).unwrap();
            let ovr: Overrides = [(site, beta * v)].into_iter().collect();
            let a = edited.logits(&toks).unwrap();
            let b = model.forward_with_overrides(&toks, &ovr).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-12, "{ffn:?} beta {beta}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn one_layer_contribution_is_linear_in_beta() {
    // residual(beta) - residual(0) = beta * v * row; logits add the final norm on top
    let (model, _) = common::random_model(1, 8, FfnKind::Plain, 6);
    let toks = [2, 5, 8];
    let site = NeuronSite::new(0, 2);
    let at = |beta: f64| {
        apply_edit(&model, &EditPlan::reweight(vec![site], beta))
            .unwrap()
            .final_residual(&toks)
            .unwrap()
    };
    let (r0, r1, r2, r5) = (at(0.0), at(1.0), at(2.0), at(5.0));
    for i in 0..r0.len() {
        let unit = r1[i] - r0[i];
        assert!((r2[i] - r0[i] - 2.0 * unit).abs() <= 1e-12);
        assert!((r5[i] - r0[i] - 5.0 * unit).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn overriding_a_whole_layer_with_its_own_values_is_neutral(seed in 0u64..1000, layer in 0usize..2, len in 1usize..8) {
        let (model, _) = common::random_model(2, 6, FfnKind::Plain, seed);
        let toks: Vec<u32> = (0..len as u32).map(|i| (i * 7 + seed as u32) % model.config().vocab_size as u32).collect();
        let trace = model.record_activations(&toks).unwrap();
        let ovr: Overrides = (0..6).map(|n| {
            let s = NeuronSite::new(layer, n);
            (s, trace.get(s))
        }).collect();
        let a = model.logits(&toks).unwrap();
        let b = model.forward_with_overrides(&toks, &ovr).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let (model, _) = common::random_model(2, 6, FfnKind::Gated, seed);
        let toks = [1, 4, 2];
        let a = model.logits(&toks).unwrap();
        let b = model.clone().logits(&toks).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn tokenizer_round_trips_sentences_over_its_vocabulary(
        picks in prop::collection::vec(0usize..12, 1..10),
        stop in any::<bool>(),
    ) {
        let words = pseudo_words(12);
        let mut lines = words.clone();
        lines.push(format!("{}.", words.join(" ")));
        let tok = Tokenizer::from_texts(lines.iter().map(String::as_str), false);
        let mut text = picks.iter().map(|&i| words[i].as_str()).collect::<Vec<_>>().join(" ");
        if stop {
            text.push('.');
        }
        let ids = tok.tokenize(&text).unwrap();
        prop_assert_eq!(ids.len(), picks.len() + usize::from(stop));
        prop_assert_eq!(tok.detokenize(&ids).unwrap(), text);
    }
}
