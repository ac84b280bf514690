mod common;

use std::collections::BTreeMap;

use ircan_core::data::{gen_synthetic, load_dataset, parse_dataset, save_dataset, to_jsonl, ConflictExample, Task};
use ircan_core::harness::{extract_completion_answer, PromptTemplate};
use ircan_core::CoreError;
use proptest::prelude::*;

const MEMOTRAP: &str = r#"{"id":"memotrap-0","task":"completion","context":"Write a quote that ends in the word \"returned\":","question":"Long absent, soon","gold_answer":"returned","original_gold":"forgotten"}"#;

#[test]
fn memotrap_record_loads_as_a_completion_item() {
    let d = parse_dataset(MEMOTRAP, "memotrap.jsonl").unwrap();
    assert_eq!(d.len(), 1);
    let ex = &d[0];
    assert_eq!(ex.task, Task::Completion);
    assert_eq!(ex.gold_answer, "returned");
    assert_eq!(ex.original_gold, "forgotten");
    let prompt = PromptTemplate::completion_default().render(ex, true);
    assert_eq!(prompt, "Write a quote that ends in the word \"returned\": Long absent, soon");
    assert_eq!(PromptTemplate::completion_default().render(ex, false), "Long absent, soon");
    assert_eq!(extract_completion_answer("returned.").as_deref(), Some("returned"));
}

#[test]
fn empty_file_and_missing_field() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    assert!(load_dataset(&empty).unwrap().is_empty());

    let bad = format!("{MEMOTRAP}\n{}\n", MEMOTRAP.replace(r#","gold_answer":"returned""#, "").replace("memotrap-0", "memotrap-1"));
    match parse_dataset(&bad, "bad.jsonl") {
        Err(CoreError::Parse { line, msg, .. }) => {
            assert_eq!(line, 2);
            assert!(msg.contains("gold_answer"), "{msg}");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn synthetic_generation_properties() {
    let spec = common::small_spec(21);
    let a = gen_synthetic(&spec).unwrap();
    let b = gen_synthetic(&spec).unwrap();
    assert_eq!(a.corpus_text(), b.corpus_text());
    assert_eq!(to_jsonl(&a.completion).unwrap(), to_jsonl(&b.completion).unwrap());

    // exactly one plain fact line per (entity, relation)
    let mut per_pair: BTreeMap<(String, String), usize> = BTreeMap::new();
    for line in &a.corpus {
        let words: Vec<&str> = line.trim_end_matches('.').split(' ').collect();
        if words.len() == 4 {
            *per_pair.entry((words[0].into(), words[1].into())).or_default() += 1;
        }
    }
    assert_eq!(per_pair.len(), spec.n_entities * spec.n_relations);
    assert!(per_pair.values().all(|&c| c == 1));

    let memorised: BTreeMap<(String, String), String> = a
        .facts
        .iter()
        .map(|f| ((f.entity.clone(), f.relation.clone()), f.value.clone()))
        .collect();
    for ex in &a.completion {
        assert_ne!(ex.gold_answer, ex.original_gold);
        let mut q = ex.question.split(' ');
        let key = (q.next().unwrap().to_string(), q.next().unwrap().to_string());
        assert_eq!(memorised[&key], ex.original_gold);
        // the context value is never what the corpus states for the pair
        let stated = format!("{} {} is {}.", key.0, key.1, ex.gold_answer);
        assert!(a.corpus.iter().all(|l| !l.contains(&stated)), "{stated}");
    }
}

fn example_strategy() -> impl Strategy<Value = ConflictExample> {
    let word = "[a-z]{1,8}";
    (
        "[a-z0-9]{1,6}",
        any::<bool>(),
        "[A-Za-z ,.'\"]{0,30}",
        "[A-Za-z ,.]{1,20}",
        prop::collection::vec(word, 2..5),
        0usize..4,
    )
        .prop_map(|(id, mc, context, question, words, g)| {
            if mc {
                let n = words.len();
                let g = g % n;
                ConflictExample {
                    id,
                    task: Task::MultipleChoice,
                    context,
                    question,
                    gold_answer: ircan_core::data::choice_label(g),
                    original_gold: ircan_core::data::choice_label((g + 1) % n),
                    choices: Some(words),
                }
            } else {
                ConflictExample {
                    id,
                    task: Task::Completion,
                    context,
                    question,
                    gold_answer: format!("{}x", words[0]),
                    original_gold: format!("{}y", words[1]),
                    choices: None,
                }
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn save_then_load_is_identity(items in prop::collection::vec(example_strategy(), 0..8)) {
        let mut items = items;
        for (i, e) in items.iter_mut().enumerate() {
            e.id = format!("{}-{i}", e.id);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&path, &items).unwrap();
        prop_assert_eq!(load_dataset(&path).unwrap(), items);
    }
}
