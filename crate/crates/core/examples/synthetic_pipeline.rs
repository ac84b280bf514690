//! Full run on the synthetic benchmark: generate, train, attribute, select,
//! grid-search and ablate. The defaults are the acceptance benchmark; knobs are
//! read from `PIPE_*` environment variables.

use std::time::Instant;

use ircan_core::attribution::{attribute_dataset, AttributionConfig};
use ircan_core::data::{gen_synthetic, pseudo_words, SyntheticSpec};
use ircan_core::harness::{
    ablation_suite, evaluate, greedy_generate, grid_search, split_dataset, EvalConfig, GridConfig,
    PromptTemplate,
};
use ircan_core::model::{train_toy, FfnKind, ModelConfig, PositionKind, Tokenizer, TrainConfig};
use ircan_core::selection::{layer_histogram, select_context_neurons, SelectionConfig};

fn var<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> ircan_core::Result<()> {
    let t0 = Instant::now();
    let n_entities = var("PIPE_ENTITIES", 60);
    let n_relations = var("PIPE_RELATIONS", 4);
    let n_novel = var("PIPE_NOVEL", 40);
    let n_values = var("PIPE_VALUES", 30);
    let spec = SyntheticSpec {
        n_entities,
        n_relations,
        vocab: pseudo_words(n_entities + n_novel + n_relations + n_values),
        n_conflicts: var("PIPE_CONFLICTS", 240),
        seed: var("PIPE_SEED", 7),
        n_novel,
        n_reading: var("PIPE_READING", 30),
        n_stubborn: var("PIPE_STUBBORN", 10),
    };
    let data = gen_synthetic(&spec)?;
    let tok = Tokenizer::from_texts(data.corpus.iter().map(String::as_str), false);
    let ffn = if var("PIPE_GATED", 1) == 1 { FfnKind::Gated } else { FfnKind::Plain };
    let config = ModelConfig {
        n_layers: var("PIPE_LAYERS", 2),
        n_heads: var("PIPE_HEADS", 4),
        d_model: var("PIPE_DMODEL", 64),
        d_ff: var("PIPE_DFF", 128),
        vocab_size: tok.vocab_size(),
        ffn_kind: ffn,
        position_kind: if var("PIPE_ROTARY", 1) == 1 { PositionKind::Rotary } else { PositionKind::Learned },
        max_seq_len: 16,
        norm_eps: 1e-5,
        rope_base: 10_000.0,
    };
    let mut tc = TrainConfig::new(var("PIPE_STEPS", 2000), var("PIPE_LR", 3e-3), var("PIPE_TSEED", 1));
    tc.batch_size = var("PIPE_BATCH", 32);
    let (model, report) = train_toy(config, tok, &data.corpus, &tc)?;
    println!(
        "trained in {:.1}s: loss {:.3} -> {:.3}",
        t0.elapsed().as_secs_f64(),
        report.first_loss(),
        report.final_loss()
    );

    let mut hits = 0;
    for f in &data.facts {
        let prompt = model.encode(&format!("{} {} is", f.entity, f.relation))?;
        let out = greedy_generate(&model, &prompt, 1)?;
        if model.tokenizer().decode_raw(&out).trim() == f.value {
            hits += 1;
        }
    }
    println!("recall {}/{}", hits, data.facts.len());

    let template = PromptTemplate::completion_default();
    let eval = EvalConfig::default();
    let (val, test) = split_dataset(&data.completion, var("PIPE_SPLIT", 0))?;
    let base = evaluate(&model, &data.completion, &template, &eval)?;
    println!("baseline acc {:.3} sr {:.3}", base.acc, base.sr);

    let t1 = Instant::now();
    let matrix = attribute_dataset(&model, &val, &template, &AttributionConfig::default())?;
    println!("attribution {:.1}s", t1.elapsed().as_secs_f64());
    let (sel, _) = select_context_neurons(&matrix, &SelectionConfig::new(8))?;
    println!(
        "top sites {:?} hist {:?}",
        sel.sites.iter().map(|s| (s.layer, s.neuron, s.count)).collect::<Vec<_>>(),
        layer_histogram(&sel.neuron_sites(), model.config().n_layers)
    );

    let h_max = var("PIPE_HMAX", 16);
    let betas: Vec<f64> = (2..=var("PIPE_BMAX", 10)).map(|b| b as f64).collect();
    let grid = grid_search(
        &model,
        &matrix,
        &val,
        &test,
        &template,
        &GridConfig::new((1..=h_max).collect(), betas),
    )?;
    println!(
        "grid: h*={} beta*={} val-base {:.3} test base {:.3}/{:.3} -> edited {:.3}/{:.3}",
        grid.chosen_h,
        grid.chosen_beta,
        grid.baseline_validation.acc,
        grid.baseline_test.acc,
        grid.baseline_test.sr,
        grid.test.acc,
        grid.test.sr
    );
    let ab = ablation_suite(
        &model,
        &grid.sites,
        &test,
        &template,
        grid.chosen_beta,
        10,
        3,
        &eval,
    )?;
    print!("{}", ab.to_csv());
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
