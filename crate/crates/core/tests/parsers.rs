//! Parser entry points must reject bad input with an error, never a panic.
//! Replays the fuzz corpus and throws arbitrary text at the same functions.

use std::path::Path;

use proptest::prelude::*;

use cf_effects::cli::ExperimentConfig;
use cf_effects::data::{parse_sample_line, SyntheticTaskSpec};
use cf_effects::model::{EnsembleModel, ModelCheckpoint};
use cf_effects::nn::Checkpoint;

fn sample_line(text: &str) {
    if let Ok(sample) = parse_sample_line(text) {
        let again = serde_json::to_string(&sample).unwrap();
        assert_eq!(parse_sample_line(&again).unwrap(), sample);
    }
}

fn task_spec(text: &str) {
    let _ = SyntheticTaskSpec::from_json(text);
}

fn checkpoint(text: &str) {
    let _ = Checkpoint::from_json(text);
    if let Ok(ckpt) = ModelCheckpoint::from_json(text) {
        let _ = EnsembleModel::from_checkpoint(&ckpt);
    }
}

fn experiment_config(text: &str) {
    if let Ok(cfg) = ExperimentConfig::from_json(text) {
        let _ = cfg.hash();
    }
}

type Target = (&'static str, fn(&str));

const TARGETS: [Target; 4] = [
    ("parse_sample_line", sample_line),
    ("parse_task_spec", task_spec),
    ("parse_checkpoint", checkpoint),
    ("parse_experiment_config", experiment_config),
];

fn corpus(target: &str) -> Vec<String> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut seeds: Vec<String> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| std::fs::read_to_string(e.unwrap().path()).unwrap())
        .collect();
    seeds.sort();
    seeds
}

#[test]
fn corpus_seeds_are_handled() {
    for (target, run) in TARGETS {
        let seeds = corpus(target);
        assert!(!seeds.is_empty(), "{target}");
        for seed in &seeds {
            run(seed);
        }
    }
}

#[test]
fn corpus_contains_accepted_inputs() {
    assert!(corpus("parse_sample_line")
        .iter()
        .any(|s| parse_sample_line(s.trim()).is_ok()));
    assert!(corpus("parse_task_spec")
        .iter()
        .any(|s| SyntheticTaskSpec::from_json(s).is_ok()));
    assert!(corpus("parse_checkpoint").iter().any(|s| {
        ModelCheckpoint::from_json(s).is_ok_and(|c| EnsembleModel::from_checkpoint(&c).is_ok())
    }));
    assert!(corpus("parse_experiment_config")
        .iter()
        .any(|s| ExperimentConfig::from_json(s).is_ok()));
}

proptest! {
    #[test]
    fn arbitrary_text_never_panics(text in ".{0,200}") {
        for (_, run) in TARGETS {
            run(&text);
        }
    }

    #[test]
    fn truncated_and_spliced_seeds_never_panic(cut in 0usize..4000, insert in "[-0-9eE.,:{}\\[\\]\"a-z ]{0,8}") {
        for (target, run) in TARGETS {
            for seed in corpus(target) {
                let at = seed.char_indices().map(|(i, _)| i).nth(cut % (seed.chars().count() + 1)).unwrap_or(seed.len());
                run(&seed[..at]);
                run(&format!("{}{insert}{}", &seed[..at], &seed[at..]));
            }
        }
    }
}
