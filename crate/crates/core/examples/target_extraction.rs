// Trains a gated model, removes every source-only parameter, and checks
// that the pruned model and a reloaded checkpoint predict identically.

use transfer_ner::data::{SynthCorpora, SynthSpec};
use transfer_ner::eval::evaluate;
use transfer_ner::experiment::{run_experiment, ExperimentData, RunSpec};
use transfer_ner::model::{ModelConfig, ModelMode, NerModel};
use transfer_ner::train::TrainConfig;
use transfer_ner::Result;

/// Parameter counts before and after pruning.
pub fn run_example() -> Result<(usize, usize)> {
    let spec = SynthSpec {
        source_sentences: 100,
        target_sentences: 100,
        dev_sentences: 20,
        test_sentences: 40,
        ..SynthSpec::default()
    };
    let c = SynthCorpora::generate(&spec, 6)?;
    let data = ExperimentData {
        target_train: c.target_train,
        target_dev: c.target_dev,
        target_test: c.target_test,
        source_train: Some(c.source_train),
        pretrained: None,
    };
    let run = RunSpec {
        model: ModelConfig {
            word_dim: 8,
            char_dim: 4,
            tag_dim: 4,
            char_hidden: 4,
            word_hidden: 8,
            decoder_hidden: 8,
            mode: ModelMode::Dtn,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            max_epochs: 2,
            ..TrainConfig::default()
        },
        fraction: 1.0,
        seed: 2,
    };
    let full = run_experiment(&data, &run, |_| {})?.model;
    let pruned = full.extract_target_model()?;
    let reloaded = NerModel::from_json(&pruned.to_json()?)?;
    let a = evaluate(&full, &data.target_test)?;
    let b = evaluate(&pruned, &data.target_test)?;
    let r = evaluate(&reloaded, &data.target_test)?;
    assert_eq!(a.predictions, b.predictions);
    assert_eq!(b.predictions, r.predictions);
    println!(
        "parameters: full {} -> target only {}; test F1 {:.2} in all three",
        full.num_parameters(),
        pruned.num_parameters(),
        a.metrics.micro.f1
    );
    Ok((full.num_parameters(), pruned.num_parameters()))
}

fn main() -> Result<()> {
    run_example().map(|_| ())
}
