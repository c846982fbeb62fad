// Trains a gated transfer network and reports its gate values by entity
// type and component.

use transfer_ner::data::{SynthCorpora, SynthSpec};
use transfer_ner::experiment::{run_experiment, ExperimentData, RunSpec};
use transfer_ner::gates::{
    aggregate_gates, collect_gate_traces, gate_trace_long_csv, GateTable, GroupBy,
};
use transfer_ner::model::{ModelConfig, ModelMode};
use transfer_ner::train::TrainConfig;
use transfer_ner::Result;

/// Gate means by entity type.
pub fn run_example() -> Result<GateTable> {
    let spec = SynthSpec {
        source_sentences: 150,
        target_sentences: 150,
        dev_sentences: 20,
        test_sentences: 30,
        ..SynthSpec::default()
    };
    let c = SynthCorpora::generate(&spec, 2)?;
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
            mode: ModelMode::DtnHs,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            max_epochs: 2,
            ..TrainConfig::default()
        },
        fraction: 0.5,
        seed: 4,
    };
    let result = run_experiment(&data, &run, |_| {})?;
    let trace = collect_gate_traces(&result.model, &data.target_test)?;
    println!(
        "{} gate records; first lines of the long trace:",
        trace.len()
    );
    for line in gate_trace_long_csv(&trace)?.lines().take(4) {
        println!("  {line}");
    }
    let by_tag = aggregate_gates(&trace, GroupBy::Tag);
    print!("{}", by_tag.render());
    print!("{}", aggregate_gates(&trace, GroupBy::Component).render());
    Ok(by_tag)
}

fn main() -> Result<()> {
    run_example().map(|_| ())
}
