// Trains one tunable transfer network on synthetic data, compares it with
// a target-only baseline, and writes the run directory.

use transfer_ner::data::{SynthCorpora, SynthSpec};
use transfer_ner::experiment::{run_experiment, write_run_outputs, ExperimentData, RunSpec};
use transfer_ner::model::ModelConfig;
use transfer_ner::numeric::AdamConfig;
use transfer_ner::train::TrainConfig;
use transfer_ner::Result;

/// Test F1 of the baseline and of the transfer model.
pub fn run_example() -> Result<(f64, f64)> {
    let spec = SynthSpec {
        source_sentences: 300,
        target_sentences: 300,
        dev_sentences: 40,
        test_sentences: 60,
        lexicon_size: 60,
        ..SynthSpec::default()
    };
    let c = SynthCorpora::generate(&spec, 1)?;
    let data = ExperimentData {
        target_train: c.target_train,
        target_dev: c.target_dev,
        target_test: c.target_test,
        source_train: Some(c.source_train),
        pretrained: None,
    };
    let base = RunSpec {
        model: ModelConfig {
            word_dim: 12,
            char_dim: 6,
            tag_dim: 6,
            char_hidden: 6,
            word_hidden: 12,
            decoder_hidden: 12,
            dropout: 0.1,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            max_epochs: 4,
            patience: 2,
            optimizer: AdamConfig {
                lr: 0.02,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        },
        fraction: 0.1,
        seed: 1,
    };
    let mut scores = Vec::new();
    for mode in ["baseline", "ttn:HHS"] {
        let spec = base.with_mode(mode.parse()?);
        let result = run_experiment(&data, &spec, |e| {
            println!(
                "  {mode} epoch {}: target loss {:.3}, dev F1 {:.2}",
                e.epoch, e.target_loss, e.dev_micro_f1
            )
        })?;
        let m = &result.test.metrics;
        println!(
            "{mode}: test P {:.2} R {:.2} F1 {:.2}",
            m.micro.precision, m.micro.recall, m.micro.f1
        );
        for (ty, s) in &m.per_type {
            println!("  {ty:<6} F1 {:.2} ({} gold)", s.prf.f1, s.gold);
        }
        let out = std::env::temp_dir()
            .join("transfer-ner-example")
            .join(spec.run_name());
        write_run_outputs(&out, &data, &spec, &result)?;
        println!("  outputs in {}", out.display());
        scores.push(m.micro.f1);
    }
    Ok((scores[0], scores[1]))
}

fn main() -> Result<()> {
    run_example().map(|_| ())
}
