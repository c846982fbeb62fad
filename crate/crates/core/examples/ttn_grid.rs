// Runs all 27 sharing configurations plus the hard/soft gated network and
// ranks them.

use transfer_ner::data::{SynthCorpora, SynthSpec};
use transfer_ner::experiment::{grid_modes, run_grid, ExperimentData, RunSpec};
use transfer_ner::model::{ModelConfig, ModelMode};
use transfer_ner::report::RankingReport;
use transfer_ner::train::TrainConfig;
use transfer_ner::Result;

pub fn run_example() -> Result<RankingReport> {
    let spec = SynthSpec {
        source_sentences: 40,
        target_sentences: 40,
        dev_sentences: 10,
        test_sentences: 20,
        ..SynthSpec::default()
    };
    let c = SynthCorpora::generate(&spec, 5)?;
    let data = ExperimentData {
        target_train: c.target_train,
        target_dev: c.target_dev,
        target_test: c.target_test,
        source_train: Some(c.source_train),
        pretrained: None,
    };
    let base = RunSpec {
        model: ModelConfig {
            word_dim: 6,
            char_dim: 3,
            tag_dim: 3,
            char_hidden: 3,
            word_hidden: 6,
            decoder_hidden: 6,
            dropout: 0.0,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            max_epochs: 1,
            ..TrainConfig::default()
        },
        fraction: 0.5,
        seed: 0,
    };
    let modes = grid_modes(&[ModelMode::DtnHs]);
    let grid = run_grid(&data, &base, &modes, &[1, 2], |run, _| {
        if let Ok(m) = &run.outcome {
            println!(
                "{:<8} seed {} F1 {:6.2}",
                run.mode.to_string(),
                run.seed,
                m.test.micro.f1
            );
        }
    });
    let report = grid.report();
    print!("{}", report.render());
    Ok(report)
}

fn main() -> Result<()> {
    run_example().map(|_| ())
}
