// Whole-model gradient check: analytic gradients against central
// differences for the baseline, one configuration per sharing scheme, and
// both gated variants.

use transfer_ner::data::{Corpus, Sentence, Split, Task, Vocab};
use transfer_ner::model::{ModelConfig, ModelMode, NerModel};
use transfer_ner::numeric::Coords;
use transfer_ner::Result;

fn corpus(rows: &[(&str, &str)]) -> Result<Corpus> {
    let sentences = rows
        .iter()
        .map(|(t, g)| {
            Sentence::new(
                t.split_whitespace().map(str::to_string).collect(),
                g.split_whitespace().map(str::to_string).collect(),
            )
        })
        .collect::<Result<_>>()?;
    Ok(Corpus::new("toy", Split::Train, sentences))
}

/// Largest relative error per mode and task.
pub fn run_example() -> Result<Vec<(String, f64)>> {
    let target = corpus(&[("take two aspirin", "O S-DOSE S-DRUG")])?;
    let source = corpus(&[("visit New York", "O B-LOC E-LOC")])?;
    let vocab = Vocab::build(&target, Some(&source), []);
    let config = ModelConfig {
        word_dim: 3,
        char_dim: 2,
        tag_dim: 2,
        char_hidden: 2,
        word_hidden: 2,
        decoder_hidden: 3,
        dropout: 0.25,
        ..ModelConfig::default()
    };
    let modes = ["baseline", "ttn:III", "ttn:HHH", "ttn:SSS", "dtn", "dtn-hs"];
    let mut out = Vec::new();
    for m in modes {
        let mode: ModelMode = m.parse()?;
        let model = NerModel::new(
            ModelConfig {
                mode,
                ..config.clone()
            },
            vocab.clone(),
            7,
        )?;
        let tasks: &[Task] = if mode.uses_source() {
            &Task::BOTH
        } else {
            &[Task::Target]
        };
        for &task in tasks {
            let sentence = if task == Task::Target {
                &target
            } else {
                &source
            };
            let batch = [model.vocab.encode(task, &sentence.sentences[0])?];
            let report = model.gradient_check(task, &batch, 0.5, 1, Coords::All, 1e-3)?;
            println!(
                "{m:<10} {task:<6} {:>5} coordinates, max relative error {:.2e}",
                report.checked, report.max_rel_error
            );
            out.push((format!("{m}/{task}"), report.max_rel_error));
        }
    }
    Ok(out)
}

fn main() -> Result<()> {
    run_example().map(|_| ())
}
