// Generates a source/target pair with partially shared lexicons and
// templates, and shows how much of the target vocabulary the source covers.

use std::collections::HashSet;

use transfer_ner::data::{SynthCorpora, SynthSpec};
use transfer_ner::Result;

/// Share of target entity word types that also occur in the source.
pub fn run_example() -> Result<f64> {
    let spec = SynthSpec {
        source_sentences: 400,
        target_sentences: 100,
        dev_sentences: 20,
        test_sentences: 20,
        ..SynthSpec::default()
    };
    let corpora = SynthCorpora::generate(&spec, 3)?;
    for (name, c) in [
        ("source", &corpora.source_train),
        ("target", &corpora.target_train),
    ] {
        println!(
            "{name}: {} sentences, {} tokens, types {:?}",
            c.len(),
            c.token_count(),
            c.entity_types()
        );
        for s in c.sentences.iter().take(2) {
            let line: Vec<String> = s
                .tokens
                .iter()
                .zip(&s.tags)
                .map(|(t, g)| format!("{t}/{g}"))
                .collect();
            println!("  {}", line.join(" "));
        }
    }
    let entity_words = |c: &transfer_ner::data::Corpus| -> HashSet<String> {
        c.sentences
            .iter()
            .flat_map(|s| s.tokens.iter().zip(&s.tags))
            .filter(|(_, g)| g.as_str() != "O")
            .map(|(t, _)| t.clone())
            .collect()
    };
    let source = entity_words(&corpora.source_train);
    let target = entity_words(&corpora.target_train);
    let covered = target.intersection(&source).count() as f64 / target.len() as f64;
    println!(
        "target entity words seen in source: {:.1}%",
        100.0 * covered
    );
    Ok(covered)
}

fn main() -> Result<()> {
    run_example().map(|_| ())
}
