// Reads BIO-tagged CoNLL columns, converts them to IOBES, and lists the
// entity spans.

use transfer_ner::data::{
    iobes_to_spans, is_valid_iobes, parse_conll_columns, render_conll, Corpus,
};
use transfer_ner::Result;

const BIO: &str = "\
-DOCSTART- -X- -X- O

EU NNP B-NP B-ORG
rejects VBZ B-VP O
German JJ B-NP B-MISC
call NN I-NP O
to TO B-VP O
boycott VB I-VP O
British JJ B-NP B-MISC
lamb NN I-NP O
. . O O

Peter NNP B-NP B-PER
Blackburn NNP I-NP I-PER
";

/// The converted corpus.
pub fn run_example() -> Result<Corpus> {
    let bio = parse_conll_columns(BIO, 0, 3, "example")?;
    let (iobes, stats) = bio.to_iobes()?;
    println!(
        "{} tokens, {} singletons, {} multi-token ends, {} repaired",
        stats.tokens, stats.singletons, stats.ends, stats.repaired
    );
    print!("{}", render_conll(&iobes));
    for s in &iobes.sentences {
        assert!(is_valid_iobes(&s.tags));
        for span in iobes_to_spans(&s.tags) {
            let words = s.tokens[span.start..=span.end].join(" ");
            println!(
                "{:<5} [{}, {}] {words}",
                span.entity_type, span.start, span.end
            );
        }
    }
    Ok(iobes)
}

fn main() -> Result<()> {
    run_example().map(|_| ())
}
