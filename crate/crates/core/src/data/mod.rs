//! Corpora, tag schemes, vocabularies, pretrained vectors and synthetic data.

pub mod corpus;
pub mod embeddings;
pub mod synth;
pub mod tags;
pub mod vocab;

pub use corpus::{
    parse_conll_columns, read_conll_columns, render_conll, render_predictions, subsample_corpus,
    write_atomic, write_conll, Corpus, Sentence, Split,
};
pub use embeddings::{load_pretrained_embeddings, read_vector_words, Coverage, Pretrained};
pub use synth::{synth_generate, Grammar, SynthCorpora, SynthSpec};
pub use tags::{
    bio_to_iobes, entity_type, iobes_closure, iobes_to_spans, is_valid_iobes, spans_to_iobes,
    ConversionStats, Span,
};
pub use vocab::{Encoded, Index, Task, Vocab};
