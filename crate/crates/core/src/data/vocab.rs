use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, Sentence};
use super::tags::iobes_closure;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// The two tasks of a transfer setup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Target,
    Source,
}

impl Task {
    pub const BOTH: [Task; 2] = [Task::Target, Task::Source];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Target => "target",
            Task::Source => "source",
        }
    }

    pub fn other(self) -> Task {
        match self {
            Task::Target => Task::Source,
            Task::Source => Task::Target,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Bijective string ↔ id map. Ids follow insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Index {
    items: Vec<String>,
    ids: HashMap<String, usize>,
}

impl From<Vec<String>> for Index {
    fn from(items: Vec<String>) -> Self {
        let mut index = Index::default();
        for item in items {
            index.insert(&item);
        }
        index
    }
}

impl From<Index> for Vec<String> {
    fn from(index: Index) -> Self {
        index.items
    }
}

impl Index {
    pub fn with_specials() -> Self {
        Index::from(vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()])
    }

    /// Returns the id of `item`, inserting it if new.
    pub fn insert(&mut self, item: &str) -> usize {
        if let Some(&id) = self.ids.get(item) {
            return id;
        }
        let id = self.items.len();
        self.items.push(item.to_string());
        self.ids.insert(item.to_string(), id);
        id
    }

    pub fn get(&self, item: &str) -> Option<usize> {
        self.ids.get(item).copied()
    }

    pub fn item(&self, id: usize) -> Option<&str> {
        self.items.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }
}

/// Word, character and per-task tag vocabularies.
///
/// Words are lowercased. Characters keep their case and are collected over
/// both tasks. Tag maps hold the full IOBES closure of each task's types in
/// sorted order; the start-of-sequence tag is a model parameter, not a tag id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub words: Index,
    pub chars: Index,
    pub target_tags: Index,
    pub source_tags: Index,
}

/// Integer view of a sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub words: Vec<usize>,
    pub chars: Vec<Vec<usize>>,
    pub tags: Vec<usize>,
}

impl Vocab {
    /// Builds vocabularies from training corpora. `extra_words` are added to
    /// the word map after the training words (typically dev/test words with
    /// a pretrained vector).
    pub fn build<'a>(
        target_train: &Corpus,
        source_train: Option<&Corpus>,
        extra_words: impl IntoIterator<Item = &'a str>,
    ) -> Self {
        let mut words = Index::with_specials();
        let mut chars = Index::with_specials();
        for corpus in std::iter::once(target_train).chain(source_train) {
            for s in &corpus.sentences {
                for tok in &s.tokens {
                    words.insert(&tok.to_lowercase());
                    for c in tok.chars() {
                        chars.insert(c.encode_utf8(&mut [0; 4]));
                    }
                }
            }
        }
        for w in extra_words {
            words.insert(&w.to_lowercase());
        }
        let tags_of = |c: Option<&Corpus>| {
            let types = c.map(Corpus::entity_types).unwrap_or_default();
            Index::from(iobes_closure(types.iter().map(String::as_str)))
        };
        Vocab {
            words,
            chars,
            target_tags: tags_of(Some(target_train)),
            source_tags: tags_of(source_train),
        }
    }

    pub fn tags(&self, task: Task) -> &Index {
        match task {
            Task::Target => &self.target_tags,
            Task::Source => &self.source_tags,
        }
    }

    pub fn word_id(&self, token: &str) -> usize {
        self.words.get(&token.to_lowercase()).unwrap_or(UNK)
    }

    pub fn char_ids(&self, token: &str) -> Vec<usize> {
        token
            .chars()
            .map(|c| self.chars.get(c.encode_utf8(&mut [0; 4])).unwrap_or(UNK))
            .collect()
    }

    pub fn tag_id(&self, task: Task, tag: &str) -> Result<usize> {
        self.tags(task)
            .get(tag)
            .ok_or_else(|| Error::Data(format!("unknown {task} tag {tag:?}")))
    }

    pub fn tag_name(&self, task: Task, id: usize) -> Result<&str> {
        self.tags(task).item(id).ok_or_else(|| Error::Index {
            what: "tag",
            index: id,
            len: self.tags(task).len(),
        })
    }

    /// Word and character ids; tags left empty.
    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Encoded {
        Encoded {
            words: tokens.iter().map(|t| self.word_id(t.as_ref())).collect(),
            chars: tokens.iter().map(|t| self.char_ids(t.as_ref())).collect(),
            tags: Vec::new(),
        }
    }

    pub fn encode(&self, task: Task, sentence: &Sentence) -> Result<Encoded> {
        let mut enc = self.encode_tokens(&sentence.tokens);
        enc.tags = sentence
            .tags
            .iter()
            .map(|t| self.tag_id(task, t))
            .collect::<Result<_>>()?;
        Ok(enc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::Split;

    fn corpus(rows: &[(&[&str], &[&str])]) -> Corpus {
        let sentences = rows
            .iter()
            .map(|(t, g)| {
                Sentence::new(
                    t.iter().map(|s| s.to_string()).collect(),
                    g.iter().map(|s| s.to_string()).collect(),
                )
                .unwrap()
            })
            .collect();
        Corpus::new("c", Split::Train, sentences)
    }

    #[test]
    fn maps_are_bijective_with_specials() {
        let t = corpus(&[(&["Aspirin", "daily"], &["S-DRUG", "O"])]);
        let s = corpus(&[(&["Paris", "é"], &["S-LOC", "O"])]);
        let v = Vocab::build(&t, Some(&s), ["extra"]);
        for index in [&v.words, &v.chars, &v.target_tags, &v.source_tags] {
            for (id, item) in index.items().iter().enumerate() {
                assert_eq!(index.get(item), Some(id));
            }
        }
        assert_eq!(v.words.item(PAD), Some(PAD_TOKEN));
        assert_eq!(v.word_id("ASPIRIN"), v.word_id("aspirin"));
        assert_eq!(v.word_id("unseen"), UNK);
        assert_ne!(v.word_id("extra"), UNK);
        assert_ne!(v.char_ids("é")[0], UNK);
        assert_eq!(v.char_ids("z"), vec![UNK]);
        assert_eq!(
            v.target_tags.items(),
            ["B-DRUG", "E-DRUG", "I-DRUG", "O", "S-DRUG"]
        );
        assert!(v.source_tags.get("S-LOC").is_some());
        assert!(matches!(
            v.tag_id(Task::Target, "S-LOC"),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn serde_round_trip() {
        let t = corpus(&[(&["a", "b"], &["B-X", "E-X"])]);
        let v = Vocab::build(&t, None, []);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(v.source_tags.items(), ["O"]);
    }
}
