//! BIO / IOBES tag handling and span extraction.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Prefix {
    B,
    I,
    E,
    S,
}

/// A parsed tag: `O` or a prefix with an entity type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag<'a> {
    Outside,
    Entity(Prefix, &'a str),
}

impl<'a> Tag<'a> {
    pub fn parse(tag: &'a str) -> Result<Self> {
        if tag == "O" {
            return Ok(Tag::Outside);
        }
        let (p, ty) = tag
            .split_once('-')
            .ok_or_else(|| Error::Data(format!("malformed tag {tag:?}")))?;
        if ty.is_empty() {
            return Err(Error::Data(format!("tag {tag:?} has no entity type")));
        }
        let prefix = match p {
            "B" => Prefix::B,
            "I" => Prefix::I,
            "E" => Prefix::E,
            "S" => Prefix::S,
            _ => return Err(Error::Data(format!("unknown tag prefix in {tag:?}"))),
        };
        Ok(Tag::Entity(prefix, ty))
    }

    pub fn entity_type(&self) -> Option<&'a str> {
        match *self {
            Tag::Outside => None,
            Tag::Entity(_, ty) => Some(ty),
        }
    }
}

/// Entity type of a tag string, or `None` for `O` and unparsable tags.
pub fn entity_type(tag: &str) -> Option<&str> {
    Tag::parse(tag).ok().and_then(|t| t.entity_type())
}

/// Inclusive token span `[start, end]` with an entity type.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub entity_type: String,
}

impl Span {
    pub fn new(start: usize, end: usize, entity_type: impl Into<String>) -> Self {
        Span {
            start,
            end,
            entity_type: entity_type.into(),
        }
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.start, self.end, self.entity_type)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConversionStats {
    pub tokens: usize,
    /// `I-` tags with no open entity of the same type, rewritten as `B-`.
    pub repaired: usize,
    pub singletons: usize,
    pub ends: usize,
}

/// Converts a BIO sequence to IOBES.
///
/// An `I-X` that does not continue a `B-X`/`I-X` run is treated as `B-X`
/// and counted in [`ConversionStats::repaired`]. `E-`/`S-` prefixes are
/// rejected since the input is not BIO.
pub fn bio_to_iobes<S: AsRef<str>>(tags: &[S]) -> Result<(Vec<String>, ConversionStats)> {
    let parsed: Vec<Tag> = tags
        .iter()
        .map(|t| Tag::parse(t.as_ref()))
        .collect::<Result<_>>()?;
    let mut stats = ConversionStats {
        tokens: tags.len(),
        ..Default::default()
    };

    // Repair pass: every entity token becomes either a begin or a continue.
    let mut repaired: Vec<Option<(bool, &str)>> = Vec::with_capacity(parsed.len());
    for (i, tag) in parsed.iter().enumerate() {
        let item = match *tag {
            Tag::Outside => None,
            Tag::Entity(Prefix::B, ty) => Some((true, ty)),
            Tag::Entity(Prefix::I, ty) => {
                let continues = matches!(repaired.last(), Some(Some((_, prev))) if *prev == ty);
                if !continues {
                    stats.repaired += 1;
                    log::debug!("repairing orphan I-{ty} at token {i}");
                }
                Some((!continues, ty))
            }
            Tag::Entity(_, _) => {
                return Err(Error::Data(format!(
                    "tag {:?} at token {i} is not BIO",
                    tags[i].as_ref()
                )))
            }
        };
        repaired.push(item);
    }

    let mut out = Vec::with_capacity(repaired.len());
    for i in 0..repaired.len() {
        let Some((begin, ty)) = repaired[i] else {
            out.push("O".to_string());
            continue;
        };
        let next_continues = matches!(repaired.get(i + 1), Some(Some((false, nty))) if *nty == ty);
        let prefix = match (begin, next_continues) {
            (true, true) => "B",
            (true, false) => {
                stats.singletons += 1;
                "S"
            }
            (false, true) => "I",
            (false, false) => {
                stats.ends += 1;
                "E"
            }
        };
        out.push(format!("{prefix}-{ty}"));
    }
    Ok((out, stats))
}

/// Renders spans as an IOBES sequence of length `len`.
pub fn spans_to_iobes(spans: &[Span], len: usize) -> Vec<String> {
    let mut out = vec!["O".to_string(); len];
    for s in spans {
        if s.start == s.end {
            out[s.start] = format!("S-{}", s.entity_type);
        } else {
            out[s.start] = format!("B-{}", s.entity_type);
            for tag in &mut out[s.start + 1..s.end] {
                *tag = format!("I-{}", s.entity_type);
            }
            out[s.end] = format!("E-{}", s.entity_type);
        }
    }
    out
}

/// Whether a sequence is well-formed IOBES.
pub fn is_valid_iobes<S: AsRef<str>>(tags: &[S]) -> bool {
    let mut open: Option<&str> = None;
    for t in tags {
        let Ok(tag) = Tag::parse(t.as_ref()) else {
            return false;
        };
        open = match (open, tag) {
            (None, Tag::Outside) => None,
            (None, Tag::Entity(Prefix::S, _)) => None,
            (None, Tag::Entity(Prefix::B, ty)) => Some(ty),
            (Some(o), Tag::Entity(Prefix::I, ty)) if o == ty => Some(ty),
            (Some(o), Tag::Entity(Prefix::E, ty)) if o == ty => None,
            _ => return false,
        };
    }
    open.is_none()
}

/// Extracts entity spans from an IOBES sequence.
///
/// Total over arbitrary tag strings. Well-formed input yields exactly its
/// entities. Otherwise segmentation is conservative:
///
/// | situation                                   | effect              |
/// |---------------------------------------------|---------------------|
/// | `I-X`/`E-X` with no open `X` span           | opens a span        |
/// | `B-`, `S-`, `O` or another type while open  | closes the open span|
/// | `E-X`/`S-X`                                 | closes after token  |
/// | sequence ends while open                    | closes at last token|
/// | unparsable tag                              | treated as `O`      |
pub fn iobes_to_spans<S: AsRef<str>>(tags: &[S]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, t) in tags.iter().enumerate() {
        let tag = Tag::parse(t.as_ref()).unwrap_or(Tag::Outside);
        let continues = |ty: &str| matches!(open, Some((_, o)) if o == ty);
        match tag {
            Tag::Outside => {
                if let Some((s, ty)) = open.take() {
                    spans.push(Span::new(s, i - 1, ty));
                }
            }
            Tag::Entity(Prefix::B, ty) | Tag::Entity(Prefix::S, ty) => {
                if let Some((s, oty)) = open.take() {
                    spans.push(Span::new(s, i - 1, oty));
                }
                if matches!(tag, Tag::Entity(Prefix::S, _)) {
                    spans.push(Span::new(i, i, ty));
                } else {
                    open = Some((i, ty));
                }
            }
            Tag::Entity(p @ (Prefix::I | Prefix::E), ty) => {
                if !continues(ty) {
                    if let Some((s, oty)) = open.take() {
                        spans.push(Span::new(s, i - 1, oty));
                    }
                    open = Some((i, ty));
                }
                if p == Prefix::E {
                    let (s, ty) = open.take().expect("span opened above");
                    spans.push(Span::new(s, i, ty));
                }
            }
        }
    }
    if let Some((s, ty)) = open {
        spans.push(Span::new(s, tags.len() - 1, ty));
    }
    spans
}

/// All IOBES tags for the given entity types, plus `O`, sorted.
pub fn iobes_closure<'a>(types: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut set: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
    set.insert("O".to_string());
    for ty in types {
        for p in ["B", "I", "E", "S"] {
            set.insert(format!("{p}-{ty}"));
        }
    }
    set.into_iter().collect()
}
