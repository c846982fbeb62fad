//! Gate-value traces and their aggregates.

use std::collections::BTreeMap;

use crate::data::{entity_type, Corpus, Task};
use crate::error::{Error, Result};
use crate::model::NerModel;
use crate::report::render_csv;
use crate::sharing::{ComponentKind, GateTraceRecord};

/// Records gate activations while greedily decoding every sentence.
/// Models without gates yield no records.
pub fn collect_gate_traces(model: &NerModel, corpus: &Corpus) -> Result<Vec<GateTraceRecord>> {
    let mut records = Vec::new();
    for (sid, s) in corpus.sentences.iter().enumerate() {
        let (_, gates) = model.decode_with_gates(&s.tokens)?;
        records.extend(gates.into_iter().map(|g| GateTraceRecord {
            sentence_id: sid,
            token_index: g.token_index,
            token: s.tokens[g.token_index].clone(),
            gold_tag: s.tags[g.token_index].clone(),
            component: g.component,
            task: Task::Target,
            g1: g.g1,
            g2: g.g2,
        }));
    }
    Ok(records)
}

fn has_g2(records: &[GateTraceRecord]) -> bool {
    records.iter().any(|r| r.g2.is_some())
}

/// Long format: one row per (token, component, gate) holding the mean
/// over gate dimensions.
pub fn gate_trace_long_csv(records: &[GateTraceRecord]) -> Result<String> {
    let rows = records.iter().flat_map(|r| {
        let base = [
            r.sentence_id.to_string(),
            r.token_index.to_string(),
            r.token.clone(),
            r.gold_tag.clone(),
            r.component.to_string(),
        ];
        std::iter::once(("g1", &r.g1))
            .chain(r.g2.as_ref().map(|g| ("g2", g)))
            .map(move |(gate, v)| {
                let mut row = base.to_vec();
                row.push(gate.to_string());
                row.push(GateTraceRecord::mean(v).to_string());
                row
            })
    });
    render_csv(
        &[
            "sentence_id",
            "token_index",
            "token",
            "gold_tag",
            "component",
            "gate",
            "mean_value",
        ],
        rows,
    )
}

/// Token, gold tag and gate means keyed by (gate, component).
type TokenRow<'a> = (&'a str, &'a str, BTreeMap<(usize, ComponentKind), f64>);

/// Wide format: one row per token with a column per (component, gate).
/// Second-gate columns appear only when the trace has them.
pub fn gate_trace_wide_csv(records: &[GateTraceRecord]) -> Result<String> {
    let gates: &[&str] = if has_g2(records) {
        &["g1", "g2"]
    } else {
        &["g1"]
    };
    let mut header = vec![
        "sentence_id".to_string(),
        "token_index".into(),
        "token".into(),
        "gold_tag".into(),
    ];
    for gate in gates {
        header.extend(ComponentKind::ALL.iter().map(|c| format!("{c}_{gate}")));
    }
    let mut tokens: BTreeMap<(usize, usize), TokenRow<'_>> = BTreeMap::new();
    for r in records {
        let entry = tokens.entry((r.sentence_id, r.token_index)).or_insert((
            &r.token,
            &r.gold_tag,
            BTreeMap::new(),
        ));
        entry
            .2
            .insert((0, r.component), GateTraceRecord::mean(&r.g1));
        if let Some(g2) = &r.g2 {
            entry.2.insert((1, r.component), GateTraceRecord::mean(g2));
        }
    }
    let rows = tokens.into_iter().map(|((sid, ti), (tok, tag, vals))| {
        let mut row = vec![
            sid.to_string(),
            ti.to_string(),
            tok.to_string(),
            tag.to_string(),
        ];
        for g in 0..gates.len() {
            for c in ComponentKind::ALL {
                row.push(vals.get(&(g, c)).map(f64::to_string).unwrap_or_default());
            }
        }
        row
    });
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    render_csv(&header, rows)
}

/// Row key of an aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    /// Gold entity type of the token, plus an overall row.
    Tag,
    /// One row per component.
    Component,
    /// Surface token.
    Token,
}

impl std::str::FromStr for GroupBy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tag" => Ok(GroupBy::Tag),
            "component" => Ok(GroupBy::Component),
            "token" => Ok(GroupBy::Token),
            _ => Err(Error::Config(format!(
                "unknown grouping {s:?}; expected tag, component or token"
            ))),
        }
    }
}

pub const OVERALL: &str = "Overall";

/// Mean gate values per row and column; `None` where no token contributed.
#[derive(Debug, Clone, PartialEq)]
pub struct GateTable {
    pub row_header: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl GateTable {
    pub fn get(&self, row: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows
            .iter()
            .find(|(r, _)| r == row)
            .and_then(|(_, v)| v[c])
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut header = vec![self.row_header.as_str()];
        header.extend(self.columns.iter().map(String::as_str));
        let rows = self.rows.iter().map(|(label, vals)| {
            std::iter::once(label.clone())
                .chain(
                    vals.iter()
                        .map(|v| v.map(|x| format!("{x:.6}")).unwrap_or_default()),
                )
                .collect::<Vec<String>>()
        });
        render_csv(&header, rows)
    }

    /// Aligned text table with two decimals.
    pub fn render(&self) -> String {
        let mut cells = vec![std::iter::once(self.row_header.clone())
            .chain(self.columns.iter().cloned())
            .collect::<Vec<_>>()];
        for (label, vals) in &self.rows {
            cells.push(
                std::iter::once(label.clone())
                    .chain(
                        vals.iter()
                            .map(|v| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into())),
                    )
                    .collect(),
            );
        }
        let widths: Vec<usize> = (0..cells[0].len())
            .map(|c| {
                cells
                    .iter()
                    .map(|r| r[c].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    if i == 0 {
                        format!("{s:<w$}", w = widths[i])
                    } else {
                        format!("{s:>w$}", w = widths[i])
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

fn component_title(c: ComponentKind) -> &'static str {
    match c {
        ComponentKind::CharEnc => "Char Enc",
        ComponentKind::WordEnc => "Word Enc",
        ComponentKind::Decoder => "Decoder",
    }
}

#[derive(Default, Clone, Copy)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn add(&mut self, x: f64) {
        self.sum += x;
        self.n += 1;
    }
    fn get(self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Averages per-token gate means. Tag rows use gold entity types and skip
/// `O` tokens; the overall row covers every token.
pub fn aggregate_gates(records: &[GateTraceRecord], group: GroupBy) -> GateTable {
    let two = has_g2(records);
    let gate_count = if two { 2 } else { 1 };
    let gate_values = |r: &GateTraceRecord| {
        let mut v = vec![GateTraceRecord::mean(&r.g1)];
        if let Some(g2) = &r.g2 {
            v.push(GateTraceRecord::mean(g2));
        }
        v
    };

    if group == GroupBy::Component {
        let mut acc = [[Mean::default(); 2]; 3];
        for r in records {
            for (g, x) in gate_values(r).into_iter().enumerate() {
                acc[r.component as usize][g].add(x);
            }
        }
        let columns = ["g1", "g2"][..gate_count]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rows = ComponentKind::ALL
            .iter()
            .map(|&c| {
                (
                    component_title(c).to_string(),
                    acc[c as usize][..gate_count]
                        .iter()
                        .map(|m| m.get())
                        .collect(),
                )
            })
            .collect();
        return GateTable {
            row_header: "Component".into(),
            columns,
            rows,
        };
    }

    let columns: Vec<String> = ComponentKind::ALL
        .iter()
        .flat_map(|&c| {
            (0..gate_count).map(move |g| {
                if two {
                    format!("{} g{}", component_title(c), g + 1)
                } else {
                    component_title(c).to_string()
                }
            })
        })
        .collect();
    let col = |c: ComponentKind, g: usize| c as usize * gate_count + g;
    let mut groups: BTreeMap<String, Vec<Mean>> = BTreeMap::new();
    let mut overall = vec![Mean::default(); columns.len()];
    for r in records {
        let key = match group {
            GroupBy::Tag => entity_type(&r.gold_tag).map(str::to_string),
            GroupBy::Token => Some(r.token.clone()),
            GroupBy::Component => unreachable!(),
        };
        for (g, x) in gate_values(r).into_iter().enumerate() {
            if let Some(k) = &key {
                groups
                    .entry(k.clone())
                    .or_insert_with(|| vec![Mean::default(); columns.len()])[col(r.component, g)]
                .add(x);
            }
            overall[col(r.component, g)].add(x);
        }
    }
    let mut rows: Vec<(String, Vec<Option<f64>>)> = groups
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().map(Mean::get).collect()))
        .collect();
    if group == GroupBy::Tag {
        rows.push((
            OVERALL.to_string(),
            overall.into_iter().map(Mean::get).collect(),
        ));
    }
    GateTable {
        row_header: if group == GroupBy::Tag {
            "Tag"
        } else {
            "Token"
        }
        .into(),
        columns,
        rows,
    }
}
