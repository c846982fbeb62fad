//! CSV rendering and the configuration-ranking report.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::Prf;
use crate::model::ModelMode;

/// Renders a header and rows as CSV text.
pub fn render_csv<R, S>(header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<String>
where
    R: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Serde(e.to_string());
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(row).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
}

/// Arithmetic mean and sample standard deviation (`n - 1` denominator;
/// zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Test scores of one mode averaged over its successful seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeSummary {
    pub mode: ModelMode,
    pub seeds: usize,
    pub failed: usize,
    pub mean: Prf,
    pub f1_std: f64,
}

/// Highest and lowest sharing configurations, their spread, and the
/// remaining modes for comparison.
#[derive(Debug, Clone, Serialize)]
pub struct RankingReport {
    /// Configurations sorted by descending mean F1.
    pub ranked: Vec<ModeSummary>,
    pub ttn_mean: Prf,
    pub ttn_std: Prf,
    pub others: Vec<ModeSummary>,
}

impl RankingReport {
    pub fn new(summaries: &[ModeSummary]) -> Self {
        let mut ranked: Vec<ModeSummary> = summaries
            .iter()
            .filter(|s| matches!(s.mode, ModelMode::Ttn(_)) && s.seeds > 0)
            .cloned()
            .collect();
        ranked.sort_by(|a, b| {
            b.mean
                .f1
                .total_cmp(&a.mean.f1)
                .then_with(|| a.mode.to_string().cmp(&b.mode.to_string()))
        });
        let stat =
            |f: fn(&Prf) -> f64| mean_std(&ranked.iter().map(|s| f(&s.mean)).collect::<Vec<_>>());
        let (p, r, f) = (stat(|x| x.precision), stat(|x| x.recall), stat(|x| x.f1));
        RankingReport {
            ranked,
            ttn_mean: Prf {
                precision: p.0,
                recall: r.0,
                f1: f.0,
            },
            ttn_std: Prf {
                precision: p.1,
                recall: r.1,
                f1: f.1,
            },
            others: summaries
                .iter()
                .filter(|s| !matches!(s.mode, ModelMode::Ttn(_)))
                .cloned()
                .collect(),
        }
    }

    pub fn best(&self) -> Option<&ModeSummary> {
        self.ranked.first()
    }

    pub fn other(&self, mode: ModelMode) -> Option<&ModeSummary> {
        self.others.iter().find(|s| s.mode == mode)
    }

    /// Text table: three best and three worst configurations, the mean and
    /// standard deviation over all configurations, then the other modes.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let line = |label: &str, p: &Prf| {
            format!(
                "{label:<12} {:>7.2} {:>7.2} {:>7.2}\n",
                p.precision, p.recall, p.f1
            )
        };
        out.push_str(&format!("{:<12} {:>7} {:>7} {:>7}\n", "", "P", "R", "F1"));
        out.push_str("Highest Performance TTN\n");
        for s in self.ranked.iter().take(3) {
            out.push_str(&line(&s.mode.to_string(), &s.mean));
        }
        out.push_str("Lowest Performance TTN\n");
        let k = self.ranked.len().min(3);
        for s in &self.ranked[self.ranked.len() - k..] {
            out.push_str(&line(&s.mode.to_string(), &s.mean));
        }
        out.push_str(&format!(
            "{:<12} {:>7} {:>7} {:>15}\n",
            "Avg.",
            "",
            "",
            format!("{:.2} ± {:.2}", self.ttn_mean.f1, self.ttn_std.f1)
        ));
        for s in &self.others {
            out.push_str(&line(&s.mode.to_string(), &s.mean));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sharing::parse_config_code;

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(m, 5.0);
        assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
    }

    #[test]
    fn csv_quotes_when_needed() {
        let text = render_csv(&["a", "b"], [vec!["x, y", "z"]]).unwrap();
        assert_eq!(text, "a,b\n\"x, y\",z\n");
    }

    #[test]
    fn ranking_layout() {
        let summary = |mode: ModelMode, f1: f64| ModeSummary {
            mode,
            seeds: 1,
            failed: 0,
            mean: Prf {
                precision: f1,
                recall: f1,
                f1,
            },
            f1_std: 0.0,
        };
        let mut all: Vec<ModeSummary> = ["III", "HHH", "SSS", "ISH", "HSS"]
            .iter()
            .enumerate()
            .map(|(i, c)| {
                summary(
                    ModelMode::Ttn(parse_config_code(c).unwrap()),
                    50.0 + i as f64,
                )
            })
            .collect();
        all.push(summary(ModelMode::DtnHs, 60.0));
        let r = RankingReport::new(&all);
        assert_eq!(r.best().unwrap().mode.to_string(), "ttn:HSS");
        assert_eq!(r.ranked.last().unwrap().mode.to_string(), "ttn:III");
        assert_eq!(r.ttn_mean.f1, 52.0);
        assert!(r.other(ModelMode::DtnHs).is_some());
        let text = r.render();
        assert!(
            text.contains("Highest Performance TTN") && text.contains("Lowest Performance TTN")
        );
        assert!(text.contains("52.00 ± 1.58"));
        assert!(text.trim_end().ends_with("60.00"));
    }
}
