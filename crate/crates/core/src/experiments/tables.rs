use std::fmt::Write as _;
use std::str::FromStr;

use super::declarative::{declarative_from_scores, is_declarative, DeclarativeTable};
use super::grid::{GridCell, GridResult};
use crate::data::LengthBucket;
use crate::error::{Error, Result};
use crate::model::{cell_name, ModelRow, Regularizer, CELLS};

pub const MISSING: &str = "—";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableKind {
    Main,
    Length,
    Declarative,
}

impl TableKind {
    pub const ALL: [TableKind; 3] = [TableKind::Main, TableKind::Length, TableKind::Declarative];

    pub fn name(self) -> &'static str {
        match self {
            TableKind::Main => "main",
            TableKind::Length => "length",
            TableKind::Declarative => "declarative",
        }
    }
}

impl FromStr for TableKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown table {s:?} (main|length|declarative)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Text,
    Csv,
    Latex,
}

impl TableFormat {
    pub const ALL: [TableFormat; 3] = [TableFormat::Text, TableFormat::Csv, TableFormat::Latex];

    pub fn extension(self) -> &'static str {
        match self {
            TableFormat::Text => "txt",
            TableFormat::Csv => "csv",
            TableFormat::Latex => "tex",
        }
    }
}

impl FromStr for TableFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "txt" => Ok(TableFormat::Text),
            "csv" => Ok(TableFormat::Csv),
            "latex" | "tex" => Ok(TableFormat::Latex),
            _ => Err(Error::Config(format!("unknown table format {s:?} (text|csv|latex)"))),
        }
    }
}

/// Format-independent table: every cell is already a final string.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub title: String,
    /// Spanning header above the column names, as (label, width) groups.
    pub groups: Vec<(String, usize)>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub footnotes: Vec<String>,
}

/// F1 in the ×100, one-decimal presentation.
pub fn percent(f1: f64) -> String {
    format!("{:.1}", 100.0 * f1)
}

fn or_missing(value: Option<f64>, fmt: impl Fn(f64) -> String, missing: &mut bool) -> String {
    match value {
        Some(v) => fmt(v),
        None => {
            *missing = true;
            MISSING.to_owned()
        }
    }
}

/// Seven rows by GRU/LSTM × {-, D, BN} of mean test F1.
pub fn main_table(result: &GridResult) -> Table {
    let mut missing = false;
    let rows = ModelRow::ALL
        .iter()
        .map(|&row| {
            let mut line = vec![row.label().to_owned()];
            for cell in CELLS {
                for regularizer in Regularizer::ALL {
                    let f1 = result.mean_f1(GridCell { row, cell, regularizer });
                    line.push(or_missing(f1, percent, &mut missing));
                }
            }
            line
        })
        .collect();
    let mut header = vec!["Model".to_owned()];
    for cell in CELLS {
        header.extend(Regularizer::ALL.iter().map(|r| format!("{} {}", cell_name(cell).to_uppercase(), r.short())));
    }
    Table {
        title: format!("Test F1 (x100), mean over {}", seeds_phrase(result)),
        groups: std::iter::once((String::new(), 1))
            .chain(CELLS.iter().map(|&c| (cell_name(c).to_uppercase(), Regularizer::ALL.len())))
            .collect(),
        header,
        rows,
        footnotes: footnotes(result, missing),
    }
}

/// Length buckets by the four attention families, unregularized models of
/// the analysis cell type.
pub fn length_table(result: &GridResult) -> Table {
    let mut missing = false;
    let rows = LengthBucket::ALL
        .iter()
        .map(|&bucket| {
            let mut line = vec![bucket.label().to_owned()];
            for row in ModelRow::ATTENTION {
                let cell = GridCell {
                    row,
                    cell: result.analysis_cell,
                    regularizer: Regularizer::None,
                };
                line.push(or_missing(result.bucket_f1(cell, bucket), percent, &mut missing));
            }
            line
        })
        .collect();
    Table {
        title: format!(
            "Test F1 (x100) by utterance length, {} without regularization, mean over {}",
            cell_name(result.analysis_cell).to_uppercase(),
            seeds_phrase(result)
        ),
        groups: Vec::new(),
        header: std::iter::once("Length".to_owned())
            .chain(ModelRow::ATTENTION.iter().map(|r| r.label().to_owned()))
            .collect(),
        rows,
        footnotes: footnotes(result, missing),
    }
}

/// Declarative questions of the test split scored by the four attention
/// families, averaged over seeds.
pub fn grid_declarative(result: &GridResult) -> Result<DeclarativeTable> {
    let families: Vec<_> = ModelRow::ATTENTION
        .iter()
        .map(|&row| {
            let cell = GridCell {
                row,
                cell: result.analysis_cell,
                regularizer: Regularizer::None,
            };
            let scores = result
                .mean_scores(cell)
                .into_iter()
                .filter(|s| is_declarative(s.kind.as_deref()))
                .collect();
            (row, scores)
        })
        .collect();
    Ok(declarative_from_scores(&families)?.with_texts(&result.texts))
}

/// Two-decimal scores per example plus a closing mean row.
pub fn declarative_table(table: &DeclarativeTable, title: String) -> Table {
    let mut missing = false;
    let score = |v: f64| format!("{v:.2}");
    let mut rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            std::iter::once(r.text.clone().unwrap_or_else(|| r.id.clone()))
                .chain(r.scores.iter().map(|&s| or_missing(s, score, &mut missing)))
                .collect()
        })
        .collect();
    rows.push(
        std::iter::once("Mean".to_owned())
            .chain(table.means.iter().map(|&m| or_missing(m, score, &mut missing)))
            .collect(),
    );
    Table {
        title,
        groups: Vec::new(),
        header: std::iter::once("Example".to_owned())
            .chain(table.families.iter().map(|r| r.label().to_owned()))
            .collect(),
        rows,
        footnotes: if missing {
            vec![format!("{MISSING} no completed model of this family")]
        } else {
            Vec::new()
        },
    }
}

fn seeds_phrase(result: &GridResult) -> String {
    match result.seeds.len() {
        1 => format!("seed {}", result.seeds[0]),
        n => format!("{n} seeds"),
    }
}

fn footnotes(result: &GridResult, missing: bool) -> Vec<String> {
    if !missing {
        return Vec::new();
    }
    let mut notes = vec![format!("{MISSING} no seed of this cell completed")];
    for (cell, seed, error) in result.failures() {
        notes.push(format!("{cell} seed {seed} failed: {error}"));
    }
    notes
}

/// Renders one of the three tables of a grid result. A pure function of
/// `result`.
pub fn emit_table(result: &GridResult, which: TableKind, format: TableFormat) -> Result<String> {
    let table = match which {
        TableKind::Main => main_table(result),
        TableKind::Length => length_table(result),
        TableKind::Declarative => declarative_table(
            &grid_declarative(result)?,
            format!(
                "Scores on test declarative questions, {} without regularization, mean over {}",
                cell_name(result.analysis_cell).to_uppercase(),
                seeds_phrase(result)
            ),
        ),
    };
    render(&table, format)
}

pub fn render(table: &Table, format: TableFormat) -> Result<String> {
    match format {
        TableFormat::Text => Ok(render_text(table)),
        TableFormat::Csv => render_csv(table),
        TableFormat::Latex => Ok(render_latex(table)),
    }
}

fn render_text(t: &Table) -> String {
    let ncols = t.header.len();
    let width = |c: usize| {
        t.rows
            .iter()
            .map(|r| r[c].chars().count())
            .chain([t.header[c].chars().count()])
            .max()
            .unwrap_or(0)
    };
    let widths: Vec<usize> = (0..ncols).map(width).collect();
    let pad = |s: &str, w: usize, left: bool| {
        let fill = " ".repeat(w.saturating_sub(s.chars().count()));
        if left {
            format!("{s}{fill}")
        } else {
            format!("{fill}{s}")
        }
    };
    let line = |cells: &[String]| {
        cells
            .iter()
            .enumerate()
            .map(|(c, s)| pad(s, widths[c], c == 0))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_owned()
    };
    let mut out = format!("{}\n\n", t.title);
    if !t.groups.is_empty() {
        let mut col = 0;
        let mut spans = Vec::new();
        for (label, span) in &t.groups {
            let w = widths[col..col + span].iter().sum::<usize>() + 2 * (span - 1);
            let left = col == 0;
            spans.push(if left { pad(label, w, true) } else { centre(label, w) });
            col += span;
        }
        let _ = writeln!(out, "{}", spans.join("  ").trim_end());
    }
    let _ = writeln!(out, "{}", line(&t.header));
    let rule = widths.iter().sum::<usize>() + 2 * (ncols - 1);
    let _ = writeln!(out, "{}", "-".repeat(rule));
    for r in &t.rows {
        let _ = writeln!(out, "{}", line(r));
    }
    for f in &t.footnotes {
        let _ = writeln!(out, "{f}");
    }
    out
}

fn centre(s: &str, w: usize) -> String {
    let n = s.chars().count();
    let left = w.saturating_sub(n) / 2;
    format!("{}{s}{}", " ".repeat(left), " ".repeat(w.saturating_sub(n + left)))
}

fn render_csv(t: &Table) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Input(format!("csv: {e}"));
    w.write_record(&t.header).map_err(csv_err)?;
    for r in &t.rows {
        w.write_record(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Input(format!("csv: {e}")))?;
    let mut out = String::from_utf8(bytes).map_err(|e| Error::Input(format!("csv: {e}")))?;
    for f in &t.footnotes {
        let _ = writeln!(out, "# {f}");
    }
    Ok(out)
}

fn latex_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' | '%' | '$' | '#' | '_' | '{' | '}' => {
                out.push('\\');
                out.push(ch);
            }
            '~' => out.push_str("\\textasciitilde{}"),
            '^' => out.push_str("\\textasciicircum{}"),
            '\\' => out.push_str("\\textbackslash{}"),
            '—' => out.push_str("---"),
            _ => out.push(ch),
        }
    }
    out
}

fn render_latex(t: &Table) -> String {
    let ncols = t.header.len();
    let mut out = String::new();
    let _ = writeln!(out, "\\begin{{table}}[t]\n\\centering");
    let _ = writeln!(out, "\\begin{{tabular}}{{l{}}}\n\\hline", "r".repeat(ncols - 1));
    let row = |cells: &[String]| cells.iter().map(|c| latex_escape(c)).collect::<Vec<_>>().join(" & ");
    if !t.groups.is_empty() {
        let spans: Vec<String> = t
            .groups
            .iter()
            .map(|(label, span)| match span {
                1 => latex_escape(label),
                _ => format!("\\multicolumn{{{span}}}{{c}}{{{}}}", latex_escape(label)),
            })
            .collect();
        let _ = writeln!(out, "{} \\\\", spans.join(" & "));
    }
    let _ = writeln!(out, "{} \\\\\n\\hline", row(&t.header));
    for r in &t.rows {
        let _ = writeln!(out, "{} \\\\", row(r));
    }
    let _ = writeln!(out, "\\hline\n\\end{{tabular}}");
    let _ = writeln!(out, "\\caption{{{}}}", latex_escape(&t.title));
    for f in &t.footnotes {
        let _ = writeln!(out, "% {}", f);
    }
    let _ = writeln!(out, "\\end{{table}}");
    out
}

/// Writes every table in every format as `<dir>/<table>.<ext>`. The
/// declarative table is skipped when the test split has no declarative
/// questions.
pub fn write_tables(result: &GridResult, dir: &std::path::Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for which in TableKind::ALL {
        for format in TableFormat::ALL {
            let doc = match emit_table(result, which, format) {
                Ok(d) => d,
                Err(Error::Contract(m)) if which == TableKind::Declarative => {
                    log::warn!("declarative table skipped: {m}");
                    break;
                }
                Err(e) => return Err(e),
            };
            let path = dir.join(format!("{}.{}", which.name(), format.extension()));
            std::fs::write(&path, doc).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}
