//! Synthetic financial-report pages with gold attributes, and reading-order
//! perturbation that lists table cells column by column.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::doc_model::{segment_lines, to_jsonl, BBox, Document, Token};
use crate::encoder::config::named_enum;
use crate::error::{Error, Result};
use crate::numerics::checkpoint::write_atomic;
use crate::parallel::Exec;

named_enum!(DocType {
    KvTable => "kv_table",
    TwoColumnTable => "two_column_table",
    PlainText => "plain_text",
    Form => "form",
});

named_enum!(ReadingOrder { RowMajor => "row_major", ColumnMajor => "column_major" });

#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub doc_type: DocType,
    pub page_w: f64,
    pub page_h: f64,
    /// Seeds the invented organisation-name syllables.
    pub vocab_seed: u64,
    /// Table rows, including the gold rows.
    pub rows: usize,
    /// Box jitter amplitude as a fraction of the line height.
    pub noise: f64,
    pub reading_order: ReadingOrder,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            doc_type: DocType::KvTable,
            page_w: 612.0,
            page_h: 792.0,
            vocab_seed: 7,
            rows: 12,
            noise: 0.1,
            reading_order: ReadingOrder::RowMajor,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.page_w >= 300.0 && self.page_h >= 400.0) {
            return bad("page must be at least 300x400");
        }
        if !(3..=30).contains(&self.rows) {
            return bad("rows must lie in 3..=30");
        }
        if !(0.0..=0.2).contains(&self.noise) {
            return bad("noise must lie in [0, 0.2]");
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        [
            ("doc_type", self.doc_type.to_string()),
            ("page_w", format!("{:?}", self.page_w)),
            ("page_h", format!("{:?}", self.page_h)),
            ("vocab_seed", self.vocab_seed.to_string()),
            ("rows", self.rows.to_string()),
            ("noise", format!("{:?}", self.noise)),
            ("reading_order", self.reading_order.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "doc_type" => self.doc_type = value.parse()?,
            "page_w" => self.page_w = num(key, value)?,
            "page_h" => self.page_h = num(key, value)?,
            "vocab_seed" => self.vocab_seed = num(key, value)?,
            "rows" => self.rows = num(key, value)?,
            "noise" => self.noise = num(key, value)?,
            "reading_order" => self.reading_order = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

const FONT: f64 = 10.0;
const CHAR_W: f64 = 5.0;
const MARGIN: f64 = 72.0;
const TEXT_PITCH: f64 = 13.0;
const ROW_PITCH: f64 = 18.0;
/// Horizontal gap, in line heights, that separates two table cells.
pub const CELL_GAP: f64 = 1.5;

const INCOME_LABELS: &[&str] = &["Income", "Total income", "Total incoming resources", "Income for the year"];
const SPENDING_LABELS: &[&str] = &["Spending", "Total expenditure", "Total spending", "Resources expended"];
const DATE_LABELS: &[&str] = &["Date", "Date of report", "Approved on", "Report date"];
const DISTRACTOR_LABELS: &[&str] = &[
    "Donations and legacies",
    "Charitable activities",
    "Investments",
    "Other trading activities",
    "Raising funds",
    "Grants payable",
    "Staff costs",
    "Governance costs",
    "Fixed assets",
    "Net current assets",
    "Cash at bank",
    "Creditors",
    "Restricted funds",
    "Unrestricted funds",
    "Support costs",
    "Volunteers",
    "Legacies received",
    "Membership fees",
    "Rental receipts",
    "Transfers between funds",
];
const FILLER: &[&str] = &[
    "the", "trustees", "present", "their", "annual", "report", "and", "financial", "statements", "for", "year",
    "ended", "charity", "objects", "are", "to", "support", "local", "community", "through", "education", "health",
    "projects", "a", "summary", "of", "results", "is", "shown", "below", "with", "comparative", "figures", "our",
    "volunteers", "continued", "work", "in", "region", "during", "period", "reserves", "policy", "remains",
    "unchanged", "board", "approved", "accounts", "on", "behalf", "members",
];
const SUFFIXES: &[&str] = &["Trust", "Foundation", "Society", "Fund", "Association"];
const MONTH_NAMES: [&str; 12] = [
    "January", "February", "March", "April", "May", "June", "July", "August", "September", "October", "November",
    "December",
];

/// One horizontal run of words starting at `x`, or ending at `x` when
/// `right_aligned`.
#[derive(Debug, Clone)]
struct Cell {
    words: Vec<String>,
    x: f64,
    right_aligned: bool,
}

impl Cell {
    fn left(text: &str, x: f64) -> Self {
        Self {
            words: text.split_whitespace().map(str::to_string).collect(),
            x,
            right_aligned: false,
        }
    }

    fn right(text: &str, x: f64) -> Self {
        Self {
            right_aligned: true,
            ..Self::left(text, x)
        }
    }

    fn width(&self) -> f64 {
        let chars: usize = self.words.iter().map(|w| w.chars().count()).sum::<usize>() + self.words.len() - 1;
        chars as f64 * CHAR_W
    }
}

struct Line {
    cells: Vec<Cell>,
    pitch: f64,
}

fn org_name(vocab_seed: u64, rng: &mut ChaCha8Rng) -> String {
    const ON: &[&str] = &["b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w"];
    const NU: &[&str] = &["a", "e", "i", "o", "u", "ay", "ee", "ou"];
    let mut syll = ChaCha8Rng::seed_from_u64(vocab_seed);
    let stems: Vec<String> = (0..64)
        .map(|_| {
            let k = syll.gen_range(2..=3);
            let mut s: String = (0..k)
                .map(|_| format!("{}{}", ON.choose(&mut syll).unwrap(), NU.choose(&mut syll).unwrap()))
                .collect();
            s[..1].make_ascii_uppercase();
            s
        })
        .collect();
    format!("{} {}", stems.choose(rng).unwrap(), SUFFIXES.choose(rng).unwrap())
}

/// A sampled amount as `(display, canonical)`.
fn amount(rng: &mut ChaCha8Rng) -> (String, String) {
    let v = 10f64.powf(rng.gen_range(2.7..6.3)).round() as u64;
    let pence = if rng.gen_bool(0.2) { rng.gen_range(0..100) } else { 0 };
    let grouped = {
        let d = v.to_string();
        let mut s = String::new();
        for (i, c) in d.chars().enumerate() {
            if i > 0 && (d.len() - i) % 3 == 0 {
                s.push(',');
            }
            s.push(c);
        }
        s
    };
    let display = match (rng.gen_range(0..5), pence) {
        (0, 0) => format!("£{grouped}"),
        (1, 0) => grouped,
        (2, 0) => format!("{v}"),
        (3, _) | (0..=2, _) => format!("{v}.{pence:02}"),
        _ => format!("£{grouped}.{pence:02}"),
    };
    (display, format!("{v}.{pence:02}"))
}

fn date(rng: &mut ChaCha8Rng) -> (String, String) {
    let y = rng.gen_range(2012..=2021);
    let m = rng.gen_range(1..=12u32);
    let d = rng.gen_range(1..=28u32);
    let suffix = match d {
        1 | 21 => "st",
        2 | 22 => "nd",
        3 | 23 => "rd",
        _ => "th",
    };
    let month = MONTH_NAMES[m as usize - 1];
    let display = match rng.gen_range(0..5) {
        0 => format!("{d}{suffix} {month} {y}"),
        1 => format!("{d} {month} {y}"),
        2 => format!("{m:02}/{d:02}/{y}"),
        3 => format!("{y}-{m:02}-{d:02}"),
        _ => format!("{month} {d}, {y}"),
    };
    (display, format!("{y:04}-{m:02}-{d:02}"))
}

fn sentence(rng: &mut ChaCha8Rng, words: usize) -> String {
    let mut s: Vec<&str> = (0..words).map(|_| *FILLER.choose(rng).unwrap()).collect();
    let first = s[0].to_string();
    let cap = first[..1].to_uppercase() + &first[1..];
    let last = format!("{}.", s[words - 1]);
    s[words - 1] = &last;
    let mut out = vec![cap.as_str()];
    out.extend_from_slice(&s[1..]);
    out.join(" ")
}

fn wrap(words: &[String], width: f64) -> Vec<Line> {
    let mut lines = Vec::new();
    let mut cur: Vec<String> = Vec::new();
    let mut used = 0.0;
    for w in words {
        let add = (w.chars().count() as f64 + if cur.is_empty() { 0.0 } else { 1.0 }) * CHAR_W;
        if !cur.is_empty() && used + add > width {
            lines.push(Line {
                cells: vec![Cell::left(&cur.join(" "), MARGIN)],
                pitch: TEXT_PITCH,
            });
            cur.clear();
            used = 0.0;
        }
        used += (w.chars().count() as f64 + if cur.is_empty() { 0.0 } else { 1.0 }) * CHAR_W;
        cur.push(w.clone());
    }
    if !cur.is_empty() {
        lines.push(Line {
            cells: vec![Cell::left(&cur.join(" "), MARGIN)],
            pitch: TEXT_PITCH,
        });
    }
    lines
}

fn text_lines(rng: &mut ChaCha8Rng, spec: &GenSpec, words: usize) -> Vec<Line> {
    let mut all = Vec::new();
    let mut left = words;
    while left > 0 {
        let k = rng.gen_range(6..=12).min(left).max(2.min(left));
        all.extend(sentence(rng, k).split(' ').map(str::to_string));
        left -= k;
    }
    wrap(&all, spec.page_w - 2.0 * MARGIN)
}

struct Gold {
    income: (String, String),
    spending: (String, String),
    date: (String, String),
}

fn distinct_amount(rng: &mut ChaCha8Rng, gold: &Gold) -> (String, String) {
    loop {
        let a = amount(rng);
        if a.1 != gold.income.1 && a.1 != gold.spending.1 {
            return a;
        }
    }
}

fn labelled_rows(rng: &mut ChaCha8Rng, spec: &GenSpec, gold: &Gold, values: usize) -> Vec<(String, Vec<String>)> {
    let mut rows: Vec<(String, Vec<String>)> = Vec::with_capacity(spec.rows);
    rows.push((INCOME_LABELS.choose(rng).unwrap().to_string(), vec![gold.income.0.clone()]));
    rows.push((SPENDING_LABELS.choose(rng).unwrap().to_string(), vec![gold.spending.0.clone()]));
    rows.push((DATE_LABELS.choose(rng).unwrap().to_string(), vec![gold.date.0.clone()]));
    for label in DISTRACTOR_LABELS.choose_multiple(rng, spec.rows - 3) {
        rows.push((label.to_string(), (0..values).map(|_| distinct_amount(rng, gold).0).collect()));
    }
    for r in &mut rows[..2] {
        while r.1.len() < values {
            r.1.push(distinct_amount(rng, gold).0);
        }
    }
    rows[2].1.resize(values, String::new());
    rows.shuffle(rng);
    rows
}

fn layout_doc(rng: &mut ChaCha8Rng, spec: &GenSpec, lines: &[Line]) -> Vec<Token> {
    let a = spec.noise * FONT;
    let mut y = MARGIN;
    let mut tokens = Vec::new();
    for line in lines {
        for cell in &line.cells {
            let mut x = if cell.right_aligned { cell.x - cell.width() } else { cell.x };
            for w in &cell.words {
                let width = w.chars().count() as f64 * CHAR_W;
                let (dx, dy) = if a > 0.0 {
                    (rng.gen_range(-a..=a), rng.gen_range(-a..=a))
                } else {
                    (0.0, 0.0)
                };
                let bbox = BBox::new(x + dx, y + dy, x + dx + width, y + dy + FONT)
                    .clamp_to(&BBox::new(0.0, 0.0, spec.page_w, spec.page_h));
                tokens.push(Token {
                    text: w.clone(),
                    bbox,
                });
                x += width + CHAR_W;
            }
        }
        y += line.pitch;
    }
    tokens
}

/// One page, a pure function of `(spec, seed)`.
pub fn gen_document(spec: &GenSpec, seed: u64) -> Result<Document> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gold = {
        let income = amount(&mut rng);
        let spending = loop {
            let s = amount(&mut rng);
            if s.1 != income.1 {
                break s;
            }
        };
        Gold {
            income,
            spending,
            date: date(&mut rng),
        }
    };
    let year = &gold.date.1[..4];
    let org = org_name(spec.vocab_seed, &mut rng);
    let right = spec.page_w - MARGIN - 40.0;

    let mut lines = vec![Line {
        cells: vec![Cell::left(&format!("{org} Annual Report {year}"), MARGIN)],
        pitch: 2.0 * TEXT_PITCH,
    }];
    match spec.doc_type {
        DocType::KvTable => {
            lines.extend(text_lines(&mut rng, spec, 20));
            lines.push(Line {
                cells: vec![],
                pitch: TEXT_PITCH,
            });
            for (label, vals) in labelled_rows(&mut rng, spec, &gold, 1) {
                lines.push(Line {
                    cells: vec![Cell::left(&label, MARGIN), Cell::right(&vals[0], right)],
                    pitch: ROW_PITCH,
                });
            }
        }
        DocType::TwoColumnTable => {
            lines.extend(text_lines(&mut rng, spec, 16));
            let prior = (year.parse::<u32>().unwrap_or(2000) - 1).to_string();
            lines.push(Line {
                cells: vec![Cell::right(year, right - 100.0), Cell::right(&prior, right)],
                pitch: ROW_PITCH,
            });
            for (label, vals) in labelled_rows(&mut rng, spec, &gold, 2) {
                let mut cells = vec![Cell::left(&label, MARGIN), Cell::right(&vals[0], right - 100.0)];
                if !vals[1].is_empty() {
                    cells.push(Cell::right(&vals[1], right));
                }
                lines.push(Line {
                    cells,
                    pitch: ROW_PITCH,
                });
            }
        }
        DocType::Form => {
            lines.extend(text_lines(&mut rng, spec, 14));
            for (label, vals) in labelled_rows(&mut rng, spec, &gold, 1) {
                lines.push(Line {
                    cells: vec![Cell::left(&format!("{label}:"), MARGIN), Cell::left(&vals[0], MARGIN + 180.0)],
                    pitch: ROW_PITCH,
                });
            }
        }
        DocType::PlainText => {
            let mut words: Vec<String> = Vec::new();
            let mut say = |rng: &mut ChaCha8Rng, text: String| {
                for _ in 0..rng.gen_range(1..3) {
                    let k = rng.gen_range(6..=12);
                    words.extend(sentence(rng, k).split(' ').map(str::to_string));
                }
                words.extend(text.split(' ').map(str::to_string));
            };
            say(&mut rng, format!("Total income for the year was {} in total.", gold.income.0));
            say(&mut rng, format!("Total expenditure amounted to {} overall.", gold.spending.0));
            for _ in 0..spec.rows.saturating_sub(3) {
                let (label, value) = (DISTRACTOR_LABELS.choose(&mut rng).unwrap(), distinct_amount(&mut rng, &gold).0);
                say(&mut rng, format!("{label} came to {value} in the period."));
            }
            say(&mut rng, format!("The report was approved on {} by the board.", gold.date.0));
            lines.extend(wrap(&words, spec.page_w - 2.0 * MARGIN));
        }
    }
    let footer = format!("Registered charity number {}", rng.gen_range(200_000..1_200_000));
    lines.push(Line {
        cells: vec![Cell::left(&footer, MARGIN)],
        pitch: TEXT_PITCH,
    });

    let page = BBox::new(0.0, 0.0, spec.page_w, spec.page_h);
    let used: f64 = lines.iter().map(|l| l.pitch).sum::<f64>() + MARGIN;
    if used > spec.page_h {
        return Err(Error::Config(format!("{} rows do not fit a {}pt page", spec.rows, spec.page_h)));
    }
    let doc = Document {
        tokens: layout_doc(&mut rng, spec, &lines),
        page,
        attrs: [
            ("income".to_string(), gold.income.1),
            ("spending".to_string(), gold.spending.1),
            ("date".to_string(), gold.date.1),
        ]
        .into(),
    };
    perturb_reading_order(&doc, spec.reading_order)
}

/// Split a line (token indices in reading order) into cells at wide gaps.
fn cells_of(doc: &Document, line: &[usize]) -> Vec<Vec<usize>> {
    let mut cells: Vec<Vec<usize>> = Vec::new();
    for (j, &t) in line.iter().enumerate() {
        let b = &doc.tokens[t].bbox;
        let split = j > 0 && {
            let p = &doc.tokens[line[j - 1]].bbox;
            let h = 0.5 * (p.height() + b.height());
            b.x1 - p.x2 > CELL_GAP * h || b.x1 < p.x1
        };
        match cells.last_mut() {
            Some(c) if !split => c.push(t),
            _ => cells.push(vec![t]),
        }
    }
    cells
}

fn span(doc: &Document, cell: &[usize]) -> (f64, f64) {
    cell.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &t| {
        (lo.min(doc.tokens[t].bbox.x1), hi.max(doc.tokens[t].bbox.x2))
    })
}

/// Reorder tokens so that, inside every run of multi-cell lines, cells are
/// read column by column. Boxes travel with their tokens.
pub fn perturb_reading_order(doc: &Document, mode: ReadingOrder) -> Result<Document> {
    if mode == ReadingOrder::RowMajor {
        return Ok(doc.clone());
    }
    let lines: Vec<Vec<Vec<usize>>> = segment_lines(doc).iter().map(|s| cells_of(doc, &s.tokens)).collect();
    let mut order: Vec<usize> = Vec::with_capacity(doc.tokens.len());
    let mut i = 0;
    while i < lines.len() {
        if lines[i].len() < 2 {
            order.extend(lines[i].iter().flatten());
            i += 1;
            continue;
        }
        let mut j = i;
        while j < lines.len() && lines[j].len() >= 2 {
            j += 1;
        }
        let block = &lines[i..j];
        // merge overlapping horizontal extents into column bands
        let mut extents: Vec<(f64, f64)> = block.iter().flatten().map(|c| span(doc, c)).collect();
        extents.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut bands: Vec<(f64, f64)> = Vec::new();
        for (lo, hi) in extents {
            match bands.last_mut() {
                Some(b) if lo <= b.1 => b.1 = b.1.max(hi),
                _ => bands.push((lo, hi)),
            }
        }
        for band in &bands {
            for line in block {
                for cell in line {
                    let (lo, _) = span(doc, cell);
                    if lo >= band.0 && lo <= band.1 {
                        order.extend(cell);
                    }
                }
            }
        }
        i = j;
    }
    if order.len() != doc.tokens.len() {
        return Err(Error::contract("column detection lost tokens"));
    }
    Ok(Document {
        tokens: order.iter().map(|&t| doc.tokens[t].clone()).collect(),
        page: doc.page,
        attrs: doc.attrs.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub mean_tokens: f64,
    pub histogram: Vec<HistogramBin>,
}

pub const HISTOGRAM_BIN: usize = 25;

impl CorpusStats {
    pub fn of(docs: &[Document]) -> Self {
        let counts: Vec<usize> = docs.iter().map(|d| d.tokens.len()).collect();
        let mut bins: BTreeMap<usize, usize> = BTreeMap::new();
        for &c in &counts {
            *bins.entry(c / HISTOGRAM_BIN).or_default() += 1;
        }
        Self {
            documents: docs.len(),
            min_tokens: counts.iter().copied().min().unwrap_or(0),
            max_tokens: counts.iter().copied().max().unwrap_or(0),
            mean_tokens: if counts.is_empty() {
                0.0
            } else {
                counts.iter().sum::<usize>() as f64 / counts.len() as f64
            },
            histogram: bins
                .into_iter()
                .map(|(b, count)| HistogramBin {
                    lo: b * HISTOGRAM_BIN,
                    hi: (b + 1) * HISTOGRAM_BIN - 1,
                    count,
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }
}

/// `count` documents with seeds `seed..seed+count`.
pub fn gen_documents(spec: &GenSpec, count: usize, seed: u64, exec: Exec) -> Result<Vec<Document>> {
    if count == 0 {
        return Err(Error::contract("count must be at least 1"));
    }
    exec.map_range(count, |i| gen_document(spec, seed + i as u64))
        .into_iter()
        .collect()
}

/// Write the corpus to `out` (JSONL) and its stats next to it
/// (`<out>.stats.json`).
pub fn gen_corpus(spec: &GenSpec, count: usize, out: &Path, seed: u64, exec: Exec) -> Result<CorpusStats> {
    let docs = gen_documents(spec, count, seed, exec)?;
    let stats = CorpusStats::of(&docs);
    write_atomic(out, to_jsonl(&docs).as_bytes())?;
    write_atomic(&stats_path(out), stats.to_json().as_bytes())?;
    Ok(stats)
}

pub fn stats_path(corpus: &Path) -> std::path::PathBuf {
    let mut name = corpus.file_name().unwrap_or_default().to_os_string();
    name.push(".stats.json");
    corpus.with_file_name(name)
}
