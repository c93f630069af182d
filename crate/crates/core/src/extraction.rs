//! Key-information extraction around a token tagger: automatic labelling
//! of training data, entity decoding, value normalization, aggregation of
//! duplicate detections, and end-to-end scoring.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::doc_model::Document;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Date,
    Amount,
    Text,
}

impl FromStr for DType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "date" => Ok(DType::Date),
            "amount" => Ok(DType::Amount),
            "text" => Ok(DType::Text),
            other => Err(Error::Config(format!("unknown data type {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntityClass {
    pub key: String,
    pub dtype: DType,
}

/// Ordered entity classes. Class index 0 is "outside"; key `i` is class
/// `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub classes: Vec<EntityClass>,
}

impl Task {
    pub fn new(classes: Vec<EntityClass>) -> Result<Self> {
        let keys: BTreeSet<&str> = classes.iter().map(|c| c.key.as_str()).collect();
        if keys.len() != classes.len() {
            return Err(Error::contract("entity keys must be unique"));
        }
        Ok(Self { classes })
    }

    /// income, spending (amounts) and date.
    pub fn financial() -> Self {
        let c = |k: &str, d| EntityClass {
            key: k.to_string(),
            dtype: d,
        };
        Self {
            classes: vec![c("income", DType::Amount), c("spending", DType::Amount), c("date", DType::Date)],
        }
    }

    /// Number of tagger outputs, including "outside".
    pub fn num_labels(&self) -> usize {
        self.classes.len() + 1
    }

    pub fn dtype_of(&self, key: &str) -> Option<DType> {
        self.classes.iter().find(|c| c.key == key).map(|c| c.dtype)
    }

    /// `key:dtype` list, comma-separated.
    pub fn to_spec(&self) -> String {
        self.classes
            .iter()
            .map(|c| format!("{}:{}", c.key, serde_json::to_value(c.dtype).expect("enum").as_str().unwrap_or("")))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn from_spec(spec: &str) -> Result<Self> {
        let classes = spec
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|item| {
                let (k, d) = item
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("task entry {item:?} needs key:dtype")))?;
                Ok(EntityClass {
                    key: k.trim().to_string(),
                    dtype: d.trim().parse()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if classes.is_empty() {
            return Err(Error::Config("empty task".into()));
        }
        Self::new(classes)
    }
}

const MONTHS: [&str; 12] = [
    "january", "february", "march", "april", "may", "june", "july", "august", "september", "october", "november",
    "december",
];

fn month_number(word: &str) -> Option<u32> {
    let w = word.trim_end_matches('.').to_lowercase();
    if w.len() < 3 {
        return None;
    }
    MONTHS
        .iter()
        .position(|m| *m == w || (w.len() >= 3 && m.starts_with(&w) && (w.len() == 3 || w == "sept")))
        .map(|i| i as u32 + 1)
}

fn day_number(word: &str) -> Option<u32> {
    let w = word.to_lowercase();
    let digits = ["st", "nd", "rd", "th"]
        .iter()
        .find_map(|s| w.strip_suffix(s))
        .unwrap_or(&w);
    if digits.is_empty() || digits.len() > 2 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

fn year_number(word: &str) -> Option<i32> {
    (word.len() == 4 && word.bytes().all(|b| b.is_ascii_digit()))
        .then(|| word.parse().ok())
        .flatten()
}

fn days_in_month(y: i32, m: u32) -> u32 {
    match m {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        _ if (y % 4 == 0 && y % 100 != 0) || y % 400 == 0 => 29,
        _ => 28,
    }
}

fn iso(y: i32, m: u32, d: u32) -> Option<String> {
    ((1..=12).contains(&m) && d >= 1 && d <= days_in_month(y, m)).then(|| format!("{y:04}-{m:02}-{d:02}"))
}

fn parse_date(text: &str) -> Option<String> {
    let t = text.trim();
    let numeric: Vec<&str> = t.split(['-', '/', '.']).collect();
    if numeric.len() == 3 && numeric.iter().all(|p| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit())) {
        let n: Vec<u32> = numeric.iter().map(|p| p.parse().ok()).collect::<Option<_>>()?;
        return if numeric[0].len() == 4 && t.contains('-') {
            iso(n[0] as i32, n[1], n[2])
        } else if numeric[2].len() == 4 && t.contains('/') {
            // month first
            iso(n[2] as i32, n[0], n[1])
        } else {
            None
        };
    }
    let words: Vec<&str> = t
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|w| !w.is_empty())
        .collect();
    match words.as_slice() {
        [d, m, y] if day_number(d).is_some() => iso(year_number(y)?, month_number(m)?, day_number(d)?),
        [m, d, y] => iso(year_number(y)?, month_number(m)?, day_number(d)?),
        [d, "of", m, y] => iso(year_number(y)?, month_number(m)?, day_number(d)?),
        _ => None,
    }
}

fn parse_amount(text: &str) -> Option<String> {
    let mut s: String = text
        .trim()
        .chars()
        .filter(|c| !matches!(c, ',' | ' ' | '£' | '$' | '€'))
        .collect();
    for code in ["GBP", "USD", "EUR"] {
        if let Some(rest) = s.strip_prefix(code) {
            s = rest.to_string();
        }
    }
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s.as_str()),
    };
    let (int, frac) = body.split_once('.').unwrap_or((body, ""));
    if int.is_empty() || !int.bytes().all(|b| b.is_ascii_digit()) || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if frac.len() > 2 {
        return None;
    }
    let int = int.trim_start_matches('0');
    let int = if int.is_empty() { "0" } else { int };
    let frac = format!("{frac:0<2}");
    let sign = if neg && (int != "0" || frac != "00") { "-" } else { "" };
    Some(format!("{sign}{int}.{frac}"))
}

fn normalize_text(text: &str) -> Option<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| !(c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace())))
        .flat_map(char::to_lowercase)
        .collect();
    let out = cleaned.split_whitespace().collect::<Vec<_>>().join(" ");
    (!out.is_empty()).then_some(out)
}

/// Canonical form of a value, or `None` if it does not parse as `dtype`.
pub fn normalize_value(dtype: DType, text: &str) -> Option<String> {
    match dtype {
        DType::Date => parse_date(text),
        DType::Amount => parse_amount(text),
        DType::Text => normalize_text(text),
    }
}

/// Longest token window considered when matching gold values.
pub const MAX_WINDOW: usize = 8;

/// Label tokens whose window text normalizes to a gold value. Overlapping
/// matches go to the longer window, then to the earlier key.
pub fn auto_tag(doc: &Document, task: &Task) -> Vec<usize> {
    let texts: Vec<&str> = doc.texts();
    let mut matches: Vec<(usize, usize, usize)> = Vec::new(); // (len, key, start)
    for (k, class) in task.classes.iter().enumerate() {
        let Some(gold) = doc.attrs.get(&class.key).and_then(|g| normalize_value(class.dtype, g)) else {
            continue;
        };
        for len in 1..=MAX_WINDOW.min(texts.len()) {
            for start in 0..=texts.len() - len {
                let window = texts[start..start + len].join(" ");
                if normalize_value(class.dtype, &window).as_deref() == Some(gold.as_str()) {
                    matches.push((len, k, start));
                }
            }
        }
    }
    matches.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut labels = vec![0; texts.len()];
    for (len, k, start) in matches {
        if labels[start..start + len].iter().all(|&l| l == 0) {
            labels[start..start + len].fill(k + 1);
        }
    }
    labels
}

/// Spread original-token labels to sub-word positions.
pub fn subword_labels(token_labels: &[usize], token_of: &[usize]) -> Vec<usize> {
    token_of.iter().map(|&t| token_labels[t]).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entity {
    pub key: String,
    pub text: String,
    pub normalized: Option<String>,
    pub score: f64,
    pub span: Range<usize>,
}

/// Maximal runs of one non-outside class. The score is the geometric mean
/// of the member tokens' probabilities.
pub fn decode_entities(texts: &[&str], labels: &[usize], probs: &[f64], task: &Task) -> Result<Vec<Entity>> {
    if texts.len() != labels.len() || labels.len() != probs.len() {
        return Err(Error::contract("texts, labels and scores differ in length"));
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < labels.len() {
        let c = labels[i];
        let mut j = i + 1;
        while j < labels.len() && labels[j] == c {
            j += 1;
        }
        if c != 0 {
            let class = task
                .classes
                .get(c - 1)
                .ok_or_else(|| Error::contract(format!("label {c} outside the task")))?;
            let log_mean = probs[i..j].iter().map(|p| p.max(1e-300).ln()).sum::<f64>() / (j - i) as f64;
            let text = texts[i..j].join(" ");
            out.push(Entity {
                key: class.key.clone(),
                normalized: normalize_value(class.dtype, &text),
                text,
                score: log_mean.exp(),
                span: i..j,
            });
        }
        i = j;
    }
    Ok(out)
}

/// Sum scores per normalized value and return the best value with its
/// summed score. Ties go to the group whose first span starts earliest.
pub fn aggregate_select(entities: &[Entity]) -> Option<(String, f64)> {
    let mut groups: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for e in entities {
        let Some(v) = e.normalized.as_deref() else { continue };
        let g = groups.entry(v).or_insert((0.0, usize::MAX));
        g.0 += e.score;
        g.1 = g.1.min(e.span.start);
    }
    groups
        .into_iter()
        .max_by(|a, b| a.1 .0.total_cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
        .map(|(v, (s, _))| (v.to_string(), s))
}

/// One value per key from per-token class probabilities (`tokens × labels`).
pub fn extract_document(texts: &[&str], token_probs: &Tensor, task: &Task) -> Result<BTreeMap<String, (String, f64)>> {
    let (rows, cols) = token_probs.as_matrix_dims();
    if rows != texts.len() || cols != task.num_labels() {
        return Err(Error::Shape {
            lhs: token_probs.shape().to_vec(),
            rhs: vec![texts.len(), task.num_labels()],
            context: "token probabilities",
        });
    }
    let (mut labels, mut probs) = (Vec::with_capacity(rows), Vec::with_capacity(rows));
    for r in 0..rows {
        let row = token_probs.row(r);
        let (c, p) = row
            .iter()
            .enumerate()
            .fold((0, f32::MIN), |best, (c, &p)| if p > best.1 { (c, p) } else { best });
        labels.push(c);
        probs.push(p as f64);
    }
    let entities = decode_entities(texts, &labels, &probs, task)?;
    let mut out = BTreeMap::new();
    for class in &task.classes {
        let mine: Vec<Entity> = entities.iter().filter(|e| e.key == class.key).cloned().collect();
        if let Some(sel) = aggregate_select(&mine) {
            out.insert(class.key.clone(), sel);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Scores {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Scores,
    pub per_key: BTreeMap<String, Scores>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Micro-averaged scores restricted to `keys`.
    pub fn subset(&self, keys: &[&str]) -> Scores {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for k in keys {
            if let Some(s) = self.per_key.get(*k) {
                tp += s.tp;
                fp += s.fp;
                fn_ += s.fn_;
            }
        }
        Scores::from_counts(tp, fp, fn_)
    }
}

/// `(document, key) → normalized value`.
pub type Keyed = BTreeMap<(String, String), String>;

/// Exact-match scoring. A wrong prediction counts as both a false positive
/// and a false negative.
pub fn f1_eval(predictions: &Keyed, golds: &Keyed) -> EvalReport {
    let mut counts: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    let all: BTreeSet<&(String, String)> = predictions.keys().chain(golds.keys()).collect();
    for id in all {
        let c = counts.entry(id.1.as_str()).or_default();
        match (predictions.get(id), golds.get(id)) {
            (Some(p), Some(g)) if p == g => c.0 += 1,
            (Some(_), Some(_)) => {
                c.1 += 1;
                c.2 += 1;
            }
            (Some(_), None) => c.1 += 1,
            (None, Some(_)) => c.2 += 1,
            (None, None) => {}
        }
    }
    let (tp, fp, fn_) = counts
        .values()
        .fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    EvalReport {
        overall: Scores::from_counts(tp, fp, fn_),
        per_key: counts
            .into_iter()
            .map(|(k, c)| (k.to_string(), Scores::from_counts(c.0, c.1, c.2)))
            .collect(),
    }
}

/// Normalized gold values of a set of documents.
pub fn gold_values<'a>(docs: impl IntoIterator<Item = (&'a str, &'a Document)>, task: &Task) -> Keyed {
    let mut out = Keyed::new();
    for (id, doc) in docs {
        for class in &task.classes {
            if let Some(v) = doc.attrs.get(&class.key).and_then(|g| normalize_value(class.dtype, g)) {
                out.insert((id.to_string(), class.key.clone()), v);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub doc_id: String,
    pub key: String,
    pub value: String,
    pub score: f64,
}

pub fn predictions_to_tsv(preds: &[Prediction]) -> String {
    let mut s = String::new();
    for p in preds {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", p.doc_id, p.key, p.value, p.score);
    }
    s
}

pub fn predictions_from_tsv(text: &str) -> Result<Vec<Prediction>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let [doc_id, key, value, score] = f.as_slice() else {
                return Err(Error::parse(format!("predictions:{}", i + 1), "expected 4 tab-separated fields"));
            };
            Ok(Prediction {
                doc_id: doc_id.to_string(),
                key: key.to_string(),
                value: value.to_string(),
                score: score
                    .parse()
                    .map_err(|_| Error::parse(format!("predictions:{}", i + 1), "bad score"))?,
            })
        })
        .collect()
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    predictions_from_tsv(&text)
}

pub fn keyed(preds: &[Prediction]) -> Keyed {
    preds
        .iter()
        .map(|p| ((p.doc_id.clone(), p.key.clone()), p.value.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::doc_model::{BBox, Token};
    use proptest::prelude::*;

    fn doc(words: &[&str], attrs: &[(&str, &str)]) -> Document {
        Document {
            tokens: words
                .iter()
                .enumerate()
                .map(|(i, w)| Token {
                    text: w.to_string(),
                    bbox: BBox::new(i as f64 * 0.1, 0.0, i as f64 * 0.1 + 0.05, 0.02),
                })
                .collect(),
            page: BBox::new(0.0, 0.0, 1.0, 1.0),
            attrs: attrs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_value(DType::Date, "3rd May 2019").unwrap(), "2019-05-03");
        assert_eq!(normalize_value(DType::Date, "3 May 2019").unwrap(), "2019-05-03");
        assert_eq!(normalize_value(DType::Date, "05/03/2019").unwrap(), "2019-05-03");
        assert_eq!(normalize_value(DType::Date, "2019-05-03").unwrap(), "2019-05-03");
        assert_eq!(normalize_value(DType::Date, "May 3, 2019").unwrap(), "2019-05-03");
        assert_eq!(normalize_value(DType::Date, "31st Sept 2020").as_deref(), None);
        assert_eq!(normalize_value(DType::Date, "30th Sept 2020").unwrap(), "2020-09-30");
        assert_eq!(normalize_value(DType::Date, "29 Feb 2019"), None);
        assert_eq!(normalize_value(DType::Date, "2019"), None);
        assert_eq!(normalize_value(DType::Amount, "£1,234").unwrap(), "1234.00");
        assert_eq!(normalize_value(DType::Amount, "1234.5").unwrap(), "1234.50");
        assert_eq!(normalize_value(DType::Amount, "£ 1,234.00").unwrap(), "1234.00");
        assert_eq!(normalize_value(DType::Amount, "Income"), None);
        assert_eq!(normalize_value(DType::Amount, ": £1,000"), None);
        assert_eq!(normalize_value(DType::Text, "  ACME  Ltd. ").unwrap(), "acme ltd");
    }

    #[test]
    fn auto_tag_examples() {
        let d = doc(&["Income", ":", "£1,000"], &[("income", "1000")]);
        assert_eq!(auto_tag(&d, &Task::financial()), vec![0, 0, 1]);
        let d = doc(&["Income", ":", "£1,000"], &[("income", "2000")]);
        assert_eq!(auto_tag(&d, &Task::financial()), vec![0, 0, 0]);
        let d = doc(
            &["Income", "£1,000", "Spending", "£900", "on", "3rd", "May", "2019"],
            &[("income", "1000.00"), ("spending", "900"), ("date", "2019-05-03")],
        );
        assert_eq!(auto_tag(&d, &Task::financial()), vec![0, 1, 0, 2, 0, 3, 3, 3]);
    }

    #[test]
    fn overlap_prefers_longer_then_key_order() {
        let task = Task::new(vec![
            EntityClass {
                key: "a".into(),
                dtype: DType::Text,
            },
            EntityClass {
                key: "b".into(),
                dtype: DType::Text,
            },
        ])
        .unwrap();
        let d = doc(&["red", "fox"], &[("a", "red"), ("b", "red fox")]);
        assert_eq!(auto_tag(&d, &task), vec![2, 2]);
        let d = doc(&["red", "fox"], &[("a", "red"), ("b", "red")]);
        assert_eq!(auto_tag(&d, &task), vec![1, 0]);
    }

    #[test]
    fn decode_examples() {
        let task = Task::financial();
        let e = decode_entities(&["£1", "000"], &[1, 1], &[0.9, 0.4], &task).unwrap();
        assert_eq!(e.len(), 1);
        assert!((e[0].score - 0.6).abs() < 1e-12);
        let e = decode_entities(&["5"], &[2], &[0.7], &task).unwrap();
        assert!((e[0].score - 0.7).abs() < 1e-12);
        let e = decode_entities(&["5", "x", "6"], &[2, 0, 2], &[0.7, 0.9, 0.8], &task).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e[1].span, 2..3);
    }

    fn ent(v: &str, score: f64, start: usize) -> Entity {
        Entity {
            key: "income".into(),
            text: v.into(),
            normalized: Some(v.into()),
            score,
            span: start..start + 1,
        }
    }

    #[test]
    fn aggregate_examples() {
        let es = vec![ent("1000.00", 0.6, 0), ent("1000.00", 0.5, 5), ent("900.00", 0.8, 2)];
        let (v, s) = aggregate_select(&es).unwrap();
        assert_eq!(v, "1000.00");
        assert!((s - 1.1).abs() < 1e-12);
        assert_eq!(aggregate_select(&es[2..]).unwrap().0, "900.00");
        assert_eq!(aggregate_select(&[]), None);
        let tie = vec![ent("b", 0.5, 4), ent("a", 0.5, 1)];
        assert_eq!(aggregate_select(&tie).unwrap().0, "a");
    }

    fn k(d: &str, key: &str, v: &str) -> ((String, String), String) {
        ((d.into(), key.into()), v.into())
    }

    #[test]
    fn f1_examples() {
        let gold: Keyed = [k("1", "x", "a"), k("2", "x", "b"), k("3", "x", "c"), k("4", "x", "d")].into();
        let pred: Keyed = [k("1", "x", "a"), k("2", "x", "b"), k("3", "x", "z")].into();
        let r = f1_eval(&pred, &gold);
        assert!((r.overall.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.overall.recall - 0.5).abs() < 1e-12);
        assert!((r.overall.f1 - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(f1_eval(&gold, &gold).overall.f1, 1.0);
        let none = f1_eval(&Keyed::new(), &gold).overall;
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn oracle_pipeline_is_exact() {
        let task = Task::financial();
        let d = doc(
            &["Total", "income", "£12,500", "Total", "spending", "9,000.00", "Date", "3rd", "May", "2019"],
            &[("income", "12500.00"), ("spending", "9000.00"), ("date", "2019-05-03")],
        );
        let labels = auto_tag(&d, &task);
        let mut probs = vec![0.0f32; labels.len() * task.num_labels()];
        for (i, &l) in labels.iter().enumerate() {
            probs[i * task.num_labels() + l] = 1.0;
        }
        let probs = Tensor::new([labels.len(), task.num_labels()], probs).unwrap();
        let got = extract_document(&d.texts(), &probs, &task).unwrap();
        let preds: Keyed = got.into_iter().map(|(key, (v, _))| (("d".to_string(), key), v)).collect();
        let gold = gold_values([("d", &d)], &task);
        assert_eq!(f1_eval(&preds, &gold).overall.f1, 1.0);
    }

    #[test]
    fn tsv_round_trip() {
        let p = vec![Prediction {
            doc_id: "a:1".into(),
            key: "income".into(),
            value: "10.00".into(),
            score: 0.25,
        }];
        assert_eq!(predictions_from_tsv(&predictions_to_tsv(&p)).unwrap(), p);
        assert!(predictions_from_tsv("a\tb\n").is_err());
        assert_eq!(Task::from_spec(&Task::financial().to_spec()).unwrap(), Task::financial());
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(s in "[A-Za-z0-9£$,./ -]{0,16}") {
            for d in [DType::Date, DType::Amount, DType::Text] {
                if let Some(n) = normalize_value(d, &s) {
                    prop_assert_eq!(normalize_value(d, &n), Some(n.clone()));
                }
            }
        }

        #[test]
        fn amount_formats_agree(v in 0u64..10_000_000, cents in 0u64..100) {
            let plain = format!("{v}.{cents:02}");
            let mut grouped = String::new();
            let digits = v.to_string();
            for (i, c) in digits.chars().enumerate() {
                if i > 0 && (digits.len() - i) % 3 == 0 {
                    grouped.push(',');
                }
                grouped.push(c);
            }
            let fancy = format!("£{grouped}.{cents:02}");
            prop_assert_eq!(normalize_value(DType::Amount, &plain), normalize_value(DType::Amount, &fancy));
        }

        #[test]
        fn decode_preserves_runs(labels in prop::collection::vec(0usize..4, 0..30)) {
            let task = Task::financial();
            let texts: Vec<String> = (0..labels.len()).map(|i| format!("t{i}")).collect();
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let probs = vec![0.5; labels.len()];
            let ents = decode_entities(&refs, &labels, &probs, &task).unwrap();
            let mut rebuilt = vec![0usize; labels.len()];
            for e in &ents {
                let c = task.classes.iter().position(|c| c.key == e.key).unwrap() + 1;
                rebuilt[e.span.clone()].fill(c);
                prop_assert!(e.score > 0.0 && e.score <= 1.0);
            }
            prop_assert_eq!(rebuilt, labels);
        }

        #[test]
        fn aggregate_is_order_invariant(scores in prop::collection::vec((0usize..3, 0.01f64..1.0), 1..10), seed in 0u64..100) {
            let es: Vec<Entity> = scores.iter().enumerate().map(|(i, (v, s))| ent(&v.to_string(), *s, i)).collect();
            let mut shuffled = es.clone();
            use rand::{seq::SliceRandom, SeedableRng};
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = aggregate_select(&es).unwrap();
            let b = aggregate_select(&shuffled).unwrap();
            prop_assert_eq!(a.0, b.0);
            prop_assert!((a.1 - b.1).abs() < 1e-9);
        }
    }
}
