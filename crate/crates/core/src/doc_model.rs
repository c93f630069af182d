//! Pages as token sequences with bounding boxes: parsing, normalization,
//! sub-word box interpolation, page filtering, chunking, line segmentation.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn union(&self, o: &BBox) -> BBox {
        BBox::new(
            self.x1.min(o.x1),
            self.y1.min(o.y1),
            self.x2.max(o.x2),
            self.y2.max(o.y2),
        )
    }

    pub fn clamp_to(&self, page: &BBox) -> BBox {
        let cx = |v: f64| v.clamp(page.x1, page.x2);
        let cy = |v: f64| v.clamp(page.y1, page.y2);
        BBox::new(cx(self.x1), cy(self.y1), cx(self.x2), cy(self.y2))
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    fn from_array(a: [f64; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }

    fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.x1 <= self.x2 && self.y1 <= self.y2
    }

    /// Vertical overlap as a fraction of the smaller height. Two
    /// zero-height boxes on the same y count as fully overlapping.
    pub fn vertical_overlap_ratio(&self, o: &BBox) -> f64 {
        let overlap = self.y2.min(o.y2) - self.y1.max(o.y1);
        let smaller = self.height().min(o.height());
        if smaller <= 0.0 {
            return if overlap >= 0.0 { 1.0 } else { 0.0 };
        }
        overlap / smaller
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub text: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Document {
    pub tokens: Vec<Token>,
    pub page: BBox,
    pub attrs: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct RawToken {
    t: String,
    b: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct RawDocument {
    page: [f64; 4],
    tokens: Vec<RawToken>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    attrs: BTreeMap<String, String>,
}

/// Parse one JSON document. Token boxes overshooting the page are clamped.
pub fn parse_document(bytes: &[u8]) -> Result<Document> {
    let raw: RawDocument =
        serde_json::from_slice(bytes).map_err(|e| Error::parse("document", e.to_string()))?;
    let page = BBox::from_array(raw.page);
    if !page.is_valid() {
        return Err(Error::parse("page", "negative or non-finite extent"));
    }
    let tokens = raw
        .tokens
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let b = BBox::from_array(t.b);
            if !b.is_valid() {
                return Err(Error::parse(
                    format!("token {i}"),
                    format!("invalid box {:?}", t.b),
                ));
            }
            Ok(Token {
                text: t.t,
                bbox: b.clamp_to(&page),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Document {
        tokens,
        page,
        attrs: raw.attrs,
    })
}

impl Document {
    pub fn to_json(&self) -> String {
        let raw = RawDocument {
            page: self.page.to_array(),
            tokens: self
                .tokens
                .iter()
                .map(|t| RawToken {
                    t: t.text.clone(),
                    b: t.bbox.to_array(),
                })
                .collect(),
            attrs: self.attrs.clone(),
        };
        serde_json::to_string(&raw).expect("document serializes")
    }

    pub fn texts(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }

    /// Mean token-box height.
    pub fn mean_line_height(&self) -> f64 {
        if self.tokens.is_empty() {
            return 0.0;
        }
        self.tokens.iter().map(|t| t.bbox.height()).sum::<f64>() / self.tokens.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PageGeometry {
    pub w: f64,
    pub h: f64,
}

/// Similarity transform taking the page to `(0, 0, w, h)` with
/// `max(w, h) = 1`.
pub fn normalize_page(doc: &Document) -> Result<(Document, PageGeometry)> {
    let (pw, ph) = (doc.page.width(), doc.page.height());
    if !(pw > 0.0 && ph > 0.0) {
        return Err(Error::contract(format!(
            "page {:?} has zero area",
            doc.page.to_array()
        )));
    }
    let side = pw.max(ph);
    let (ox, oy) = (doc.page.x1, doc.page.y1);
    let map = |b: &BBox| {
        BBox::new(
            (b.x1 - ox) / side,
            (b.y1 - oy) / side,
            (b.x2 - ox) / side,
            (b.y2 - oy) / side,
        )
    };
    let page = map(&doc.page);
    let tokens = doc
        .tokens
        .iter()
        .map(|t| Token {
            text: t.text.clone(),
            bbox: map(&t.bbox).clamp_to(&page),
        })
        .collect();
    let geom = PageGeometry {
        w: page.x2,
        h: page.y2,
    };
    Ok((
        Document {
            tokens,
            page,
            attrs: doc.attrs.clone(),
        },
        geom,
    ))
}

/// Split `bbox` horizontally in proportion to `char_counts`, assuming every
/// character has the same width. The pieces tile the box exactly.
pub fn interpolate_subword_boxes(bbox: &BBox, char_counts: &[usize]) -> Result<Vec<BBox>> {
    if char_counts.is_empty() {
        return Err(Error::contract("no sub-word character counts"));
    }
    if char_counts.contains(&0) {
        return Err(Error::contract("zero-length sub-word"));
    }
    let total: usize = char_counts.iter().sum();
    let width = bbox.width();
    let mut out = Vec::with_capacity(char_counts.len());
    let mut acc = 0usize;
    let mut left = bbox.x1;
    for (i, &c) in char_counts.iter().enumerate() {
        acc += c;
        let right = if i + 1 == char_counts.len() {
            bbox.x2
        } else {
            bbox.x1 + width * acc as f64 / total as f64
        };
        out.push(BBox::new(left, bbox.y1, right, bbox.y2));
        left = right;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Pages with at least this many lines are checked for uniform text.
    pub plain_min_lines: usize,
    /// Fraction of lines near the median length that marks plain text.
    pub plain_fraction: f64,
    /// "Near the median" tolerance, in tokens.
    pub plain_tolerance: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_tokens: 50,
            max_tokens: 1000,
            plain_min_lines: 20,
            plain_fraction: 0.8,
            plain_tolerance: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterVerdict {
    Accept,
    Reject(RejectReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    TooFew,
    TooMany,
    PlainText,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::TooFew => "too-few",
            RejectReason::TooMany => "too-many",
            RejectReason::PlainText => "plain-text",
        }
    }
}

/// Token-count bounds (original tokens, before sub-word splitting) plus the
/// uniform-line-length heuristic for plain-text pages.
pub fn filter_page(doc: &Document, cfg: &FilterConfig) -> FilterVerdict {
    let n = doc.tokens.len();
    if n < cfg.min_tokens {
        return FilterVerdict::Reject(RejectReason::TooFew);
    }
    if n > cfg.max_tokens {
        return FilterVerdict::Reject(RejectReason::TooMany);
    }
    let mut lengths: Vec<usize> = segment_lines(doc).iter().map(|s| s.tokens.len()).collect();
    if lengths.len() >= cfg.plain_min_lines {
        lengths.sort_unstable();
        let median = lengths[lengths.len() / 2];
        let near = lengths
            .iter()
            .filter(|&&l| l.abs_diff(median) <= cfg.plain_tolerance)
            .count();
        if near as f64 >= cfg.plain_fraction * lengths.len() as f64 {
            return FilterVerdict::Reject(RejectReason::PlainText);
        }
    }
    FilterVerdict::Accept
}

/// Consecutive ranges of at most `max_len` items covering `0..len`.
pub fn chunk_ranges(len: usize, max_len: usize) -> Result<Vec<Range<usize>>> {
    if max_len < 2 {
        return Err(Error::contract(format!("chunk max_len {max_len} < 2")));
    }
    Ok((0..len)
        .step_by(max_len)
        .map(|s| s..(s + max_len).min(len))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub ids: Vec<u32>,
    pub boxes: Vec<BBox>,
}

pub fn chunk_page(ids: &[u32], boxes: &[BBox], max_len: usize) -> Result<Vec<Chunk>> {
    if ids.len() != boxes.len() {
        return Err(Error::Shape {
            lhs: vec![ids.len()],
            rhs: vec![boxes.len()],
            context: "ids and boxes must have equal length",
        });
    }
    Ok(chunk_ranges(ids.len(), max_len)?
        .into_iter()
        .map(|r| Chunk {
            ids: ids[r.clone()].to_vec(),
            boxes: boxes[r].to_vec(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub tokens: Vec<usize>,
    pub bbox: BBox,
}

/// Group reading-order runs whose consecutive members overlap vertically by
/// at least half the smaller height.
pub fn segment_lines(doc: &Document) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (i, tok) in doc.tokens.iter().enumerate() {
        let joins = i > 0 && doc.tokens[i - 1].bbox.vertical_overlap_ratio(&tok.bbox) >= 0.5;
        match out.last_mut() {
            Some(seg) if joins => {
                seg.tokens.push(i);
                seg.bbox = seg.bbox.union(&tok.bbox);
            }
            _ => out.push(Segment {
                tokens: vec![i],
                bbox: tok.bbox,
            }),
        }
    }
    out
}

/// Read a corpus: a JSONL file, a single JSON file, or a directory of
/// `.json`/`.jsonl` files (sorted by name). Returns `(id, document)` pairs.
pub fn read_corpus(path: &Path) -> Result<Vec<(String, Document)>> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("json" | "jsonl")))
            .collect();
        files.sort();
        let mut out = Vec::new();
        for f in files {
            out.extend(read_corpus_file(&f)?);
        }
        return Ok(out);
    }
    read_corpus_file(path)
}

fn read_corpus_file(path: &Path) -> Result<Vec<(String, Document)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if path.extension().and_then(|e| e.to_str()) == Some("json") {
        let doc = parse_document(&bytes).map_err(|e| relocate(e, path, None))?;
        return Ok(vec![(stem, doc)]);
    }
    let text = String::from_utf8(bytes)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let doc = parse_document(line.as_bytes()).map_err(|e| relocate(e, path, Some(i + 1)))?;
            Ok((format!("{stem}:{i}"), doc))
        })
        .collect()
}

fn relocate(e: Error, path: &Path, line: Option<usize>) -> Error {
    match e {
        Error::Parse { location, message } => {
            let at = match line {
                Some(l) => format!("{}:{l} ({location})", path.display()),
                None => format!("{} ({location})", path.display()),
            };
            Error::Parse { location: at, message }
        }
        other => other,
    }
}

pub fn to_jsonl<'a>(docs: impl IntoIterator<Item = &'a Document>) -> String {
    let mut s = String::new();
    for d in docs {
        s.push_str(&d.to_json());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(tokens: &[(&str, [f64; 4])], page: [f64; 4]) -> Document {
        Document {
            tokens: tokens
                .iter()
                .map(|(t, b)| Token {
                    text: t.to_string(),
                    bbox: BBox::from_array(*b),
                })
                .collect(),
            page: BBox::from_array(page),
            attrs: BTreeMap::new(),
        }
    }

    #[test]
    fn parse_examples() {
        let d = parse_document(br#"{"page":[0,0,10,10],"tokens":[{"t":"a","b":[1,1,2,2]}]}"#).unwrap();
        assert_eq!(d.tokens.len(), 1);
        let d = parse_document(br#"{"page":[0,0,10,10],"tokens":[{"t":"a","b":[8,1,12,2]}]}"#).unwrap();
        assert_eq!(d.tokens[0].bbox.x2, 10.0);
        assert!(parse_document(br#"{"tokens":[]}"#).is_err());
        let err = parse_document(
            br#"{"page":[0,0,10,10],"tokens":[{"t":"a","b":[1,1,2,2]},{"t":"b","b":[3,1,2,2]}]}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("token 1"), "{err}");
    }

    #[test]
    fn json_round_trip_with_attrs() {
        let mut d = doc(&[("£1,000", [0.5, 1.25, 3.0, 2.0])], [0.0, 0.0, 612.0, 792.0]);
        d.attrs.insert("income".into(), "1000".into());
        let back = parse_document(d.to_json().as_bytes()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn normalize_examples() {
        let d = doc(&[("x", [61.2, 79.2, 122.4, 158.4])], [0.0, 0.0, 612.0, 792.0]);
        let (n, g) = normalize_page(&d).unwrap();
        assert!((g.w - 612.0 / 792.0).abs() < 1e-12);
        assert_eq!(g.h, 1.0);
        let b = n.tokens[0].bbox;
        let want = [0.077273, 0.1, 0.154545, 0.2];
        for (got, w) in b.to_array().iter().zip(want) {
            assert!((got - w).abs() < 1e-6, "{got} vs {w}");
        }

        let d = doc(&[("x", [0.1, 0.2, 0.3, 0.4])], [0.0, 0.0, 1.0, 1.0]);
        assert_eq!(normalize_page(&d).unwrap().0, d);

        let d = doc(&[], [0.0, 0.0, 800.0, 400.0]);
        let (_, g) = normalize_page(&d).unwrap();
        assert_eq!((g.w, g.h), (1.0, 0.5));

        assert!(normalize_page(&doc(&[], [0.0, 0.0, 0.0, 5.0])).is_err());
    }

    #[test]
    fn interpolation_examples() {
        let b = BBox::new(0.0, 0.0, 6.0, 1.0);
        assert_eq!(
            interpolate_subword_boxes(&b, &[2, 4]).unwrap(),
            vec![BBox::new(0.0, 0.0, 2.0, 1.0), BBox::new(2.0, 0.0, 6.0, 1.0)]
        );
        assert_eq!(interpolate_subword_boxes(&b, &[6]).unwrap(), vec![b]);
        let thirds = interpolate_subword_boxes(&BBox::new(0.0, 0.0, 3.0, 1.0), &[1, 1, 1]).unwrap();
        assert_eq!(thirds[1], BBox::new(1.0, 0.0, 2.0, 1.0));
        assert!(interpolate_subword_boxes(&b, &[2, 0]).is_err());
    }

    fn row_doc(rows: &[usize]) -> Document {
        let mut toks = Vec::new();
        for (r, &n) in rows.iter().enumerate() {
            for c in 0..n {
                let (x, y) = (c as f64 * 10.0, r as f64 * 20.0);
                toks.push(Token {
                    text: format!("w{r}_{c}"),
                    bbox: BBox::new(x, y, x + 8.0, y + 10.0),
                });
            }
        }
        Document {
            tokens: toks,
            page: BBox::new(0.0, 0.0, 1000.0, 1000.0),
            attrs: BTreeMap::new(),
        }
    }

    #[test]
    fn filter_examples() {
        let cfg = FilterConfig::default();
        assert_eq!(
            filter_page(&row_doc(&[7; 7][..]).tap_truncate(49), &cfg),
            FilterVerdict::Reject(RejectReason::TooFew)
        );
        assert_eq!(
            filter_page(&row_doc(&[7; 143][..]).tap_truncate(1001), &cfg),
            FilterVerdict::Reject(RejectReason::TooMany)
        );
        assert_eq!(
            filter_page(&row_doc(&[2, 9, 4, 7, 3, 8, 5, 6, 1, 5]), &cfg),
            FilterVerdict::Accept
        );
        // 25 lines of 10 tokens: uniform block of text
        assert_eq!(
            filter_page(&row_doc(&[10; 25]), &cfg),
            FilterVerdict::Reject(RejectReason::PlainText)
        );
    }

    trait Truncate {
        fn tap_truncate(self, n: usize) -> Self;
    }
    impl Truncate for Document {
        fn tap_truncate(mut self, n: usize) -> Self {
            self.tokens.truncate(n);
            self
        }
    }

    #[test]
    fn chunk_examples() {
        let lens: Vec<usize> = chunk_ranges(1000, 512).unwrap().iter().map(|r| r.len()).collect();
        assert_eq!(lens, vec![512, 488]);
        assert_eq!(chunk_ranges(10, 512).unwrap().len(), 1);
        assert!(chunk_ranges(0, 512).unwrap().is_empty());
        assert!(chunk_ranges(3, 1).is_err());
        assert!(chunk_page(&[1, 2], &[BBox::default()], 4).is_err());
    }

    #[test]
    fn segment_examples() {
        let same = doc(&[("a", [0., 0., 1., 1.]), ("b", [2., 0., 3., 1.])], [0., 0., 10., 10.]);
        assert_eq!(segment_lines(&same).len(), 1);
        let two = doc(&[("a", [0., 0., 1., 1.]), ("b", [0., 2., 1., 3.])], [0., 0., 10., 10.]);
        assert_eq!(segment_lines(&two).len(), 2);
        let one = doc(&[("a", [0., 0., 1., 1.])], [0., 0., 10., 10.]);
        assert_eq!(segment_lines(&one)[0].tokens, vec![0]);
    }

    fn arb_doc() -> impl Strategy<Value = Document> {
        (
            1.0f64..2000.0,
            1.0f64..2000.0,
            prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..0.2, 0.0f64..0.1), 0..40),
        )
            .prop_map(|(w, h, boxes)| {
                let tokens = boxes
                    .into_iter()
                    .enumerate()
                    .map(|(i, (x, y, bw, bh))| Token {
                        text: format!("t{i}"),
                        bbox: BBox::new(x * w, y * h, ((x + bw) * w).min(w), ((y + bh) * h).min(h)),
                    })
                    .collect();
                Document {
                    tokens,
                    page: BBox::new(0.0, 0.0, w, h),
                    attrs: BTreeMap::new(),
                }
            })
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(d in arb_doc()) {
            let (once, g1) = normalize_page(&d).unwrap();
            let (twice, g2) = normalize_page(&once).unwrap();
            prop_assert_eq!(g1, g2);
            prop_assert!((g1.w.max(g1.h) - 1.0).abs() == 0.0);
            prop_assert!((g1.w / g1.h - d.page.width() / d.page.height()).abs() < 1e-9 * (1.0 + d.page.width() / d.page.height()));
            for (a, b) in once.tokens.iter().zip(&twice.tokens) {
                for (x, y) in a.bbox.to_array().iter().zip(b.bbox.to_array()) {
                    prop_assert!((x - y).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn interpolation_tiles_parent(x1 in -5.0f64..5.0, w in 0.0f64..10.0, counts in prop::collection::vec(1usize..12, 1..8)) {
            let b = BBox::new(x1, 0.0, x1 + w, 1.0);
            let parts = interpolate_subword_boxes(&b, &counts).unwrap();
            prop_assert_eq!(parts[0].x1, b.x1);
            prop_assert_eq!(parts.last().unwrap().x2, b.x2);
            for p in parts.windows(2) {
                prop_assert_eq!(p[0].x2, p[1].x1);
            }
        }

        #[test]
        fn chunks_concatenate_to_input(n in 0usize..300, max_len in 2usize..64) {
            let ids: Vec<u32> = (0..n as u32).collect();
            let boxes = vec![BBox::default(); n];
            let chunks = chunk_page(&ids, &boxes, max_len).unwrap();
            prop_assert!(chunks.iter().all(|c| c.ids.len() <= max_len));
            let flat: Vec<u32> = chunks.iter().flat_map(|c| c.ids.clone()).collect();
            prop_assert_eq!(flat, ids);
        }

        #[test]
        fn segments_partition_tokens(d in arb_doc()) {
            let segs = segment_lines(&d);
            let flat: Vec<usize> = segs.iter().flat_map(|s| s.tokens.clone()).collect();
            prop_assert_eq!(flat, (0..d.tokens.len()).collect::<Vec<_>>());
        }
    }
}
