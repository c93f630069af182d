//! Byte-level BPE with bounding-box propagation to sub-words.
//!
//! Symbols are whole characters: ASCII characters map to their byte token,
//! other characters seen during training get a dedicated symbol, and
//! characters never seen become `UNK` pieces that keep their text.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::doc_model::{interpolate_subword_boxes, BBox, Document, PageGeometry};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const CLS: u32 = 3;
pub const SEP: u32 = 4;
pub const NUM_SPECIALS: u32 = 5;
/// Specials plus the 256 byte tokens.
pub const BASE_VOCAB: usize = NUM_SPECIALS as usize + 256;

const SPECIAL_NAMES: [&str; NUM_SPECIALS as usize] = ["PAD", "UNK", "MASK", "CLS", "SEP"];

#[derive(Debug, Clone, PartialEq)]
pub struct BpeVocab {
    /// Byte string of every non-special token, indexed by id; specials are empty.
    tokens: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, u32>,
    merges: Vec<(u32, u32)>,
    merge_rank: HashMap<(u32, u32), (usize, u32)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Piece {
    pub text: String,
    pub id: u32,
    pub char_count: usize,
}

fn byte_id(b: u8) -> u32 {
    NUM_SPECIALS + b as u32
}

impl BpeVocab {
    fn base() -> Self {
        let mut v = Self {
            tokens: vec![Vec::new(); NUM_SPECIALS as usize],
            index: HashMap::new(),
            merges: Vec::new(),
            merge_rank: HashMap::new(),
        };
        for b in 0..=255u8 {
            v.push_token(vec![b]);
        }
        v
    }

    fn push_token(&mut self, bytes: Vec<u8>) -> u32 {
        let id = self.tokens.len() as u32;
        self.index.insert(bytes.clone(), id);
        self.tokens.push(bytes);
        id
    }

    fn push_merge(&mut self, pair: (u32, u32)) -> u32 {
        let mut joined = self.tokens[pair.0 as usize].clone();
        joined.extend_from_slice(&self.tokens[pair.1 as usize]);
        let id = match self.index.get(&joined) {
            Some(&id) => id,
            None => self.push_token(joined),
        };
        self.merge_rank.insert(pair, (self.merges.len(), id));
        self.merges.push(pair);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Printable form of a token.
    pub fn token_text(&self, id: u32) -> String {
        if id < NUM_SPECIALS {
            return format!("<{}>", SPECIAL_NAMES[id as usize].to_lowercase());
        }
        String::from_utf8_lossy(&self.tokens[id as usize]).into_owned()
    }

    fn char_symbol(&self, c: char) -> Option<u32> {
        if c.is_ascii() {
            return Some(byte_id(c as u8));
        }
        let mut buf = [0u8; 4];
        self.index.get(c.encode_utf8(&mut buf).as_bytes()).copied()
    }

    fn symbol_bytes(&self, id: u32) -> &[u8] {
        &self.tokens[id as usize]
    }
}

/// Learn merges from the words of `corpus` until the vocabulary reaches
/// `vocab_size` or no pair remains. Most frequent pair first; ties go to the
/// lexicographically smaller `(left, right)` byte strings.
pub fn bpe_train<'a>(corpus: impl IntoIterator<Item = &'a str>, vocab_size: usize) -> Result<BpeVocab> {
    if vocab_size < BASE_VOCAB {
        return Err(Error::contract(format!(
            "vocab_size {vocab_size} below the {BASE_VOCAB} base tokens"
        )));
    }
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for w in corpus {
        if !w.is_empty() {
            *counts.entry(w).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::contract("empty BPE training corpus"));
    }
    let mut vocab = BpeVocab::base();
    let mut wide: Vec<char> = counts
        .keys()
        .flat_map(|w| w.chars())
        .filter(|c| !c.is_ascii())
        .collect();
    wide.sort_unstable();
    wide.dedup();
    for c in wide {
        if vocab.len() >= vocab_size {
            break;
        }
        vocab.push_token(c.to_string().into_bytes());
    }

    let mut words: Vec<(Vec<u32>, u64)> = counts
        .iter()
        .map(|(w, &n)| (w.chars().map(|c| vocab.char_symbol(c).unwrap_or(UNK)).collect(), n))
        .collect();

    while vocab.len() < vocab_size {
        let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
        for (syms, n) in &words {
            for w in syms.windows(2) {
                if w[0] != UNK && w[1] != UNK {
                    *pairs.entry((w[0], w[1])).or_default() += n;
                }
            }
        }
        let best = pairs.into_iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                let ka = (vocab.symbol_bytes(pa.0), vocab.symbol_bytes(pa.1));
                let kb = (vocab.symbol_bytes(pb.0), vocab.symbol_bytes(pb.1));
                kb.cmp(&ka)
            })
        });
        let Some((pair, _)) = best else { break };
        let new_id = vocab.push_merge(pair);
        for (syms, _) in &mut words {
            merge_in_place(syms, pair, new_id);
        }
    }
    Ok(vocab)
}

fn merge_in_place(syms: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    *syms = out;
}

/// Split `text` into sub-word pieces by replaying merges in rank order.
pub fn bpe_encode(text: &str, vocab: &BpeVocab) -> Vec<Piece> {
    // (id, text) per piece; UNK pieces never merge.
    let mut pieces: Vec<(u32, String, usize)> = text
        .chars()
        .map(|c| (vocab.char_symbol(c).unwrap_or(UNK), c.to_string(), 1))
        .collect();
    loop {
        let best = pieces
            .windows(2)
            .enumerate()
            .filter_map(|(i, w)| {
                vocab
                    .merge_rank
                    .get(&(w[0].0, w[1].0))
                    .map(|&(rank, id)| (rank, i, id))
            })
            .min();
        let Some((rank, _, new_id)) = best else { break };
        let pair = vocab.merges[rank];
        let mut out: Vec<(u32, String, usize)> = Vec::with_capacity(pieces.len());
        let mut it = pieces.into_iter().peekable();
        while let Some(cur) = it.next() {
            if cur.0 == pair.0 && it.peek().is_some_and(|n| n.0 == pair.1) {
                let next = it.next().expect("peeked");
                out.push((new_id, cur.1 + &next.1, cur.2 + next.2));
            } else {
                out.push(cur);
            }
        }
        pieces = out;
    }
    pieces
        .into_iter()
        .map(|(id, text, char_count)| Piece { text, id, char_count })
        .collect()
}

/// Sub-word ids with their interpolated boxes and the original token each
/// sub-word came from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EncodedDoc {
    pub ids: Vec<u32>,
    pub boxes: Vec<BBox>,
    pub token_of: Vec<usize>,
    pub pieces: Vec<String>,
}

impl EncodedDoc {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn encode_document(doc: &Document, vocab: &BpeVocab) -> EncodedDoc {
    let mut out = EncodedDoc::default();
    for (ti, tok) in doc.tokens.iter().enumerate() {
        let pieces = bpe_encode(&tok.text, vocab);
        if pieces.is_empty() {
            continue;
        }
        let counts: Vec<usize> = pieces.iter().map(|p| p.char_count).collect();
        let boxes = interpolate_subword_boxes(&tok.bbox, &counts).expect("pieces are non-empty");
        for (p, b) in pieces.into_iter().zip(boxes) {
            out.ids.push(p.id);
            out.boxes.push(b);
            out.token_of.push(ti);
            out.pieces.push(p.text);
        }
    }
    out
}

/// Box assigned to special tokens: the whole normalized page.
pub fn special_box(geom: &PageGeometry) -> BBox {
    BBox::new(0.0, 0.0, geom.w, geom.h)
}

fn escape(bytes: &[u8]) -> String {
    let mut s = String::new();
    match std::str::from_utf8(bytes) {
        Ok(text) => {
            for c in text.chars() {
                match c {
                    '\\' => s.push_str("\\\\"),
                    ' ' => s.push_str("\\s"),
                    '\t' => s.push_str("\\t"),
                    '\n' => s.push_str("\\n"),
                    '\r' => s.push_str("\\r"),
                    c if c.is_control() => {
                        let mut buf = [0u8; 4];
                        for b in c.encode_utf8(&mut buf).bytes() {
                            let _ = write!(s, "\\x{b:02x}");
                        }
                    }
                    c => s.push(c),
                }
            }
        }
        Err(_) => {
            for b in bytes {
                let _ = write!(s, "\\x{b:02x}");
            }
        }
    }
    s
}

fn unescape(s: &str, loc: &dyn Fn() -> String) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            let mut buf = [0u8; 4];
            out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            continue;
        }
        match chars.next() {
            Some('\\') => out.push(b'\\'),
            Some('s') => out.push(b' '),
            Some('t') => out.push(b'\t'),
            Some('n') => out.push(b'\n'),
            Some('r') => out.push(b'\r'),
            Some('x') => {
                let hex: String = chars.by_ref().take(2).collect();
                let b = u8::from_str_radix(&hex, 16)
                    .map_err(|_| Error::parse(loc(), format!("bad escape \\x{hex}")))?;
                out.push(b);
            }
            other => return Err(Error::parse(loc(), format!("bad escape {other:?}"))),
        }
    }
    Ok(out)
}

impl BpeVocab {
    /// Text form: a header, one `left<SP>right` merge per line in rank
    /// order, then one `token<TAB>id` line per token.
    pub fn to_text(&self) -> String {
        let mut s = format!("#bpe merges={} tokens={}\n", self.merges.len(), self.tokens.len());
        for &(a, b) in &self.merges {
            let _ = writeln!(s, "{} {}", escape(self.symbol_bytes(a)), escape(self.symbol_bytes(b)));
        }
        for (id, bytes) in self.tokens.iter().enumerate() {
            let text = if (id as u32) < NUM_SPECIALS {
                format!("\\!{}", SPECIAL_NAMES[id])
            } else {
                escape(bytes)
            };
            let _ = writeln!(s, "{text}\t{id}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::parse("vocab", "empty file"))?;
        let field = |key: &str| -> Result<usize> {
            header
                .split_whitespace()
                .find_map(|kv| kv.strip_prefix(key))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::parse("vocab:1", format!("missing {key}")))
        };
        let (n_merges, n_tokens) = (field("merges=")?, field("tokens=")?);
        let mut merge_strs = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let (i, line) = lines.next().ok_or_else(|| Error::parse("vocab", "truncated merges"))?;
            let loc = || format!("vocab:{}", i + 1);
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| Error::parse(loc(), "merge needs two symbols"))?;
            merge_strs.push((unescape(a, &loc)?, unescape(b, &loc)?));
        }
        let mut tokens = Vec::with_capacity(n_tokens);
        for expected in 0..n_tokens {
            let (i, line) = lines.next().ok_or_else(|| Error::parse("vocab", "truncated tokens"))?;
            let loc = || format!("vocab:{}", i + 1);
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::parse(loc(), "token line needs token<TAB>id"))?;
            if id.parse::<usize>().ok() != Some(expected) {
                return Err(Error::parse(loc(), format!("ids must be dense; expected {expected}")));
            }
            tokens.push(if expected < NUM_SPECIALS as usize {
                Vec::new()
            } else {
                unescape(tok, &loc)?
            });
        }
        let mut v = BpeVocab {
            index: tokens
                .iter()
                .enumerate()
                .skip(NUM_SPECIALS as usize)
                .map(|(i, t)| (t.clone(), i as u32))
                .collect(),
            tokens,
            merges: Vec::new(),
            merge_rank: HashMap::new(),
        };
        for (a, b) in merge_strs {
            let (Some(&ia), Some(&ib)) = (v.index.get(&a), v.index.get(&b)) else {
                return Err(Error::parse("vocab", "merge refers to unknown token"));
            };
            let mut joined = a.clone();
            joined.extend_from_slice(&b);
            let id = *v
                .index
                .get(&joined)
                .ok_or_else(|| Error::parse("vocab", "merge result missing from tokens"))?;
            v.merge_rank.insert((ia, ib), (v.merges.len(), id));
            v.merges.push((ia, ib));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::numerics::checkpoint::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
