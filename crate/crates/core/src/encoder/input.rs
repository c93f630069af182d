//! Turning normalized documents into model-ready sequences.

use std::sync::Arc;

use super::config::LayoutMode;
use crate::alt_layout::{autoencoder, build_knn_graph, token_segments, NeighborhoodConfig};
use crate::doc_model::{chunk_ranges, BBox, Document};
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};
use crate::tokenizer::{encode_document, BpeVocab, EncodedDoc};

pub const KNN_K: usize = 5;
pub const KNN_P: f64 = 0.5;

/// Segment graph of one document, shared by all its chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct DocGraph {
    pub nbrs: Vec<Vec<usize>>,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SeqLayout {
    None,
    /// Computed on the fly from the sequence boxes.
    Winding,
    /// Precomputed `len × k` layout vectors.
    Dense(Tensor),
    /// Segment graph plus the segment of every position.
    Graph { graph: Arc<DocGraph>, seg_of: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub ids: Vec<u32>,
    pub boxes: Vec<BBox>,
    pub layout: SeqLayout,
    /// Original token index of every position.
    pub token_of: Vec<usize>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Reorder positions: `perm[i]` is the old index placed at `i`.
    pub fn permuted(&self, perm: &[usize]) -> Sequence {
        let layout = match &self.layout {
            SeqLayout::Dense(t) => {
                let cols = t.as_matrix_dims().1;
                let data = perm.iter().flat_map(|&i| t.row(i).to_vec()).collect();
                SeqLayout::Dense(Tensor::new([perm.len(), cols], data).expect("same shape"))
            }
            SeqLayout::Graph { graph, seg_of } => SeqLayout::Graph {
                graph: graph.clone(),
                seg_of: perm.iter().map(|&i| seg_of[i]).collect(),
            },
            other => other.clone(),
        };
        Sequence {
            ids: perm.iter().map(|&i| self.ids[i]).collect(),
            boxes: perm.iter().map(|&i| self.boxes[i]).collect(),
            layout,
            token_of: perm.iter().map(|&i| self.token_of[i]).collect(),
        }
    }
}

/// What is needed to build layout features for a given mode.
#[derive(Debug, Clone, Copy)]
pub struct LayoutContext<'a> {
    pub mode: LayoutMode,
    pub autoencoder: Option<&'a ParamSet>,
    pub neighborhood: NeighborhoodConfig,
}

impl<'a> LayoutContext<'a> {
    pub fn new(mode: LayoutMode, autoencoder: Option<&'a ParamSet>) -> Self {
        Self {
            mode,
            autoencoder,
            neighborhood: NeighborhoodConfig::default(),
        }
    }
}

/// A tokenized document with its document-level layout features.
#[derive(Debug, Clone)]
pub struct PreparedDoc {
    pub enc: EncodedDoc,
    layout: DocLayout,
}

#[derive(Debug, Clone)]
enum DocLayout {
    None,
    Winding,
    Dense(Tensor),
    Graph(Arc<DocGraph>, Vec<usize>),
}

pub fn prepare_document(doc: &Document, vocab: &BpeVocab, ctx: &LayoutContext<'_>) -> Result<PreparedDoc> {
    let enc = encode_document(doc, vocab);
    let layout = match ctx.mode {
        LayoutMode::None => DocLayout::None,
        LayoutMode::Winding => DocLayout::Winding,
        _ if enc.is_empty() => DocLayout::None,
        LayoutMode::Autoencoder => {
            let ae = ctx
                .autoencoder
                .ok_or_else(|| Error::contract("autoencoder layout needs trained autoencoder weights"))?;
            let per_token = autoencoder::embed_document(doc, ae, &ctx.neighborhood)?;
            let k = per_token.as_matrix_dims().1;
            let data = enc.token_of.iter().flat_map(|&t| per_token.row(t).to_vec()).collect();
            DocLayout::Dense(Tensor::new([enc.len(), k], data)?)
        }
        LayoutMode::Graph => {
            let (boxes, seg_of_token) = token_segments(doc);
            let knn = build_knn_graph(&boxes, KNN_K, KNN_P)?;
            let graph = Arc::new(DocGraph {
                nbrs: knn.neighbors(),
                boxes,
            });
            DocLayout::Graph(graph, enc.token_of.iter().map(|&t| seg_of_token[t]).collect())
        }
    };
    Ok(PreparedDoc { enc, layout })
}

impl PreparedDoc {
    /// Consecutive chunks of at most `max_len` positions.
    pub fn sequences(&self, max_len: usize) -> Result<Vec<Sequence>> {
        if self.enc.is_empty() {
            return Ok(Vec::new());
        }
        chunk_ranges(self.enc.len(), max_len)?
            .into_iter()
            .map(|r| {
                let layout = match &self.layout {
                    DocLayout::None => SeqLayout::None,
                    DocLayout::Winding => SeqLayout::Winding,
                    DocLayout::Dense(t) => {
                        let cols = t.as_matrix_dims().1;
                        let data = t.data()[r.start * cols..r.end * cols].to_vec();
                        SeqLayout::Dense(Tensor::new([r.len(), cols], data)?)
                    }
                    DocLayout::Graph(g, seg_of) => SeqLayout::Graph {
                        graph: g.clone(),
                        seg_of: seg_of[r.clone()].to_vec(),
                    },
                };
                Ok(Sequence {
                    ids: self.enc.ids[r.clone()].to_vec(),
                    boxes: self.enc.boxes[r.clone()].to_vec(),
                    layout,
                    token_of: self.enc.token_of[r].to_vec(),
                })
            })
            .collect()
    }
}
