//! Two-stage emotion semantic graph and its encoder.
//!
//! Stage one links each object to its attribute and to the image's global adjective. An
//! attention layer then fuses the emotion word with every edge's concatenated endpoint features
//! into one semantic vector, which stage two adds as a sink node fed by every other node. A graph
//! convolution network over the stage-two graph produces the graph feature.

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{Linear, Module};
use serde::{Deserialize, Serialize};

use crate::dataset::ImageRecord;
use crate::encoders::{TextEmbedding, TextEncoder};
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Object,
    Attribute,
    GlobalAttr,
    Semantic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub id: usize,
    pub kind: NodeKind,
    pub feature: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmotionGraph {
    pub nodes: Vec<GraphNode>,
    /// Directed `(src_id, dst_id)` pairs.
    pub edges: Vec<(usize, usize)>,
    pub stage: Stage,
}

impl EmotionGraph {
    pub fn node(&self, id: usize) -> Option<&GraphNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    fn position(&self, id: usize) -> Result<usize> {
        self.nodes
            .iter()
            .position(|n| n.id == id)
            .ok_or_else(|| Error::Internal(format!("edge endpoint {id} is not a node")))
    }

    pub fn global_node(&self) -> Result<&GraphNode> {
        self.nodes
            .iter()
            .find(|n| n.kind == NodeKind::GlobalAttr)
            .ok_or_else(|| Error::Internal("graph has no global attribute node".into()))
    }

    /// Checks the structural invariants for the graph's stage.
    pub fn validate(&self) -> Result<()> {
        let sem = self.nodes.iter().filter(|n| n.kind == NodeKind::Semantic).count();
        let expected = match self.stage {
            Stage::One => 0,
            Stage::Two => 1,
        };
        if sem != expected {
            return Err(Error::Internal(format!(
                "stage {:?} graph has {sem} semantic nodes",
                self.stage
            )));
        }
        for &(s, d) in &self.edges {
            if s == d {
                return Err(Error::Internal(format!("self-loop on node {s}")));
            }
            self.position(s)?;
            self.position(d)?;
        }
        Ok(())
    }

    /// Edge endpoints as node positions.
    fn edge_positions(&self) -> Result<Vec<(usize, usize)>> {
        self.edges
            .iter()
            .map(|&(s, d)| Ok((self.position(s)?, self.position(d)?)))
            .collect()
    }
}

/// Object, attribute, and global-adjective nodes with `object → attribute` and
/// `object → global` edges. Features are text embeddings of the words.
pub fn build_stage1_graph(record: &ImageRecord, text: &TextEncoder) -> Result<EmotionGraph> {
    record.validate()?;
    build_stage1_with(record, |w| text.embed(w))
}

pub(crate) fn build_stage1_with(
    record: &ImageRecord,
    mut embed: impl FnMut(&str) -> Result<TextEmbedding>,
) -> Result<EmotionGraph> {
    let k = record.pairs.len();
    let global_id = 2 * k;
    let mut nodes = Vec::with_capacity(2 * k + 1);
    let mut edges = Vec::with_capacity(2 * k);
    for (i, pair) in record.pairs.iter().enumerate() {
        let (obj, attr) = (2 * i, 2 * i + 1);
        nodes.push(GraphNode {
            id: obj,
            kind: NodeKind::Object,
            feature: embed(&pair.object)?.0,
        });
        nodes.push(GraphNode {
            id: attr,
            kind: NodeKind::Attribute,
            feature: embed(&pair.attribute)?.0,
        });
        edges.push((obj, attr));
        edges.push((obj, global_id));
    }
    nodes.push(GraphNode {
        id: global_id,
        kind: NodeKind::GlobalAttr,
        feature: embed(&record.global_attribute)?.0,
    });
    Ok(EmotionGraph {
        nodes,
        edges,
        stage: Stage::One,
    })
}

/// Adds the semantic sink node with feature `f_sem` and an edge into it from every other node.
pub fn build_stage2_graph(g1: &EmotionGraph, f_sem: &[f32]) -> Result<EmotionGraph> {
    if g1.stage != Stage::One {
        return Err(Error::arg("stage-two construction needs a stage-one graph"));
    }
    let sem_id = g1.nodes.iter().map(|n| n.id).max().map_or(0, |m| m + 1);
    let mut g2 = g1.clone();
    g2.edges.extend(g1.nodes.iter().map(|n| (n.id, sem_id)));
    g2.nodes.push(GraphNode {
        id: sem_id,
        kind: NodeKind::Semantic,
        feature: f_sem.to_vec(),
    });
    g2.stage = Stage::Two;
    Ok(g2)
}

/// Query/key/value projections of the emotion injection layer. Queries come from the emotion
/// word (`d_t`), keys and values from concatenated edge endpoints (`2·d_t`).
#[derive(Clone)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

impl AttentionParams {
    /// Zero-padded identity for queries, identity for keys and values.
    pub fn identity(text_dim: usize, dtype: DType, device: &Device) -> Result<Self> {
        let eye = Tensor::eye(2 * text_dim, dtype, device)?;
        let w_q = eye.narrow(1, 0, text_dim)?;
        Ok(Self {
            w_q,
            w_k: eye.clone(),
            w_v: eye,
        })
    }

    pub fn learned(store: &mut ParamStore, text_dim: usize, attn_dim: usize, value_dim: usize) -> Result<Self> {
        let bq = 1.0 / (text_dim as f64).sqrt();
        let bk = 1.0 / ((2 * text_dim) as f64).sqrt();
        Ok(Self {
            w_q: store.uniform("inject.w_q", &[attn_dim, text_dim], bq)?,
            w_k: store.uniform("inject.w_k", &[attn_dim, 2 * text_dim], bk)?,
            w_v: store.uniform("inject.w_v", &[value_dim, 2 * text_dim], bk)?,
        })
    }

    pub fn attn_dim(&self) -> usize {
        self.w_q.dims()[0]
    }

    pub fn value_dim(&self) -> usize {
        self.w_v.dims()[0]
    }

    /// Scaled dot-product attention of each graph's query over that graph's keys.
    ///
    /// `queries` is `(B, d_t)`, `pairs` is `(E, 2·d_t)`, and `owner[e]` names the graph of key `e`.
    /// Every graph must own at least one key. Returns the `(E,)` weights and `(B, v)` outputs.
    pub fn attend(&self, queries: &Tensor, pairs: &Tensor, owner: &[usize]) -> Result<(Tensor, Tensor)> {
        let (b, _) = queries.dims2()?;
        let e = pairs.dim(0)?;
        if owner.len() != e {
            return Err(Error::Internal("owner list does not match key count".into()));
        }
        let mut counts = vec![0usize; b];
        for &g in owner {
            counts[g] += 1;
        }
        if counts.contains(&0) {
            return Err(Error::Internal("a query has no keys".into()));
        }
        let device = queries.device();
        let q = queries.matmul(&self.w_q.t()?)?;
        let k = pairs.matmul(&self.w_k.t()?)?;
        let v = pairs.matmul(&self.w_v.t()?)?;
        let owner_idx = Tensor::from_vec(owner.iter().map(|&g| g as u32).collect::<Vec<_>>(), e, device)?;
        let scale = 1.0 / (self.attn_dim() as f64).sqrt();
        let scores = (q.index_select(&owner_idx, 0)? * &k)?.sum(D::Minus1)?.affine(scale, 0.0)?;

        // Per-graph max shift, treated as a constant.
        let raw = scores.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let mut max = vec![f64::NEG_INFINITY; b];
        for (s, &g) in raw.iter().zip(owner) {
            max[g] = max[g].max(*s);
        }
        let shift: Vec<f64> = owner.iter().map(|&g| max[g]).collect();
        let shift = Tensor::from_vec(shift, e, device)?.to_dtype(scores.dtype())?;
        let exp = (scores - shift)?.exp()?;

        let mut member = vec![0.0f32; b * e];
        for (j, &g) in owner.iter().enumerate() {
            member[g * e + j] = 1.0;
        }
        let member = Tensor::from_vec(member, (b, e), device)?.to_dtype(exp.dtype())?;
        let denom = member.matmul(&exp.unsqueeze(1)?)?.squeeze(1)?;
        let weights = (exp / denom.index_select(&owner_idx, 0)?)?;
        let out = member.matmul(&v.broadcast_mul(&weights.unsqueeze(1)?)?)?;
        Ok((weights, out))
    }
}

/// Keys for the injection layer: concatenated endpoint features of every edge, or the global node
/// paired with itself when the graph has no edges.
fn injection_pairs(g1: &EmotionGraph) -> Result<Vec<Vec<f32>>> {
    if g1.edges.is_empty() {
        let g = &g1.global_node()?.feature;
        return Ok(vec![[g.as_slice(), g.as_slice()].concat()]);
    }
    g1.edge_positions()?
        .into_iter()
        .map(|(s, d)| Ok([g1.nodes[s].feature.as_slice(), g1.nodes[d].feature.as_slice()].concat()))
        .collect()
}

/// Attention weights and fused semantic feature for one stage-one graph.
pub fn inject_emotion_semantics_with_weights(
    g1: &EmotionGraph,
    emotion: &TextEmbedding,
    params: &AttentionParams,
) -> Result<(Vec<f64>, Vec<f32>)> {
    if g1.stage != Stage::One {
        return Err(Error::arg("emotion injection needs a stage-one graph"));
    }
    let dtype = params.w_q.dtype();
    let device = params.w_q.device();
    let pairs = injection_pairs(g1)?;
    let width = pairs[0].len();
    let flat: Vec<f32> = pairs.iter().flatten().copied().collect();
    let keys = Tensor::from_vec(flat, (pairs.len(), width), device)?.to_dtype(dtype)?;
    let query = emotion.to_tensor(dtype, device)?.unsqueeze(0)?;
    let (w, out) = params.attend(&query, &keys, &vec![0; pairs.len()])?;
    Ok((
        w.to_dtype(DType::F64)?.to_vec1()?,
        out.squeeze(0)?.to_dtype(DType::F32)?.to_vec1()?,
    ))
}

pub fn inject_emotion_semantics(
    g1: &EmotionGraph,
    emotion_word: &str,
    params: &AttentionParams,
    text: &TextEncoder,
) -> Result<Vec<f32>> {
    let emb = text.embed(emotion_word)?;
    Ok(inject_emotion_semantics_with_weights(g1, &emb, params)?.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    SemanticNode,
    MeanPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub text_dim: usize,
    /// Output width `d`.
    pub dim: usize,
    pub attn_dim: usize,
    pub layers: usize,
    pub readout: Readout,
}

/// Symmetrically normalized propagation matrix `D^-1/2 (A + Aᵀ + I) D^-1/2`, row-major `n × n`.
pub fn normalized_adjacency(n: usize, edges: &[(usize, usize)]) -> Vec<f64> {
    let mut a = vec![0.0f64; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
    }
    for &(s, d) in edges {
        a[s * n + d] = 1.0;
        a[d * n + s] = 1.0;
    }
    let deg: Vec<f64> = (0..n).map(|i| a[i * n..(i + 1) * n].iter().sum()).collect();
    for i in 0..n {
        for j in 0..n {
            if a[i * n + j] != 0.0 {
                a[i * n + j] /= (deg[i] * deg[j]).sqrt();
            }
        }
    }
    a
}

/// Learnable part of the graph generator: injection attention, input projections, and GCN.
pub struct GraphEncoder {
    pub attention: AttentionParams,
    word_proj: Linear,
    sem_proj: Linear,
    layers: Vec<Linear>,
    readout: Readout,
    dim: usize,
}

impl GraphEncoder {
    pub fn new(store: &mut ParamStore, cfg: &GraphConfig) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(Error::Config {
                field: "space.gcn_layers".into(),
                message: "must be at least 1".into(),
            });
        }
        let attention = AttentionParams::learned(store, cfg.text_dim, cfg.attn_dim, cfg.text_dim)?;
        let word_proj = store.linear("graph.word_proj", cfg.text_dim, cfg.dim)?;
        let sem_proj = store.linear("graph.sem_proj", cfg.text_dim, cfg.dim)?;
        let layers = (0..cfg.layers)
            .map(|i| store.linear(&format!("graph.gcn{i}"), cfg.dim, cfg.dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            attention,
            word_proj,
            sem_proj,
            layers,
            readout: cfg.readout,
            dim: cfg.dim,
        })
    }

    pub fn from_parts(
        attention: AttentionParams,
        word_proj: Linear,
        sem_proj: Linear,
        layers: Vec<Linear>,
        readout: Readout,
    ) -> Result<Self> {
        let dim = layers
            .last()
            .ok_or_else(|| Error::arg("at least one GCN layer is required"))?
            .weight()
            .dim(0)?;
        Ok(Self {
            attention,
            word_proj,
            sem_proj,
            layers,
            readout,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// GCN layers over projected node features `h0` (`N × d`) with propagation matrix `adj`.
    /// ReLU follows every layer but the last.
    pub fn propagate(&self, h0: &Tensor, adj: &Tensor) -> Result<Tensor> {
        let mut h = h0.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&adj.matmul(&h)?)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    /// Encodes a stage-two graph whose node features are fixed values.
    pub fn encode_graph(&self, g2: &EmotionGraph) -> Result<Vec<f32>> {
        if g2.stage != Stage::Two {
            return Err(Error::arg("graph encoding needs a stage-two graph"));
        }
        g2.validate()?;
        let dtype = self.word_proj.weight().dtype();
        let device = self.word_proj.weight().device().clone();
        let rows = g2
            .nodes
            .iter()
            .map(|n| {
                let t = Tensor::from_slice(&n.feature, (1, n.feature.len()), &device)?.to_dtype(dtype)?;
                let proj = if n.kind == NodeKind::Semantic {
                    &self.sem_proj
                } else {
                    &self.word_proj
                };
                Ok(proj.forward(&t)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let h0 = Tensor::cat(&rows, 0)?;
        let n = g2.nodes.len();
        let adj = Tensor::from_vec(normalized_adjacency(n, &g2.edge_positions()?), (n, n), &device)?.to_dtype(dtype)?;
        let h = self.propagate(&h0, &adj)?;
        let out = match self.readout {
            Readout::SemanticNode => {
                let pos = g2
                    .nodes
                    .iter()
                    .position(|nd| nd.kind == NodeKind::Semantic)
                    .ok_or_else(|| Error::Internal("no semantic node".into()))?;
                h.get(pos)?
            }
            Readout::MeanPool => h.mean(0)?,
        };
        Ok(out.to_dtype(DType::F32)?.to_vec1()?)
    }

    /// Differentiable generator forward for a batch of stage-one graphs: `(B, d)` graph features.
    pub fn forward_batch(&self, batch: &GraphBatch) -> Result<Tensor> {
        let (_, f_sem) = self.attention.attend(&batch.emotions, &batch.pairs, &batch.pair_owner)?;
        let words = self.word_proj.forward(&batch.words)?;
        let sem = self.sem_proj.forward(&f_sem)?;
        let h0 = Tensor::cat(&[&words, &sem], 0)?;
        let h = self.propagate(&h0, &batch.adjacency)?;
        let out = match self.readout {
            Readout::SemanticNode => h.narrow(0, batch.n_words, batch.len())?,
            Readout::MeanPool => batch.pool.matmul(&h)?,
        };
        Ok(out)
    }
}

/// Several stage-one graphs packed for one block-diagonal forward pass. Word nodes of all graphs
/// come first, followed by one semantic node per graph.
pub struct GraphBatch {
    words: Tensor,
    n_words: usize,
    emotions: Tensor,
    pairs: Tensor,
    pair_owner: Vec<usize>,
    adjacency: Tensor,
    pool: Tensor,
    graphs: usize,
}

impl GraphBatch {
    pub fn new(graphs: &[&EmotionGraph], emotions: &[&TextEmbedding], dtype: DType, device: &Device) -> Result<Self> {
        if graphs.is_empty() || graphs.len() != emotions.len() {
            return Err(Error::arg("graph batch needs one emotion embedding per graph"));
        }
        let b = graphs.len();
        let n_words: usize = graphs.iter().map(|g| g.nodes.len()).sum();
        let n = n_words + b;
        let text_dim = emotions[0].dim();
        let mut words = Vec::with_capacity(n_words * text_dim);
        let mut pairs = Vec::new();
        let mut pair_owner = Vec::new();
        let mut edges = Vec::new();
        let mut members: Vec<Vec<usize>> = Vec::with_capacity(b);
        let mut offset = 0;
        for (gi, g) in graphs.iter().enumerate() {
            if g.stage != Stage::One {
                return Err(Error::arg("graph batch expects stage-one graphs"));
            }
            for node in &g.nodes {
                words.extend_from_slice(&node.feature);
            }
            for p in injection_pairs(g)? {
                pairs.extend(p);
                pair_owner.push(gi);
            }
            let sem = n_words + gi;
            for (s, d) in g.edge_positions()? {
                edges.push((offset + s, offset + d));
            }
            let mut m: Vec<usize> = (offset..offset + g.nodes.len()).collect();
            for &i in &m {
                edges.push((i, sem));
            }
            m.push(sem);
            members.push(m);
            offset += g.nodes.len();
        }
        let adjacency = normalized_adjacency(n, &edges);
        let mut pool = vec![0.0f64; b * n];
        for (gi, m) in members.iter().enumerate() {
            for &i in m {
                pool[gi * n + i] = 1.0 / m.len() as f64;
            }
        }
        let emo: Vec<f32> = emotions.iter().flat_map(|e| e.0.iter().copied()).collect();
        let t = |v: Vec<f32>, shape: (usize, usize)| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
        };
        let t64 = |v: Vec<f64>, shape: (usize, usize)| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
        };
        Ok(Self {
            words: t(words, (n_words, text_dim))?,
            n_words,
            emotions: t(emo, (b, text_dim))?,
            pairs: t(pairs, (pair_owner.len(), 2 * text_dim))?,
            pair_owner,
            adjacency: t64(adjacency, (n, n))?,
            pool: t64(pool, (b, n))?,
            graphs: b,
        })
    }

    pub fn len(&self) -> usize {
        self.graphs
    }

    pub fn is_empty(&self) -> bool {
        self.graphs == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{EmotionLabel, ObjectAttribute};

    fn record(pairs: &[(&str, &str)]) -> ImageRecord {
        ImageRecord {
            image_id: "r".into(),
            image_path: "r.png".into(),
            emotion: EmotionLabel::Amusement,
            global_attribute: "joyful".into(),
            pairs: pairs.iter().map(|(o, a)| ObjectAttribute::new(*o, *a)).collect(),
        }
    }

    fn text() -> TextEncoder {
        TextEncoder::hashed(8, 3)
    }

    #[test]
    fn stage_one_counts() {
        let g = build_stage1_graph(&record(&[("dog", "playful"), ("grass", "lush")]), &text()).unwrap();
        assert_eq!((g.nodes.len(), g.edges.len()), (5, 4));
        g.validate().unwrap();
        let g0 = build_stage1_graph(&record(&[]), &text()).unwrap();
        assert_eq!((g0.nodes.len(), g0.edges.len()), (1, 0));
        let many: Vec<(String, String)> = (0..14).map(|i| (format!("o{i}"), format!("a{i}"))).collect();
        let refs: Vec<(&str, &str)> = many.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let g14 = build_stage1_graph(&record(&refs), &text()).unwrap();
        assert_eq!((g14.nodes.len(), g14.edges.len()), (29, 28));
    }

    #[test]
    fn stage_two_counts() {
        let g1 = build_stage1_graph(&record(&[("dog", "playful"), ("grass", "lush")]), &text()).unwrap();
        let g2 = build_stage2_graph(&g1, &[0.0; 8]).unwrap();
        assert_eq!((g2.nodes.len(), g2.edges.len()), (6, 9));
        assert_eq!(g2.stage, Stage::Two);
        g2.validate().unwrap();
        let e2 = build_stage2_graph(&build_stage1_graph(&record(&[]), &text()).unwrap(), &[0.0; 8]).unwrap();
        assert_eq!((e2.nodes.len(), e2.edges.len()), (2, 1));
        assert!(build_stage2_graph(&g2, &[0.0; 8]).is_err());
    }

    #[test]
    fn single_edge_identity_attention_returns_the_pair() {
        let t = text();
        let g1 = build_stage1_graph(&record(&[("dog", "playful")]), &t).unwrap();
        let mut g = g1.clone();
        g.edges.truncate(1);
        let params = AttentionParams::identity(8, DType::F64, &Device::Cpu).unwrap();
        let f = inject_emotion_semantics(&g, "awe", &params, &t).unwrap();
        let want = [g.nodes[0].feature.clone(), g.nodes[1].feature.clone()].concat();
        for (a, b) in f.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_edges_split_weight_evenly() {
        let t = text();
        let mut g = build_stage1_graph(&record(&[("dog", "playful")]), &t).unwrap();
        g.edges = vec![(0, 1), (0, 1)];
        let params = AttentionParams::identity(8, DType::F64, &Device::Cpu).unwrap();
        let (w, f) = inject_emotion_semantics_with_weights(&g, &t.embed("awe").unwrap(), &params).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);
        let want = [g.nodes[0].feature.clone(), g.nodes[1].feature.clone()].concat();
        for (a, b) in f.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn edgeless_graph_attends_to_global_node() {
        let t = text();
        let g = build_stage1_graph(&record(&[]), &t).unwrap();
        let params = AttentionParams::identity(8, DType::F64, &Device::Cpu).unwrap();
        let f = inject_emotion_semantics(&g, "fear", &params, &t).unwrap();
        let glob = &g.nodes[0].feature;
        assert_eq!(f.len(), 16);
        for (a, b) in f.iter().zip(glob.iter().chain(glob.iter())) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn hand_evaluated_two_key_softmax() {
        // d_t = 1: query q = [1]; keys are the 2-d concatenations [src, dst].
        let dev = Device::Cpu;
        let g = EmotionGraph {
            nodes: vec![
                GraphNode { id: 0, kind: NodeKind::Object, feature: vec![1.0] },
                GraphNode { id: 1, kind: NodeKind::Attribute, feature: vec![2.0] },
                GraphNode { id: 2, kind: NodeKind::GlobalAttr, feature: vec![-1.0] },
            ],
            edges: vec![(0, 1), (0, 2)],
            stage: Stage::One,
        };
        let w_q = Tensor::from_vec(vec![0.5f64, 1.0], (2, 1), &dev).unwrap();
        let w_k = Tensor::from_vec(vec![1.0f64, 0.0, 0.0, 1.0], (2, 2), &dev).unwrap();
        let params = AttentionParams { w_q, w_k: w_k.clone(), w_v: w_k };
        let (w, f) =
            inject_emotion_semantics_with_weights(&g, &TextEmbedding(vec![1.0]), &params).unwrap();
        // q = [0.5, 1]; k1 = [1, 2] → 2.5; k2 = [1, -1] → -0.5; scale 1/√2.
        let s1 = 2.5 / 2f64.sqrt();
        let s2 = -0.5 / 2f64.sqrt();
        let w1 = s1.exp() / (s1.exp() + s2.exp());
        assert!((w[0] - w1).abs() < 1e-9);
        assert!((w[1] - (1.0 - w1)).abs() < 1e-9);
        assert!(((w[0] + w[1]) - 1.0).abs() < 1e-12);
        let want = [w1 * 1.0 + (1.0 - w1) * 1.0, w1 * 2.0 - (1.0 - w1)];
        assert!((f[0] as f64 - want[0]).abs() < 1e-6);
        assert!((f[1] as f64 - want[1]).abs() < 1e-6);
    }

    fn identity_linear(n: usize) -> Linear {
        let eye = Tensor::eye(n, DType::F64, &Device::Cpu).unwrap();
        Linear::new(eye, Some(Tensor::zeros(n, DType::F64, &Device::Cpu).unwrap()))
    }

    #[test]
    fn one_node_one_layer_is_identity() {
        let params = AttentionParams::identity(2, DType::F64, &Device::Cpu).unwrap();
        let enc = GraphEncoder::from_parts(
            params,
            identity_linear(3),
            identity_linear(3),
            vec![identity_linear(3)],
            Readout::SemanticNode,
        )
        .unwrap();
        let g = EmotionGraph {
            nodes: vec![GraphNode { id: 7, kind: NodeKind::Semantic, feature: vec![0.5, 1.5, 0.0] }],
            edges: vec![],
            stage: Stage::Two,
        };
        let out = enc.encode_graph(&g).unwrap();
        assert_eq!(out, vec![0.5, 1.5, 0.0]);
    }

    #[test]
    fn readout_is_permutation_invariant() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new(4, DType::F64, &dev);
        let cfg = GraphConfig { text_dim: 8, dim: 6, attn_dim: 4, layers: 2, readout: Readout::SemanticNode };
        let enc = GraphEncoder::new(&mut store, &cfg).unwrap();
        let t = text();
        let g1 = build_stage1_graph(&record(&[("dog", "playful"), ("sky", "vast"), ("car", "red")]), &t).unwrap();
        let f_sem = inject_emotion_semantics(&g1, "awe", &enc.attention, &t).unwrap();
        let g2 = build_stage2_graph(&g1, &f_sem).unwrap();
        let base = enc.encode_graph(&g2).unwrap();
        assert_eq!(base.len(), 6);

        let n = g2.nodes.len();
        let relabel = |id: usize| (id * 5 + 3) % (n + 10) + 100;
        let mut permuted = g2.clone();
        permuted.nodes.reverse();
        for node in &mut permuted.nodes {
            node.id = relabel(node.id);
        }
        permuted.edges = g2.edges.iter().map(|&(s, d)| (relabel(s), relabel(d))).collect();
        let other = enc.encode_graph(&permuted).unwrap();
        for (a, b) in base.iter().zip(&other) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_forward_matches_single_graph_path() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new(9, DType::F64, &dev);
        let cfg = GraphConfig { text_dim: 8, dim: 5, attn_dim: 4, layers: 2, readout: Readout::SemanticNode };
        let enc = GraphEncoder::new(&mut store, &cfg).unwrap();
        let t = text();
        let ga = build_stage1_graph(&record(&[("dog", "playful"), ("sky", "vast")]), &t).unwrap();
        let gb = build_stage1_graph(&record(&[]), &t).unwrap();
        let ea = t.embed("awe").unwrap();
        let eb = t.embed("fear").unwrap();
        let batch = GraphBatch::new(&[&ga, &gb], &[&ea, &eb], DType::F64, &dev).unwrap();
        let out = enc.forward_batch(&batch).unwrap().to_vec2::<f64>().unwrap();
        for (row, (g, e)) in out.iter().zip([(&ga, &ea), (&gb, &eb)]) {
            let (_, f_sem) = inject_emotion_semantics_with_weights(g, e, &enc.attention).unwrap();
            let single = enc.encode_graph(&build_stage2_graph(g, &f_sem).unwrap()).unwrap();
            for (a, b) in row.iter().zip(&single) {
                assert!((*a as f32 - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }
}
