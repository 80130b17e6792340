//! Unsupervised word-region grounding.
//!
//! Words are contextualized inside each referring expression, scored
//! against regions with scaled dot products, and trained contrastively:
//! a word's attention-induced visual vector over its paired image must beat
//! the vectors induced over the other images in the mini-batch.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, Adam, Graph, Mat, ParamStore, Var};
use crate::error::{GapError, Result};
use crate::nn;
use crate::treebank::{extract_with_tags, re_coverage, ParseTree, RefTags, ReferringExpression};
use crate::vocab::Vocab;

/// `N` regions: feature rows plus `(x1, y1, x2, y2)` boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSet {
    pub features: Mat,
    pub boxes: Vec<[f64; 4]>,
}

impl RegionSet {
    pub fn new(features: Mat, boxes: Vec<[f64; 4]>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(GapError::Empty("region set has no regions".into()));
        }
        if boxes.len() != features.nrows() {
            return Err(GapError::Shape(format!(
                "{} feature rows but {} boxes",
                features.nrows(),
                boxes.len()
            )));
        }
        if let Some(b) = boxes.iter().find(|b| !(b[0] < b[2] && b[1] < b[3])) {
            return Err(GapError::InvalidArgument(format!("degenerate box {b:?}")));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(GapError::NonFinite("region features".into()));
        }
        Ok(RegionSet { features, boxes })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Arithmetic mean of the region features (`1×d`).
    pub fn mean(&self) -> Mat {
        self.features.mean_axis(Axis(0)).expect("nonempty").insert_axis(Axis(0))
    }
}

/// How per-RE alignments are combined into the query-wide matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Each word averages over the REs that contain it.
    #[default]
    Coverage,
    /// Sum of zero-padded RE alignments divided by the number of REs.
    AllRes,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrounderConfig {
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub aggregation: Aggregation,
}

impl Default for GrounderConfig {
    fn default() -> Self {
        GrounderConfig {
            dim: 32,
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            aggregation: Aggregation::Coverage,
        }
    }
}

/// Parameters of the association function: context encoder plus the word
/// projection `w_w`, the key projection `w_v` and the value projection
/// `w_v_prime`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingParams {
    pub vocab: Vocab,
    pub dim: usize,
    pub store: ParamStore,
}

const ENC: &str = "enc";

impl GroundingParams {
    pub fn init(vocab: Vocab, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        nn::init_bi_rnn(&mut store, ENC, vocab.len(), dim, &mut rng);
        for name in ["w_w", "w_v", "w_v_prime"] {
            store.init_scaled(name, dim, dim, &mut rng);
        }
        GroundingParams { vocab, dim, store }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let ck = GrounderCheckpoint {
            format: GROUNDER_FORMAT.into(),
            version: 1,
            dim: self.dim,
            vocab: self.vocab.clone(),
            tensors: self.store.to_record(),
        };
        std::fs::write(path, serde_json::to_string(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ck: GrounderCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.format != GROUNDER_FORMAT || ck.version != 1 {
            return Err(GapError::Format(format!("unsupported grounder checkpoint {} v{}", ck.format, ck.version)));
        }
        let store = ParamStore::from_record(ck.tensors)?;
        let reference = GroundingParams::init(ck.vocab.clone(), ck.dim, 0);
        for (name, t) in reference.store.iter() {
            if store.get(name).map(|s| s.dim()) != Some(t.dim()) {
                return Err(GapError::Format(format!("grounder tensor `{name}` missing or misshapen")));
            }
        }
        Ok(GroundingParams {
            vocab: ck.vocab,
            dim: ck.dim,
            store,
        })
    }
}

const GROUNDER_FORMAT: &str = "gap-grounder";

#[derive(Serialize, Deserialize)]
struct GrounderCheckpoint {
    format: String,
    version: u32,
    dim: usize,
    vocab: Vocab,
    tensors: Vec<crate::autodiff::TensorRecord>,
}

/// Contextualized word vectors of one RE (`m_r × d`).
#[derive(Debug, Clone, PartialEq)]
pub struct ReEmbedding(pub Mat);

/// Raw word-region scores of one RE (`m_r × N`).
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentLogits(pub Mat);

/// Query-wide word-region logits `A*` (`T × N`) and per-word RE counts.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryAlignment {
    pub logits: Mat,
    pub coverage: Vec<usize>,
}

impl QueryAlignment {
    pub fn words(&self) -> usize {
        self.logits.nrows()
    }

    pub fn regions(&self) -> usize {
        self.logits.ncols()
    }
}

pub fn encode_re<S: AsRef<str>>(tokens: &[S], params: &GroundingParams) -> Result<ReEmbedding> {
    if tokens.is_empty() {
        return Err(GapError::Empty("referring expression has no tokens".into()));
    }
    let ids = params.vocab.ids(tokens)?;
    let mut g = Graph::with_params(&params.store);
    let (ctx, _) = nn::bi_rnn(&mut g, ENC, &ids);
    Ok(ReEmbedding(g.value(ctx).clone()))
}

pub fn association_scores(
    emb: &ReEmbedding,
    regions: &RegionSet,
    params: &GroundingParams,
) -> Result<AlignmentLogits> {
    let d = params.dim;
    if emb.0.ncols() != d || regions.dim() != d {
        return Err(GapError::Shape(format!(
            "word dim {}, region dim {}, expected {d}",
            emb.0.ncols(),
            regions.dim()
        )));
    }
    let w_w = params.store.get("w_w").expect("w_w");
    let w_v = params.store.get("w_v").expect("w_v");
    let words = emb.0.dot(w_w);
    let keys = regions.features.dot(w_v);
    Ok(AlignmentLogits(words.dot(&keys.t()) / (d as f64).sqrt()))
}

/// `v*_i = Σ_j softmax_j(a_ij) · projᵀ v_j` for every word row.
pub fn induced_visual(logits: &AlignmentLogits, regions: &RegionSet, proj: &Mat) -> Result<Mat> {
    if regions.is_empty() {
        return Err(GapError::Empty("no regions".into()));
    }
    if logits.0.ncols() != regions.len() || proj.nrows() != regions.dim() {
        return Err(GapError::Shape(format!(
            "logits {:?}, regions {}x{}, proj {:?}",
            logits.0.dim(),
            regions.len(),
            regions.dim(),
            proj.dim()
        )));
    }
    let mut weights = logits.0.clone();
    for mut row in weights.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("row"));
    }
    Ok(weights.dot(&regions.features.dot(proj)))
}

/// One RE paired with the regions of the image its question was asked about.
#[derive(Debug, Clone)]
pub struct ContrastiveItem<'a> {
    pub token_ids: Vec<usize>,
    pub regions: &'a RegionSet,
    /// Image identity; items sharing it never serve as each other's negatives.
    pub instance: usize,
}

#[derive(Debug, Clone)]
pub struct ContrastiveBatch<'a> {
    pub items: Vec<ContrastiveItem<'a>>,
}

impl<'a> ContrastiveBatch<'a> {
    pub fn from_tokens<S: AsRef<str>>(
        vocab: &Vocab,
        items: &[(&[S], &'a RegionSet, usize)],
    ) -> Result<Self> {
        let items = items
            .iter()
            .map(|(toks, regions, instance)| {
                Ok(ContrastiveItem {
                    token_ids: vocab.ids(toks)?,
                    regions,
                    instance: *instance,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ContrastiveBatch { items })
    }
}

/// Builds the negated InfoNCE objective on `g`, averaged over every
/// (item, word) pair of the batch.
pub fn infonce_graph(g: &mut Graph, batch: &ContrastiveBatch) -> Result<Var> {
    let b = batch.items.len();
    if b == 0 {
        return Err(GapError::Empty("contrastive batch".into()));
    }
    let n = batch.items[0].regions.len();
    let d = batch.items[0].regions.dim();
    if batch.items.iter().any(|it| it.regions.len() != n || it.regions.dim() != d) {
        return Err(GapError::Shape("all images in a batch need the same N and d".into()));
    }
    if batch.items.iter().any(|it| it.token_ids.is_empty()) {
        return Err(GapError::Empty("referring expression has no tokens".into()));
    }

    let mut word_blocks = Vec::with_capacity(b);
    let mut owner = Vec::new();
    for (r, item) in batch.items.iter().enumerate() {
        let (ctx, _) = nn::bi_rnn(g, ENC, &item.token_ids);
        word_blocks.push(ctx);
        owner.extend(std::iter::repeat_n(r, item.token_ids.len()));
    }
    let words = g.concat_rows(&word_blocks);
    let w_w = g.param("w_w");
    let w_v = g.param("w_v");
    let w_vp = g.param("w_v_prime");
    let queries = g.matmul(words, w_w);

    let mut feats = Array2::zeros((b * n, d));
    for (s, item) in batch.items.iter().enumerate() {
        feats
            .slice_mut(ndarray::s![s * n..(s + 1) * n, ..])
            .assign(&item.regions.features);
    }
    let feats = g.constant(feats);
    let keys = g.matmul(feats, w_v);
    let values = g.matmul(feats, w_vp);

    let keys_t = g.transpose(keys);
    let logits = g.matmul(queries, keys_t);
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    let attn = g.softmax_blocks(logits, n);
    let values_t = g.transpose(values);
    let dots = g.matmul(queries, values_t);
    let weighted = g.mul(attn, dots);
    let sims = g.block_sum(weighted, n);
    if g.value(sims).iter().any(|x| !x.is_finite()) {
        return Err(GapError::NonFinite("contrastive similarity".into()));
    }

    let m = owner.len();
    let mut mask = Array2::zeros((m, b));
    let mut pick = Array2::zeros((m, b));
    for (i, &r) in owner.iter().enumerate() {
        for s in 0..b {
            if s != r && batch.items[s].instance == batch.items[r].instance {
                mask[[i, s]] = -1e30;
            }
        }
        pick[[i, r]] = 1.0;
    }
    let mask = g.constant(mask);
    let masked = g.add(sims, mask);
    let log_probs = g.log_softmax_rows(masked);
    let pick = g.constant(pick);
    let picked = g.mul(log_probs, pick);
    let total = g.sum_all(picked);
    Ok(g.scale(total, -1.0 / m as f64))
}

pub fn infonce_loss(batch: &ContrastiveBatch, params: &GroundingParams) -> Result<f64> {
    let mut g = Graph::with_params(&params.store);
    let loss = infonce_graph(&mut g, batch)?;
    Ok(g.item(loss))
}

/// Training corpus: REs (as token ids) paired with the image of their
/// question.
#[derive(Debug, Clone, Default)]
pub struct GroundingCorpus {
    pub images: Vec<RegionSet>,
    /// `(token ids, image index)`.
    pub pairs: Vec<(Vec<usize>, usize)>,
}

impl GroundingCorpus {
    fn batch(&self, idx: &[usize]) -> ContrastiveBatch<'_> {
        ContrastiveBatch {
            items: idx
                .iter()
                .map(|&k| {
                    let (ids, img) = &self.pairs[k];
                    ContrastiveItem {
                        token_ids: ids.clone(),
                        regions: &self.images[*img],
                        instance: *img,
                    }
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
}

fn epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Contrastive training. The log's first entry (epoch 0) is the mean loss
/// of the initialization over the first epoch's batching.
pub fn train_grounder(
    corpus: &GroundingCorpus,
    vocab: &Vocab,
    config: &GrounderConfig,
    seed: u64,
) -> Result<(GroundingParams, Vec<EpochLog>)> {
    if corpus.pairs.is_empty() {
        return Err(GapError::Empty("grounding corpus".into()));
    }
    let mut params = GroundingParams::init(vocab.clone(), config.dim, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut opt = Adam::new(&params.store, config.lr);
    let bs = config.batch_size.max(1);

    let mut log = Vec::with_capacity(config.epochs + 1);
    let probe_order = epoch_order(corpus.pairs.len(), &mut rng.clone());
    let mut initial = 0.0;
    let mut batches = 0;
    for chunk in probe_order.chunks(bs) {
        initial += infonce_loss(&corpus.batch(chunk), &params)?;
        batches += 1;
    }
    log.push(EpochLog {
        epoch: 0,
        loss: initial / batches as f64,
    });

    for epoch in 1..=config.epochs {
        let order = epoch_order(corpus.pairs.len(), &mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(bs) {
            let batch = corpus.batch(chunk);
            let grads = {
                let mut g = Graph::with_params(&params.store);
                let loss = infonce_graph(&mut g, &batch)?;
                total += g.item(loss);
                count += 1;
                let gr = g.backward(loss);
                g.param_grads(&gr)
            };
            opt.step(&mut params.store, &grads, |_| true);
        }
        log.push(EpochLog {
            epoch,
            loss: total / count as f64,
        });
    }
    Ok((params, log))
}

/// One RE with its own alignment logits.
#[derive(Debug, Clone)]
pub struct ReGrounding {
    pub re: ReferringExpression,
    pub logits: AlignmentLogits,
}

impl ReGrounding {
    /// Region scores of the phrase: mean over its words of the per-word
    /// softmax over regions.
    pub fn region_scores(&self) -> Vec<f64> {
        let (m, n) = self.logits.0.dim();
        let mut scores = vec![0.0; n];
        for row in self.logits.0.rows() {
            let mut p = row.to_vec();
            softmax_in_place(&mut p);
            for (s, v) in scores.iter_mut().zip(p) {
                *s += v / m as f64;
            }
        }
        scores
    }
}

/// Ground every RE of the tree and aggregate into `A*`.
pub fn ground_query<S: AsRef<str>>(
    tokens: &[S],
    tree: &ParseTree,
    regions: &RegionSet,
    params: &GroundingParams,
    aggregation: Aggregation,
) -> Result<QueryAlignment> {
    let res = extract_with_tags(tree, &RefTags::default());
    ground_res(tokens, &res, regions, params, aggregation).map(|(a, _)| a)
}

/// [`ground_query`] over an explicit RE list, also returning the per-RE
/// alignments.
pub fn ground_res<S: AsRef<str>>(
    tokens: &[S],
    res: &[ReferringExpression],
    regions: &RegionSet,
    params: &GroundingParams,
    aggregation: Aggregation,
) -> Result<(QueryAlignment, Vec<ReGrounding>)> {
    let t_len = tokens.len();
    if regions.dim() != params.dim {
        return Err(GapError::Shape(format!(
            "region dim {} but grounder dim {}",
            regions.dim(),
            params.dim
        )));
    }
    let coverage = re_coverage(res, t_len)?;
    let n = regions.len();
    let mut sum = Array2::zeros((t_len, n));
    let mut groundings = Vec::with_capacity(res.len());
    for re in res {
        let emb = encode_re(&tokens[re.start..=re.end], params)?;
        let logits = association_scores(&emb, regions, params)?;
        for (k, row) in logits.0.rows().into_iter().enumerate() {
            let mut dst = sum.row_mut(re.start + k);
            dst += &row;
        }
        groundings.push(ReGrounding {
            re: re.clone(),
            logits,
        });
    }
    match aggregation {
        Aggregation::Coverage => {
            for (i, &c) in coverage.iter().enumerate() {
                if c > 0 {
                    sum.row_mut(i).mapv_inplace(|x| x / c as f64);
                }
            }
        }
        Aggregation::AllRes => {
            if !res.is_empty() {
                sum /= res.len() as f64;
            }
        }
    }
    Ok((
        QueryAlignment {
            logits: sum,
            coverage,
        },
        groundings,
    ))
}
