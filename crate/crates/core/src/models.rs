//! Toy attention VQA models: a single-glimpse model, a multi-step
//! controller/read/memory model and a joint bilinear model, each with an
//! optional gated prior refinement, plus two-stage training.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Adam, GradStore, Graph, Mat, ParamStore, TensorRecord, Var};
use crate::error::{GapError, Result};
use crate::exec::{self, Schedule};
use crate::grounder::RegionSet;
use crate::nn::{bi_rnn, init_bi_rnn};
use crate::priors::{kl_divergence, kl_to_node, AttentionPrior, PriorTable};
use crate::refine::{gate_graph, gate_step_graph, init_gate, refine_graph, RefineMode};
use crate::vocab::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    SingleShot,
    Multistep,
    Joint,
}

impl std::str::FromStr for ModelFamily {
    type Err = GapError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_shot" => Ok(ModelFamily::SingleShot),
            "multistep" => Ok(ModelFamily::Multistep),
            "joint" => Ok(ModelFamily::Joint),
            other => Err(GapError::InvalidArgument(format!("unknown model family `{other}`"))),
        }
    }
}

impl ModelFamily {
    pub fn default_mode(self) -> RefineMode {
        match self {
            ModelFamily::Joint => RefineMode::Multiplicative,
            _ => RefineMode::Additive,
        }
    }
}

/// Learned gates, or every gate clamped to a constant.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    #[default]
    Learned,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: ModelFamily,
    pub dim: usize,
    /// Reasoning steps `K` of the multi-step model.
    pub steps: usize,
    /// 1-based steps at which the multi-step model refines.
    pub refine_steps: BTreeSet<usize>,
    pub mode: RefineMode,
    pub gate: GateMode,
}

impl ModelConfig {
    pub fn new(family: ModelFamily, dim: usize) -> Self {
        ModelConfig {
            family,
            dim,
            steps: 4,
            refine_steps: BTreeSet::from([1]),
            mode: family.default_mode(),
            gate: GateMode::Learned,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(GapError::InvalidArgument("model dim must be positive".into()));
        }
        if self.family == ModelFamily::Multistep {
            if self.steps == 0 {
                return Err(GapError::InvalidArgument("multi-step model needs K >= 1".into()));
            }
            if let Some(&k) = self.refine_steps.iter().find(|&&k| k == 0 || k > self.steps) {
                return Err(GapError::InvalidArgument(format!(
                    "refine step {k} outside 1..={}",
                    self.steps
                )));
            }
        }
        if let GateMode::Fixed(v) = self.gate {
            if !(0.0..=1.0).contains(&v) {
                return Err(GapError::InvalidArgument(format!("fixed gate {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Steps whose visual attention is pulled toward the prior in
    /// pre-training.
    pub fn pretrain_steps(&self) -> Vec<usize> {
        match self.family {
            ModelFamily::Multistep if !self.refine_steps.is_empty() => self.refine_steps.iter().copied().collect(),
            _ => vec![1],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqaModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub answers: Vocab,
    pub store: ParamStore,
}

/// Contextual word states `T×d` and the pooled query `1×d`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEncoding {
    pub contextual: Mat,
    pub pooled: Mat,
}

/// Attention of one reasoning step. Refined fields equal the raw ones when
/// no refinement ran at that step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionStep {
    pub alpha: Option<Vec<f64>>,
    pub alpha_refined: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    pub beta_refined: Option<Vec<f64>>,
    pub joint: Option<Mat>,
    pub joint_refined: Option<Mat>,
    pub gate_alpha: Option<f64>,
    pub gate_beta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionOutputs {
    pub steps: Vec<AttentionStep>,
}

impl AttentionOutputs {
    /// Region attention used for grounding metrics: the last step's refined
    /// `β′`, or the word-marginalized `A′` of the joint model.
    pub fn grounding_attention(&self) -> Vec<f64> {
        let last = self.steps.last().expect("at least one step");
        if let Some(b) = &last.beta_refined {
            return b.clone();
        }
        let a = last.joint_refined.as_ref().expect("joint attention");
        a.sum_axis(ndarray::Axis(0)).to_vec()
    }

    /// Every attention object produced, raw and refined.
    pub fn all_distributions(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for s in &self.steps {
            for v in [&s.alpha, &s.alpha_refined, &s.beta, &s.beta_refined].into_iter().flatten() {
                out.push(v.clone());
            }
            for m in [&s.joint, &s.joint_refined].into_iter().flatten() {
                out.push(m.iter().copied().collect());
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerDistribution(pub Vec<f64>);

impl AnswerDistribution {
    pub fn argmax(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(i, _)| i)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct StepVars {
    alpha: Option<Var>,
    alpha_refined: Option<Var>,
    beta: Option<Var>,
    beta_refined: Option<Var>,
    joint: Option<Var>,
    joint_refined: Option<Var>,
    gate_alpha: Option<Var>,
    gate_beta: Option<Var>,
}

/// Node handles of one forward pass.
pub struct ForwardVars {
    pub logits: Var,
    steps: Vec<StepVars>,
}

impl ForwardVars {
    /// Raw visual attention of step `k` (1-based); joint models expose `A`.
    pub fn raw_attention(&self, k: usize) -> Option<Var> {
        let s = self.steps.get(k.checked_sub(1)?)?;
        s.beta.or(s.joint)
    }
}

struct PriorNodes {
    alpha: Var,
    beta: Var,
    joint: Var,
}

fn check_prior(prior: &AttentionPrior, t: usize, n: usize) -> Result<()> {
    if prior.words() != t || prior.regions() != n {
        return Err(GapError::Shape(format!(
            "prior is {}x{} but query has {t} words and the image {n} regions",
            prior.words(),
            prior.regions()
        )));
    }
    if prior.joint_star.len() != t || prior.joint_star.iter().any(|r| r.len() != n) {
        return Err(GapError::Shape(format!("joint prior is not {t}x{n}")));
    }
    Ok(())
}

impl VqaModel {
    pub fn new(config: ModelConfig, vocab: Vocab, answers: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.is_empty() || answers.is_empty() {
            return Err(GapError::Empty("model vocabulary or answer set".into()));
        }
        let d = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_bi_rnn(&mut store, "q", vocab.len(), d, &mut rng);
        match config.family {
            ModelFamily::SingleShot => {
                for name in ["ss.att_v", "ss.att_q", "ss.fuse_q", "ss.fuse_v"] {
                    store.init_scaled(name, d, d, &mut rng);
                    store.init_zeros(&format!("{name}_b"), 1, d);
                }
                store.init_scaled("ss.att_w", d, 1, &mut rng);
                init_gate(&mut store, "gate_b", d, &mut rng);
            }
            ModelFamily::Multistep => {
                for k in 1..=config.steps {
                    store.init_scaled(&format!("ms.ctrl{k}"), d, d, &mut rng);
                    store.init_zeros(&format!("ms.ctrl{k}_b"), 1, d);
                }
                store.init_scaled("ms.ctrl_w", d, 1, &mut rng);
                for name in ["ms.read_v", "ms.read_m", "ms.mem0"] {
                    store.init_scaled(name, d, d, &mut rng);
                    store.init_zeros(&format!("{name}_b"), 1, d);
                }
                store.init_scaled("ms.read_w", d, 1, &mut rng);
                for name in ["ms.mem", "ms.out"] {
                    store.init_scaled(name, 2 * d, d, &mut rng);
                    store.init_zeros(&format!("{name}_b"), 1, d);
                }
                init_gate(&mut store, "gate_a", d, &mut rng);
                init_gate(&mut store, "gate_b", d, &mut rng);
            }
            ModelFamily::Joint => {
                for name in ["jt.x", "jt.y"] {
                    store.init_scaled(name, d, d, &mut rng);
                    store.init_zeros(&format!("{name}_b"), 1, d);
                }
                store.init_normal("jt.w_e", 1, d, 1.0, &mut rng);
                store.init_scaled("jt.w_l", d, d, &mut rng);
                store.init_scaled("jt.w_v", d, d, &mut rng);
                store.init_scaled("jt.out", 2 * d, d, &mut rng);
                store.init_zeros("jt.out_b", 1, d);
                init_gate(&mut store, "gate_j", d, &mut rng);
            }
        }
        store.init_scaled("ans.w", d, answers.len(), &mut rng);
        store.init_zeros("ans.b", 1, answers.len());
        Ok(VqaModel {
            config,
            vocab,
            answers,
            store,
        })
    }

    pub fn token_ids<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        if tokens.is_empty() {
            return Err(GapError::Empty("query tokens".into()));
        }
        self.vocab.ids(tokens)
    }

    fn gate_node(&self, g: &mut Graph, prefix: &str, control: Option<Var>, v_bar: Var, q: Var) -> Var {
        match self.config.gate {
            GateMode::Fixed(v) => g.scalar(v),
            GateMode::Learned => match control {
                Some(c) => gate_step_graph(g, prefix, c, v_bar, q),
                None => gate_graph(g, prefix, v_bar, q),
            },
        }
    }

    /// Build the forward graph for one instance.
    pub fn build(
        &self,
        g: &mut Graph,
        ids: &[usize],
        features: &Mat,
        prior: Option<&AttentionPrior>,
    ) -> Result<ForwardVars> {
        if ids.is_empty() {
            return Err(GapError::Empty("query tokens".into()));
        }
        if features.ncols() != self.config.dim || features.nrows() == 0 {
            return Err(GapError::Shape(format!(
                "regions are {}x{} for model dim {}",
                features.nrows(),
                features.ncols(),
                self.config.dim
            )));
        }
        let (t, n) = (ids.len(), features.nrows());
        let prior_nodes = match prior {
            Some(p) => {
                check_prior(p, t, n)?;
                let alpha = g.row_vector(&p.alpha_star);
                let beta = g.row_vector(&p.beta_star);
                let joint = g.constant(p.joint_matrix());
                Some(PriorNodes { alpha, beta, joint })
            }
            None => None,
        };
        let (l, q) = bi_rnn(g, "q", ids);
        let v = g.constant(features.clone());
        let v_bar = g.mean_rows(v);
        let (fused, steps) = match self.config.family {
            ModelFamily::SingleShot => self.single_shot(g, l, q, v, v_bar, prior_nodes.as_ref()),
            ModelFamily::Multistep => self.multistep(g, l, q, v, v_bar, prior_nodes.as_ref()),
            ModelFamily::Joint => self.joint(g, l, q, v, v_bar, prior_nodes.as_ref()),
        };
        let logits = decode_graph(g, fused);
        Ok(ForwardVars { logits, steps })
    }

    fn single_shot(&self, g: &mut Graph, _l: Var, q: Var, v: Var, v_bar: Var, prior: Option<&PriorNodes>) -> (Var, Vec<StepVars>) {
        let pv = affine_tanh(g, "ss.att_v", v);
        let pq = affine_tanh(g, "ss.att_q", q);
        let joint = g.mul_row(pv, pq);
        let w = g.param("ss.att_w");
        let scores = g.matmul(joint, w);
        let scores = g.transpose(scores);
        let beta = g.softmax_rows(scores);
        let mut step = StepVars {
            beta: Some(beta),
            beta_refined: Some(beta),
            ..Default::default()
        };
        if let Some(p) = prior {
            let gamma = self.gate_node(g, "gate_b", None, v_bar, q);
            step.beta_refined = Some(refine_graph(g, beta, p.beta, gamma, self.config.mode));
            step.gate_beta = Some(gamma);
        }
        let v_hat = g.matmul(step.beta_refined.expect("set"), v);
        let fq = affine_tanh(g, "ss.fuse_q", q);
        let fv = affine_tanh(g, "ss.fuse_v", v_hat);
        (g.mul(fq, fv), vec![step])
    }

    fn multistep(&self, g: &mut Graph, l: Var, q: Var, v: Var, v_bar: Var, prior: Option<&PriorNodes>) -> (Var, Vec<StepVars>) {
        let mut memory = affine_tanh(g, "ms.mem0", q);
        let read_v = affine_tanh(g, "ms.read_v", v);
        let ctrl_w = g.param("ms.ctrl_w");
        let read_w = g.param("ms.read_w");
        let mut steps = Vec::with_capacity(self.config.steps);
        for k in 1..=self.config.steps {
            let refine_here = prior.filter(|_| self.config.refine_steps.contains(&k));
            let qk = affine_tanh(g, &format!("ms.ctrl{k}"), q);
            let lq = g.mul_row(l, qk);
            let a_scores = g.matmul(lq, ctrl_w);
            let a_scores = g.transpose(a_scores);
            let alpha = g.softmax_rows(a_scores);
            let mut step = StepVars {
                alpha: Some(alpha),
                alpha_refined: Some(alpha),
                ..Default::default()
            };
            if let Some(p) = refine_here {
                let c_tilde = g.matmul(alpha, l);
                let lam = self.gate_node(g, "gate_a", Some(c_tilde), v_bar, q);
                step.alpha_refined = Some(refine_graph(g, alpha, p.alpha, lam, self.config.mode));
                step.gate_alpha = Some(lam);
            }
            let c_k = g.matmul(step.alpha_refined.expect("set"), l);
            let mm = affine_tanh(g, "ms.read_m", memory);
            let key = g.offset(mm, 1.0);
            let key = g.mul(key, c_k);
            let inter = g.mul_row(read_v, key);
            let b_scores = g.matmul(inter, read_w);
            let b_scores = g.transpose(b_scores);
            let beta = g.softmax_rows(b_scores);
            step.beta = Some(beta);
            step.beta_refined = Some(beta);
            if let Some(p) = refine_here {
                let gam = self.gate_node(g, "gate_b", Some(c_k), v_bar, q);
                step.beta_refined = Some(refine_graph(g, beta, p.beta, gam, self.config.mode));
                step.gate_beta = Some(gam);
            }
            let r_k = g.matmul(step.beta_refined.expect("set"), v);
            let cat = g.concat_cols(&[memory, r_k]);
            memory = affine_tanh(g, "ms.mem", cat);
            steps.push(step);
        }
        let cat = g.concat_cols(&[memory, q]);
        (affine_tanh(g, "ms.out", cat), steps)
    }

    fn joint(&self, g: &mut Graph, l: Var, q: Var, v: Var, v_bar: Var, prior: Option<&PriorNodes>) -> (Var, Vec<StepVars>) {
        let x = affine_tanh(g, "jt.x", l);
        let y = affine_tanh(g, "jt.y", v);
        let w_e = g.param("jt.w_e");
        let xw = g.mul_row(x, w_e);
        let yt = g.transpose(y);
        let e = g.matmul(xw, yt);
        let a = g.softmax_all(e);
        let mut step = StepVars {
            joint: Some(a),
            joint_refined: Some(a),
            ..Default::default()
        };
        if let Some(p) = prior {
            let lam = self.gate_node(g, "gate_j", None, v_bar, q);
            step.joint_refined = Some(refine_graph(g, a, p.joint, lam, self.config.mode));
            step.gate_beta = Some(lam);
        }
        let f = bilinear_fusion(g, l, v, step.joint_refined.expect("set"));
        let cat = g.concat_cols(&[f, q]);
        (affine_tanh(g, "jt.out", cat), vec![step])
    }

    pub fn encode_query<S: AsRef<str>>(&self, tokens: &[S]) -> Result<QueryEncoding> {
        let ids = self.token_ids(tokens)?;
        let mut g = Graph::with_params(&self.store);
        let (l, q) = bi_rnn(&mut g, "q", &ids);
        Ok(QueryEncoding {
            contextual: g.value(l).clone(),
            pooled: g.value(q).clone(),
        })
    }

    pub fn forward<S: AsRef<str>>(
        &self,
        tokens: &[S],
        regions: &RegionSet,
        prior: Option<&AttentionPrior>,
    ) -> Result<(AttentionOutputs, AnswerDistribution)> {
        let ids = self.token_ids(tokens)?;
        self.forward_ids(&ids, regions, prior)
    }

    pub fn forward_ids(
        &self,
        ids: &[usize],
        regions: &RegionSet,
        prior: Option<&AttentionPrior>,
    ) -> Result<(AttentionOutputs, AnswerDistribution)> {
        let mut g = Graph::with_params(&self.store);
        let vars = self.build(&mut g, ids, &regions.features, prior)?;
        let outputs = read_outputs(&g, &vars);
        let logits = g.row_values(vars.logits);
        Ok((outputs, AnswerDistribution(softmax(&logits))))
    }

    /// Answer logits, for identity checks.
    pub fn logits<S: AsRef<str>>(&self, tokens: &[S], regions: &RegionSet, prior: Option<&AttentionPrior>) -> Result<Vec<f64>> {
        let ids = self.token_ids(tokens)?;
        let mut g = Graph::with_params(&self.store);
        let vars = self.build(&mut g, &ids, &regions.features, prior)?;
        Ok(g.row_values(vars.logits))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            answers: self.answers.clone(),
            tensors: self.store.to_record(),
        };
        std::fs::write(path, serde_json::to_string(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(GapError::Format(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        ck.config.validate()?;
        let store = ParamStore::from_record(ck.tensors)?;
        let reference = VqaModel::new(ck.config.clone(), ck.vocab.clone(), ck.answers.clone(), 0)?;
        for (name, t) in reference.store.iter() {
            match store.get(name) {
                Some(s) if s.dim() == t.dim() => {}
                _ => return Err(GapError::Format(format!("checkpoint tensor `{name}` missing or misshapen"))),
            }
        }
        Ok(VqaModel {
            config: ck.config,
            vocab: ck.vocab,
            answers: ck.answers,
            store,
        })
    }
}

const CHECKPOINT_FORMAT: &str = "gap-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    vocab: Vocab,
    answers: Vocab,
    tensors: Vec<TensorRecord>,
}

fn affine_tanh(g: &mut Graph, name: &str, x: Var) -> Var {
    let w = g.param(name);
    let b = g.param(&format!("{name}_b"));
    let y = g.matmul(x, w);
    let y = g.add_row(y, b);
    g.tanh(y)
}

/// `f_t = Σ_ij (L W_L)_it A_ij (V W_V)_jt`, returned as `1×d`.
pub fn bilinear_fusion(g: &mut Graph, l: Var, v: Var, a: Var) -> Var {
    let w_l = g.param("jt.w_l");
    let w_v = g.param("jt.w_v");
    let lw = g.matmul(l, w_l);
    let vw = g.matmul(v, w_v);
    let av = g.matmul(a, vw);
    let prod = g.mul(lw, av);
    g.sum_rows(prod)
}

/// Linear answer layer; softmax is applied by the caller.
pub fn decode_graph(g: &mut Graph, fused: Var) -> Var {
    let w = g.param("ans.w");
    let b = g.param("ans.b");
    let y = g.matmul(fused, w);
    g.add(y, b)
}

pub fn decode_answer(fused: &[f64], model: &VqaModel) -> Result<AnswerDistribution> {
    if fused.len() != model.config.dim {
        return Err(GapError::Shape(format!("fused vector of length {}", fused.len())));
    }
    if fused.iter().any(|x| !x.is_finite()) {
        return Err(GapError::NonFinite("fused vector".into()));
    }
    let mut g = Graph::with_params(&model.store);
    let f = g.row_vector(fused);
    let logits = decode_graph(&mut g, f);
    Ok(AnswerDistribution(softmax(&g.row_values(logits))))
}

fn read_outputs(g: &Graph, vars: &ForwardVars) -> AttentionOutputs {
    let vec = |v: Option<Var>| v.map(|v| g.row_values(v));
    let mat = |v: Option<Var>| v.map(|v| g.value(v).clone());
    let scalar = |v: Option<Var>| v.map(|v| g.item(v));
    AttentionOutputs {
        steps: vars
            .steps
            .iter()
            .map(|s| AttentionStep {
                alpha: vec(s.alpha),
                alpha_refined: vec(s.alpha_refined),
                beta: vec(s.beta),
                beta_refined: vec(s.beta_refined),
                joint: mat(s.joint),
                joint_refined: mat(s.joint_refined),
                gate_alpha: scalar(s.gate_alpha),
                gate_beta: scalar(s.gate_beta),
            })
            .collect(),
    }
}

/// Cross-entropy `−log P(y)` on the graph.
pub fn cross_entropy(g: &mut Graph, logits: Var, answer: usize) -> Var {
    let n = g.value(logits).ncols();
    let ls = g.log_softmax_rows(logits);
    let mut onehot = Array2::zeros((1, n));
    onehot[[0, answer]] = -1.0;
    let pick = g.constant(onehot);
    let picked = g.mul(ls, pick);
    g.sum_all(picked)
}

/// One VQA instance in model-ready form.
#[derive(Debug, Clone)]
pub struct VqaItem {
    pub id: String,
    pub tokens: Vec<String>,
    pub regions: RegionSet,
    pub answer: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
        }
    }
}

impl TrainConfig {
    /// Default stage-1 schedule.
    pub fn pretrain() -> Self {
        TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub loss: f64,
    /// Training accuracy over the supervised subset (fine-tuning only).
    pub accuracy: Option<f64>,
}

/// Training objective of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Answer,
    AttentionKl,
}

/// An item with resolved token ids and prior.
#[derive(Debug, Clone)]
pub struct Prepared<'a> {
    pub item: &'a VqaItem,
    pub ids: Vec<usize>,
    pub prior: Option<&'a AttentionPrior>,
}

pub fn prepare<'a>(model: &VqaModel, items: &'a [VqaItem], priors: Option<&'a PriorTable>) -> Result<Vec<Prepared<'a>>> {
    items
        .iter()
        .map(|item| {
            let prior = match priors {
                Some(table) => Some(table.get(&item.id).ok_or_else(|| GapError::MissingPrior(item.id.clone()))?),
                None => None,
            };
            Ok(Prepared {
                item,
                ids: model.token_ids(&item.tokens)?,
                prior,
            })
        })
        .collect()
}

/// Sum of `KL(prior ‖ raw attention)` over the pre-training steps.
fn attention_kl_node(model: &VqaModel, g: &mut Graph, vars: &ForwardVars, prior: &AttentionPrior) -> Var {
    let mut total: Option<Var> = None;
    for k in model.config.pretrain_steps() {
        let att = vars.raw_attention(k).expect("step exists");
        let target = match model.config.family {
            ModelFamily::Joint => prior.joint_matrix(),
            _ => Array2::from_shape_vec((1, prior.regions()), prior.beta_star.clone()).expect("row"),
        };
        let kl = kl_to_node(g, &target, att);
        total = Some(match total {
            Some(t) => g.add(t, kl),
            None => kl,
        });
    }
    total.expect("at least one pre-training step")
}

/// Per-instance gradients summed in input order. Returns the summed
/// gradient, the summed loss and the number of correct argmax answers.
pub fn batch_gradients(
    model: &VqaModel,
    batch: &[&Prepared],
    objective: Objective,
    schedule: Schedule,
) -> Result<(GradStore, f64, usize)> {
    let per_item = exec::map_ordered_with(schedule, batch, |p| -> Result<(GradStore, f64, bool)> {
        let mut g = Graph::with_params(&model.store);
        let vars = model.build(&mut g, &p.ids, &p.item.regions.features, if objective == Objective::AttentionKl { None } else { p.prior })?;
        let (loss, correct) = match objective {
            Objective::Answer => {
                let logits = g.row_values(vars.logits);
                let pred = AnswerDistribution(logits).argmax();
                (cross_entropy(&mut g, vars.logits, p.item.answer), pred == p.item.answer)
            }
            Objective::AttentionKl => {
                let prior = p.prior.ok_or_else(|| GapError::MissingPrior(p.item.id.clone()))?;
                (attention_kl_node(model, &mut g, &vars, prior), false)
            }
        };
        let value = g.item(loss);
        if !value.is_finite() {
            return Err(GapError::NonFinite(format!("loss of `{}`", p.item.id)));
        }
        let grads = g.backward(loss);
        Ok((g.param_grads(&grads), value, correct))
    });
    let mut total = GradStore::zeros_like(&model.store);
    let mut loss = 0.0;
    let mut correct = 0;
    for r in per_item {
        let (gs, l, c) = r?;
        total.merge(&gs);
        loss += l;
        correct += usize::from(c);
    }
    Ok((total, loss, correct))
}

fn train_loop(
    model: &mut VqaModel,
    data: &[Prepared],
    objective: Objective,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    trainable: impl Fn(&str) -> bool,
) -> Result<Vec<EpochRecord>> {
    let mut opt = Adam::new(&model.store, config.lr);
    let bs = config.batch_size.max(1);
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(rng);
        let (mut loss, mut correct) = (0.0, 0);
        for chunk in order.chunks(bs) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &data[i]).collect();
            let (mut grads, l, c) = batch_gradients(model, &batch, objective, Schedule::Auto)?;
            grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut model.store, &grads, &trainable);
            loss += l;
            correct += c;
        }
        if !model.store.all_finite() {
            return Err(GapError::NonFinite("parameters after update".into()));
        }
        log.push(EpochRecord {
            stage: match objective {
                Objective::Answer => Stage::Finetune,
                Objective::AttentionKl => Stage::Pretrain,
            },
            epoch,
            loss: loss / data.len() as f64,
            accuracy: (objective == Objective::Answer).then(|| correct as f64 / data.len() as f64),
        });
    }
    Ok(log)
}

/// Stage 1: pull raw model attention toward the priors. The answer head is
/// never updated.
pub fn pretrain_attention(
    model: &mut VqaModel,
    items: &[VqaItem],
    priors: &PriorTable,
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<EpochRecord>> {
    let data = prepare(model, items, Some(priors))?;
    if data.is_empty() {
        return Err(GapError::Empty("pre-training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    train_loop(model, &data, Objective::AttentionKl, config, &mut rng, |name| !name.starts_with("ans."))
}

/// Seeded subset of `n` indices of size `round(fraction·n)`, in index order.
pub fn supervised_subset(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(GapError::InvalidArgument(format!("supervision fraction {fraction} outside (0, 1]")));
    }
    let take = (fraction * n as f64).round() as usize;
    if take == 0 {
        return Err(GapError::Empty(format!("supervised subset of {n} items at fraction {fraction}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995));
    idx.truncate(take);
    idx.sort_unstable();
    Ok(idx)
}

/// Stage 2: cross-entropy training of the full model, with refinement
/// active whenever `priors` is given.
pub fn finetune_vqa(
    model: &mut VqaModel,
    items: &[VqaItem],
    priors: Option<&PriorTable>,
    config: &TrainConfig,
    seed: u64,
    supervision_fraction: f64,
) -> Result<Vec<EpochRecord>> {
    let subset = supervised_subset(items.len(), supervision_fraction, seed)?;
    let chosen: Vec<VqaItem> = subset.iter().map(|&i| items[i].clone()).collect();
    let data = prepare(model, &chosen, priors)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    train_loop(model, &data, Objective::Answer, config, &mut rng, |_| true)
}

/// Mean over items of `KL(prior ‖ raw attention)` at the pre-training steps.
pub fn mean_attention_kl(model: &VqaModel, items: &[VqaItem], priors: &PriorTable) -> Result<f64> {
    let data = prepare(model, items, Some(priors))?;
    if data.is_empty() {
        return Err(GapError::Empty("evaluation set".into()));
    }
    let kls = exec::map_ordered(&data, |p| -> Result<f64> {
        let (out, _) = model.forward_ids(&p.ids, &p.item.regions, None)?;
        let prior = p.prior.expect("prepared with priors");
        let mut total = 0.0;
        for k in model.config.pretrain_steps() {
            let step = &out.steps[k - 1];
            total += match model.config.family {
                ModelFamily::Joint => {
                    let target: Vec<f64> = prior.joint_matrix().iter().copied().collect();
                    let a: Vec<f64> = step.joint.as_ref().expect("joint").iter().copied().collect();
                    kl_divergence(&target, &a)?
                }
                _ => kl_divergence(&prior.beta_star, step.beta.as_ref().expect("beta"))?,
            };
        }
        Ok(total)
    });
    let mut sum = 0.0;
    for k in kls {
        sum += k?;
    }
    Ok(sum / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_gradients;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn tiny(family: ModelFamily) -> VqaModel {
        let mut cfg = ModelConfig::new(family, 4);
        cfg.steps = 2;
        let vocab = Vocab::new(["what", "color", "red", "ball"]);
        let answers = Vocab::new(["red", "blue", "green"]);
        VqaModel::new(cfg, vocab, answers, 7).unwrap()
    }

    fn regions() -> RegionSet {
        let f = array![[0.5, -0.2, 0.1, 0.9], [-0.4, 0.3, 0.8, 0.0], [0.2, 0.2, -0.6, 0.4]];
        RegionSet::new(f, vec![[0.0, 0.0, 1.0, 1.0]; 3]).unwrap()
    }

    fn prior() -> AttentionPrior {
        AttentionPrior {
            alpha_star: vec![0.2, 0.5, 0.3],
            beta_star: vec![0.6, 0.3, 0.1],
            joint_star: vec![vec![0.1, 0.05, 0.05], vec![0.3, 0.1, 0.1], vec![0.2, 0.05, 0.05]],
        }
    }

    const Q: [&str; 3] = ["what", "color", "ball"];

    #[test]
    fn encoder_shapes_and_determinism() {
        let m = tiny(ModelFamily::SingleShot);
        let e = m.encode_query(&Q).unwrap();
        assert_eq!(e.contextual.dim(), (3, 4));
        assert_eq!(e.pooled.dim(), (1, 4));
        assert_eq!(e, m.encode_query(&Q).unwrap());
        let swapped = m.encode_query(&["ball", "color", "what"]).unwrap();
        assert_ne!(e.pooled, swapped.pooled);
        assert!(matches!(m.encode_query(&["what", "cube"]), Err(GapError::UnknownToken(_))));
    }

    #[test]
    fn outputs_are_distributions() {
        for family in [ModelFamily::SingleShot, ModelFamily::Multistep, ModelFamily::Joint] {
            let m = tiny(family);
            let (out, ans) = m.forward(&Q, &regions(), Some(&prior())).unwrap();
            assert_abs_diff_eq!(ans.0.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            for d in out.all_distributions() {
                assert_abs_diff_eq!(d.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
                assert!(d.iter().all(|&x| x >= 0.0));
            }
            let expected_steps = if family == ModelFamily::Multistep { 2 } else { 1 };
            assert_eq!(out.steps.len(), expected_steps);
        }
    }

    #[test]
    fn no_prior_means_unrefined() {
        let m = tiny(ModelFamily::SingleShot);
        let (out, _) = m.forward(&Q, &regions(), None).unwrap();
        assert_eq!(out.steps[0].beta, out.steps[0].beta_refined);
        assert!(out.steps[0].gate_beta.is_none());
    }

    #[test]
    fn clamped_gates_reproduce_baseline_and_prior() {
        for family in [ModelFamily::SingleShot, ModelFamily::Multistep, ModelFamily::Joint] {
            let mut m = tiny(family);
            let base = m.logits(&Q, &regions(), None).unwrap();
            m.config.gate = GateMode::Fixed(1.0);
            let clamped = m.logits(&Q, &regions(), Some(&prior())).unwrap();
            for (a, b) in base.iter().zip(&clamped) {
                assert!((a - b).abs() <= 1e-9, "{family:?}");
            }
            m.config.gate = GateMode::Fixed(0.0);
            let (out, _) = m.forward(&Q, &regions(), Some(&prior())).unwrap();
            let s = &out.steps[0];
            match family {
                ModelFamily::Joint => {
                    let a = s.joint_refined.as_ref().unwrap();
                    assert!((a - &prior().joint_matrix()).iter().all(|x| x.abs() < 1e-12));
                }
                _ => {
                    for (a, b) in s.beta_refined.as_ref().unwrap().iter().zip(&prior().beta_star) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn refine_steps_are_validated() {
        let mut cfg = ModelConfig::new(ModelFamily::Multistep, 4);
        cfg.steps = 2;
        cfg.refine_steps = BTreeSet::from([3]);
        let err = VqaModel::new(cfg, Vocab::new(["a"]), Vocab::new(["b"]), 0);
        assert!(matches!(err, Err(GapError::InvalidArgument(_))));
    }

    #[test]
    fn multistep_refines_only_selected_steps() {
        let m = tiny(ModelFamily::Multistep);
        let (out, _) = m.forward(&Q, &regions(), Some(&prior())).unwrap();
        assert!(out.steps[0].gate_beta.is_some() && out.steps[0].gate_alpha.is_some());
        assert!(out.steps[1].gate_beta.is_none());
        assert_eq!(out.steps[1].beta, out.steps[1].beta_refined);
    }

    #[test]
    fn prior_shape_mismatch_is_an_error() {
        let m = tiny(ModelFamily::SingleShot);
        let bad = AttentionPrior::uniform(3, 5);
        assert!(matches!(m.forward(&Q, &regions(), Some(&bad)), Err(GapError::Shape(_))));
    }

    #[test]
    fn zero_answer_weights_decode_uniform() {
        let mut m = tiny(ModelFamily::SingleShot);
        m.store.insert("ans.w", Array2::zeros((4, 3)));
        let d = decode_answer(&[1.0, -2.0, 0.5, 3.0], &m).unwrap();
        for p in d.0 {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn bilinear_fusion_single_cell() {
        let mut store = ParamStore::new();
        store.insert("jt.w_l", Array2::eye(3));
        store.insert("jt.w_v", Array2::eye(3));
        let mut g = Graph::with_params(&store);
        let l = g.constant(array![[0.5, -1.0, 2.0]]);
        let v = g.constant(array![[3.0, 0.25, -1.0]]);
        let a = g.constant(array![[0.4]]);
        let f = bilinear_fusion(&mut g, l, v, a);
        assert_eq!(g.row_values(f), vec![0.5 * 0.4 * 3.0, -0.25 * 0.4, -(2.0 * 0.4)]);
    }

    #[test]
    fn bilinear_fusion_gradients() {
        let mut store = ParamStore::new();
        store.insert("jt.w_l", array![[0.3, -0.2], [0.1, 0.5]]);
        store.insert("jt.w_v", array![[-0.4, 0.2], [0.6, 0.1]]);
        store.insert("l", array![[0.5, -1.0], [0.2, 0.7], [1.1, 0.3]]);
        store.insert("v", array![[0.9, 0.1], [-0.3, 0.8]]);
        store.insert("a", array![[0.1, 0.2], [0.3, 0.1], [0.2, 0.1]]);
        let r = check_gradients(&store, 1e-5, |g| {
            let l = g.param("l");
            let v = g.param("v");
            let a = g.param("a");
            let f = bilinear_fusion(g, l, v, a);
            let sq = g.mul(f, f);
            g.sum_all(sq)
        });
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn end_to_end_gradients() {
        let r = regions();
        for family in [ModelFamily::SingleShot, ModelFamily::Multistep, ModelFamily::Joint] {
            let mut m = tiny(family);
            // Larger weights lift the gate gradients above finite-difference noise.
            for name in m.store.names().map(String::from).collect::<Vec<_>>() {
                if !name.starts_with("q.") {
                    *m.store.get_mut(&name).unwrap() *= 3.0;
                }
            }
            let ids = m.token_ids(&Q).unwrap();
            let p = prior();
            let report = check_gradients(&m.store, 1e-5, |g| {
                let vars = m.build(g, &ids, &r.features, Some(&p)).unwrap();
                cross_entropy(g, vars.logits, 1)
            });
            assert!(report.passes(1e-4), "{family:?}: {report:?}");
        }
    }

    fn items(n: usize) -> Vec<VqaItem> {
        (0..n)
            .map(|i| VqaItem {
                id: format!("q{i}"),
                tokens: Q.iter().map(|s| s.to_string()).collect(),
                regions: regions(),
                answer: i % 3,
            })
            .collect()
    }

    #[test]
    fn pretraining_freezes_answer_head_and_lowers_kl() {
        let mut m = tiny(ModelFamily::SingleShot);
        let data = items(4);
        let table: PriorTable = data.iter().map(|it| (it.id.clone(), prior())).collect();
        let before_kl = mean_attention_kl(&m, &data, &table).unwrap();
        let head = (m.store.get("ans.w").unwrap().clone(), m.store.get("ans.b").unwrap().clone());
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 2,
            lr: 1e-2,
        };
        pretrain_attention(&mut m, &data, &table, &cfg, 1).unwrap();
        assert_eq!(m.store.get("ans.w").unwrap(), &head.0);
        assert_eq!(m.store.get("ans.b").unwrap(), &head.1);
        assert!(mean_attention_kl(&m, &data, &table).unwrap() < before_kl);

        let snapshot = m.clone();
        pretrain_attention(&mut m, &data, &table, &TrainConfig { epochs: 0, ..cfg }, 1).unwrap();
        assert_eq!(m, snapshot);
    }

    #[test]
    fn missing_prior_names_the_instance() {
        let mut m = tiny(ModelFamily::SingleShot);
        let data = items(2);
        let table: PriorTable = [("q0".to_string(), prior())].into_iter().collect();
        let err = pretrain_attention(&mut m, &data, &table, &TrainConfig::default(), 0).unwrap_err();
        assert!(err.to_string().contains("q1"));
    }

    #[test]
    fn supervision_subsets() {
        assert_eq!(supervised_subset(50, 1.0, 3).unwrap(), (0..50).collect::<Vec<_>>());
        let a = supervised_subset(100, 0.1, 3).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, supervised_subset(100, 0.1, 3).unwrap());
        assert_ne!(a, supervised_subset(100, 0.1, 4).unwrap());
        assert!(supervised_subset(3, 0.1, 0).is_err());
        assert!(supervised_subset(3, 0.0, 0).is_err());
        assert!(supervised_subset(3, 1.5, 0).is_err());
    }

    #[test]
    fn single_instance_loss_decreases() {
        let mut m = tiny(ModelFamily::Joint);
        let data = items(1);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 1,
            lr: 1e-3,
        };
        let mut losses = Vec::new();
        for _ in 0..20 {
            losses.push(finetune_vqa(&mut m, &data, None, &cfg, 0, 1.0).unwrap()[0].loss);
        }
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny(ModelFamily::Multistep);
        let dir = std::env::temp_dir().join(format!("gap-ck-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.json");
        m.save(&path).unwrap();
        assert_eq!(VqaModel::load(&path).unwrap(), m);
        std::fs::write(&path, "{\"format\":\"other\"}").unwrap();
        assert!(VqaModel::load(&path).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
