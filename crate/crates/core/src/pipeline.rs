//! End-to-end experiment plumbing: grounding corpus, prior export, paired
//! baseline/GAP training and the supervision-fraction sweep.

use std::path::Path;

use indexmap::IndexMap;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bench::metrics::{evaluate, MetricsReport, PhraseScore, RunMetadata};
use crate::bench::world::{answer_vocab, read_jsonl, word_vocab, write_jsonl, Dataset, SynthInstance};
use crate::error::{GapError, Result};
use crate::exec;
use crate::grounder::{
    ground_res, train_grounder, Aggregation, GrounderConfig, GroundingCorpus, GroundingParams, QueryAlignment,
    ReGrounding,
};
use crate::models::{finetune_vqa, pretrain_attention, EpochRecord, ModelConfig, TrainConfig, VqaItem, VqaModel};
use crate::priors::{AttentionPrior, PriorTable};
use crate::treebank::{extract_referring_expressions, parse_bracketed, ReferringExpression};
use crate::vocab::Vocab;

/// Where attention priors come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    /// Ground each extracted RE with the trained grounder.
    #[default]
    Grounder,
    /// Ground the whole question as a single phrase.
    WholeQuery,
    Uniform,
    /// Seeded Gaussian alignment logits.
    Random,
}

/// Priors of one instance plus the per-phrase region scores behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorRecord {
    pub id: String,
    pub alpha_star: Vec<f64>,
    pub beta_star: Vec<f64>,
    pub joint_star: Vec<Vec<f64>>,
    pub phrases: Vec<PhraseScore>,
}

impl PriorRecord {
    pub fn prior(&self) -> AttentionPrior {
        AttentionPrior {
            alpha_star: self.alpha_star.clone(),
            beta_star: self.beta_star.clone(),
            joint_star: self.joint_star.clone(),
        }
    }
}

pub fn prior_table(records: &[PriorRecord]) -> PriorTable {
    records.iter().map(|r| (r.id.clone(), r.prior())).collect()
}

pub fn phrase_table(records: &[PriorRecord]) -> IndexMap<String, Vec<PhraseScore>> {
    records.iter().map(|r| (r.id.clone(), r.phrases.clone())).collect()
}

pub fn write_priors(path: &Path, records: &[PriorRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn read_priors(path: &Path) -> Result<Vec<PriorRecord>> {
    read_jsonl(path)
}

fn instance_res(inst: &SynthInstance, whole_query: bool) -> Result<Vec<ReferringExpression>> {
    if whole_query {
        return Ok(vec![ReferringExpression {
            start: 0,
            end: inst.tokens.len() - 1,
            tokens: inst.tokens.clone(),
            tag: "S".into(),
        }]);
    }
    let tree = parse_bracketed(&inst.tree)?;
    Ok(extract_referring_expressions(&tree))
}

/// Contrastive corpus: every RE (or whole question) paired with its image.
pub fn grounding_corpus(instances: &[SynthInstance], vocab: &Vocab, whole_query: bool) -> Result<GroundingCorpus> {
    let mut corpus = GroundingCorpus::default();
    for (img, inst) in instances.iter().enumerate() {
        corpus.images.push(inst.regions()?);
        for re in instance_res(inst, whole_query)? {
            corpus.pairs.push((vocab.ids(&re.tokens)?, img));
        }
    }
    Ok(corpus)
}

pub fn train_instance_grounder(
    instances: &[SynthInstance],
    config: &GrounderConfig,
    whole_query: bool,
    seed: u64,
) -> Result<(GroundingParams, Vec<crate::grounder::EpochLog>)> {
    let vocab = word_vocab();
    let corpus = grounding_corpus(instances, &vocab, whole_query)?;
    train_grounder(&corpus, &vocab, config, seed)
}

fn phrase_scores(groundings: &[ReGrounding]) -> Vec<PhraseScore> {
    groundings
        .iter()
        .map(|g| PhraseScore {
            start: g.re.start,
            end: g.re.end,
            scores: g.region_scores(),
        })
        .collect()
}

fn random_record(inst: &SynthInstance, seed: u64, index: usize) -> Result<PriorRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let (t, n) = (inst.tokens.len(), inst.boxes.len());
    let logits = Array2::from_shape_simple_fn((t, n), || StandardNormal.sample(&mut rng));
    let alignment = QueryAlignment {
        logits: logits.clone(),
        coverage: vec![1; t],
    };
    let prior = AttentionPrior::from_alignment(&alignment)?;
    let phrases = instance_res(inst, false)?
        .into_iter()
        .map(|re| {
            let rows = logits.slice(ndarray::s![re.start..=re.end, ..]).to_owned();
            ReGrounding {
                re,
                logits: crate::grounder::AlignmentLogits(rows),
            }
        })
        .collect::<Vec<_>>();
    Ok(PriorRecord {
        id: inst.id.clone(),
        alpha_star: prior.alpha_star,
        beta_star: prior.beta_star,
        joint_star: prior.joint_star,
        phrases: phrase_scores(&phrases),
    })
}

/// Priors for every instance from the chosen source. `grounder` is required
/// for [`PriorSource::Grounder`] and [`PriorSource::WholeQuery`].
pub fn compute_priors(
    instances: &[SynthInstance],
    source: PriorSource,
    grounder: Option<&GroundingParams>,
    aggregation: Aggregation,
    seed: u64,
) -> Result<Vec<PriorRecord>> {
    if matches!(source, PriorSource::Grounder | PriorSource::WholeQuery) && grounder.is_none() {
        return Err(GapError::InvalidArgument(format!("prior source {source:?} needs a trained grounder")));
    }
    let indexed: Vec<(usize, &SynthInstance)> = instances.iter().enumerate().collect();
    exec::map_ordered(&indexed, |&(index, inst)| -> Result<PriorRecord> {
        match source {
            PriorSource::Uniform => {
                let (t, n) = (inst.tokens.len(), inst.boxes.len());
                let p = AttentionPrior::uniform(t, n);
                let phrases = instance_res(inst, false)?
                    .into_iter()
                    .map(|re| PhraseScore {
                        start: re.start,
                        end: re.end,
                        scores: vec![1.0 / n as f64; n],
                    })
                    .collect();
                Ok(PriorRecord {
                    id: inst.id.clone(),
                    alpha_star: p.alpha_star,
                    beta_star: p.beta_star,
                    joint_star: p.joint_star,
                    phrases,
                })
            }
            PriorSource::Random => random_record(inst, seed, index),
            PriorSource::Grounder | PriorSource::WholeQuery => {
                let params = grounder.expect("checked above");
                let res = instance_res(inst, source == PriorSource::WholeQuery)?;
                let regions = inst.regions()?;
                let (alignment, groundings) = ground_res(&inst.tokens, &res, &regions, params, aggregation)?;
                let prior = AttentionPrior::from_alignment(&alignment)?;
                Ok(PriorRecord {
                    id: inst.id.clone(),
                    alpha_star: prior.alpha_star,
                    beta_star: prior.beta_star,
                    joint_star: prior.joint_star,
                    phrases: phrase_scores(&groundings),
                })
            }
        }
    })
    .into_iter()
    .collect()
}

pub fn items(instances: &[SynthInstance]) -> Result<Vec<VqaItem>> {
    instances.iter().map(SynthInstance::to_item).collect()
}

/// Training recipe of one model variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub model: ModelConfig,
    /// Refine with priors during fine-tuning and evaluation.
    pub use_prior: bool,
    /// Stage-1 attention pre-training (only meaningful with priors).
    pub pretrain: Option<TrainConfig>,
    pub finetune: TrainConfig,
    pub supervision_fraction: f64,
}

pub struct TrainedVariant {
    pub model: VqaModel,
    pub log: Vec<EpochRecord>,
}

/// Initialize with `seed`, optionally pre-train, then fine-tune.
pub fn train_variant(train: &[VqaItem], priors: Option<&PriorTable>, cfg: &VariantConfig, seed: u64) -> Result<TrainedVariant> {
    let mut model = VqaModel::new(cfg.model.clone(), word_vocab(), answer_vocab(), seed)?;
    let mut log = Vec::new();
    let priors = if cfg.use_prior {
        Some(priors.ok_or_else(|| GapError::InvalidArgument("refinement enabled but no priors given".into()))?)
    } else {
        None
    };
    if let (Some(p), Some(pre)) = (priors, cfg.pretrain.as_ref()) {
        log.extend(pretrain_attention(&mut model, train, p, pre, seed)?);
    }
    log.extend(finetune_vqa(&mut model, train, priors, &cfg.finetune, seed, cfg.supervision_fraction)?);
    Ok(TrainedVariant { model, log })
}

/// Stable hex digest of a serializable config.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

/// Train one variant on the train split and evaluate it on val.
pub fn run_variant(
    dataset: &Dataset,
    records: Option<&[PriorRecord]>,
    cfg: &VariantConfig,
    seed: u64,
    label: &str,
) -> Result<(TrainedVariant, MetricsReport)> {
    let table = records.map(prior_table);
    let phrases = records.map(phrase_table);
    let train = items(&dataset.train)?;
    let trained = train_variant(&train, table.as_ref(), cfg, seed)?;
    let meta = RunMetadata {
        seed,
        config_hash: config_hash(cfg)?,
        label: Some(label.to_string()),
    };
    let report = evaluate(
        &trained.model,
        &dataset.val,
        if cfg.use_prior { table.as_ref() } else { None },
        phrases.as_ref(),
        meta,
    )?;
    Ok((trained, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub seed: u64,
    pub variant: String,
    pub accuracy: f64,
    pub grounding_score_at_1: f64,
}

/// Baseline and GAP at every `(fraction, seed)`, with paired subsets and
/// initializations. `gap` must have `use_prior` set.
pub fn sample_efficiency_sweep(
    dataset: &Dataset,
    records: &[PriorRecord],
    baseline: &VariantConfig,
    gap: &VariantConfig,
    fractions: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(GapError::InvalidArgument(format!("fraction {f} outside (0, 1]")));
    }
    let mut rows = Vec::with_capacity(fractions.len() * seeds.len() * 2);
    for &fraction in fractions {
        for &seed in seeds {
            for (name, cfg) in [("baseline", baseline), ("gap", gap)] {
                let cfg = VariantConfig {
                    supervision_fraction: fraction,
                    ..cfg.clone()
                };
                let recs = cfg.use_prior.then_some(records);
                let (_, report) = run_variant(dataset, recs, &cfg, seed, name)?;
                rows.push(SweepRow {
                    fraction,
                    seed,
                    variant: name.to_string(),
                    accuracy: report.accuracy,
                    grounding_score_at_1: report.grounding_score.get(&1).copied().unwrap_or(0.0),
                });
            }
        }
    }
    Ok(rows)
}

/// Mean accuracy per `(variant, fraction)` over seeds.
pub fn sweep_curves(rows: &[SweepRow]) -> Vec<(String, f64, f64)> {
    let mut acc: IndexMap<(String, u64), (f64, usize)> = IndexMap::new();
    for r in rows {
        let e = acc.entry((r.variant.clone(), r.fraction.to_bits())).or_default();
        e.0 += r.accuracy;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|((v, f), (s, n))| (v, f64::from_bits(f), s / n as f64))
        .collect()
}
