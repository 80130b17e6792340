//! Evaluation metrics: box IOU, phrase recall@k, top-k grounding score and
//! the aggregate metrics report.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::world::SynthInstance;
use crate::error::{GapError, Result};
use crate::exec;
use crate::models::{VqaModel, VqaItem};
use crate::priors::PriorTable;

/// Cutoffs reported for recall and grounding score.
pub const TOP_K: [usize; 3] = [1, 5, 10];
pub const IOU_THRESHOLD: f64 = 0.5;

fn check_box(b: &[f64; 4]) -> Result<()> {
    if !(b[0] < b[2] && b[1] < b[3]) || b.iter().any(|x| !x.is_finite()) {
        return Err(GapError::InvalidArgument(format!("degenerate box {b:?}")));
    }
    Ok(())
}

/// Intersection over union of two `(x1, y1, x2, y2)` boxes.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> Result<f64> {
    check_box(a)?;
    check_box(b)?;
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let area = |x: &[f64; 4]| (x[2] - x[0]) * (x[3] - x[1]);
    Ok(inter / (area(a) + area(b) - inter))
}

/// Indices of the `k` largest scores, ties broken by lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Whether any of the top-`k` regions overlaps a groundtruth box with
/// IOU ≥ 0.5.
pub fn phrase_hit(scores: &[f64], gt_boxes: &[[f64; 4]], region_boxes: &[[f64; 4]], k: usize) -> Result<bool> {
    if k == 0 {
        return Err(GapError::InvalidArgument("k must be at least 1".into()));
    }
    if k > region_boxes.len() {
        return Err(GapError::InvalidArgument(format!("k = {k} exceeds {} regions", region_boxes.len())));
    }
    if scores.len() != region_boxes.len() {
        return Err(GapError::Shape(format!(
            "{} scores for {} regions",
            scores.len(),
            region_boxes.len()
        )));
    }
    for j in top_k(scores, k) {
        for gt in gt_boxes {
            if iou(&region_boxes[j], gt)? >= IOU_THRESHOLD {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// Fraction of phrases whose top-`k` regions hit a groundtruth box. Each
/// phrase carries its region scores and groundtruth boxes; all share
/// `region_boxes`.
pub fn recall_at_k(phrase_scores: &[Vec<f64>], gt_boxes: &[Vec<[f64; 4]>], region_boxes: &[[f64; 4]], k: usize) -> Result<f64> {
    if phrase_scores.len() != gt_boxes.len() {
        return Err(GapError::Shape("one groundtruth box list per phrase".into()));
    }
    if phrase_scores.is_empty() {
        return Err(GapError::Empty("no phrases".into()));
    }
    let mut hits = 0;
    for (s, gt) in phrase_scores.iter().zip(gt_boxes) {
        hits += usize::from(phrase_hit(s, gt, region_boxes, k)?);
    }
    Ok(hits as f64 / phrase_scores.len() as f64)
}

/// Attention mass on relevant regions among the `k` highest-attended ones.
pub fn grounding_score_topk(beta: &[f64], relevant: &[usize], k: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(GapError::Empty("relevant region set".into()));
    }
    if k == 0 || k > beta.len() {
        return Err(GapError::InvalidArgument(format!("k = {k} outside 1..={}", beta.len())));
    }
    if let Some(&j) = relevant.iter().find(|&&j| j >= beta.len()) {
        return Err(GapError::InvalidArgument(format!("relevant region {j} out of range")));
    }
    Ok(top_k(beta, k).into_iter().filter(|j| relevant.contains(j)).map(|j| beta[j]).sum())
}

/// Region scores of one phrase, keyed by its inclusive token span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseScore {
    pub start: usize,
    pub end: usize,
    pub scores: Vec<f64>,
}

/// Accumulates recall over phrases from many images.
#[derive(Debug, Clone, Default)]
pub struct RecallTally {
    pub phrases: usize,
    pub hits: BTreeMap<usize, usize>,
}

impl RecallTally {
    /// Add the referential phrases of `inst` scored by `scores`. Phrases
    /// without scores are skipped.
    pub fn add(&mut self, inst: &SynthInstance, scores: &[PhraseScore]) -> Result<()> {
        let n = inst.boxes.len();
        for p in inst.gt_phrase_regions.iter().filter(|p| p.referential) {
            let Some(s) = scores.iter().find(|s| s.start == p.start && s.end == p.end) else {
                continue;
            };
            let gt: Vec<[f64; 4]> = p.regions.iter().map(|&j| inst.boxes[j]).collect();
            self.phrases += 1;
            for k in TOP_K.into_iter().filter(|&k| k <= n) {
                *self.hits.entry(k).or_default() += usize::from(phrase_hit(&s.scores, &gt, &inst.boxes, k)?);
            }
        }
        Ok(())
    }

    pub fn recall(&self) -> BTreeMap<usize, f64> {
        self.hits
            .iter()
            .map(|(&k, &h)| (k, if self.phrases == 0 { 0.0 } else { h as f64 / self.phrases as f64 }))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub instances: usize,
    pub accuracy: f64,
    pub per_type_accuracy: BTreeMap<String, f64>,
    /// Phrase recall at each reported `k ≤ N`; empty without phrase scores.
    pub recall: BTreeMap<usize, f64>,
    pub recall_phrases: usize,
    /// Mean top-k grounding score over instances with relevant regions.
    pub grounding_score: BTreeMap<usize, f64>,
    pub grounding_instances: usize,
    pub metadata: RunMetadata,
}

/// Per-instance model outcome used by [`evaluate`].
struct Outcome {
    correct: bool,
    grounding: Vec<(usize, f64)>,
}

/// Score `model` on `instances`. Refinement is active when `priors` is
/// given; recall is computed from `phrase_scores` when given.
pub fn evaluate(
    model: &VqaModel,
    instances: &[SynthInstance],
    priors: Option<&PriorTable>,
    phrase_scores: Option<&IndexMap<String, Vec<PhraseScore>>>,
    metadata: RunMetadata,
) -> Result<MetricsReport> {
    if instances.is_empty() {
        return Err(GapError::Empty("evaluation set".into()));
    }
    let outcomes = exec::map_ordered(instances, |inst| -> Result<Outcome> {
        let item: VqaItem = inst.to_item()?;
        let prior = match priors {
            Some(t) => Some(t.get(&inst.id).ok_or_else(|| GapError::MissingPrior(inst.id.clone()))?),
            None => None,
        };
        let (att, ans) = model.forward(&item.tokens, &item.regions, prior)?;
        let relevant = inst.relevant_regions();
        let mut grounding = Vec::new();
        if !relevant.is_empty() {
            let beta = att.grounding_attention();
            for k in TOP_K.into_iter().filter(|&k| k <= beta.len()) {
                grounding.push((k, grounding_score_topk(&beta, &relevant, k)?));
            }
        }
        Ok(Outcome {
            correct: ans.argmax() == inst.answer,
            grounding,
        })
    });

    let mut correct = 0usize;
    let mut per_type: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut gs_sum: BTreeMap<usize, f64> = BTreeMap::new();
    let mut gs_count = 0;
    for (inst, o) in instances.iter().zip(outcomes) {
        let o = o?;
        correct += usize::from(o.correct);
        let e = per_type.entry(inst.question_type.name().to_string()).or_default();
        e.0 += usize::from(o.correct);
        e.1 += 1;
        if !o.grounding.is_empty() {
            gs_count += 1;
            for (k, s) in o.grounding {
                *gs_sum.entry(k).or_default() += s;
            }
        }
    }

    let mut tally = RecallTally::default();
    if let Some(table) = phrase_scores {
        for inst in instances {
            if let Some(scores) = table.get(&inst.id) {
                tally.add(inst, scores)?;
            }
        }
    }

    Ok(MetricsReport {
        instances: instances.len(),
        accuracy: correct as f64 / instances.len() as f64,
        per_type_accuracy: per_type.into_iter().map(|(k, (c, n))| (k, c as f64 / n as f64)).collect(),
        recall: tally.recall(),
        recall_phrases: tally.phrases,
        grounding_score: gs_sum
            .into_iter()
            .map(|(k, s)| (k, if gs_count == 0 { 0.0 } else { s / gs_count as f64 }))
            .collect(),
        grounding_instances: gs_count,
        metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iou_examples() {
        let a = [0.0, 0.0, 2.0, 2.0];
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &[3.0, 3.0, 4.0, 4.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(iou(&a, &[1.0, 1.0, 3.0, 3.0]).unwrap(), 1.0 / 7.0, epsilon = 1e-15);
        assert!(iou(&a, &[1.0, 1.0, 1.0, 3.0]).is_err());
    }

    #[test]
    fn grounding_score_examples() {
        let beta = [0.5, 0.3, 0.2];
        assert_abs_diff_eq!(grounding_score_topk(&beta, &[0], 1).unwrap(), 0.5);
        assert_abs_diff_eq!(grounding_score_topk(&beta, &[1, 2], 3).unwrap(), 0.5);
        assert_abs_diff_eq!(grounding_score_topk(&beta, &[1, 2], 1).unwrap(), 0.0);
        assert_abs_diff_eq!(grounding_score_topk(&[0.0, 1.0, 0.0], &[1], 2).unwrap(), 1.0);
        assert!(grounding_score_topk(&beta, &[], 1).is_err());
        assert!(grounding_score_topk(&beta, &[0], 4).is_err());
    }

    fn cells(n: usize) -> Vec<[f64; 4]> {
        (0..n).map(|i| [i as f64, 0.0, i as f64 + 1.0, 1.0]).collect()
    }

    #[test]
    fn recall_examples() {
        let boxes = cells(4);
        let perfect = vec![vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]];
        let gt = vec![vec![boxes[1]], vec![boxes[3]]];
        assert_eq!(recall_at_k(&perfect, &gt, &boxes, 1).unwrap(), 1.0);
        let wrong = vec![vec![1.0, 0.9, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0]];
        assert_eq!(recall_at_k(&wrong, &gt, &boxes, 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&wrong, &gt, &boxes, 2).unwrap(), 0.5);
        assert_eq!(recall_at_k(&wrong, &gt, &boxes, 4).unwrap(), 1.0);
        assert!(recall_at_k(&wrong, &gt, &boxes, 5).is_err());
    }

    #[test]
    fn random_scores_give_one_in_eight() {
        let boxes = cells(8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 40_000;
        let scores: Vec<Vec<f64>> = (0..trials).map(|_| (0..8).map(|_| rng.gen::<f64>()).collect()).collect();
        let gt: Vec<Vec<[f64; 4]>> = (0..trials).map(|t| vec![boxes[t % 8]]).collect();
        let r = recall_at_k(&scores, &gt, &boxes, 1).unwrap();
        assert!((r - 0.125).abs() < 0.01, "{r}");
        let mut prev = 0.0;
        for k in 1..=8 {
            let rk = recall_at_k(&scores, &gt, &boxes, k).unwrap();
            assert!(rk >= prev);
            prev = rk;
        }
        assert_eq!(prev, 1.0);
    }
}
