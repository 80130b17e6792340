//! Synthetic shape world: scenes of colored shapes on a grid, templated
//! questions with constituency trees and exact word-region alignments.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GapError, Result};
use crate::exec;
use crate::grounder::RegionSet;
use crate::models::VqaItem;
use crate::vocab::Vocab;

pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];
pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "star"];
pub const PLURALS: [&str; 4] = ["circles", "squares", "triangles", "stars"];
pub const SIZES: [&str; 2] = ["small", "large"];
pub const RELATIONS: [Relation; 4] = [Relation::Left, Relation::Right, Relation::Above, Relation::Below];
pub const MAX_COUNT: usize = 4;

const FUNCTION_WORDS: [&str; 18] = [
    "what", "color", "shape", "size", "is", "the", "?", "thing", "left", "right", "of", "above", "below", "a",
    "there", "how", "many", "are",
];

/// Feature layout: color one-hot, shape one-hot, size one-hot, box.
const BOX_OFFSET: usize = COLORS.len() + SHAPES.len() + SIZES.len();
pub const MIN_DIM: usize = BOX_OFFSET + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Left,
    Right,
    Above,
    Below,
}

impl Relation {
    pub fn words(self) -> &'static [&'static str] {
        match self {
            Relation::Left => &["left", "of"],
            Relation::Right => &["right", "of"],
            Relation::Above => &["above"],
            Relation::Below => &["below"],
        }
    }

    /// Whether `a` stands in this relation to `b`.
    pub fn holds(self, a: &SceneObject, b: &SceneObject) -> bool {
        match self {
            Relation::Left => a.col < b.col,
            Relation::Right => a.col > b.col,
            Relation::Above => a.row < b.row,
            Relation::Below => a.row > b.row,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub color: usize,
    pub shape: usize,
    pub size: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    Attribute,
    Existence,
    Count,
}

impl QuestionType {
    pub fn name(self) -> &'static str {
        match self {
            QuestionType::Attribute => "attribute",
            QuestionType::Existence => "existence",
            QuestionType::Count => "count",
        }
    }
}

/// Groundtruth regions of one referring expression (inclusive token span).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseRegions {
    pub start: usize,
    pub end: usize,
    pub regions: Vec<usize>,
    pub referential: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthInstance {
    pub id: String,
    pub tokens: Vec<String>,
    pub tree: String,
    /// `N × d`, row-major.
    pub features: Vec<Vec<f64>>,
    pub boxes: Vec<[f64; 4]>,
    pub answer: usize,
    pub question_type: QuestionType,
    /// Sparse `(word, region)` pairs of the binary alignment.
    pub gt_alignment: Vec<[usize; 2]>,
    pub gt_phrase_regions: Vec<PhraseRegions>,
    pub scene: Vec<SceneObject>,
}

impl SynthInstance {
    pub fn regions(&self) -> Result<RegionSet> {
        let n = self.features.len();
        let d = self.features.first().map_or(0, Vec::len);
        let flat: Vec<f64> = self.features.iter().flatten().copied().collect();
        let m = Array2::from_shape_vec((n, d), flat)
            .map_err(|_| GapError::Format(format!("ragged features in `{}`", self.id)))?;
        RegionSet::new(m, self.boxes.clone())
    }

    /// Dense `T×N` alignment matrix.
    pub fn alignment_matrix(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.tokens.len(), self.boxes.len()));
        for &[i, j] in &self.gt_alignment {
            a[[i, j]] = 1.0;
        }
        a
    }

    /// Union of the groundtruth regions of every referential phrase.
    pub fn relevant_regions(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .gt_phrase_regions
            .iter()
            .filter(|p| p.referential)
            .flat_map(|p| p.regions.iter().copied())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn to_item(&self) -> Result<VqaItem> {
        Ok(VqaItem {
            id: self.id.clone(),
            tokens: self.tokens.clone(),
            regions: self.regions()?,
            answer: self.answer,
        })
    }
}

/// Relative frequency of each template family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateMix {
    pub attribute: f64,
    pub relational: f64,
    pub existence: f64,
    pub count: f64,
}

impl Default for TemplateMix {
    fn default() -> Self {
        TemplateMix {
            attribute: 0.3,
            relational: 0.3,
            existence: 0.2,
            count: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub grid: usize,
    pub regions: usize,
    pub dim: usize,
    pub noise: f64,
    /// Box jitter as a fraction of a cell; 0 keeps disjoint grid cells.
    pub jitter: f64,
    pub train: usize,
    pub val: usize,
    pub max_retries: usize,
    pub templates: TemplateMix,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            grid: 4,
            regions: 8,
            dim: 32,
            noise: 0.1,
            jitter: 0.0,
            train: 5000,
            val: 1000,
            max_retries: 100,
            templates: TemplateMix::default(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.regions == 0 || self.regions > self.grid * self.grid {
            return Err(GapError::InvalidArgument(format!(
                "{} regions do not fit a {}x{} grid",
                self.regions, self.grid, self.grid
            )));
        }
        if self.dim < MIN_DIM {
            return Err(GapError::InvalidArgument(format!("feature dim must be at least {MIN_DIM}")));
        }
        let t = self.templates;
        let w = [t.attribute, t.relational, t.existence, t.count];
        if w.iter().any(|&x| x < 0.0 || !x.is_finite()) || w.iter().sum::<f64>() <= 0.0 {
            return Err(GapError::InvalidArgument("template weights must be nonnegative with a positive sum".into()));
        }
        if !(0.0..0.5).contains(&self.jitter) || self.noise < 0.0 {
            return Err(GapError::InvalidArgument("jitter must lie in [0, 0.5) and noise be nonnegative".into()));
        }
        Ok(())
    }
}

/// Answer vocabulary: colors, shapes, sizes, yes/no, counts `0..=4`.
pub fn answer_vocab() -> Vocab {
    let mut answers: Vec<String> = COLORS.iter().chain(&SHAPES).chain(&SIZES).map(|s| s.to_string()).collect();
    answers.push("yes".into());
    answers.push("no".into());
    answers.extend((0..=MAX_COUNT).map(|c| c.to_string()));
    Vocab::new(answers)
}

pub fn word_vocab() -> Vocab {
    Vocab::new(
        FUNCTION_WORDS
            .iter()
            .chain(&COLORS)
            .chain(&SHAPES)
            .chain(&PLURALS)
            .chain(&SIZES)
            .copied(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<SynthInstance>,
    pub val: Vec<SynthInstance>,
}

impl Dataset {
    pub fn all(&self) -> impl Iterator<Item = &SynthInstance> {
        self.train.iter().chain(&self.val)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("train.jsonl"), &self.train)?;
        write_jsonl(&dir.join("val.jsonl"), &self.val)
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        Ok(Dataset {
            train: read_jsonl(&dir.join("train.jsonl"))?,
            val: read_jsonl(&dir.join("val.jsonl"))?,
        })
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line)
                .map_err(|e| GapError::Format(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(rows)
}

fn sample_scene(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Vec<SceneObject> {
    let mut cells: Vec<usize> = (0..cfg.grid * cfg.grid).collect();
    cells.shuffle(rng);
    cells[..cfg.regions]
        .iter()
        .map(|&c| SceneObject {
            color: rng.gen_range(0..COLORS.len()),
            shape: rng.gen_range(0..SHAPES.len()),
            size: rng.gen_range(0..SIZES.len()),
            row: c / cfg.grid,
            col: c % cfg.grid,
        })
        .collect()
}

fn scene_boxes(cfg: &WorldConfig, scene: &[SceneObject], rng: &mut ChaCha8Rng) -> Vec<[f64; 4]> {
    let cell = 1.0 / cfg.grid as f64;
    scene
        .iter()
        .map(|o| {
            let mut jit = || rng.gen_range(0.0..=cfg.jitter) * cell;
            let x1 = (o.col as f64 * cell - jit()).max(0.0);
            let y1 = (o.row as f64 * cell - jit()).max(0.0);
            let x2 = ((o.col + 1) as f64 * cell + jit()).min(1.0);
            let y2 = ((o.row + 1) as f64 * cell + jit()).min(1.0);
            [x1, y1, x2, y2]
        })
        .collect()
}

fn scene_features(cfg: &WorldConfig, scene: &[SceneObject], boxes: &[[f64; 4]], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("valid std");
    scene
        .iter()
        .zip(boxes)
        .map(|(o, b)| {
            let mut f = vec![0.0; cfg.dim];
            f[o.color] = 1.0;
            f[COLORS.len() + o.shape] = 1.0;
            f[COLORS.len() + SHAPES.len() + o.size] = 1.0;
            f[BOX_OFFSET..BOX_OFFSET + 4].copy_from_slice(b);
            for x in f.iter_mut() {
                *x += noise.sample(rng);
            }
            f
        })
        .collect()
}

/// A question before tokenization: words with part-of-speech tags and the
/// bracketed tree built around them.
struct Question {
    tokens: Vec<String>,
    tree: String,
    answer: String,
    qtype: QuestionType,
    alignment: Vec<[usize; 2]>,
    phrases: Vec<PhraseRegions>,
}

/// Incrementally built token list that remembers word positions.
#[derive(Default)]
struct Words {
    tokens: Vec<String>,
}

impl Words {
    /// Append `(TAG word)` and return the bracketed leaf and its index.
    fn leaf(&mut self, tag: &str, word: &str) -> (String, usize) {
        self.tokens.push(word.to_string());
        (format!("({tag} {word})"), self.tokens.len() - 1)
    }
}

#[derive(Clone, Copy)]
enum Attr {
    Color,
    Shape,
    Size,
}

fn matches(o: &SceneObject, color: Option<usize>, shape: Option<usize>, size: Option<usize>) -> bool {
    color.is_none_or(|c| o.color == c) && shape.is_none_or(|s| o.shape == s) && size.is_none_or(|z| o.size == z)
}

/// Description of an object by the two attributes other than `asked`:
/// `(filter, adjective words, noun word)`.
fn describe(o: &SceneObject, asked: Attr) -> ((Option<usize>, Option<usize>, Option<usize>), Vec<&'static str>, &'static str) {
    match asked {
        Attr::Color => ((None, Some(o.shape), Some(o.size)), vec![SIZES[o.size]], SHAPES[o.shape]),
        Attr::Shape => ((Some(o.color), None, Some(o.size)), vec![SIZES[o.size], COLORS[o.color]], "thing"),
        Attr::Size => ((Some(o.color), Some(o.shape), None), vec![COLORS[o.color]], SHAPES[o.shape]),
    }
}

fn ask_words(asked: Attr) -> &'static str {
    match asked {
        Attr::Color => "color",
        Attr::Shape => "shape",
        Attr::Size => "size",
    }
}

fn attr_answer(o: &SceneObject, asked: Attr) -> &'static str {
    match asked {
        Attr::Color => COLORS[o.color],
        Attr::Shape => SHAPES[o.shape],
        Attr::Size => SIZES[o.size],
    }
}

/// `(NP (DT det) (JJ adj)* (NN noun))` with word indices of the content words.
fn noun_phrase(w: &mut Words, det: &str, adjs: &[&str], noun: &str, noun_tag: &str) -> (String, usize, Vec<usize>) {
    let start = w.tokens.len();
    let (d, _) = w.leaf("DT", det);
    let mut parts = vec![d];
    let mut content = Vec::new();
    for a in adjs {
        let (leaf, i) = w.leaf("JJ", a);
        parts.push(leaf);
        content.push(i);
    }
    let (leaf, i) = w.leaf(noun_tag, noun);
    parts.push(leaf);
    content.push(i);
    (format!("(NP {})", parts.join(" ")), start, content)
}

fn wh_prefix(w: &mut Words, asked: Attr) -> (String, PhraseRegions) {
    let (a, _) = w.leaf("WDT", "what");
    let (b, _) = w.leaf("NN", ask_words(asked));
    (
        format!("(WHNP {a} {b})"),
        PhraseRegions {
            start: 0,
            end: 1,
            regions: vec![],
            referential: false,
        },
    )
}

fn attribute_question(scene: &[SceneObject], rng: &mut ChaCha8Rng) -> Option<Question> {
    let asked = [Attr::Color, Attr::Shape, Attr::Size][rng.gen_range(0..3)];
    let target_idx = rng.gen_range(0..scene.len());
    let target = &scene[target_idx];
    let ((c, s, z), adjs, noun) = describe(target, asked);
    if scene.iter().filter(|o| matches(o, c, s, z)).count() != 1 {
        return None;
    }
    let mut w = Words::default();
    let (wh, wh_phrase) = wh_prefix(&mut w, asked);
    let (is, _) = w.leaf("VBZ", "is");
    let (np, start, content) = noun_phrase(&mut w, "the", &adjs, noun, "NN");
    let end = w.tokens.len() - 1;
    let (q, _) = w.leaf(".", "?");
    Some(Question {
        tree: format!("(SBARQ {wh} (SQ {is} {np}) {q})"),
        answer: attr_answer(target, asked).into(),
        qtype: QuestionType::Attribute,
        alignment: content.iter().map(|&i| [i, target_idx]).collect(),
        phrases: vec![
            wh_phrase,
            PhraseRegions {
                start,
                end,
                regions: vec![target_idx],
                referential: true,
            },
        ],
        tokens: w.tokens,
    })
}

fn relational_question(scene: &[SceneObject], rng: &mut ChaCha8Rng) -> Option<Question> {
    let asked = [Attr::Color, Attr::Shape, Attr::Size][rng.gen_range(0..3)];
    let ti = rng.gen_range(0..scene.len());
    let li = rng.gen_range(0..scene.len());
    if ti == li {
        return None;
    }
    let (target, landmark) = (&scene[ti], &scene[li]);
    let rel = *RELATIONS.choose(rng).expect("nonempty");
    if !rel.holds(target, landmark) {
        return None;
    }
    let ((c, s, z), adjs, noun) = describe(target, asked);
    let candidates: Vec<usize> = (0..scene.len())
        .filter(|&j| j != li && matches(&scene[j], c, s, z) && rel.holds(&scene[j], landmark))
        .collect();
    let landmark_unique = scene
        .iter()
        .filter(|o| matches(o, Some(landmark.color), Some(landmark.shape), None))
        .count()
        == 1;
    if candidates != [ti] || !landmark_unique {
        return None;
    }
    let mut w = Words::default();
    let (wh, wh_phrase) = wh_prefix(&mut w, asked);
    let (is, _) = w.leaf("VBZ", "is");
    let outer_start = w.tokens.len();
    let (inner, inner_start, t_content) = noun_phrase(&mut w, "the", &adjs, noun, "NN");
    let inner_end = w.tokens.len() - 1;
    let rel_leaves: Vec<String> = rel
        .words()
        .iter()
        .map(|word| {
            let tag = if *word == "of" || rel.words().len() == 1 { "IN" } else { "RB" };
            w.leaf(tag, word).0
        })
        .collect();
    let (lnp, l_start, l_content) = noun_phrase(&mut w, "the", &[COLORS[landmark.color]], SHAPES[landmark.shape], "NN");
    let outer_end = w.tokens.len() - 1;
    let (q, _) = w.leaf(".", "?");
    let pp = format!("(PP {} {lnp})", rel_leaves.join(" "));
    let mut alignment: Vec<[usize; 2]> = t_content.iter().map(|&i| [i, ti]).collect();
    alignment.extend(l_content.iter().map(|&i| [i, li]));
    Some(Question {
        tree: format!("(SBARQ {wh} (SQ {is} (NP {inner} {pp})) {q})"),
        answer: attr_answer(target, asked).into(),
        qtype: QuestionType::Attribute,
        alignment,
        phrases: vec![
            wh_phrase,
            PhraseRegions {
                start: outer_start,
                end: outer_end,
                regions: vec![ti],
                referential: true,
            },
            PhraseRegions {
                start: inner_start,
                end: inner_end,
                regions: vec![ti],
                referential: true,
            },
            PhraseRegions {
                start: l_start,
                end: outer_end,
                regions: vec![li],
                referential: true,
            },
        ],
        tokens: w.tokens,
    })
}

fn existence_question(scene: &[SceneObject], rng: &mut ChaCha8Rng) -> Option<Question> {
    let (color, shape, size) = if rng.gen_bool(0.5) {
        let o = scene.choose(rng).expect("nonempty scene");
        (o.color, o.shape, o.size)
    } else {
        (
            rng.gen_range(0..COLORS.len()),
            rng.gen_range(0..SHAPES.len()),
            rng.gen_range(0..SIZES.len()),
        )
    };
    let hits: Vec<usize> = (0..scene.len())
        .filter(|&j| matches(&scene[j], Some(color), Some(shape), Some(size)))
        .collect();
    let mut w = Words::default();
    let (is, _) = w.leaf("VBZ", "is");
    let (there, _) = w.leaf("EX", "there");
    let (np, start, content) = noun_phrase(&mut w, "a", &[SIZES[size], COLORS[color]], SHAPES[shape], "NN");
    let end = w.tokens.len() - 1;
    let (q, _) = w.leaf(".", "?");
    Some(Question {
        tree: format!("(SQ {is} {there} {np} {q})"),
        answer: if hits.is_empty() { "no" } else { "yes" }.into(),
        qtype: QuestionType::Existence,
        alignment: content.iter().flat_map(|&i| hits.iter().map(move |&j| [i, j])).collect(),
        phrases: vec![PhraseRegions {
            start,
            end,
            referential: !hits.is_empty(),
            regions: hits,
        }],
        tokens: w.tokens,
    })
}

fn count_question(scene: &[SceneObject], rng: &mut ChaCha8Rng) -> Option<Question> {
    let (color, shape) = if rng.gen_bool(0.5) {
        let o = scene.choose(rng).expect("nonempty scene");
        (o.color, o.shape)
    } else {
        (rng.gen_range(0..COLORS.len()), rng.gen_range(0..SHAPES.len()))
    };
    let hits: Vec<usize> = (0..scene.len())
        .filter(|&j| matches(&scene[j], Some(color), Some(shape), None))
        .collect();
    if hits.len() > MAX_COUNT {
        return None;
    }
    let mut w = Words::default();
    let (how, _) = w.leaf("WRB", "how");
    let (many, _) = w.leaf("JJ", "many");
    let (adj, ci) = w.leaf("JJ", COLORS[color]);
    let (noun, si) = w.leaf("NNS", PLURALS[shape]);
    let (are, _) = w.leaf("VBP", "are");
    let (there, _) = w.leaf("EX", "there");
    let (q, _) = w.leaf(".", "?");
    Some(Question {
        tree: format!("(SBARQ (WHNP (WHADJP {how} {many}) {adj} {noun}) (SQ {are} {there}) {q})"),
        answer: hits.len().to_string(),
        qtype: QuestionType::Count,
        alignment: [ci, si].iter().flat_map(|&i| hits.iter().map(move |&j| [i, j])).collect(),
        phrases: vec![PhraseRegions {
            start: 0,
            end: 3,
            referential: !hits.is_empty(),
            regions: hits,
        }],
        tokens: w.tokens,
    })
}

fn instance_rng(seed: u64, split: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split * (1 << 40) + index as u64);
    rng
}

fn generate_one(cfg: &WorldConfig, seed: u64, split: u64, index: usize, prefix: &str) -> Result<SynthInstance> {
    let mut rng = instance_rng(seed, split, index);
    let t = cfg.templates;
    let weights = [t.attribute, t.relational, t.existence, t.count];
    let total: f64 = weights.iter().sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut family = weights.len() - 1;
    for (k, w) in weights.iter().enumerate() {
        if pick < *w {
            family = k;
            break;
        }
        pick -= w;
    }
    for _ in 0..cfg.max_retries.max(1) {
        let scene = sample_scene(cfg, &mut rng);
        let question = match family {
            0 => attribute_question(&scene, &mut rng),
            1 => relational_question(&scene, &mut rng),
            2 => existence_question(&scene, &mut rng),
            _ => count_question(&scene, &mut rng),
        };
        if let Some(q) = question {
            let boxes = scene_boxes(cfg, &scene, &mut rng);
            let features = scene_features(cfg, &scene, &boxes, &mut rng);
            let answer = answer_vocab().id(&q.answer)?;
            return Ok(SynthInstance {
                id: format!("{prefix}-{index:06}"),
                tokens: q.tokens,
                tree: q.tree,
                features,
                boxes,
                answer,
                question_type: q.qtype,
                gt_alignment: q.alignment,
                gt_phrase_regions: q.phrases,
                scene,
            });
        }
    }
    Err(GapError::Generation(format!(
        "no satisfiable question for `{prefix}-{index:06}` after {} retries",
        cfg.max_retries
    )))
}

pub fn generate_split(cfg: &WorldConfig, seed: u64, split: u64, count: usize, prefix: &str) -> Result<Vec<SynthInstance>> {
    cfg.validate()?;
    exec::map_range(count, |i| generate_one(cfg, seed, split, i, prefix))
        .into_iter()
        .collect()
}

/// Deterministic train/val dataset.
pub fn generate_world(cfg: &WorldConfig, seed: u64) -> Result<Dataset> {
    Ok(Dataset {
        train: generate_split(cfg, seed, 0, cfg.train, "train")?,
        val: generate_split(cfg, seed, 1, cfg.val, "val")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::treebank::{extract_referring_expressions, parse_bracketed};

    fn small() -> WorldConfig {
        WorldConfig {
            train: 300,
            val: 50,
            ..Default::default()
        }
    }

    #[test]
    fn trees_match_tokens_and_phrases_match_res() {
        let ds = generate_world(&small(), 4).unwrap();
        for inst in ds.all() {
            let tree = parse_bracketed(&inst.tree).unwrap();
            assert_eq!(tree.tokens(), inst.tokens, "{}", inst.tree);
            let spans: Vec<(usize, usize)> = extract_referring_expressions(&tree).iter().map(|r| (r.start, r.end)).collect();
            let mut gt: Vec<(usize, usize)> = inst.gt_phrase_regions.iter().map(|p| (p.start, p.end)).collect();
            gt.sort_unstable();
            assert_eq!(spans, gt, "{}", inst.tree);
            for p in &inst.gt_phrase_regions {
                assert_eq!(p.referential, !p.regions.is_empty());
            }
        }
    }

    #[test]
    fn vocabularies_cover_everything() {
        let ds = generate_world(&small(), 5).unwrap();
        let words = word_vocab();
        let answers = answer_vocab();
        assert!(answers.len() >= 15);
        for inst in ds.all() {
            words.ids(&inst.tokens).unwrap();
            assert!(inst.answer < answers.len());
        }
    }

    #[test]
    fn alignment_rows_for_function_words_are_empty() {
        let ds = generate_world(&small(), 6).unwrap();
        for inst in ds.all() {
            let a = inst.alignment_matrix();
            for (i, tok) in inst.tokens.iter().enumerate() {
                if FUNCTION_WORDS.contains(&tok.as_str()) && tok != "thing" {
                    assert_eq!(a.row(i).sum(), 0.0, "{tok}");
                }
            }
            if inst.question_type == QuestionType::Attribute {
                assert!(a.rows().into_iter().all(|r| r.sum() <= 1.0));
            }
        }
    }

    #[test]
    fn features_encode_attributes() {
        let cfg = WorldConfig {
            noise: 0.0,
            ..small()
        };
        let ds = generate_world(&cfg, 7).unwrap();
        let inst = &ds.train[0];
        for (o, f) in inst.scene.iter().zip(&inst.features) {
            assert_eq!(f[o.color], 1.0);
            assert_eq!(f[COLORS.len() + o.shape], 1.0);
            assert_eq!(f.iter().take(BOX_OFFSET).sum::<f64>(), 3.0);
        }
    }

    #[test]
    fn boxes_are_disjoint_cells_without_jitter() {
        let ds = generate_world(&small(), 8).unwrap();
        for inst in ds.all() {
            for (o, b) in inst.scene.iter().zip(&inst.boxes) {
                assert_eq!(*b, [o.col as f64 / 4.0, o.row as f64 / 4.0, (o.col + 1) as f64 / 4.0, (o.row + 1) as f64 / 4.0]);
            }
        }
    }

    #[test]
    fn impossible_configs_error() {
        let cfg = WorldConfig {
            regions: 17,
            ..small()
        };
        assert!(generate_world(&cfg, 0).is_err());
        let cfg = WorldConfig {
            templates: TemplateMix {
                attribute: 0.0,
                relational: 1.0,
                existence: 0.0,
                count: 0.0,
            },
            regions: 1,
            grid: 1,
            max_retries: 5,
            ..small()
        };
        assert!(matches!(generate_world(&cfg, 0), Err(GapError::Generation(_))));
    }
}
