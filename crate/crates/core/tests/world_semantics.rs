//! Generated worlds checked against an independent reading of the question
//! text, plus determinism and artifact round trips.

use gap_core::bench::world::{Relation, SceneObject, COLORS, PLURALS, SHAPES, SIZES};
use gap_core::bench::{answer_vocab, generate_world, Dataset, QuestionType, SynthInstance, WorldConfig};
use gap_core::grounder::{GrounderConfig, GroundingParams};
use gap_core::pipeline::train_instance_grounder;
use gap_core::treebank::parse_bracketed;

fn small_world(seed: u64) -> Dataset {
    let cfg = WorldConfig {
        train: 300,
        val: 100,
        ..WorldConfig::default()
    };
    generate_world(&cfg, seed).unwrap()
}

fn pos(list: &[&str], word: &str) -> Option<usize> {
    list.iter().position(|w| *w == word)
}

#[derive(Default, Debug)]
struct Descriptor {
    color: Option<usize>,
    shape: Option<usize>,
    size: Option<usize>,
}

impl Descriptor {
    fn read(words: &[&str]) -> Self {
        let mut d = Descriptor::default();
        for w in words {
            if let Some(i) = pos(&COLORS, w) {
                d.color = Some(i);
            } else if let Some(i) = pos(&SHAPES, w).or_else(|| pos(&PLURALS, w)) {
                d.shape = Some(i);
            } else if let Some(i) = pos(&SIZES, w) {
                d.size = Some(i);
            } else {
                assert!(["the", "a", "thing"].contains(w), "unexpected word {w}");
            }
        }
        d
    }

    fn fits(&self, o: &SceneObject) -> bool {
        self.color.is_none_or(|c| c == o.color)
            && self.shape.is_none_or(|s| s == o.shape)
            && self.size.is_none_or(|z| z == o.size)
    }
}

fn relation_at(words: &[&str]) -> Option<(usize, Relation, usize)> {
    for (i, w) in words.iter().enumerate() {
        let found = match *w {
            "left" => Some((Relation::Left, 2)),
            "right" => Some((Relation::Right, 2)),
            "above" => Some((Relation::Above, 1)),
            "below" => Some((Relation::Below, 1)),
            _ => None,
        };
        if let Some((r, len)) = found {
            return Some((i, r, len));
        }
    }
    None
}

fn holds(r: Relation, a: &SceneObject, b: &SceneObject) -> bool {
    match r {
        Relation::Left => a.col < b.col,
        Relation::Right => a.col > b.col,
        Relation::Above => a.row < b.row,
        Relation::Below => a.row > b.row,
    }
}

/// The answer implied by the question words and the scene alone.
fn interpret(inst: &SynthInstance) -> String {
    let words: Vec<&str> = inst.tokens.iter().map(String::as_str).collect();
    assert_eq!(words.last(), Some(&"?"));
    let scene = &inst.scene;
    match words[0] {
        "what" => {
            let asked = words[1];
            assert_eq!(words[2], "is");
            let body = &words[3..words.len() - 1];
            let targets: Vec<&SceneObject> = match relation_at(body) {
                None => {
                    let d = Descriptor::read(body);
                    scene.iter().filter(|o| d.fits(o)).collect()
                }
                Some((i, rel, len)) => {
                    let d = Descriptor::read(&body[..i]);
                    let ld = Descriptor::read(&body[i + len..]);
                    let landmarks: Vec<&SceneObject> = scene.iter().filter(|o| ld.fits(o)).collect();
                    assert_eq!(landmarks.len(), 1, "landmark not unique in {}", inst.id);
                    scene
                        .iter()
                        .filter(|o| !std::ptr::eq(*o, landmarks[0]) && d.fits(o) && holds(rel, o, landmarks[0]))
                        .collect()
                }
            };
            assert_eq!(targets.len(), 1, "ambiguous reference in {}: {:?}", inst.id, words);
            let t = targets[0];
            match asked {
                "color" => COLORS[t.color].into(),
                "shape" => SHAPES[t.shape].into(),
                "size" => SIZES[t.size].into(),
                other => panic!("unknown attribute {other}"),
            }
        }
        "is" => {
            assert_eq!(words[1], "there");
            let d = Descriptor::read(&words[2..words.len() - 1]);
            if scene.iter().any(|o| d.fits(o)) { "yes" } else { "no" }.into()
        }
        "how" => {
            assert_eq!(&words[1..2], ["many"]);
            let d = Descriptor::read(&words[2..4]);
            scene.iter().filter(|o| d.fits(o)).count().to_string()
        }
        other => panic!("unknown question form starting with {other}"),
    }
}

#[test]
fn answers_follow_from_question_and_scene() {
    let answers = answer_vocab();
    for seed in 0..3 {
        let ds = small_world(seed);
        for inst in ds.all() {
            assert_eq!(answers.token(inst.answer), interpret(inst), "{}: {:?}", inst.id, inst.tokens);
            let expected_type = match inst.tokens[0].as_str() {
                "what" => QuestionType::Attribute,
                "is" => QuestionType::Existence,
                _ => QuestionType::Count,
            };
            assert_eq!(inst.question_type, expected_type);
        }
    }
}

#[test]
fn features_encode_the_scene() {
    let ds = small_world(4);
    for inst in ds.all() {
        assert_eq!(inst.features.len(), inst.scene.len());
        for (f, o) in inst.features.iter().zip(&inst.scene) {
            let argmax = |lo: usize, hi: usize| {
                (lo..hi).max_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap() - lo
            };
            let c = COLORS.len();
            let s = c + SHAPES.len();
            let z = s + SIZES.len();
            assert_eq!(argmax(0, c), o.color);
            assert_eq!(argmax(c, s), o.shape);
            assert_eq!(argmax(s, z), o.size);
        }
        assert_eq!(parse_bracketed(&inst.tree).unwrap().tokens(), inst.tokens);
    }
}

#[test]
fn generation_is_byte_deterministic() {
    let root = std::env::temp_dir().join(format!("gap-world-{}", std::process::id()));
    let (a, b) = (root.join("a"), root.join("b"));
    small_world(11).write_dir(&a).unwrap();
    small_world(11).write_dir(&b).unwrap();
    for f in ["train.jsonl", "val.jsonl"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    let back = Dataset::read_dir(&a).unwrap();
    assert_eq!(back.train, small_world(11).train);
    assert_ne!(small_world(12).train, back.train);
    std::fs::remove_dir_all(&root).unwrap();
}

#[test]
fn grounder_checkpoint_round_trip() {
    let ds = small_world(5);
    let cfg = GrounderConfig {
        epochs: 1,
        ..GrounderConfig::default()
    };
    let (params, log) = train_instance_grounder(&ds.train[..64], &cfg, false, 5).unwrap();
    // Initialization entry plus one per epoch.
    assert_eq!(log.len(), 2);
    assert_eq!(log[1].epoch, 1);
    let dir = std::env::temp_dir().join(format!("gap-grounder-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("g.json");
    params.save(&path).unwrap();
    assert_eq!(GroundingParams::load(&path).unwrap(), params);
    std::fs::write(&path, "{}").unwrap();
    assert!(GroundingParams::load(&path).is_err());
    std::fs::remove_dir_all(&dir).unwrap();
}
