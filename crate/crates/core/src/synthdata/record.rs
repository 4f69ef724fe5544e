use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{Action, Color, Scene, SceneObject, ShapeKind};
use crate::error::{Error, Result};

pub const NUM_OPTIONS: usize = 4;

/// Where a record's region features came from, for ingested data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureOrigin {
    Sidecar,
    Hashed,
}

/// One multiple-choice sample with its gold rationale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaRecord {
    pub record_id: String,
    pub region_features: Vec<Vec<f64>>,
    pub question_tokens: Vec<String>,
    pub options: Vec<Vec<String>>,
    pub gold_answer: usize,
    pub gold_rationale_tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_origin: Option<FeatureOrigin>,
}

impl VqaRecord {
    pub fn validate(&self) -> Result<()> {
        if self.options.len() != NUM_OPTIONS {
            return Err(Error::Validation(format!(
                "record {}: {} options",
                self.record_id,
                self.options.len()
            )));
        }
        if self.gold_answer >= NUM_OPTIONS {
            return Err(Error::Validation(format!(
                "record {}: gold answer {}",
                self.record_id, self.gold_answer
            )));
        }
        Ok(())
    }

    /// Every token in question, options and rationale.
    pub fn tokens(&self) -> impl Iterator<Item = &String> {
        self.question_tokens
            .iter()
            .chain(self.options.iter().flatten())
            .chain(&self.gold_rationale_tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Template {
    /// "what color is the circle ?" for a shape that occurs once.
    Attribute,
    /// "what is [person1] doing ?"
    Action,
    /// "what is at row 1 col 2 ?"
    Spatial,
    /// "how many objects are red ?"
    Counting,
}

impl Template {
    pub const ALL: [Template; 4] = [
        Template::Attribute,
        Template::Action,
        Template::Spatial,
        Template::Counting,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Template> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Template::Attribute => "attribute",
            Template::Action => "action",
            Template::Spatial => "spatial",
            Template::Counting => "counting",
        };
        f.write_str(s)
    }
}

pub const COUNT_WORDS: [&str; 6] = ["zero", "one", "two", "three", "four", "five"];

pub(crate) fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn inapplicable(t: Template, reason: &str) -> Error {
    Error::TemplateInapplicable {
        template: t.to_string(),
        reason: reason.to_string(),
    }
}

pub fn record_id(scene_seed: u64, template: Template) -> String {
    format!("syn-{scene_seed}-t{}", template.index())
}

/// Inverse of [`record_id`].
pub fn parse_record_id(id: &str) -> Option<(u64, Template)> {
    let rest = id.strip_prefix("syn-")?;
    let (seed, t) = rest.rsplit_once("-t")?;
    Some((seed.parse().ok()?, Template::from_index(t.parse().ok()?)?))
}

struct Instance {
    question: Vec<String>,
    correct: Vec<String>,
    distractors: Vec<Vec<String>>,
    rationale: Vec<String>,
}

fn attribute(scene: &Scene, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let unique: Vec<&SceneObject> = scene
        .objects
        .iter()
        .filter(|o| scene.objects.iter().filter(|p| p.shape == o.shape).count() == 1)
        .collect();
    let obj = unique
        .choose(rng)
        .ok_or_else(|| inapplicable(Template::Attribute, "no shape occurs exactly once"))?;
    let (s, c) = (obj.shape, obj.color);
    Ok(Instance {
        question: toks(&format!("what color is the {s} ?")),
        correct: toks(&format!("the {s} is {c}")),
        distractors: Color::ALL
            .iter()
            .filter(|&&x| x != c)
            .map(|x| toks(&format!("the {s} is {x}")))
            .collect(),
        rationale: toks(&format!("because the {s} at row {} col {} is {c}", obj.row, obj.col)),
    })
}

fn action(scene: &Scene, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let persons: Vec<&SceneObject> = scene.objects.iter().filter(|o| o.is_person()).collect();
    let obj = persons
        .choose(rng)
        .ok_or_else(|| inapplicable(Template::Action, "scene has no person"))?;
    let (tag, a) = (obj.tag(), obj.action);
    Ok(Instance {
        question: toks(&format!("what is {tag} doing ?")),
        correct: toks(&format!("{tag} is {a}")),
        distractors: Action::ALL
            .iter()
            .filter(|&&x| x != a)
            .map(|x| toks(&format!("{tag} is {x}")))
            .collect(),
        rationale: toks(&format!("because {tag} is shown {a}")),
    })
}

fn spatial(scene: &Scene, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let obj = scene
        .objects
        .choose(rng)
        .ok_or_else(|| inapplicable(Template::Spatial, "empty scene"))?;
    let (s, c) = (obj.shape, obj.color);
    // Perturb exactly one attribute: 3 recolorings + 2 reshapings, keep 3.
    let mut alts: Vec<(Color, ShapeKind)> = Color::ALL
        .iter()
        .filter(|&&x| x != c)
        .map(|&x| (x, s))
        .chain(ShapeKind::ALL.iter().filter(|&&x| x != s).map(|&x| (c, x)))
        .collect();
    alts.shuffle(rng);
    Ok(Instance {
        question: toks(&format!("what is at row {} col {} ?", obj.row, obj.col)),
        correct: toks(&format!("the {c} {s}")),
        distractors: alts[..3]
            .iter()
            .map(|(ac, as_)| toks(&format!("the {ac} {as_}")))
            .collect(),
        rationale: toks(&format!("because the {c} {s} is at row {} col {}", obj.row, obj.col)),
    })
}

fn counting(scene: &Scene, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let color = *Color::ALL.choose(rng).unwrap();
    let matching: Vec<&SceneObject> = scene.objects.iter().filter(|o| o.color == color).collect();
    let k = matching.len();
    // Perturb the count: the three nearest other values in 0..=5.
    let mut alts: Vec<usize> = (0..COUNT_WORDS.len()).filter(|&v| v != k).collect();
    alts.sort_by_key(|&v| (v.abs_diff(k), v));
    let rationale = if k == 0 {
        toks(&format!("because no object is {color}"))
    } else {
        let listed: Vec<String> = matching.iter().map(|o| format!("the {}", o.shape)).collect();
        toks(&format!("because the {color} ones are {}", listed.join(" and ")))
    };
    Ok(Instance {
        question: toks(&format!("how many objects are {color} ?")),
        correct: vec![COUNT_WORDS[k].to_string()],
        distractors: alts[..3].iter().map(|&v| vec![COUNT_WORDS[v].to_string()]).collect(),
        rationale,
    })
}

/// Instantiates `template` on `scene`. The option order and any choice the
/// template makes are drawn from `seed`.
pub fn make_record(scene: &Scene, template: Template, seed: u64) -> Result<VqaRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(8).wrapping_add(template.index() as u64));
    let inst = match template {
        Template::Attribute => attribute(scene, &mut rng)?,
        Template::Action => action(scene, &mut rng)?,
        Template::Spatial => spatial(scene, &mut rng)?,
        Template::Counting => counting(scene, &mut rng)?,
    };
    debug_assert_eq!(inst.distractors.len(), 3);
    let mut options = inst.distractors;
    options.push(inst.correct.clone());
    options.shuffle(&mut rng);
    let gold_answer = options.iter().position(|o| *o == inst.correct).unwrap();
    Ok(VqaRecord {
        record_id: record_id(scene.seed, template),
        region_features: scene.region_features(),
        question_tokens: inst.question,
        options,
        gold_answer,
        gold_rationale_tokens: inst.rationale,
        feature_origin: None,
    })
}
