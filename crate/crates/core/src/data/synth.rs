//! Seeded generator for small keyword-driven corpora.
//!
//! Each class owns a keyword list. With probability `1 − ambiguity` a label
//! is rendered literally: one of its own keywords inside a literal template.
//! Otherwise it is rendered figuratively: a keyword drawn from a uniformly
//! random class inside a figurative template, so the surface keyword carries
//! no information about the label. Multi-label examples render 1–3 distinct
//! classes and join the fragments.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::tokenize;
use super::{Example, LabelSpace, TaskKind};
use crate::error::{Error, Result};

/// Placeholder substituted with a keyword in templates.
pub const KEYWORD_SLOT: &str = "{kw}";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthClass {
    pub name: String,
    pub keywords: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub task_kind: TaskKind,
    pub classes: Vec<SynthClass>,
    pub literal_templates: Vec<String>,
    pub figurative_templates: Vec<String>,
    #[serde(default)]
    pub filler: Vec<String>,
    /// Upper bound on filler words prepended to each example.
    #[serde(default = "default_max_filler")]
    pub max_filler: usize,
    pub ambiguity: f64,
    pub count: usize,
}

fn default_max_filler() -> usize {
    2
}

impl SynthSpec {
    pub fn label_space(&self) -> Result<LabelSpace> {
        LabelSpace::new(
            self.task_kind,
            self.classes.iter().map(|c| c.name.clone()).collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.label_space()?;
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return Err(Error::Config(format!(
                "ambiguity must be in [0, 1], got {}",
                self.ambiguity
            )));
        }
        if self.literal_templates.is_empty() || self.figurative_templates.is_empty() {
            return Err(Error::Config("template pools must be non-empty".into()));
        }
        for t in self.literal_templates.iter().chain(&self.figurative_templates) {
            if !t.contains(KEYWORD_SLOT) {
                return Err(Error::Config(format!("template `{t}` lacks {KEYWORD_SLOT}")));
            }
        }
        let mut owner = std::collections::HashMap::new();
        for c in &self.classes {
            if c.keywords.is_empty() {
                return Err(Error::Config(format!("class `{}` has an empty keyword list", c.name)));
            }
            for kw in &c.keywords {
                let toks = tokenize(kw);
                if toks.len() != 1 {
                    return Err(Error::Config(format!("keyword `{kw}` must be a single token")));
                }
                if let Some(prev) = owner.insert(toks[0].clone(), &c.name) {
                    return Err(Error::Config(format!(
                        "keyword `{kw}` belongs to both `{prev}` and `{}`",
                        c.name
                    )));
                }
            }
        }
        let context = self
            .literal_templates
            .iter()
            .chain(&self.figurative_templates)
            .map(|t| t.replace(KEYWORD_SLOT, " "))
            .chain(self.filler.iter().cloned());
        for text in context {
            if let Some(tok) = tokenize(&text).into_iter().find(|t| owner.contains_key(t)) {
                return Err(Error::Config(format!(
                    "keyword `{tok}` also appears in a template or filler word"
                )));
            }
        }
        Ok(())
    }
}

/// Generates `spec.count` examples; identical output for identical
/// `(spec, seed)`.
pub fn gen_synthetic(spec: &SynthSpec, seed: u64) -> Result<Vec<Example>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.classes.len();
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut classes: Vec<usize> = match spec.task_kind {
            TaskKind::Binary | TaskKind::Multiclass => vec![rng.random_range(0..n)],
            TaskKind::Multilabel => {
                let k = rng.random_range(1..=n.min(3));
                rand::seq::index::sample(&mut rng, n, k).into_vec()
            }
        };
        let mut words: Vec<String> = Vec::new();
        let n_filler = if spec.filler.is_empty() {
            0
        } else {
            rng.random_range(0..=spec.max_filler)
        };
        for _ in 0..n_filler {
            words.push(spec.filler.choose(&mut rng).expect("non-empty").clone());
        }
        let mut fragments = Vec::with_capacity(classes.len());
        for &c in &classes {
            let literal = rng.random::<f64>() >= spec.ambiguity;
            let (kw_class, templates) = if literal {
                (c, &spec.literal_templates)
            } else {
                (rng.random_range(0..n), &spec.figurative_templates)
            };
            let kw = spec.classes[kw_class].keywords.choose(&mut rng).expect("validated");
            let template = templates.choose(&mut rng).expect("validated");
            fragments.push(template.replace(KEYWORD_SLOT, kw));
        }
        words.push(fragments.join(" and "));
        classes.sort_unstable();
        out.push(Example {
            id: format!("synth-{i:05}"),
            text: words.join(" "),
            labels: classes.iter().map(|&c| spec.classes[c].name.clone()).collect(),
        });
    }
    Ok(out)
}
