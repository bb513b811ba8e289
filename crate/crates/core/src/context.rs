//! Enhanced captions and the interleaved in-context prompt handed to a
//! vision-language responder.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};
use crate::index::VectorIndex;
use crate::label::Label;

/// Opening question of every prompt.
pub const QUESTION: &str =
    "Is this photo real? Please provide your answer. You should ONLY output \"real\" or \"fake\".";

/// Text turn that follows each image, before the answer word.
pub const ANSWER_PREFIX: &str = "User: It is \nAssistant: ";

pub const SYSTEM_PROMPT_VERSION: u32 = 1;

/// System turn for responders that accept one. Versioned by
/// [`SYSTEM_PROMPT_VERSION`]; not part of the turn list.
pub const SYSTEM_PROMPT: &str = "Role: You are an AI-generated image Detection System that leverages visual retrieval-augmented generation to enhance accuracy and robustness through multimodal context fusion.
Task: Identify whether a given image is AI-generated or real by retrieving relevant visual references and analyzing them alongside the query image using a vision-language model.
Objective: Achieve SOTA performance in AI-generated image detection with strong generalization across diverse generative models and high robustness under image degradations.
Constraints:
- Answer the question with a single word.
Search Space: Use only knowledge from the additional context in decision-making.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryPrompts {
    pub real: String,
    pub fake: String,
}

impl Default for CategoryPrompts {
    fn default() -> Self {
        Self {
            real: "Camera".into(),
            fake: "Deepfake".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhancedCaption {
    pub prompt_word: String,
    pub caption: String,
    pub label: Label,
}

impl EnhancedCaption {
    /// `"<prompt word>, <caption>"`, or the prompt word alone for an empty caption.
    pub fn render(&self) -> String {
        if self.caption.is_empty() {
            self.prompt_word.clone()
        } else {
            format!("{}, {}", self.prompt_word, self.caption)
        }
    }
}

/// Prefixes a caption with the category prompt of its label.
pub fn enhance_caption(caption: &str, label: Label, prompts: &CategoryPrompts) -> EnhancedCaption {
    let prompt_word = match label {
        Label::Real => &prompts.real,
        Label::Fake => &prompts.fake,
    };
    EnhancedCaption {
        prompt_word: prompt_word.clone(),
        caption: caption.to_owned(),
        label,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShotMode {
    /// Shots are the nearest corpus entries.
    Rag,
    /// Shots are drawn uniformly without replacement.
    Random,
}

impl std::str::FromStr for ShotMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rag" => Ok(ShotMode::Rag),
            "random" => Ok(ShotMode::Random),
            other => Err(Error::Config(format!("unknown mode {other:?} (rag|random)"))),
        }
    }
}

impl std::fmt::Display for ShotMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ShotMode::Rag => "rag",
            ShotMode::Random => "random",
        })
    }
}

/// Order of retrieved shots in the prompt (rag mode only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShotOrder {
    #[default]
    Descending,
    Ascending,
    Shuffled,
}

impl std::str::FromStr for ShotOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "descending" => Ok(ShotOrder::Descending),
            "ascending" => Ok(ShotOrder::Ascending),
            "shuffled" => Ok(ShotOrder::Shuffled),
            other => Err(Error::Config(format!("unknown shot order {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shot {
    pub entry_id: u64,
    pub image_ref: String,
    pub label: Label,
    /// Retrieval similarity; `None` for randomly drawn shots.
    pub score: Option<f64>,
}

/// Picks `n` in-context examples for `query`.
///
/// Rag mode returns the top-`n` entries by similarity, arranged per `order`.
/// Random mode ignores the query and `order` and draws `n` distinct entries
/// with a generator seeded from `seed`.
pub fn select_shots(
    index: &VectorIndex,
    query: &EmbeddingVector,
    n: usize,
    mode: ShotMode,
    order: ShotOrder,
    seed: u64,
) -> Result<Vec<Shot>> {
    if n == 0 {
        return Err(Error::Context("shot count must be at least 1".into()));
    }
    if index.len() < n {
        return Err(Error::Context(format!(
            "corpus has {} entries, {n} shots requested",
            index.len()
        )));
    }
    let to_shot = |id: u64, score: Option<f64>| {
        let e = index.get(id).expect("id from this index");
        Shot {
            entry_id: id,
            image_ref: e.image_ref.clone(),
            label: e.label,
            score,
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        ShotMode::Rag => {
            let result = index.retrieve_topk(query, n)?;
            let mut shots: Vec<Shot> = result
                .hits
                .iter()
                .map(|h| to_shot(h.id, Some(h.score)))
                .collect();
            match order {
                ShotOrder::Descending => {}
                ShotOrder::Ascending => shots.reverse(),
                ShotOrder::Shuffled => shots.shuffle(&mut rng),
            }
            Ok(shots)
        }
        ShotMode::Random => Ok(index::sample(&mut rng, index.len(), n)
            .into_iter()
            .map(|i| to_shot(i as u64, None))
            .collect()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Turn {
    Text(String),
    Image(String),
}

/// The interleaved turn list. Serializes as a bare JSON array of
/// `{"text": ...}` / `{"image": ...}` objects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptContext {
    turns: Vec<Turn>,
}

impl PromptContext {
    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    /// Number of in-context examples.
    pub fn shot_count(&self) -> usize {
        (self.turns.len().saturating_sub(3)) / 2
    }

    /// Labels of the in-context examples, read back from their answer turns.
    pub fn shot_labels(&self) -> Vec<Option<Label>> {
        self.turns
            .iter()
            .skip(2)
            .step_by(2)
            .take(self.shot_count())
            .map(|t| match t {
                Turn::Text(s) => match s.strip_prefix(ANSWER_PREFIX) {
                    Some("real") => Some(Label::Real),
                    Some("fake") => Some(Label::Fake),
                    _ => None,
                },
                Turn::Image(_) => None,
            })
            .collect()
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("turns always serialize")
    }

    /// Checks the question / shots / query / open-turn layout.
    pub fn validate(&self) -> Result<()> {
        let t = &self.turns;
        if t.len() < 5 || t.len().is_multiple_of(2) {
            return Err(Error::Context(format!("{} turns is not 2N+3 with N ≥ 1", t.len())));
        }
        if t[0] != Turn::Text(QUESTION.into()) {
            return Err(Error::Context("first turn must be the question".into()));
        }
        for (i, turn) in t.iter().enumerate().skip(1) {
            let ok = match (i % 2, turn) {
                (1, Turn::Image(_)) => true,
                (0, Turn::Text(s)) if i == t.len() - 1 => s == ANSWER_PREFIX,
                (0, Turn::Text(s)) => matches!(s.strip_prefix(ANSWER_PREFIX), Some("real" | "fake")),
                _ => false,
            };
            if !ok {
                return Err(Error::Context(format!("unexpected turn at position {i}")));
            }
        }
        Ok(())
    }
}

/// Places one image/answer pair per shot between the opening question and
/// the query image, ending on an open answer turn: `2N + 3` turns in total.
pub fn assemble_prompt(query_ref: &str, shots: &[(String, Label)]) -> Result<PromptContext> {
    if shots.is_empty() {
        return Err(Error::Context("at least one shot is required".into()));
    }
    let mut turns = Vec::with_capacity(2 * shots.len() + 3);
    turns.push(Turn::Text(QUESTION.into()));
    for (image_ref, label) in shots {
        turns.push(Turn::Image(image_ref.clone()));
        turns.push(Turn::Text(format!("{ANSWER_PREFIX}{}", label.word())));
    }
    turns.push(Turn::Image(query_ref.into()));
    turns.push(Turn::Text(ANSWER_PREFIX.into()));
    Ok(PromptContext { turns })
}

/// [`assemble_prompt`] from selected shots.
pub fn assemble_from_shots(query_ref: &str, shots: &[Shot]) -> Result<PromptContext> {
    let pairs: Vec<(String, Label)> = shots.iter().map(|s| (s.image_ref.clone(), s.label)).collect();
    assemble_prompt(query_ref, &pairs)
}
