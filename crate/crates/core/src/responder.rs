//! Turning an assembled context into a real/fake decision.

use std::sync::{Mutex, PoisonError};

use serde::{Deserialize, Serialize};

use crate::bridge::BridgeClient;
use crate::context::{PromptContext, Shot, SYSTEM_PROMPT};
use crate::error::{Error, Result};
use crate::label::Label;

pub const KNN_VOTE_ID: &str = "knn-vote";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub label: Label,
    pub confidence: f64,
    pub responder_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_output: Option<String>,
}

/// One piece of voting evidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vote {
    pub entry_id: u64,
    pub similarity: f64,
    pub label: Label,
}

/// Similarity-weighted vote.
///
/// Each class collects `Σ max(similarity, 0)` over its hits; the heavier
/// class wins with confidence `winner / total`. Equal masses (or no positive
/// mass at all) fall back to the label of the most similar hit, lowest entry
/// id first, with confidence 0.5.
pub fn knn_vote(votes: &[Vote]) -> Result<Decision> {
    let top = votes
        .iter()
        .min_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.entry_id.cmp(&b.entry_id)))
        .ok_or(Error::EmptyCorpus)?;
    let mass = |label: Label| -> f64 {
        votes
            .iter()
            .filter(|v| v.label == label)
            .map(|v| v.similarity.max(0.0))
            .sum()
    };
    let real = mass(Label::Real);
    let fake = mass(Label::Fake);
    let total = real + fake;
    // Summation order may differ between permutations of the same hits.
    let tied = (real - fake).abs() <= 1e-12 * total;
    let (label, confidence) = if total <= 0.0 || tied {
        (top.label, 0.5)
    } else if real > fake {
        (Label::Real, real / total)
    } else {
        (Label::Fake, fake / total)
    };
    Ok(Decision {
        label,
        confidence,
        responder_id: KNN_VOTE_ID.into(),
        raw_output: None,
    })
}

/// Reads a real/fake answer from free-form model text.
///
/// Words are compared case-insensitively after splitting on anything that
/// is not alphanumeric. Exactly one of the two answer words must occur.
pub fn parse_vlm_output(raw: &str) -> Result<Label> {
    let mut found: Option<Label> = None;
    for word in raw.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        let label = if word.eq_ignore_ascii_case("real") {
            Label::Real
        } else if word.eq_ignore_ascii_case("fake") {
            Label::Fake
        } else {
            continue;
        };
        match found {
            Some(prev) if prev != label => return Err(Error::Parse { raw: raw.into() }),
            _ => found = Some(label),
        }
    }
    found.ok_or_else(|| Error::Parse { raw: raw.into() })
}

/// Something that answers a prompt context.
pub trait Responder: Sync {
    fn id(&self) -> String;

    /// `shots` carries the retrieval evidence behind the context's examples,
    /// in context order. It may be empty.
    fn respond(&self, context: &PromptContext, shots: &[Shot]) -> Result<Decision>;

    /// Whether concurrent calls are independent of each other.
    fn is_pure(&self) -> bool {
        false
    }

    /// How many requests may be in flight at once when not pure.
    fn parallelism(&self) -> usize {
        1
    }
}

/// In-process stand-in for a vision-language model.
///
/// Votes over the shots' retrieval scores. Shots without a score (random
/// selection) weigh 1.0 each, so the vote sees exactly what the context
/// shows: labels without relevance. With no shots, the labels are read back
/// from the context's answer turns.
#[derive(Debug, Clone, Copy, Default)]
pub struct KnnVoteResponder;

impl Responder for KnnVoteResponder {
    fn id(&self) -> String {
        KNN_VOTE_ID.into()
    }

    fn respond(&self, context: &PromptContext, shots: &[Shot]) -> Result<Decision> {
        let votes: Vec<Vote> = if shots.is_empty() {
            context
                .shot_labels()
                .into_iter()
                .enumerate()
                .map(|(i, l)| {
                    l.map(|label| Vote {
                        entry_id: i as u64,
                        similarity: 1.0,
                        label,
                    })
                    .ok_or_else(|| Error::Context(format!("answer turn {i} has no label")))
                })
                .collect::<Result<_>>()?
        } else {
            shots
                .iter()
                .map(|s| Vote {
                    entry_id: s.entry_id,
                    similarity: s.score.unwrap_or(1.0),
                    label: s.label,
                })
                .collect()
        };
        knn_vote(&votes)
    }

    fn is_pure(&self) -> bool {
        true
    }
}

/// Responder backed by one or more bridge connections. Each connection
/// carries one request at a time.
#[derive(Debug)]
pub struct BridgeResponder {
    name: String,
    pool: Vec<Mutex<BridgeClient>>,
    send_system_prompt: bool,
}

impl BridgeResponder {
    pub fn new(name: impl Into<String>, connections: Vec<BridgeClient>) -> Result<Self> {
        if connections.is_empty() {
            return Err(Error::Config("bridge responder needs at least one connection".into()));
        }
        Ok(Self {
            name: name.into(),
            pool: connections.into_iter().map(Mutex::new).collect(),
            send_system_prompt: true,
        })
    }

    pub fn without_system_prompt(mut self) -> Self {
        self.send_system_prompt = false;
        self
    }

    fn with_client<T>(&self, f: impl FnOnce(&mut BridgeClient) -> T) -> T {
        for slot in &self.pool {
            if let Ok(mut c) = slot.try_lock() {
                return f(&mut c);
            }
        }
        let mut c = self.pool[0].lock().unwrap_or_else(PoisonError::into_inner);
        f(&mut c)
    }
}

impl Responder for BridgeResponder {
    fn id(&self) -> String {
        format!("bridge:{}", self.name)
    }

    fn respond(&self, context: &PromptContext, _shots: &[Shot]) -> Result<Decision> {
        let system = self.send_system_prompt.then_some(SYSTEM_PROMPT);
        let text = self.with_client(|c| c.respond(context, system))?;
        let label = parse_vlm_output(&text)?;
        Ok(Decision {
            label,
            confidence: 1.0,
            responder_id: self.id(),
            raw_output: Some(text),
        })
    }

    fn parallelism(&self) -> usize {
        self.pool.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::assemble_prompt;
    use proptest::prelude::*;

    fn v(id: u64, similarity: f64, label: Label) -> Vote {
        Vote {
            entry_id: id,
            similarity,
            label,
        }
    }

    #[test]
    fn unanimous() {
        let d = knn_vote(&[v(0, 0.9, Label::Fake), v(1, 0.2, Label::Fake)]).unwrap();
        assert_eq!((d.label, d.confidence), (Label::Fake, 1.0));
        assert_eq!(d.responder_id, "knn-vote");
    }

    #[test]
    fn equal_mass_falls_back_to_top_hit() {
        // Brute-force masses: real 0.9, fake 0.5 + 0.4 = 0.9.
        let votes = [v(0, 0.9, Label::Real), v(1, 0.5, Label::Fake), v(2, 0.4, Label::Fake)];
        let real: f64 = 0.9;
        let fake: f64 = 0.5 + 0.4;
        assert_eq!(real, fake);
        let d = knn_vote(&votes).unwrap();
        assert_eq!(d.label, Label::Real);
        assert_eq!(d.confidence, 0.5);
    }

    #[test]
    fn single_hit_and_negative_clamp() {
        let d = knn_vote(&[v(0, 0.3, Label::Real)]).unwrap();
        assert_eq!((d.label, d.confidence), (Label::Real, 1.0));
        let d = knn_vote(&[v(0, 0.3, Label::Real), v(1, -0.9, Label::Fake)]).unwrap();
        assert_eq!((d.label, d.confidence), (Label::Real, 1.0));
        let d = knn_vote(&[v(0, -0.1, Label::Fake), v(1, -0.9, Label::Real)]).unwrap();
        assert_eq!((d.label, d.confidence), (Label::Fake, 0.5));
        assert!(matches!(knn_vote(&[]), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn parsing() {
        assert_eq!(parse_vlm_output("Fake").unwrap(), Label::Fake);
        assert_eq!(parse_vlm_output("  real.\n").unwrap(), Label::Real);
        assert_eq!(parse_vlm_output("REAL! real").unwrap(), Label::Real);
        assert!(matches!(parse_vlm_output("it could be either"), Err(Error::Parse { .. })));
        assert!(matches!(parse_vlm_output("real or fake"), Err(Error::Parse { .. })));
        assert!(parse_vlm_output("unrealistic fakery").is_err());
        for l in [Label::Real, Label::Fake] {
            assert_eq!(parse_vlm_output(l.word()).unwrap(), l);
        }
    }

    #[test]
    fn reference_responder_reads_context_labels() {
        let shots = vec![("a".to_string(), Label::Fake), ("b".to_string(), Label::Fake)];
        let ctx = assemble_prompt("q", &shots).unwrap();
        let d = KnnVoteResponder.respond(&ctx, &[]).unwrap();
        assert_eq!(d.label, Label::Fake);
    }

    fn votes_strategy() -> impl Strategy<Value = Vec<Vote>> {
        prop::collection::vec((-1.0f64..1.0, any::<bool>()), 1..20).prop_map(|xs| {
            xs.into_iter()
                .enumerate()
                .map(|(i, (s, f))| v(i as u64, s, if f { Label::Fake } else { Label::Real }))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn vote_scale_invariant(votes in votes_strategy(), s in 0.01f64..100.0) {
            let scaled: Vec<Vote> = votes.iter().map(|x| v(x.entry_id, x.similarity * s, x.label)).collect();
            prop_assert_eq!(knn_vote(&votes).unwrap().label, knn_vote(&scaled).unwrap().label);
        }

        #[test]
        fn vote_permutation_invariant(votes in votes_strategy(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = votes.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = knn_vote(&votes).unwrap();
            let b = knn_vote(&shuffled).unwrap();
            prop_assert_eq!(a.label, b.label);
            prop_assert!((a.confidence - b.confidence).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a.confidence));
        }
    }
}
