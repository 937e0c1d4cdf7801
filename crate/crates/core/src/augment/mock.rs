//! Deterministic offline backend.
//!
//! Replies are a pure function of the system prompt, the user prompt and the
//! request seed. The agent is recognised by the `[agent:NAME]` tag that opens
//! every system prompt; record fields are read back from the user prompt.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::Hasher;

use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::backend::{Backend, BackendError, BackendRequest};
use super::prompts::{REWRITE_COT, SCORE_REPROMPT};

/// Prefix the mock puts on responses rewritten under the step-by-step directive.
pub const MOCK_COT_MARKER: &str = "Step 1:";

const FRAMES: [&str; 8] = [
    "Rephrase this for a beginner: {}",
    "{} Keep the answer under one hundred words.",
    "In a practical, real-world setting: {}",
    "{} Include one concrete example.",
    "Consider a harder version of this task. {}",
    "{} Briefly justify each point.",
    "For a student preparing for an exam: {}",
    "{} Compare two possible approaches.",
];

const FILLERS: [&str; 8] = [
    "The key idea is to break the problem into smaller parts.",
    "A careful reading of the question shows what is required.",
    "Several factors matter here, and the most important comes first.",
    "Checking the result against the original question confirms it.",
    "The answer follows directly from the definitions involved.",
    "A short example makes the point clearer.",
    "Common mistakes are avoided by stating assumptions up front.",
    "This approach generalizes to similar tasks.",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    /// Expansion replies only take this many distinct values per instruction.
    pub expansion_distinct_limit: Option<usize>,
    /// Verifier rejects ids divisible by this modulus.
    pub verify_fail_modulus: Option<u64>,
    /// Verifier rejects these ids.
    pub verify_fail_ids: BTreeSet<u64>,
    /// Verifier replies with unparseable text for these ids.
    pub verify_garbage_ids: BTreeSet<u64>,
    /// Scorer replies with unparseable text for these ids, every time.
    pub score_malformed_ids: BTreeSet<u64>,
    /// Scorer replies with unparseable text for these ids on the first prompt only.
    pub score_flaky_ids: BTreeSet<u64>,
    /// Fixed scores by id.
    #[serde(skip)]
    pub score_overrides: BTreeMap<u64, (u8, u8, u8)>,
    /// Ids for which every agent call fails with a transport error.
    pub transport_fail_ids: BTreeSet<u64>,
}

#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    pub config: MockConfig,
}

impl MockBackend {
    pub fn new(config: MockConfig) -> Self {
        Self { config }
    }
}

fn agent(system: &str) -> Option<&str> {
    let first = system.lines().next()?;
    first.strip_prefix("[agent:")?.strip_suffix(']')
}

fn field<'a>(user: &'a str, name: &str) -> Option<&'a str> {
    user.lines()
        .find_map(|l| l.strip_prefix(name).and_then(|r| r.strip_prefix(": ")))
}

fn block<'a>(user: &'a str, name: &str) -> Option<&'a str> {
    let start = user.find(&format!("{name}:\n<<<\n"))? + name.len() + 6;
    let len = user[start..].find("\n>>>")?;
    Some(&user[start..start + len])
}

fn rng_for(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    let mut h = FnvHasher::default();
    h.write_u64(seed);
    for p in parts {
        h.write(p.as_bytes());
        h.write_u8(0);
    }
    ChaCha8Rng::seed_from_u64(h.finish())
}

fn malformed(msg: &str) -> BackendError {
    BackendError::Malformed(format!("mock could not read prompt: {msg}"))
}

impl Backend for MockBackend {
    fn complete(&self, req: &BackendRequest) -> Result<String, BackendError> {
        let (system, user) = (req.system_prompt.as_str(), req.user_prompt.as_str());
        let agent = agent(system).ok_or_else(|| malformed("missing agent tag"))?;
        let id: u64 = field(user, "Record-Id")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("missing Record-Id"))?;
        if self.config.transport_fail_ids.contains(&id) {
            return Err(BackendError::Transport {
                attempts: 1,
                message: format!("mock transport failure for record {id}"),
            });
        }
        let category = field(user, "Category").unwrap_or("Other");
        let instruction = block(user, "Instruction").ok_or_else(|| malformed("missing instruction"))?;
        match agent {
            "expand" => {
                let variant: usize = field(user, "Variant")
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| malformed("missing Variant"))?;
                let variant = match self.config.expansion_distinct_limit {
                    Some(limit) => variant.min(limit.max(1)),
                    None => variant,
                };
                let v = variant.to_string();
                let mut rng = rng_for(req.seed, &[agent, instruction, &v]);
                let frame = FRAMES[rng.random_range(0..FRAMES.len())];
                Ok(format!("{} (variant {v})", frame.replacen("{}", instruction, 1)))
            }
            "respond" => {
                let mut rng = rng_for(req.seed, &[system, user]);
                let n = rng.random_range(1..=3);
                let body: Vec<&str> = (0..n).map(|_| FILLERS[rng.random_range(0..FILLERS.len())]).collect();
                let topic: String = instruction.chars().take(60).collect();
                let draft: u32 = rng.random();
                Ok(format!(
                    "For this {category} task ({topic}): {} [draft {draft:08x}]",
                    body.join(" ")
                ))
            }
            "rewrite" => {
                let response = block(user, "Response").ok_or_else(|| malformed("missing response"))?;
                let rewritten = if user.contains(REWRITE_COT.trim()) {
                    format!(
                        "{MOCK_COT_MARKER} Identify what the instruction asks. Step 2: Work through it. Answer: {response}"
                    )
                } else {
                    format!("{response} This answer has been reviewed for clarity.")
                };
                Ok(json!({"instruction": instruction, "response": rewritten}).to_string())
            }
            "verify" => {
                if self.config.verify_garbage_ids.contains(&id) {
                    return Ok("looks fine to me".into());
                }
                let by_modulus = self.config.verify_fail_modulus.is_some_and(|m| m > 0 && id % m == 0);
                if by_modulus || self.config.verify_fail_ids.contains(&id) {
                    Ok(json!({"pass": false, "reason": format!("mock rule rejected record {id}")}).to_string())
                } else {
                    Ok(json!({"pass": true, "reason": ""}).to_string())
                }
            }
            "score" => {
                let reprompt = user.contains(SCORE_REPROMPT.trim());
                if self.config.score_malformed_ids.contains(&id)
                    || (self.config.score_flaky_ids.contains(&id) && !reprompt)
                {
                    return Ok("Overall I would rate this quite highly.".into());
                }
                let (i, h, g) = match self.config.score_overrides.get(&id) {
                    Some(&s) => s,
                    None => {
                        let mut rng = rng_for(req.seed, &[agent, instruction, &id.to_string()]);
                        (
                            rng.random_range(4..=10),
                            rng.random_range(4..=10),
                            rng.random_range(4..=10),
                        )
                    }
                };
                Ok(json!({"informativeness": i, "helpfulness": h, "generalization": g}).to_string())
            }
            other => Err(malformed(&format!("unknown agent {other}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(seed: u64) -> BackendRequest {
        BackendRequest::new(
            "[agent:respond]\nbe helpful",
            "Record-Id: 4\nCategory: STEM\nInstruction:\n<<<\nWhy is the sky blue?\n>>>\n",
            seed,
        )
    }

    #[test]
    fn pure_in_prompts_and_seed() {
        let m = MockBackend::default();
        assert_eq!(m.complete(&req(1)).unwrap(), m.complete(&req(1)).unwrap());
    }

    #[test]
    fn parsing_helpers() {
        let u = "Record-Id: 12\nInstruction:\n<<<\nline one\nline two\n>>>\nResponse:\n<<<\nr\n>>>\n";
        assert_eq!(field(u, "Record-Id"), Some("12"));
        assert_eq!(block(u, "Instruction"), Some("line one\nline two"));
        assert_eq!(block(u, "Response"), Some("r"));
        assert_eq!(agent("[agent:score]\nrest"), Some("score"));
        assert_eq!(agent("no tag"), None);
    }

    #[test]
    fn unknown_agent_is_malformed() {
        let mut r = req(1);
        r.system_prompt = "[agent:dance]".into();
        assert!(matches!(
            MockBackend::default().complete(&r),
            Err(BackendError::Malformed(_))
        ));
    }
}
