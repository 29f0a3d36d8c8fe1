//! The LLM-driven controller: three agents behind a pluggable completion
//! backend.
//!
//! * SIA decomposes the animation description into aligned stage prompts.
//! * PGA enhances the first prompt for initial-image generation and runs
//!   only when the user supplied no input image.
//! * ICA classifies each adjacent prompt pair into an injection strategy.
//!
//! Agent system prompts are versioned files baked into the binary; a plan
//! records their hashes so any run can be matched to the prompt revision
//! that produced it.

mod backend;
mod parse;

pub use backend::{create_backend, CompletionBackend, MockBackend, OpenAiCompatBackend};
pub use parse::{parse_agent_response, ParsedResponse, ResponseSchema};

use std::cell::RefCell;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::image_io::ImageBuf;
use crate::injection::Strategy;
use crate::trace::sha256_hex;

pub const SIA_SYSTEM_PROMPT: &str = include_str!("../../prompts/sia_v1.txt");
pub const PGA_SYSTEM_PROMPT: &str = include_str!("../../prompts/pga_v1.txt");
pub const ICA_SYSTEM_PROMPT: &str = include_str!("../../prompts/ica_v1.txt");

/// User request for one animation.
#[derive(Debug, Clone)]
pub struct AnimationRequest {
    pub description: String,
    pub input_image: Option<ImageBuf>,
    /// Number of transformation stages; when absent the planner lets the
    /// backend choose, capped by [`Planner::stage_cap`].
    pub n_t: Option<usize>,
    /// Frames per stage; at least 2 so both endpoints exist.
    pub n_f: usize,
    pub seed: u64,
}

impl AnimationRequest {
    pub fn validate(&self) -> Result<()> {
        if self.description.trim().is_empty() {
            return Err(Error::config("animation description must be non-empty"));
        }
        if let Some(n_t) = self.n_t {
            if n_t < 1 {
                return Err(Error::config("n_t must be at least 1"));
            }
        }
        if self.n_f < 2 {
            return Err(Error::config(
                "n_f must be at least 2 so both stage endpoints exist",
            ));
        }
        Ok(())
    }
}

/// Where a transition's strategy came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategySource {
    Ica,
    Override,
    Ablation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transition {
    pub from_stage: usize,
    pub strategy: Strategy,
    pub source: StrategySource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

/// The controller's output: stage prompts plus one strategy per transition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StagePlan {
    pub prompts: Vec<String>,
    pub transitions: Vec<Transition>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub enhanced_initial_prompt: Option<String>,
    /// sha256 of each agent's system prompt file.
    pub agent_prompt_hashes: BTreeMap<String, String>,
}

impl StagePlan {
    pub fn n_t(&self) -> usize {
        self.transitions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompts.len() < 2 {
            return Err(Error::config("a plan needs at least two stage prompts"));
        }
        if self.transitions.len() + 1 != self.prompts.len() {
            return Err(Error::config(format!(
                "plan shape violated: {} prompts but {} transitions",
                self.prompts.len(),
                self.transitions.len()
            )));
        }
        for (i, t) in self.transitions.iter().enumerate() {
            if t.from_stage != i {
                return Err(Error::config("transitions must be consecutively indexed"));
            }
        }
        Ok(())
    }

    /// Force one strategy on every transition (CLI override).
    pub fn with_override(mut self, strategy: Strategy) -> Self {
        for t in &mut self.transitions {
            t.strategy = strategy;
            t.source = StrategySource::Override;
            t.rationale = None;
        }
        self
    }
}

/// One backend exchange, persisted for audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transcript {
    pub agent: String,
    pub attempt: usize,
    pub system_prompt_sha256: String,
    pub user_prompt: String,
    pub response: String,
}

pub fn agent_prompt_hashes() -> BTreeMap<String, String> {
    [
        ("sia".to_string(), sha256_hex(SIA_SYSTEM_PROMPT.as_bytes())),
        ("pga".to_string(), sha256_hex(PGA_SYSTEM_PROMPT.as_bytes())),
        ("ica".to_string(), sha256_hex(ICA_SYSTEM_PROMPT.as_bytes())),
    ]
    .into_iter()
    .collect()
}

/// Soft structural-consistency check over a prompt list; returns warnings
/// instead of failing because alignment has no hard threshold.
pub fn structural_warnings(prompts: &[String]) -> Vec<String> {
    let mut warnings = Vec::new();
    let counts: Vec<usize> = prompts
        .iter()
        .map(|p| p.split_whitespace().count())
        .collect();
    if let (Some(min), Some(max)) = (counts.iter().min(), counts.iter().max()) {
        if *min > 0 && (*max as f64) > 1.5 * (*min as f64) {
            warnings.push(format!(
                "stage prompts vary in length ({min} to {max} tokens); interpolation quality may suffer"
            ));
        }
    }
    if prompts.len() >= 2 {
        let first_words: Vec<&str> = prompts
            .iter()
            .map(|p| p.split_whitespace().next().unwrap_or(""))
            .collect();
        if first_words.iter().any(|w| *w != first_words[0]) {
            warnings.push(
                "stage prompts do not share a common sentence opening; consider a shared template"
                    .to_string(),
            );
        }
    }
    warnings
}

pub struct Planner<'a> {
    backend: &'a dyn CompletionBackend,
    max_retries: usize,
    stage_cap: usize,
    transcripts: RefCell<Vec<Transcript>>,
}

impl<'a> Planner<'a> {
    pub fn new(backend: &'a dyn CompletionBackend) -> Self {
        Planner {
            backend,
            max_retries: 2,
            stage_cap: 6,
            transcripts: RefCell::new(Vec::new()),
        }
    }

    pub fn with_max_retries(mut self, max_retries: usize) -> Self {
        self.max_retries = max_retries;
        self
    }

    /// Upper bound on backend-chosen stage counts.
    pub fn stage_cap(&self) -> usize {
        self.stage_cap
    }

    pub fn transcripts(&self) -> Vec<Transcript> {
        self.transcripts.borrow().clone()
    }

    fn call<T>(
        &self,
        agent: &str,
        system_prompt: &str,
        user_prompt: &str,
        mut validate: impl FnMut(&str) -> Result<T>,
    ) -> Result<T> {
        let system_hash = sha256_hex(system_prompt.as_bytes());
        let mut last_raw = String::new();
        let mut last_error = String::new();
        for attempt in 0..=self.max_retries {
            let raw = self.backend.complete(system_prompt, user_prompt)?;
            self.transcripts.borrow_mut().push(Transcript {
                agent: agent.to_string(),
                attempt,
                system_prompt_sha256: system_hash.clone(),
                user_prompt: user_prompt.to_string(),
                response: raw.clone(),
            });
            match validate(&raw) {
                Ok(value) => return Ok(value),
                Err(e) => {
                    warn!(agent, attempt, error = %e, "agent response rejected; retrying");
                    last_error = e.to_string();
                    last_raw = raw;
                }
            }
        }
        Err(Error::Planning {
            message: format!(
                "{agent} produced no valid response after {} attempts: {last_error}",
                self.max_retries + 1
            ),
            raw: last_raw,
        })
    }

    /// Decompose a description into `n_t + 1` aligned stage prompts. With
    /// `n_t = None` the backend picks the stage count up to the cap.
    pub fn sia_decompose(&self, description: &str, n_t: Option<usize>) -> Result<Vec<String>> {
        if description.trim().is_empty() {
            return Err(Error::config("animation description must be non-empty"));
        }
        let stage_spec = match n_t {
            Some(n) => format!("{}", n + 1),
            None => format!("auto (maximum {})", self.stage_cap + 1),
        };
        let user_prompt = format!(
            "TASK: decompose\nSTAGE_PROMPTS: {stage_spec}\nDESCRIPTION: {}",
            description.trim()
        );
        let cap = self.stage_cap;
        let prompts = self.call("sia", SIA_SYSTEM_PROMPT, &user_prompt, |raw| {
            let parsed = parse_agent_response(raw, ResponseSchema::PromptList)?;
            let ParsedResponse::Prompts(prompts) = parsed else {
                unreachable!("PromptList schema yields Prompts");
            };
            match n_t {
                Some(n) if prompts.len() != n + 1 => Err(Error::config(format!(
                    "expected {} stage prompts, got {}",
                    n + 1,
                    prompts.len()
                ))),
                None if prompts.len() < 2 || prompts.len() > cap + 1 => {
                    Err(Error::config(format!(
                        "expected 2..={} stage prompts, got {}",
                        cap + 1,
                        prompts.len()
                    )))
                }
                _ => Ok(prompts),
            }
        })?;
        for w in structural_warnings(&prompts) {
            warn!(agent = "sia", "{w}");
        }
        Ok(prompts)
    }

    /// Enhance the initial prompt for text-to-image generation. The enhanced
    /// prompt must contain the original verbatim.
    pub fn pga_enhance(&self, initial_prompt: &str) -> Result<String> {
        let initial = initial_prompt.trim();
        if initial.is_empty() {
            return Err(Error::config("initial prompt must be non-empty"));
        }
        let user_prompt = format!("TASK: enhance\nPROMPT: {initial}");
        self.call("pga", PGA_SYSTEM_PROMPT, &user_prompt, |raw| {
            let parsed = parse_agent_response(raw, ResponseSchema::SinglePrompt)?;
            let ParsedResponse::Prompt(enhanced) = parsed else {
                unreachable!("SinglePrompt schema yields Prompt");
            };
            if !enhanced.to_lowercase().contains(&initial.to_lowercase()) {
                return Err(Error::config(
                    "enhanced prompt must preserve the original prompt verbatim",
                ));
            }
            Ok(enhanced)
        })
    }

    /// Classify the transition between two adjacent prompts; returns the
    /// strategy and the backend's raw rationale.
    pub fn ica_classify(&self, prompt_a: &str, prompt_b: &str) -> Result<(Strategy, String)> {
        if prompt_a.trim() == prompt_b.trim() {
            return Err(Error::config(
                "adjacent stage prompts must be distinct for classification",
            ));
        }
        let user_prompt = format!("TASK: classify\nPROMPT_A: {prompt_a}\nPROMPT_B: {prompt_b}");
        self.call("ica", ICA_SYSTEM_PROMPT, &user_prompt, |raw| {
            let parsed = parse_agent_response(raw, ResponseSchema::StrategyLabel)?;
            let ParsedResponse::Label(strategy) = parsed else {
                unreachable!("StrategyLabel schema yields Label");
            };
            Ok((strategy, raw.trim().to_string()))
        })
    }

    /// Run the coordinated workflow: SIA, then PGA iff no input image, then
    /// ICA once per adjacent prompt pair.
    pub fn plan(&self, request: &AnimationRequest) -> Result<StagePlan> {
        request.validate()?;
        let prompts = self.sia_decompose(&request.description, request.n_t)?;
        let enhanced_initial_prompt = if request.input_image.is_none() {
            Some(self.pga_enhance(&prompts[0])?)
        } else {
            None
        };
        let mut transitions = Vec::with_capacity(prompts.len() - 1);
        for i in 0..prompts.len() - 1 {
            let (strategy, rationale) = self.ica_classify(&prompts[i], &prompts[i + 1])?;
            transitions.push(Transition {
                from_stage: i,
                strategy,
                source: StrategySource::Ica,
                rationale: Some(rationale),
            });
        }
        let plan = StagePlan {
            prompts,
            transitions,
            enhanced_initial_prompt,
            agent_prompt_hashes: agent_prompt_hashes(),
        };
        plan.validate()?;
        Ok(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::injection::Strategy;
    use proptest::prelude::*;

    fn request(description: &str, n_t: Option<usize>) -> AnimationRequest {
        AnimationRequest {
            description: description.to_string(),
            input_image: None,
            n_t,
            n_f: 4,
            seed: 7,
        }
    }

    #[test]
    fn meadow_example_decomposes_into_the_four_seasons() {
        let backend = MockBackend;
        let planner = Planner::new(&backend);
        let prompts = planner
            .sia_decompose("A year has passed on the spring meadow", Some(3))
            .unwrap();
        assert_eq!(
            prompts,
            vec![
                "The meadow in spring",
                "The meadow in summer",
                "The meadow in autumn",
                "The meadow in winter"
            ]
        );
    }

    #[test]
    fn single_stage_request_yields_two_prompts() {
        let backend = MockBackend;
        let planner = Planner::new(&backend);
        let prompts = planner
            .sia_decompose("a wooden sculpture of a cat turns into a golden sculpture of a cat", Some(1))
            .unwrap();
        assert_eq!(prompts.len(), 2);
        assert_eq!(prompts[0], "a wooden sculpture of a cat");
    }

    /// Scripted backend returning a fixed response regardless of request.
    struct FixedBackend(String);
    impl CompletionBackend for FixedBackend {
        fn name(&self) -> &str {
            "fixed"
        }
        fn complete(&self, _s: &str, _u: &str) -> Result<String> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn wrong_prompt_count_is_retried_then_fails_with_raw_output() {
        let backend = FixedBackend("```json\n[\"a\", \"b\", \"c\"]\n```".to_string());
        let planner = Planner::new(&backend).with_max_retries(1);
        let err = planner.sia_decompose("whatever", Some(4)).unwrap_err();
        match err {
            Error::Planning { message, raw } => {
                assert!(message.contains("sia"), "{message}");
                assert!(raw.contains("\"a\""), "raw output must be preserved");
            }
            other => panic!("unexpected error {other}"),
        }
        // One initial attempt plus one retry, both transcribed.
        assert_eq!(planner.transcripts().len(), 2);
    }

    #[test]
    fn pga_appends_detail_and_preserves_the_original() {
        let backend = MockBackend;
        let planner = Planner::new(&backend);
        let enhanced = planner.pga_enhance("a cat sitting on the ground").unwrap();
        assert!(enhanced.starts_with("a cat sitting on the ground"));
        assert!(enhanced.len() > "a cat sitting on the ground".len());
        let again = planner.pga_enhance("a cat sitting on the ground").unwrap();
        assert_eq!(enhanced, again);
        assert!(planner.pga_enhance("  ").is_err());
    }

    #[test]
    fn ica_classifies_the_three_canonical_pairs() {
        let backend = MockBackend;
        let planner = Planner::new(&backend);
        let (s, rationale) = planner
            .ica_classify("a wooden sculpture of a cat", "a golden sculpture of a cat")
            .unwrap();
        assert_eq!(s, Strategy::Fai);
        assert!(!rationale.is_empty());
        let (s, _) = planner.ica_classify("a cat sitting", "a cat jumping").unwrap();
        assert_eq!(s, Strategy::Kvai);
        let (s, _) = planner
            .ica_classify("a cat sitting", "a golden dog jumping")
            .unwrap();
        assert_eq!(s, Strategy::Dai);
        assert!(planner.ica_classify("same", "same").is_err());
    }

    #[test]
    fn workflow_runs_pga_iff_no_input_image() {
        let backend = MockBackend;

        let planner = Planner::new(&backend);
        let plan = planner
            .plan(&request("A year has passed on the spring meadow", Some(3)))
            .unwrap();
        assert!(plan.enhanced_initial_prompt.is_some());
        let agents: Vec<String> = planner.transcripts().iter().map(|t| t.agent.clone()).collect();
        assert_eq!(agents.iter().filter(|a| *a == "pga").count(), 1);
        assert_eq!(agents.iter().filter(|a| *a == "ica").count(), 3);

        let planner = Planner::new(&backend);
        let mut with_image = request("A year has passed on the spring meadow", Some(3));
        with_image.input_image = Some(ImageBuf::filled(32, 32, [0.5; 3]));
        let plan = planner.plan(&with_image).unwrap();
        assert!(plan.enhanced_initial_prompt.is_none());
        assert!(planner.transcripts().iter().all(|t| t.agent != "pga"));
    }

    #[test]
    fn mock_plans_are_byte_identical_across_runs() {
        let backend = MockBackend;
        let req = request("A year has passed on the spring meadow", Some(3));
        let a = Planner::new(&backend).plan(&req).unwrap();
        let b = Planner::new(&backend).plan(&req).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn plans_record_agent_prompt_hashes() {
        let backend = MockBackend;
        let plan = Planner::new(&backend)
            .plan(&request("A year has passed on the spring meadow", Some(3)))
            .unwrap();
        assert_eq!(plan.agent_prompt_hashes.len(), 3);
        for (agent, hash) in &plan.agent_prompt_hashes {
            assert_eq!(hash.len(), 64, "{agent} hash must be sha256 hex");
        }
    }

    #[test]
    fn structural_warnings_flag_uneven_prompts() {
        let aligned = vec![
            "The meadow in spring".to_string(),
            "The meadow in summer".to_string(),
        ];
        assert!(structural_warnings(&aligned).is_empty());
        let uneven = vec![
            "cat".to_string(),
            "a very long and elaborate description of a golden cat statue at sunset".to_string(),
        ];
        assert!(!structural_warnings(&uneven).is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn plan_shape_invariant_holds_for_any_stage_count(n_t in 1usize..6) {
            let backend = MockBackend;
            let planner = Planner::new(&backend);
            let plan = planner
                .plan(&request("an unobserved description of change", Some(n_t)))
                .unwrap();
            prop_assert_eq!(plan.prompts.len(), n_t + 1);
            prop_assert_eq!(plan.transitions.len(), n_t);
            prop_assert!(plan.transitions.iter().all(|t| t.strategy != Strategy::None));
        }
    }
}
