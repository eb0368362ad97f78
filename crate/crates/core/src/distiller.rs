//! Rule and thought distillation from a teacher chat model.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::chat::ChatMessage;
use crate::corpus::{Domain, Session};
use crate::evaluator::ItemSet;
use crate::knowledge::{RuleKnowledge, ThoughtKnowledge};
use crate::prompting::{
    compare_bindings, parse_bundle_json, parse_rules, parse_thoughts, render_reflection_step,
    render_thought_prompt, render_zero_shot, PromptError, JSON_REASK_SUFFIX,
};

/// A chat completion endpoint as seen by the distiller.
pub trait ChatModel {
    type Error: fmt::Display;

    fn chat(&self, messages: &[ChatMessage]) -> Result<String, Self::Error>;

    /// Wall-clock milliseconds for trace timestamps, when a clock exists.
    fn now_ms(&self) -> Option<u64> {
        None
    }
}

impl<T: ChatModel + ?Sized> ChatModel for &T {
    type Error = T::Error;

    fn chat(&self, messages: &[ChatMessage]) -> Result<String, Self::Error> {
        (**self).chat(messages)
    }

    fn now_ms(&self) -> Option<u64> {
        (**self).now_ms()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DistillError<E: fmt::Display> {
    #[error("session {session}: step {step}: {source}")]
    Chat { session: String, step: u8, source: E },
    #[error("session {session}: step {step}: unparseable reply after re-ask: {raw}")]
    Unparseable { session: String, step: u8, raw: String },
    #[error("session {0} has no ground-truth bundles")]
    NoGroundTruth(String),
    #[error("session {session}: step {step}: {source}")]
    Prompt { session: String, step: u8, source: PromptError },
}

impl<E: fmt::Display> DistillError<E> {
    pub fn step(&self) -> Option<u8> {
        match self {
            DistillError::Chat { step, .. }
            | DistillError::Unparseable { step, .. }
            | DistillError::Prompt { step, .. } => Some(*step),
            DistillError::NoGroundTruth(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: u8,
    pub attempt: u8,
    /// The full request history sent for this call.
    pub request: Vec<ChatMessage>,
    pub raw_response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requested_at_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub responded_at_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillationTrace {
    pub session_id: String,
    pub kind: String,
    pub steps: Vec<TraceStep>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Distilled<T> {
    pub knowledge: Vec<T>,
    pub trace: DistillationTrace,
}

struct Chain<'a, M: ChatModel> {
    model: &'a M,
    trace: DistillationTrace,
}

impl<M: ChatModel> Chain<'_, M> {
    fn call(&mut self, step: u8, attempt: u8, request: &[ChatMessage]) -> Result<String, DistillError<M::Error>> {
        let requested_at_ms = self.model.now_ms();
        let reply = self.model.chat(request).map_err(|source| DistillError::Chat {
            session: self.trace.session_id.clone(),
            step,
            source,
        })?;
        self.trace.steps.push(TraceStep {
            step,
            attempt,
            request: request.to_vec(),
            raw_response: reply.clone(),
            requested_at_ms,
            responded_at_ms: self.model.now_ms(),
        });
        Ok(reply)
    }

    /// Sends `history`, and on a parse failure resends it once with the
    /// re-ask suffix appended to the last user message.
    fn call_parsed<T>(
        &mut self,
        step: u8,
        history: &mut Vec<ChatMessage>,
        parse: impl Fn(&str) -> Result<T, PromptError>,
    ) -> Result<T, DistillError<M::Error>> {
        let reply = self.call(step, 1, history)?;
        if let Ok(v) = parse(&reply) {
            history.push(ChatMessage::assistant(reply));
            return Ok(v);
        }
        let mut reask = history.clone();
        if let Some(last) = reask.last_mut() {
            last.content.push_str(JSON_REASK_SUFFIX);
        }
        let reply = self.call(step, 2, &reask)?;
        match parse(&reply) {
            Ok(v) => {
                *history = reask;
                history.push(ChatMessage::assistant(reply));
                Ok(v)
            }
            Err(_) => Err(DistillError::Unparseable { session: self.trace.session_id.clone(), step, raw: reply }),
        }
    }

    fn prompt_err(&self, step: u8, source: PromptError) -> DistillError<M::Error> {
        DistillError::Prompt { session: self.trace.session_id.clone(), step, source }
    }
}

fn new_trace(s: &Session, kind: &str) -> DistillationTrace {
    DistillationTrace { session_id: s.id.clone(), kind: kind.into(), steps: Vec::new(), warnings: Vec::new() }
}

/// Four-step self-reflection chain. Every step resends the whole history;
/// step 1's detected bundles feed step 2 (empty when the reply does not parse).
pub fn distill_rules<M: ChatModel>(
    s: &Session,
    domain: Domain,
    teacher: &M,
) -> Result<Distilled<RuleKnowledge>, DistillError<M::Error>> {
    if s.bundles.is_empty() {
        return Err(DistillError::NoGroundTruth(s.id.clone()));
    }
    let mut chain = Chain { model: teacher, trace: new_trace(s, "rule") };
    let mut history = render_zero_shot(s).messages;

    let reply = chain.call(1, 1, &history)?;
    let detected: Vec<ItemSet> = match parse_bundle_json(&reply, s) {
        Ok(p) => {
            chain.trace.warnings.extend(p.warnings.into_iter().map(|w| format!("step 1: {w}")));
            p.bundles
        }
        Err(e) => {
            chain.trace.warnings.push(format!("step 1: {e}; comparing against no detected bundles"));
            Vec::new()
        }
    };
    history.push(ChatMessage::assistant(reply));

    let step2 = render_reflection_step(2, &compare_bindings(s, &detected)).map_err(|e| chain.prompt_err(2, e))?;
    history.extend(step2.messages);
    let reply = chain.call(2, 1, &history)?;
    history.push(ChatMessage::assistant(reply));

    let step3 = render_reflection_step(3, &Default::default()).map_err(|e| chain.prompt_err(3, e))?;
    history.extend(step3.messages);
    let reply = chain.call(3, 1, &history)?;
    history.push(ChatMessage::assistant(reply));

    let step4 = render_reflection_step(4, &Default::default()).map_err(|e| chain.prompt_err(4, e))?;
    history.extend(step4.messages);
    let rules = chain.call_parsed(4, &mut history, parse_rules)?;

    let knowledge = rules
        .into_iter()
        .map(|text| RuleKnowledge { text, source_session_id: s.id.clone(), domain: domain.clone() })
        .collect();
    Ok(Distilled { knowledge, trace: chain.trace })
}

/// One chain-of-thought call yielding an insight per ground-truth bundle.
pub fn distill_thoughts<M: ChatModel>(
    s: &Session,
    domain: Domain,
    teacher: &M,
) -> Result<Distilled<ThoughtKnowledge>, DistillError<M::Error>> {
    if s.bundles.is_empty() {
        return Err(DistillError::NoGroundTruth(s.id.clone()));
    }
    let mut chain = Chain { model: teacher, trace: new_trace(s, "thought") };
    let prompt = render_thought_prompt(s);
    chain.trace.warnings.extend(prompt.warnings);
    let mut history = prompt.messages;
    let thoughts = chain.call_parsed(1, &mut history, parse_thoughts)?;

    let mut covered = BTreeSet::new();
    let mut knowledge = Vec::new();
    for (k, text) in thoughts {
        let Some(b) = usize::try_from(k).ok().filter(|&k| k >= 1).and_then(|k| s.bundles.get(k - 1)) else {
            chain.trace.warnings.push(format!("reply names bundle{k}, which does not exist"));
            continue;
        };
        if !covered.insert(k) {
            continue;
        }
        knowledge.push(ThoughtKnowledge {
            text,
            source_session_id: s.id.clone(),
            source_bundle_id: b.id.clone(),
            domain: domain.clone(),
        });
    }
    for k in 1..=s.bundles.len() as u64 {
        if !covered.contains(&k) {
            chain.trace.warnings.push(format!("reply has no insight for bundle{k}"));
        }
    }
    Ok(Distilled { knowledge, trace: chain.trace })
}
