//! Multiple-choice denoising gate: cloze construction, candidate
//! serialization, prompt rendering, answer parsing, entity selection and
//! rationale synthesis.

use serde::{Deserialize, Serialize};

use crate::corpus::{AugmentedSample, Sample};
use crate::error::{Error, Result};
use crate::llm::{ChatRequest, GenParams, LlmBackend, TaskContext};
use crate::ne_index::{rank_order, Candidate, NamedEntityRecord, PhoneticIndex};
use crate::phonetics::{embedded_lexicon, phonetic_similarity, IpaString};
use crate::sync::map_ordered;
use crate::tagging::{span_affixes, EntitySpan};

pub const BLANK: &str = "[BLANK]";
pub const MAX_OPTIONS: usize = 26;
pub const NO_DEFINITION: &str = "(no definition)";
pub const FALLBACK_RATIONALE: &str = "fallback: highest phonetic score";

const SELECT_TEMPLATE: &str = include_str!("../prompts/select.txt");
const RATIONALE_TEMPLATE: &str = include_str!("../prompts/rationale.txt");

/// Substitutes `{name}` placeholders in one pass, so values containing
/// braces are never re-expanded.
pub fn fill_template(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        let hit = tail.find('}').and_then(|close| {
            let name = &tail[1..close];
            values.iter().find(|(k, _)| *k == name).map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, v)) => {
                out.push_str(v);
                rest = &tail[close + 1..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Replaces the span's words in `h1` with a single `[BLANK]`, keeping
/// punctuation attached to the outside of the span.
pub fn make_cloze(h1: &str, span: &EntitySpan) -> Result<String> {
    let words: Vec<&str> = h1.split_whitespace().collect();
    span.check(words.len())?;
    let (lead, tail) = span_affixes(&words, span);
    let blank = format!("{lead}{BLANK}{tail}");
    let mut out: Vec<&str> = Vec::with_capacity(words.len());
    out.extend(&words[..span.start_word]);
    out.push(&blank);
    out.extend(&words[span.end_word..]);
    Ok(out.join(" "))
}

fn norm_surface(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Hypothesis-derived entities (scored against `query`) followed by the
/// retrieved candidates, without case-insensitive duplicates.
pub fn augment_candidates<S: AsRef<str>>(
    n_hyp: &[S],
    query: &IpaString,
    retrieved: &[Candidate],
    index: &PhoneticIndex,
) -> Vec<Candidate> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n_hyp.len() + retrieved.len());
    for surface in n_hyp {
        let surface = surface.as_ref().trim();
        if !surface.is_empty() && seen.insert(norm_surface(surface)) {
            out.push(score_surface(surface, query, index));
        }
    }
    for c in retrieved {
        if seen.insert(norm_surface(c.surface())) {
            out.push(c.clone());
        }
    }
    out
}

/// Source tag of candidates that come only from the hypotheses.
pub const HYPOTHESIS_SOURCE: &str = "hypothesis";

/// Scores an arbitrary surface against `query` the way retrieval would,
/// taking its definition from the index when present. An empty phonemic
/// form scores 0.
pub fn score_surface(surface: &str, query: &IpaString, index: &PhoneticIndex) -> Candidate {
    let (definition, source) = match index.find(surface) {
        Some(r) => (r.definition.clone(), r.source.clone()),
        None => (String::new(), HYPOTHESIS_SOURCE.to_owned()),
    };
    let record = NamedEntityRecord::new(surface, &definition, &source, embedded_lexicon());
    let ps = phonetic_similarity(query, &record.ipa, index.costs()).unwrap_or(0.0);
    Candidate { record, ps }
}

fn definition_or_placeholder(c: &Candidate) -> &str {
    if c.definition().is_empty() {
        NO_DEFINITION
    } else {
        c.definition()
    }
}

/// `< surface | phonetic-score: 0.92 | def: definition >`
pub fn render_candidate(c: &Candidate) -> String {
    format!(
        "< {} | phonetic-score: {:.2} | def: {} >",
        c.surface(),
        c.ps,
        definition_or_placeholder(c)
    )
}

/// `B: surface (0.92 | definition)`
pub fn render_option(letter: char, c: &Candidate) -> String {
    format!("{letter}: {} ({:.2} | {})", c.surface(), c.ps, definition_or_placeholder(c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqItem {
    pub cloze: String,
    pub options: Vec<(char, Candidate)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_letter: Option<char>,
}

impl McqItem {
    pub fn new(cloze: &str, candidates: &[Candidate]) -> Result<Self> {
        if cloze.matches(BLANK).count() != 1 {
            return Err(Error::BadCloze);
        }
        if candidates.is_empty() {
            return Err(Error::NoOptions);
        }
        if candidates.len() > MAX_OPTIONS {
            return Err(Error::OptionOverflow(candidates.len()));
        }
        let options = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| ((b'A' + i as u8) as char, c.clone()))
            .collect();
        Ok(Self {
            cloze: cloze.to_owned(),
            options,
            gold_letter: None,
        })
    }

    /// Marks the answer key: among options equal to a gold entity
    /// (case-insensitively), the most similar one, so each span of a
    /// multi-entity utterance is keyed to its own entity.
    pub fn with_gold<S: AsRef<str>>(mut self, gold: &[S]) -> Self {
        let keys: Vec<String> = gold.iter().map(|g| norm_surface(g.as_ref())).collect();
        self.gold_letter = self
            .options
            .iter()
            .filter(|(_, c)| keys.contains(&norm_surface(c.surface())))
            .min_by(|a, b| rank_order(a.1.ps, a.1.surface(), b.1.ps, b.1.surface()))
            .map(|(l, _)| *l);
        self
    }

    pub fn letter_of(&self, surface: &str) -> Option<char> {
        let key = norm_surface(surface);
        self.options.iter().find(|(_, c)| norm_surface(c.surface()) == key).map(|(l, _)| *l)
    }

    pub fn option(&self, letter: char) -> Option<&Candidate> {
        self.options.iter().find(|(l, _)| *l == letter).map(|(_, c)| c)
    }

    /// The highest-similarity option under the retrieval tie rule.
    pub fn argmax(&self) -> (char, &Candidate) {
        let (l, c) = self
            .options
            .iter()
            .min_by(|a, b| rank_order(a.1.ps, a.1.surface(), b.1.ps, b.1.surface()))
            .expect("at least one option");
        (*l, c)
    }

    /// Argmax among options known to the entity database, or among all
    /// options when none is.
    pub fn argmax_known(&self) -> (char, &Candidate) {
        self.options
            .iter()
            .filter(|(_, c)| c.record.source != HYPOTHESIS_SOURCE)
            .min_by(|a, b| rank_order(a.1.ps, a.1.surface(), b.1.ps, b.1.surface()))
            .map(|(l, c)| (*l, c))
            .unwrap_or_else(|| self.argmax())
    }

    pub fn options_block(&self) -> String {
        self.options.iter().map(|(l, c)| render_option(*l, c)).collect::<Vec<_>>().join("\n")
    }

    fn input_block(&self) -> String {
        format!("<input>\nCloze sentence: {}\nOptions: {}\n<output>", self.cloze, self.options_block())
    }
}

/// Caps a candidate list at the option alphabet, keeping the highest
/// similarities and the original relative order.
pub fn cap_options(cands: &[Candidate]) -> Vec<Candidate> {
    if cands.len() <= MAX_OPTIONS {
        return cands.to_vec();
    }
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| rank_order(cands[a].ps, cands[a].surface(), cands[b].ps, cands[b].surface()));
    order.truncate(MAX_OPTIONS);
    order.sort_unstable();
    order.into_iter().map(|i| cands[i].clone()).collect()
}

/// One rendered few-shot MCQ: the item and its rationale reply.
fn fewshot_block(ex: &AugmentedSample) -> Option<String> {
    let cloze = ex.cloze.as_deref()?;
    let rationale = ex.rationale.as_deref()?;
    let mcq = McqItem::new(cloze, &cap_options(&ex.candidates)).ok()?;
    Some(format!("{}\n{}", mcq.input_block(), rationale.trim()))
}

/// Renders the selection prompt for `mcq` with the given examples.
pub fn mcq_prompt(mcq: &McqItem, fewshots: &[AugmentedSample]) -> String {
    let examples: Vec<String> = fewshots.iter().filter_map(fewshot_block).collect();
    fill_template(
        SELECT_TEMPLATE,
        &[
            ("fewshot_examples", &examples.join("\n\n")),
            ("cloze_sentence", &mcq.cloze),
            ("options", &mcq.options_block()),
        ],
    )
}

/// Letters the candidates and renders the selection prompt.
pub fn build_mcq(cloze: &str, candidates: &[Candidate], fewshots: &[AugmentedSample]) -> Result<(McqItem, String)> {
    let mcq = McqItem::new(cloze, candidates)?;
    let prompt = mcq_prompt(&mcq, fewshots);
    Ok((mcq, prompt))
}

/// Renders the rationale-synthesis prompt revealing `answer`.
pub fn rationale_prompt(mcq: &McqItem, answer: char) -> Result<String> {
    let c = mcq.option(answer).ok_or(Error::InvalidOption(answer))?;
    let input = format!("Cloze sentence: {}\nOptions: {}", mcq.cloze, mcq.options_block());
    Ok(fill_template(
        RATIONALE_TEMPLATE,
        &[("input", &input), ("answer", &format!("{answer}: {}", c.surface()))],
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationaleAnswer {
    pub rationale: String,
    pub letter: char,
    pub entity: String,
}

impl RationaleAnswer {
    /// The canonical tagged form of this answer.
    pub fn to_reply(&self) -> String {
        format!("<think>{}</think> <answer>{}: {}</answer>", self.rationale, self.letter, self.entity)
    }
}

fn find_ci(haystack: &str, needle: &str, from: usize) -> Option<usize> {
    let h = haystack.as_bytes();
    let n = needle.as_bytes();
    if n.len() > h.len() {
        return None;
    }
    (from..=h.len() - n.len()).find(|&i| h[i..i + n.len()].eq_ignore_ascii_case(n))
}

fn tagged<'a>(reply: &'a str, tag: &str) -> Option<std::result::Result<&'a str, ()>> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = find_ci(reply, &open, 0)? + open.len();
    Some(match find_ci(reply, &close, start) {
        Some(end) => Ok(&reply[start..end]),
        None => Err(()),
    })
}

/// A leading option letter: `B`, `B:`, `B.`, `B)` or `[B]` forms.
fn leading_letter(answer: &str) -> Option<(char, &str)> {
    let bracketed = answer.starts_with(['[', '(']);
    let s = answer.trim_start_matches(['[', '(']);
    let c = s.chars().next()?;
    if !c.is_ascii_alphabetic() {
        return None;
    }
    let letter = c.to_ascii_uppercase();
    let rest = &s[1..];
    if bracketed {
        if let Some(r) = rest.strip_prefix([']', ')']) {
            return Some((letter, r.trim_start().trim_start_matches(':').trim()));
        }
    }
    let rest = rest.trim_start();
    if rest.is_empty() {
        return Some((letter, ""));
    }
    rest.strip_prefix([':', '.', ')']).map(|e| (letter, e.trim()))
}

/// Parses `<think>…</think> <answer>L: entity</answer>` against `mcq`.
pub fn parse_rationale_answer(reply: &str, mcq: &McqItem) -> Result<RationaleAnswer> {
    let rationale = match tagged(reply, "think") {
        Some(Ok(t)) => t.trim().to_owned(),
        Some(Err(())) => return Err(Error::AnswerParse("unterminated <think> tag".into())),
        None => String::new(),
    };
    let answer = match tagged(reply, "answer") {
        Some(Ok(a)) => a.trim(),
        Some(Err(())) => return Err(Error::AnswerParse("unterminated <answer> tag".into())),
        None => return Err(Error::AnswerParse("missing <answer> tags".into())),
    };
    if answer.is_empty() {
        return Err(Error::AnswerParse("empty answer".into()));
    }
    let by_letter = leading_letter(answer);
    let letter = match by_letter {
        Some((l, _)) if mcq.option(l).is_some() => l,
        _ => match mcq.letter_of(answer) {
            Some(l) => l,
            None => {
                return Err(match by_letter {
                    Some((l, _)) => Error::InvalidOption(l),
                    None => Error::AnswerParse(format!("no option letter in {answer:?}")),
                })
            }
        },
    };
    let entity = mcq.option(letter).expect("validated letter").surface().to_owned();
    Ok(RationaleAnswer {
        rationale,
        letter,
        entity,
    })
}

/// Outcome of the denoising gate for one span.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub letter: char,
    pub candidate: Candidate,
    pub rationale: String,
    /// Why the argmax fallback was used, if it was.
    pub fallback: Option<String>,
}

/// Asks `backend` to pick an option, retrying unparseable replies and
/// falling back to the highest-similarity option.
pub fn select_entity(
    backend: &dyn LlmBackend,
    mcq: &McqItem,
    prompt: &str,
    key: &str,
    params: &GenParams,
    retries: u32,
) -> Result<Selection> {
    let request = ChatRequest::user(prompt, params);
    let ctx = TaskContext::Mcq { key, mcq };
    let mut last_error = String::new();
    for attempt in 0..=retries {
        let reply = backend.complete(&request, &ctx)?;
        match parse_rationale_answer(&reply, mcq) {
            Ok(ans) => {
                return Ok(Selection {
                    letter: ans.letter,
                    candidate: mcq.option(ans.letter).expect("validated").clone(),
                    rationale: ans.rationale,
                    fallback: None,
                })
            }
            Err(e) => {
                log::debug!("{key}: unusable answer on attempt {}: {e}", attempt + 1);
                last_error = e.to_string();
            }
        }
    }
    let (letter, c) = mcq.argmax();
    Ok(Selection {
        letter,
        candidate: c.clone(),
        rationale: FALLBACK_RATIONALE.into(),
        fallback: Some(format!("{key}: {last_error}")),
    })
}

/// A labelled MCQ awaiting a synthetic rationale.
#[derive(Debug, Clone)]
pub struct RationaleItem {
    pub sample: Sample,
    pub cloze: String,
    pub candidates: Vec<Candidate>,
    /// Surface of the correct option.
    pub answer: String,
}

#[derive(Debug, Default)]
pub struct Synthesis {
    pub samples: Vec<AugmentedSample>,
    /// `(sample id, reason)` for every sample left without a rationale.
    pub failures: Vec<(String, String)>,
}

fn synthesize_one(
    generator: &dyn LlmBackend,
    item: &RationaleItem,
    params: &GenParams,
    retries: u32,
) -> std::result::Result<String, String> {
    let mcq = McqItem::new(&item.cloze, &item.candidates).map_err(|e| e.to_string())?;
    let answer = mcq.letter_of(&item.answer).ok_or_else(|| format!("answer {:?} is not an option", item.answer))?;
    let prompt = rationale_prompt(&mcq, answer).map_err(|e| e.to_string())?;
    let request = ChatRequest::user(&prompt, params);
    let key = format!("{}:rationale", item.sample.id);
    let ctx = TaskContext::Rationale {
        key: &key,
        mcq: &mcq,
        answer,
    };
    let mut last = String::new();
    for _ in 0..=retries {
        let reply = generator.complete(&request, &ctx).map_err(|e| e.to_string())?;
        if !matches!(tagged(&reply, "think"), Some(Ok(_))) {
            last = "reply lacks <think> tags".into();
            continue;
        }
        match parse_rationale_answer(&reply, &mcq) {
            Ok(ans) if ans.letter == answer => return Ok(ans.to_reply()),
            Ok(ans) => last = format!("reply chose {} instead of {answer}", ans.letter),
            Err(e) => last = e.to_string(),
        }
    }
    Err(last)
}

/// Generates a rationale for every item; failures leave the rationale
/// absent and are reported, never aborting the batch.
pub fn synthesize_rationales(
    generator: &dyn LlmBackend,
    items: &[RationaleItem],
    params: &GenParams,
    retries: u32,
    jobs: usize,
) -> Synthesis {
    let results = map_ordered(jobs, items, |item| synthesize_one(generator, item, params, retries));
    let mut out = Synthesis::default();
    for (item, result) in items.iter().zip(results) {
        let rationale = match result {
            Ok(r) => Some(r),
            Err(reason) => {
                log::warn!("{}: rationale synthesis failed: {reason}", item.sample.id);
                out.failures.push((item.sample.id.clone(), reason));
                None
            }
        };
        out.samples.push(AugmentedSample {
            sample: item.sample.clone(),
            cloze: Some(item.cloze.clone()),
            candidates: item.candidates.clone(),
            rationale,
        });
    }
    out
}
