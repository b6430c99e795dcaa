//! Correction pipelines: ASR passthrough, plain GEC, retrieval-augmented
//! GEC, the denoised variant, and the gold-entity upper bound.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AugmentedSample, Sample};
use crate::denoising::{
    augment_candidates, cap_options, fill_template, make_cloze, mcq_prompt, render_candidate, score_surface,
    select_entity, McqItem, RationaleItem,
};
use crate::error::{Error, Result};
use crate::filtering::FilterSpec;
use crate::llm::{ChatRequest, GecContext, GenParams, LlmBackend, TaskContext};
use crate::ne_index::{sort_candidates, Candidate, PhoneticIndex};
use crate::phonetics::{embedded_lexicon, phonemize, IpaString};
use crate::sync::map_ordered;
use crate::tagging::{span_affixes, EntitySpan, Tagger};

const GEC_TEMPLATE: &str = include_str!("../prompts/gec.txt");

/// Upper bound on span iterations per sample, guarding against a
/// corrector that keeps growing the transcript.
const MAX_SPAN_STEPS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineMode {
    Asr,
    Gec,
    Ragec,
    Deragec,
    Oracle,
}

impl PipelineMode {
    pub const ALL: [PipelineMode; 5] = [Self::Asr, Self::Gec, Self::Ragec, Self::Deragec, Self::Oracle];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Asr => "asr",
            Self::Gec => "gec",
            Self::Ragec => "ragec",
            Self::Deragec => "deragec",
            Self::Oracle => "oracle",
        }
    }
}

impl fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PipelineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?} (expected asr, gec, ragec, deragec or oracle)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: PipelineMode,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_fewshots")]
    pub fewshot_count: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub filter: Option<FilterSpec>,
    #[serde(default = "default_max_options")]
    pub max_options: usize,
    /// Extra attempts for unparseable selector replies.
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default)]
    pub params: GenParams,
    /// Worker threads across samples; 0 means one per core.
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

fn default_k() -> usize {
    10
}

fn default_fewshots() -> usize {
    5
}

fn default_max_options() -> usize {
    crate::denoising::MAX_OPTIONS
}

fn default_retries() -> u32 {
    2
}

fn default_jobs() -> usize {
    1
}

impl RunConfig {
    pub fn new(mode: PipelineMode) -> Self {
        Self {
            mode,
            k: default_k(),
            fewshot_count: default_fewshots(),
            seed: 0,
            filter: None,
            max_options: default_max_options(),
            retries: default_retries(),
            params: GenParams::default(),
            jobs: default_jobs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::ZeroK);
        }
        if self.max_options == 0 || self.max_options > crate::denoising::MAX_OPTIONS {
            return Err(Error::Config(format!(
                "max_options must be within 1..={}",
                crate::denoising::MAX_OPTIONS
            )));
        }
        Ok(())
    }
}

/// Replaces the span's words with `replacement`, leaving every other word
/// and the punctuation around the span untouched.
pub fn splice_correct(h1: &str, span: &EntitySpan, replacement: &str) -> Result<String> {
    let words: Vec<&str> = h1.split_whitespace().collect();
    span.check(words.len())?;
    let (lead, tail) = span_affixes(&words, span);
    let mut out: Vec<String> = Vec::with_capacity(words.len() + 2);
    out.extend(words[..span.start_word].iter().map(|w| w.to_string()));
    let rep: Vec<&str> = replacement.split_whitespace().collect();
    if rep.is_empty() {
        let glued = format!("{lead}{tail}");
        if !glued.is_empty() {
            out.push(glued);
        }
    } else {
        let n = rep.len();
        for (i, w) in rep.into_iter().enumerate() {
            let pre = if i == 0 { lead } else { "" };
            let post = if i + 1 == n { tail } else { "" };
            out.push(format!("{pre}{w}{post}"));
        }
    }
    out.extend(words[span.end_word..].iter().map(|w| w.to_string()));
    Ok(out.join(" "))
}

pub fn run_asr_baseline(sample: &Sample) -> String {
    sample.h1().to_owned()
}

/// Seeded uniform draw of `t` examples without replacement, kept in pool
/// order.
pub fn sample_fewshots(pool: &[AugmentedSample], t: usize, seed: u64) -> Vec<AugmentedSample> {
    if t >= pool.len() {
        return pool.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, pool.len(), t).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| pool[i].clone()).collect()
}

/// A worked correction shown to the GEC model.
#[derive(Debug, Clone, PartialEq)]
pub struct GecExample {
    pub hypotheses: Vec<String>,
    pub entities: Option<String>,
    pub corrected: String,
}

fn hypotheses_block(hypotheses: &[String]) -> String {
    hypotheses.iter().enumerate().map(|(i, h)| format!("\n{}. {h}", i + 1)).collect()
}

/// Fills the GEC template. Without an entity block the `Named-Entities`
/// line is dropped.
pub fn build_gec_prompt(hypotheses: &[String], entity_block: Option<&str>, fewshots: &[GecExample]) -> String {
    let examples: Vec<String> = fewshots
        .iter()
        .map(|ex| {
            let mut s = format!("<input>\n5-best:{}\n", hypotheses_block(&ex.hypotheses));
            if let Some(e) = &ex.entities {
                s.push_str(&format!("Named-Entities: {e}\n"));
            }
            s.push_str(&format!("<output>\nCorrected: {}", ex.corrected));
            s
        })
        .collect();
    let template: String = if entity_block.is_some() {
        GEC_TEMPLATE.to_owned()
    } else {
        GEC_TEMPLATE
            .lines()
            .filter(|l| !l.starts_with("Named-Entities:"))
            .map(|l| format!("{l}\n"))
            .collect()
    };
    fill_template(
        &template,
        &[
            ("fewshot_examples", &examples.join("\n\n")),
            ("hypotheses", &hypotheses_block(hypotheses)),
            ("named_entities", entity_block.unwrap_or_default()),
        ],
    )
}

/// Entity line for the denoised variants: the chosen entity serialized
/// with its score and definition, then the rationale.
pub fn selection_block(c: &Candidate, rationale: &str) -> String {
    format!("{} rationale: {}", render_candidate(c), rationale)
}

fn candidates_block(cands: &[Candidate]) -> String {
    cands.iter().map(render_candidate).collect::<Vec<_>>().join("\n")
}

fn think_text(rationale: &str) -> &str {
    rationale
        .find("<think>")
        .and_then(|s| {
            let body = &rationale[s + 7..];
            body.find("</think>").map(|e| body[..e].trim())
        })
        .unwrap_or(rationale.trim())
}

/// GEC examples in the shape the given mode prompts with.
pub fn gec_examples(mode: PipelineMode, pool: &[AugmentedSample]) -> Vec<GecExample> {
    pool.iter()
        .map(|ex| {
            let gold = ex.sample.gold_entities.as_deref().unwrap_or_default();
            let entities = match mode {
                PipelineMode::Asr | PipelineMode::Gec => None,
                PipelineMode::Ragec => (!ex.candidates.is_empty()).then(|| candidates_block(&ex.candidates)),
                PipelineMode::Deragec | PipelineMode::Oracle => {
                    let chosen = ex
                        .candidates
                        .iter()
                        .find(|c| gold.iter().any(|g| g.trim().eq_ignore_ascii_case(c.surface().trim())))
                        .or(ex.candidates.first());
                    chosen.map(|c| {
                        let why = match mode {
                            PipelineMode::Oracle => "ground truth named entity",
                            _ => ex.rationale.as_deref().map(think_text).unwrap_or_default(),
                        };
                        selection_block(c, why)
                    })
                }
            };
            GecExample {
                hypotheses: ex.sample.hypotheses.clone(),
                entities,
                corrected: ex.sample.reference.clone(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub span: EntitySpan,
    /// Option letter; absent when the entity was injected rather than
    /// chosen.
    pub letter: Option<char>,
    pub entity: String,
    pub ps: f64,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub mode: PipelineMode,
    pub transcript: String,
    #[serde(default)]
    pub selections: Vec<SelectionRecord>,
    #[serde(default)]
    pub fallbacks: Vec<String>,
    /// Candidates that passed the gate (or, without a gate, reached the
    /// prompt), one entry per occurrence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surviving: Option<Vec<String>>,
}

/// Everything a run needs besides the samples.
pub struct Pipeline<'a> {
    pub config: RunConfig,
    pub index: &'a PhoneticIndex,
    pub tagger: &'a dyn Tagger,
    pub selector: &'a dyn LlmBackend,
    pub corrector: &'a dyn LlmBackend,
    fewshots: Vec<AugmentedSample>,
}

fn clean_reply(reply: &str) -> &str {
    let t = reply.trim();
    t.strip_prefix("Corrected:").map(str::trim).unwrap_or(t)
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

impl<'a> Pipeline<'a> {
    /// Samples the few-shot set once, from pool entries that carry a
    /// rationale.
    pub fn new(
        config: RunConfig,
        index: &'a PhoneticIndex,
        tagger: &'a dyn Tagger,
        selector: &'a dyn LlmBackend,
        corrector: &'a dyn LlmBackend,
        pool: &[AugmentedSample],
    ) -> Result<Self> {
        config.validate()?;
        let usable: Vec<AugmentedSample> = pool.iter().filter(|s| s.has_rationale()).cloned().collect();
        if usable.len() < pool.len() {
            log::info!("{} few-shot pool entries lack a rationale and are skipped", pool.len() - usable.len());
        }
        let fewshots = sample_fewshots(&usable, config.fewshot_count, config.seed);
        Ok(Self {
            config,
            index,
            tagger,
            selector,
            corrector,
            fewshots,
        })
    }

    pub fn fewshots(&self) -> &[AugmentedSample] {
        &self.fewshots
    }

    /// Few-shots other than the sample itself.
    fn fewshots_for(&self, sample: &Sample) -> Vec<AugmentedSample> {
        self.fewshots.iter().filter(|f| f.sample.id != sample.id).cloned().collect()
    }

    pub fn run(&self, samples: &[Sample]) -> Result<Vec<RunRecord>> {
        map_ordered(self.config.jobs, samples, |s| self.run_sample(s)).into_iter().collect()
    }

    pub fn run_sample(&self, sample: &Sample) -> Result<RunRecord> {
        let mut record = RunRecord {
            id: sample.id.clone(),
            mode: self.config.mode,
            transcript: String::new(),
            selections: Vec::new(),
            fallbacks: Vec::new(),
            surviving: None,
        };
        match self.config.mode {
            PipelineMode::Asr => record.transcript = run_asr_baseline(sample),
            PipelineMode::Gec => record.transcript = self.run_gec(sample, &mut record.fallbacks)?,
            PipelineMode::Ragec => self.run_ragec(sample, &mut record)?,
            PipelineMode::Deragec | PipelineMode::Oracle => self.run_deragec(sample, &mut record)?,
        }
        Ok(record)
    }

    fn gold<'s>(&self, sample: &'s Sample) -> Result<&'s [String]> {
        match (&sample.gold_entities, self.config.mode) {
            (Some(g), _) => Ok(g),
            (None, PipelineMode::Oracle) => Err(Error::Config(format!(
                "oracle mode needs gold_entities; sample {} has none",
                sample.id
            ))),
            (None, _) => Ok(&[]),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn correct(
        &self,
        sample: &Sample,
        key: &str,
        current: &str,
        entity_block: Option<&str>,
        edit: Option<(&EntitySpan, &str)>,
        entities: &[String],
        fallbacks: &mut Vec<String>,
    ) -> Result<String> {
        let examples = gec_examples(self.config.mode, &self.fewshots_for(sample));
        let prompt = build_gec_prompt(&sample.hypotheses, entity_block, &examples);
        let ctx = TaskContext::Gec(GecContext {
            key,
            h1: current,
            hypotheses: &sample.hypotheses,
            edit,
            entities,
            reference: Some(&sample.reference),
            gold: self.gold(sample)?,
        });
        let reply = self.corrector.complete(&ChatRequest::user(&prompt, &self.config.params), &ctx)?;
        let text = clean_reply(&reply);
        if text.is_empty() {
            fallbacks.push(format!("{key}: empty reply, kept previous transcript"));
            return Ok(current.to_owned());
        }
        Ok(text.to_owned())
    }

    pub fn run_gec(&self, sample: &Sample, fallbacks: &mut Vec<String>) -> Result<String> {
        let key = format!("{}:gec", sample.id);
        self.correct(sample, &key, sample.h1(), None, None, &[], fallbacks)
    }

    /// Retrieved (and optionally filtered) candidates for one query,
    /// best first.
    fn retrieve(&self, query: &IpaString) -> Result<Vec<Candidate>> {
        let mut cands = self.index.retrieve_topk(query, self.config.k)?;
        if let Some(f) = &self.config.filter {
            cands = f.apply(&cands);
        }
        Ok(cands)
    }

    fn run_ragec(&self, sample: &Sample, record: &mut RunRecord) -> Result<()> {
        let spans = self.tagger.tag(sample.h1())?;
        let mut all: Vec<Candidate> = Vec::new();
        for span in &spans {
            let query = phonemize(&span.surface, embedded_lexicon());
            if query.is_empty() {
                record.fallbacks.push(format!("span {:?} has no phonemic form", span.surface));
                continue;
            }
            for c in self.retrieve(&query)? {
                if !all.iter().any(|x| x.surface().eq_ignore_ascii_case(c.surface())) {
                    all.push(c);
                }
            }
        }
        let surfaces: Vec<String> = all.iter().map(|c| c.surface().to_owned()).collect();
        let block = (!all.is_empty()).then(|| candidates_block(&all));
        let key = format!("{}:gec", sample.id);
        record.transcript = self.correct(
            sample,
            &key,
            sample.h1(),
            block.as_deref(),
            None,
            &surfaces,
            &mut record.fallbacks,
        )?;
        record.surviving = Some(surfaces);
        Ok(())
    }

    /// The options for one span: hypothesis entities and retrieved
    /// candidates, ranked by similarity and capped.
    fn span_options(&self, query: &IpaString, n_hyp: &[String]) -> Result<Vec<Candidate>> {
        let retrieved = self.retrieve(query)?;
        let mut cands = augment_candidates(n_hyp, query, &retrieved, self.index);
        sort_candidates(&mut cands);
        cands.truncate(self.config.max_options);
        Ok(cap_options(&cands))
    }

    fn run_deragec(&self, sample: &Sample, record: &mut RunRecord) -> Result<()> {
        let gold = self.gold(sample)?;
        let oracle = self.config.mode == PipelineMode::Oracle;
        let hyp_spans: Vec<Vec<EntitySpan>> = sample
            .hypotheses
            .iter()
            .map(|h| self.tagger.tag(h))
            .collect::<Result<_>>()?;
        if hyp_spans[0].is_empty() {
            record.fallbacks.push("no entity spans in h1; plain GEC".into());
            if oracle && !gold.is_empty() {
                let query = phonemize(sample.h1(), embedded_lexicon());
                let block: Vec<String> = gold
                    .iter()
                    .map(|g| selection_block(&score_surface(g, &query, self.index), "ground truth named entity"))
                    .collect();
                let key = format!("{}:gec", sample.id);
                record.transcript = self.correct(
                    sample,
                    &key,
                    sample.h1(),
                    Some(&block.join("\n")),
                    None,
                    gold,
                    &mut record.fallbacks,
                )?;
                record.surviving = Some(gold.to_vec());
            } else {
                record.transcript = self.run_gec(sample, &mut record.fallbacks)?;
                record.surviving = Some(Vec::new());
            }
            return Ok(());
        }

        let fewshots = self.fewshots_for(sample);
        let mut transcript = sample.h1().to_owned();
        let mut surviving = Vec::new();
        let mut cursor = 0usize;
        for step in 0..MAX_SPAN_STEPS {
            let spans = self.tagger.tag(&transcript)?;
            let Some(span) = spans.into_iter().find(|s| s.start_word >= cursor) else {
                break;
            };
            let query = phonemize(&span.surface, embedded_lexicon());
            if query.is_empty() {
                record.fallbacks.push(format!("span {:?} has no phonemic form", span.surface));
                cursor = span.end_word;
                continue;
            }
            let n_hyp: Vec<String> = std::iter::once(span.surface.clone())
                .chain(hyp_spans[1..].iter().filter_map(|spans| spans.get(step).map(|s| s.surface.clone())))
                .collect();

            let (chosen, letter, rationale) = if oracle {
                let best = gold
                    .iter()
                    .map(|g| score_surface(g, &query, self.index))
                    .min_by(|a, b| crate::ne_index::rank_order(a.ps, a.surface(), b.ps, b.surface()))
                    .expect("oracle gold is nonempty");
                (best, None, "ground truth named entity".to_owned())
            } else {
                let options = self.span_options(&query, &n_hyp)?;
                let cloze = make_cloze(&transcript, &span)?;
                let mcq = McqItem::new(&cloze, &options)?.with_gold(gold);
                let prompt = mcq_prompt(&mcq, &fewshots);
                let key = format!("{}:{step}", sample.id);
                let sel = select_entity(
                    self.selector,
                    &mcq,
                    &prompt,
                    &key,
                    &self.config.params,
                    self.config.retries,
                )?;
                if let Some(why) = sel.fallback {
                    record.fallbacks.push(why);
                }
                (sel.candidate, Some(sel.letter), sel.rationale)
            };
            surviving.push(chosen.surface().to_owned());
            surviving.extend(n_hyp.iter().cloned());

            let block = selection_block(&chosen, &rationale);
            let entities = vec![chosen.surface().to_owned()];
            let key = format!("{}:gec:{step}", sample.id);
            let next = self.correct(
                sample,
                &key,
                &transcript,
                Some(&block),
                Some((&span, chosen.surface())),
                &entities,
                &mut record.fallbacks,
            )?;
            let shift = word_count(&next) as isize - word_count(&transcript) as isize;
            cursor = ((span.end_word as isize + shift).max(span.start_word as isize + 1)) as usize;
            record.selections.push(SelectionRecord {
                span,
                letter,
                entity: chosen.surface().to_owned(),
                ps: chosen.ps,
                rationale,
            });
            transcript = next;
        }
        record.transcript = transcript;
        record.surviving = Some(surviving);
        Ok(())
    }
}

/// Builds the labelled MCQs used to synthesize rationales. The span of
/// h1 closest to a gold entity becomes the blank; a gold entity missing
/// from the options is scored and added so the answer is always present.
/// Samples without gold entities or entity spans are returned as skipped
/// ids.
pub fn prepare_rationale_items(
    samples: &[Sample],
    index: &PhoneticIndex,
    tagger: &dyn Tagger,
    k: usize,
) -> Result<(Vec<RationaleItem>, Vec<String>)> {
    let mut items = Vec::new();
    let mut skipped = Vec::new();
    for sample in samples {
        let gold = sample.gold_entities.as_deref().unwrap_or_default();
        if gold.is_empty() {
            skipped.push(sample.id.clone());
            continue;
        }
        let hyp_spans: Vec<Vec<EntitySpan>> = sample
            .hypotheses
            .iter()
            .map(|h| tagger.tag(h))
            .collect::<Result<_>>()?;
        // (span index, query, best gold candidate)
        let mut best: Option<(usize, IpaString, Candidate)> = None;
        for (i, span) in hyp_spans[0].iter().enumerate() {
            let query = phonemize(&span.surface, embedded_lexicon());
            if query.is_empty() {
                continue;
            }
            for g in gold {
                let c = score_surface(g, &query, index);
                if best.as_ref().is_none_or(|(_, _, b)| c.ps > b.ps) {
                    best = Some((i, query.clone(), c));
                }
            }
        }
        let Some((i, query, gold_cand)) = best else {
            skipped.push(sample.id.clone());
            continue;
        };
        let span = &hyp_spans[0][i];
        let n_hyp: Vec<String> = hyp_spans.iter().filter_map(|spans| spans.get(i).map(|s| s.surface.clone())).collect();
        let retrieved = index.retrieve_topk(&query, k)?;
        let mut cands = augment_candidates(&n_hyp, &query, &retrieved, index);
        sort_candidates(&mut cands);
        let mut cands = cap_options(&cands);
        if !cands.iter().any(|c| c.surface().eq_ignore_ascii_case(gold_cand.surface())) {
            if cands.len() == crate::denoising::MAX_OPTIONS {
                cands.pop();
            }
            cands.push(gold_cand.clone());
            sort_candidates(&mut cands);
        }
        items.push(RationaleItem {
            sample: sample.clone(),
            cloze: make_cloze(sample.h1(), span)?,
            candidates: cands,
            answer: gold_cand.surface().to_owned(),
        });
    }
    Ok((items, skipped))
}
