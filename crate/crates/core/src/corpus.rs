//! Evaluation samples, JSONL ingest, and the synthetic corpus generator.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ne_index::{Candidate, GazetteerEntry, NamedEntityRecord};
use crate::phonetics::{feature_table, letter_to_sound, respell, IpaString, Segment};

pub const HYPOTHESES: usize = 5;

/// One utterance: the 5-best list and the reference transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub hypotheses: Vec<String>,
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_entities: Option<Vec<String>>,
    /// Original hypothesis count when the list was padded to five.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padded_from: Option<usize>,
}

impl Sample {
    pub fn h1(&self) -> &str {
        &self.hypotheses[0]
    }

    /// Checks the id, reference and hypothesis count, padding short lists
    /// when `pad` is set.
    pub fn validate(&mut self, pad: bool) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.reference.trim().is_empty() {
            return Err("empty reference".into());
        }
        let n = self.hypotheses.len();
        if n == 0 || n > HYPOTHESES {
            return Err(format!("expected {HYPOTHESES} hypotheses, found {n}"));
        }
        if n < HYPOTHESES {
            if !pad {
                return Err(format!("expected {HYPOTHESES} hypotheses, found {n} (padding disabled)"));
            }
            let last = self.hypotheses[n - 1].clone();
            self.hypotheses.resize(HYPOTHESES, last);
            self.padded_from.get_or_insert(n);
        }
        Ok(())
    }
}

/// A sample with its candidate list and, once synthesized, a rationale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedSample {
    #[serde(flatten)]
    pub sample: Sample,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloze: Option<String>,
    pub candidates: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

impl AugmentedSample {
    pub fn has_rationale(&self) -> bool {
        self.rationale.is_some() && self.cloze.is_some()
    }
}

/// Reads a JSONL file of `T`, reporting the 1-based line of any failure.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Data {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Canonical writer: one compact JSON object per line in struct field
/// order, newline terminated.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Loads an N-best dataset. With `pad`, lists shorter than five are
/// filled by repeating the last hypothesis.
pub fn load_dataset(path: &Path, pad: bool) -> Result<Vec<Sample>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut samples = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Data {
            path: path.to_owned(),
            line: i + 1,
            message,
        };
        let mut sample: Sample = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        sample.validate(pad).map_err(fail)?;
        if !ids.insert(sample.id.clone()) {
            return Err(fail(format!("duplicate id {:?}", sample.id)));
        }
        samples.push(sample);
    }
    Ok(samples)
}

pub fn load_augmented(path: &Path) -> Result<Vec<AugmentedSample>> {
    let mut items: Vec<AugmentedSample> = read_jsonl(path)?;
    for (i, item) in items.iter_mut().enumerate() {
        item.sample.validate(true).map_err(|message| Error::Data {
            path: path.to_owned(),
            line: i + 1,
            message,
        })?;
    }
    Ok(items)
}

/// Noise applied by [`synth_corpus`].
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    /// Each hypothesis receives between 0 and this many phoneme edits.
    pub max_edits: usize,
    /// Probability of replacing each non-entity word with a confusable one.
    pub word_substitution: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            max_edits: 2,
            word_substitution: 0.0,
        }
    }
}

/// Generated samples plus every entity spelling that appears in them.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub samples: Vec<Sample>,
    pub mentions: Vec<String>,
}

const TEMPLATES: &[&str] = &[
    "play the latest songs by {}",
    "call {} on my phone",
    "what is the weather like in {} today",
    "tell me more about {}",
    "navigate to {} please",
    "i read a long article about {} yesterday",
    "remind me to email {} tomorrow morning",
    "how far is it to {}",
    "add {} to my playlist",
    "the new documentary about {} was released",
];

const CONFUSABLE_WORDS: &[(&str, &str)] = &[
    ("to", "two"),
    ("the", "a"),
    ("my", "mine"),
    ("for", "four"),
    ("about", "a bout"),
    ("is", "his"),
    ("me", "be"),
    ("new", "knew"),
    ("read", "red"),
    ("by", "buy"),
    ("in", "and"),
    ("please", "police"),
    ("latest", "lattice"),
    ("today", "to day"),
    ("far", "for"),
];

/// Segments whose respelling maps back to themselves in isolation.
fn spellable_segments() -> Vec<Segment> {
    feature_table()
        .segments()
        .filter(|&s| {
            let one = IpaString::new(vec![s]);
            letter_to_sound(&respell(&one)) == one
        })
        .collect()
}

/// The three spellable segments closest to `s` in feature space.
fn near_segments(s: Segment, spellable: &[Segment]) -> Vec<Segment> {
    let mut others: Vec<Segment> = spellable.iter().copied().filter(|&o| o != s).collect();
    others.sort_by(|a, b| s.substitution_cost(*a).total_cmp(&s.substitution_cost(*b)).then(a.cmp(b)));
    others.truncate(3);
    others
}

fn perturb_word(ipa: &mut Vec<Segment>, rng: &mut ChaCha8Rng, spellable: &[Segment]) {
    let op = if ipa.len() > 1 { rng.random_range(0..3) } else { rng.random_range(0..2) };
    match op {
        0 if !ipa.is_empty() => {
            let pos = rng.random_range(0..ipa.len());
            let near = near_segments(ipa[pos], spellable);
            ipa[pos] = *near.choose(rng).expect("inventory has near segments");
        }
        2 => {
            let pos = rng.random_range(0..ipa.len());
            ipa.remove(pos);
        }
        _ => {
            let pos = rng.random_range(0..=ipa.len());
            ipa.insert(pos, *spellable.choose(rng).expect("spellable set is nonempty"));
        }
    }
}

/// Applies `edits` phoneme edits spread over the words of `record` and
/// re-spells the words that changed.
fn noisy_mention(
    record: &NamedEntityRecord,
    lexicon: &crate::phonetics::Lexicon,
    edits: usize,
    rng: &mut ChaCha8Rng,
    spellable: &[Segment],
) -> String {
    let words: Vec<&str> = record.surface.split_whitespace().collect();
    if edits == 0 || words.is_empty() {
        return record.surface.clone();
    }
    let mut ipas: Vec<Vec<Segment>> = words
        .iter()
        .map(|w| crate::phonetics::phonemize(w, lexicon).segments().to_vec())
        .collect();
    let mut touched = vec![false; words.len()];
    for _ in 0..edits {
        let w = rng.random_range(0..words.len());
        perturb_word(&mut ipas[w], rng, spellable);
        touched[w] = true;
    }
    words
        .iter()
        .zip(ipas)
        .zip(touched)
        .map(|((word, ipa), touched)| {
            if !touched {
                word.to_lowercase()
            } else {
                let spelled = respell(&IpaString::new(ipa));
                if spelled.is_empty() {
                    "uh".to_owned()
                } else {
                    spelled
                }
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn substitute_words(text: &str, prob: f64, rng: &mut ChaCha8Rng) -> String {
    if prob <= 0.0 {
        return text.to_owned();
    }
    text.split_whitespace()
        .map(|w| {
            let swap = CONFUSABLE_WORDS.iter().find(|(a, _)| *a == w);
            match swap {
                Some((_, b)) if rng.random_bool(prob.min(1.0)) => (*b).to_owned(),
                _ => w.to_owned(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Generates `n` samples, each embedding one gazetteer entity into a
/// template sentence. Every hypothesis receives 0 to `noise.max_edits`
/// phoneme edits on the entity; `h1` equals the reference when
/// `max_edits` is zero and word substitution is off. Deterministic in
/// `seed`.
pub fn synth_corpus(gazetteer: &[NamedEntityRecord], n: usize, noise: &NoiseConfig, seed: u64) -> SynthCorpus {
    assert!(!gazetteer.is_empty(), "synthetic corpus needs a nonempty gazetteer");
    let lexicon = crate::phonetics::embedded_lexicon();
    let spellable = spellable_segments();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mentions = BTreeSet::new();
    let mut samples = Vec::with_capacity(n);

    for i in 0..n {
        let record = gazetteer.choose(&mut rng).expect("nonempty gazetteer");
        let template = *TEMPLATES.choose(&mut rng).expect("templates");
        let (before, after) = template.split_once("{}").expect("template has a slot");
        let reference = format!("{before}{}{after}", record.surface);
        mentions.insert(record.surface.clone());

        let hypotheses = (0..HYPOTHESES)
            .map(|_| {
                let edits = rng.random_range(0..=noise.max_edits);
                let mention = noisy_mention(record, lexicon, edits, &mut rng, &spellable);
                mentions.insert(mention.clone());
                let before = substitute_words(before.trim_end(), noise.word_substitution, &mut rng);
                let after = substitute_words(after.trim_start(), noise.word_substitution, &mut rng);
                [before.as_str(), mention.as_str(), after.as_str()]
                    .iter()
                    .filter(|s| !s.is_empty())
                    .copied()
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();

        samples.push(Sample {
            id: format!("synth-{i:05}"),
            hypotheses,
            reference,
            gold_entities: Some(vec![record.surface.clone()]),
            padded_from: None,
        });
    }

    SynthCorpus {
        samples,
        mentions: mentions.into_iter().collect(),
    }
}

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z", "ch", "sh", "th",
];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ee", "oo", "ai", "ow", "aw"];
const CODAS: &[&str] = &["", "", "", "", "n", "r", "l", "s", "m", "k", "t"];
const ROLES: &[&str] = &[
    "singer",
    "football club",
    "river",
    "novelist",
    "mountain town",
    "film director",
    "restaurant chain",
    "painter",
    "island",
    "television series",
];

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(2..=3);
    let mut word = String::new();
    for _ in 0..syllables {
        word.push_str(ONSETS.choose(rng).expect("onsets"));
        word.push_str(NUCLEI.choose(rng).expect("nuclei"));
        word.push_str(CODAS.choose(rng).expect("codas"));
    }
    let mut chars = word.chars();
    let first = chars.next().expect("nonempty word").to_ascii_uppercase();
    std::iter::once(first).chain(chars).collect()
}

/// A gazetteer of `n` distinct pronounceable pseudo-names (one or two
/// words) with one-line definitions. Deterministic in `seed`.
pub fn synth_gazetteer(n: usize, seed: u64) -> Vec<GazetteerEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let surface = if rng.random_bool(0.6) {
            format!("{} {}", pseudo_word(&mut rng), pseudo_word(&mut rng))
        } else {
            pseudo_word(&mut rng)
        };
        if !seen.insert(surface.to_lowercase()) {
            continue;
        }
        let role = ROLES.choose(&mut rng).expect("roles");
        let year = rng.random_range(1900..2024);
        out.push(GazetteerEntry {
            surface,
            definition: Some(format!("Fictional {role} first documented in {year}.")),
            source: Some("synthetic".into()),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ne_index::PhoneticIndex;

    fn write_tmp(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    const OK: &str = r#"{"id":"a","hypotheses":["h1","h2","h3","h4","h5"],"reference":"r"}"#;

    #[test]
    fn loads_well_formed_file() {
        let f = write_tmp(&[
            OK,
            r#"{"id":"b","hypotheses":["h1","h2","h3","h4","h5"],"reference":"r","gold_entities":["x"]}"#,
            r#"{"id":"c","hypotheses":["h1","h2","h3","h4","h5"],"reference":"r"}"#,
        ]);
        let samples = load_dataset(f.path(), false).unwrap();
        assert_eq!(samples.len(), 3);
        assert_eq!(samples[1].gold_entities.as_deref(), Some(&["x".to_owned()][..]));
    }

    #[test]
    fn missing_reference_names_line() {
        let f = write_tmp(&[OK, r#"{"id":"b","hypotheses":["h1","h2","h3","h4","h5"]}"#]);
        match load_dataset(f.path(), false) {
            Err(Error::Data { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("reference"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn padding_repeats_last_hypothesis() {
        let f = write_tmp(&[r#"{"id":"a","hypotheses":["h1","h2","h3","h4"],"reference":"r"}"#]);
        assert!(matches!(load_dataset(f.path(), false), Err(Error::Data { line: 1, .. })));
        let s = &load_dataset(f.path(), true).unwrap()[0];
        assert_eq!(s.hypotheses.len(), 5);
        assert_eq!(s.hypotheses[4], "h4");
        assert_eq!(s.padded_from, Some(4));
    }

    #[test]
    fn rejects_malformed_and_duplicates() {
        let f = write_tmp(&[OK, "{not json"]);
        assert!(matches!(load_dataset(f.path(), true), Err(Error::Data { line: 2, .. })));
        let f = write_tmp(&[OK, OK]);
        assert!(matches!(load_dataset(f.path(), true), Err(Error::Data { line: 2, .. })));
        let f = write_tmp(&[r#"{"id":"a","hypotheses":["1","2","3","4","5","6"],"reference":"r"}"#]);
        assert!(load_dataset(f.path(), true).is_err());
    }

    #[test]
    fn canonical_writer_is_stable() {
        let f = write_tmp(&[
            r#"{"reference":"r","id":"a","hypotheses":["h1","h2","h3","h4","h5"]}"#,
            r#"{"id":"b","gold_entities":["Paris"],"hypotheses":["h1","h2","h3","h4"],"reference":"q"}"#,
        ]);
        let first = load_dataset(f.path(), true).unwrap();
        let out1 = tempfile::NamedTempFile::new().unwrap();
        write_jsonl(out1.path(), &first).unwrap();
        let second = load_dataset(out1.path(), true).unwrap();
        let out2 = tempfile::NamedTempFile::new().unwrap();
        write_jsonl(out2.path(), &second).unwrap();
        assert_eq!(first, second);
        assert_eq!(fs::read(out1.path()).unwrap(), fs::read(out2.path()).unwrap());
    }

    fn small_gazetteer() -> Vec<NamedEntityRecord> {
        PhoneticIndex::build(synth_gazetteer(50, 3)).unwrap().records().to_vec()
    }

    #[test]
    fn zero_noise_keeps_reference() {
        let g = small_gazetteer();
        let noise = NoiseConfig {
            max_edits: 0,
            word_substitution: 0.0,
        };
        let corpus = synth_corpus(&g, 20, &noise, 1);
        for s in &corpus.samples {
            assert_eq!(s.h1(), s.reference);
            assert!(s.hypotheses.iter().all(|h| h == &s.reference));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let g = small_gazetteer();
        let a = synth_corpus(&g, 30, &NoiseConfig::default(), 9);
        let b = synth_corpus(&g, 30, &NoiseConfig::default(), 9);
        assert_eq!(a, b);
        let c = synth_corpus(&g, 30, &NoiseConfig::default(), 10);
        assert_ne!(a.samples, c.samples);
        assert_eq!(synth_gazetteer(40, 5), synth_gazetteer(40, 5));
    }

    #[test]
    fn reference_holds_exactly_one_gold_mention() {
        let g = small_gazetteer();
        let noise = NoiseConfig {
            max_edits: 2,
            word_substitution: 0.3,
        };
        let corpus = synth_corpus(&g, 40, &noise, 2);
        for s in &corpus.samples {
            let gold = &s.gold_entities.as_ref().unwrap()[0];
            assert_eq!(s.reference.matches(gold.as_str()).count(), 1);
            assert_eq!(s.hypotheses.len(), 5);
            // word counts never change
            let n = s.reference.split_whitespace().count();
            for h in &s.hypotheses {
                assert!(h.split_whitespace().count() >= n, "{h:?} vs {:?}", s.reference);
            }
        }
        assert!(corpus.mentions.len() > 40);
    }

    #[test]
    fn synthetic_gazetteer_is_distinct() {
        let g = synth_gazetteer(500, 1);
        let set: HashSet<String> = g.iter().map(|e| e.surface.to_lowercase()).collect();
        assert_eq!(set.len(), 500);
        assert!(g.iter().all(|e| e.definition.as_deref().is_some_and(|d| !d.contains('\n'))));
    }
}
