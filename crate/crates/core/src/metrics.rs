//! Word error rate, named-entity hit ratio, NER F1 and report assembly.
//!
//! Text is normalized before any comparison: lowercase, punctuation
//! removed, whitespace collapsed.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::correction::RunRecord;
use crate::error::{Error, Result};
use crate::filtering::candidate_recall_precision;
use crate::tagging::Tagger;

/// Lowercased words with punctuation removed.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Unit-cost Levenshtein distance over word sequences.
pub fn word_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WerCounts {
    pub distance: usize,
    pub ref_words: usize,
}

pub fn wer(reference: &str, hypothesis: &str) -> WerCounts {
    let r = normalize(reference);
    let h = normalize(hypothesis);
    WerCounts {
        distance: word_distance(&r, &h),
        ref_words: r.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CorpusWer {
    pub wer: f64,
    pub distance: usize,
    pub ref_words: usize,
    /// Pairs whose reference normalized to nothing.
    pub excluded: usize,
}

/// Micro-averaged WER over `(reference, hypothesis)` pairs.
pub fn corpus_wer<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<CorpusWer> {
    let mut out = CorpusWer::default();
    for (r, h) in pairs {
        let c = wer(r, h);
        if c.ref_words == 0 {
            out.excluded += 1;
            continue;
        }
        out.distance += c.distance;
        out.ref_words += c.ref_words;
    }
    if out.excluded > 0 {
        log::warn!("{} empty references excluded from WER", out.excluded);
    }
    if out.ref_words == 0 {
        return Err(Error::MetricUndefined("no nonempty references".into()));
    }
    out.wer = out.distance as f64 / out.ref_words as f64;
    Ok(out)
}

/// Non-overlapping occurrences of `needle` as a contiguous run of words.
fn occurrences(haystack: &[String], needle: &[String]) -> usize {
    if needle.is_empty() || needle.len() > haystack.len() {
        return 0;
    }
    let mut count = 0;
    let mut i = 0;
    while i + needle.len() <= haystack.len() {
        if haystack[i..i + needle.len()] == *needle {
            count += 1;
            i += needle.len();
        } else {
            i += 1;
        }
    }
    count
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NeHit {
    pub hits: usize,
    pub gold: usize,
    /// hits ÷ gold entities.
    pub ratio: f64,
    /// Entities the tagger finds in the transcripts.
    pub transcript_entities: usize,
    /// hits ÷ transcript entities, when any were found.
    pub literal_ratio: Option<f64>,
}

/// Counts hits of per-sample gold entity lists in the paired transcripts.
/// A gold entity occurring n times is hit up to the number of times it
/// occurs in the transcript.
pub fn ne_hits<G: AsRef<str>>(gold: &[Vec<G>], transcripts: &[&str]) -> (usize, usize) {
    let mut hits = 0;
    let mut total = 0;
    for (entities, transcript) in gold.iter().zip(transcripts) {
        let words = normalize(transcript);
        let mut wanted: HashMap<Vec<String>, usize> = HashMap::new();
        for e in entities {
            let key = normalize(e.as_ref());
            if key.is_empty() {
                continue;
            }
            *wanted.entry(key).or_default() += 1;
            total += 1;
        }
        for (key, n) in wanted {
            hits += n.min(occurrences(&words, &key));
        }
    }
    (hits, total)
}

/// NE hit ratio with gold entities tagged from the references.
pub fn ne_hit_ratio(references: &[&str], transcripts: &[&str], tagger: &dyn Tagger) -> Result<NeHit> {
    assert_eq!(references.len(), transcripts.len(), "one transcript per reference");
    let gold: Vec<Vec<String>> = references
        .iter()
        .map(|r| Ok(tagger.tag(r)?.into_iter().map(|s| s.surface).collect()))
        .collect::<Result<_>>()?;
    let (hits, total) = ne_hits(&gold, transcripts);
    if total == 0 {
        return Err(Error::MetricUndefined("no gold named entities in the references".into()));
    }
    let mut transcript_entities = 0;
    for t in transcripts {
        transcript_entities += tagger.tag(t)?.len();
    }
    Ok(NeHit {
        hits,
        gold: total,
        ratio: hits as f64 / total as f64,
        transcript_entities,
        literal_ratio: (transcript_entities > 0).then(|| (hits as f64 / transcript_entities as f64).min(1.0)),
    })
}

/// Matched count between two surface multisets.
fn multiset_overlap<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in a {
        *counts.entry(s.as_ref()).or_default() += 1;
    }
    let mut matched = 0;
    for s in b {
        if let Some(n) = counts.get_mut(s.as_ref()) {
            if *n > 0 {
                *n -= 1;
                matched += 1;
            }
        }
    }
    matched
}

fn f1(matched: usize, pseudo: usize, predicted: usize) -> f64 {
    match (pseudo, predicted) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => {
            let p = matched as f64 / predicted as f64;
            let r = matched as f64 / pseudo as f64;
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        }
    }
}

/// F1 of predicted entity surfaces against pseudo-labels, by exact
/// multiset match.
pub fn ner_f1<S: AsRef<str>>(pseudo: &[S], predicted: &[S]) -> f64 {
    f1(multiset_overlap(pseudo, predicted), pseudo.len(), predicted.len())
}

/// Micro-averaged F1 over many utterances.
pub fn corpus_ner_f1<S: AsRef<str>>(pairs: &[(Vec<S>, Vec<S>)]) -> f64 {
    let (mut m, mut p, mut q) = (0, 0, 0);
    for (pseudo, predicted) in pairs {
        m += multiset_overlap(pseudo, predicted);
        p += pseudo.len();
        q += predicted.len();
    }
    f1(m, p, q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub samples: usize,
    pub ref_words: usize,
    pub excluded_references: usize,
    pub wer: f64,
    pub gold_entities: usize,
    pub ne_hits: usize,
    pub ne_hit_ratio: f64,
    /// Hits over entities found in the transcripts.
    pub ne_hit_ratio_literal: Option<f64>,
    pub candidate_recall: Option<f64>,
    pub candidate_precision: Option<f64>,
    /// NER on h1 against NER on the reference.
    pub ner_f1: Option<f64>,
}

fn check_ids(run: &[RunRecord], dataset: &[Sample]) -> Result<()> {
    let run_ids: HashSet<&str> = run.iter().map(|r| r.id.as_str()).collect();
    let data_ids: HashSet<&str> = dataset.iter().map(|s| s.id.as_str()).collect();
    let mut missing: Vec<String> = data_ids.difference(&run_ids).map(|s| s.to_string()).collect();
    let mut extra: Vec<String> = run_ids.difference(&data_ids).map(|s| s.to_string()).collect();
    if run_ids.len() != run.len() {
        let mut seen = HashSet::new();
        extra.extend(run.iter().filter(|r| !seen.insert(r.id.as_str())).map(|r| format!("{} (duplicate)", r.id)));
    }
    if missing.is_empty() && extra.is_empty() {
        return Ok(());
    }
    missing.sort();
    extra.sort();
    Err(Error::MismatchedIds { missing, extra })
}

/// Scores one run against its dataset. Gold entities per sample are the
/// tagger's spans over the reference.
pub fn assemble_report(method: &str, run: &[RunRecord], dataset: &[Sample], tagger: &dyn Tagger) -> Result<EvalReport> {
    check_ids(run, dataset)?;
    let by_id: HashMap<&str, &RunRecord> = run.iter().map(|r| (r.id.as_str(), r)).collect();
    let ordered: Vec<&RunRecord> = dataset.iter().map(|s| by_id[s.id.as_str()]).collect();

    let references: Vec<&str> = dataset.iter().map(|s| s.reference.as_str()).collect();
    let transcripts: Vec<&str> = ordered.iter().map(|r| r.transcript.as_str()).collect();
    let w = corpus_wer(references.iter().copied().zip(transcripts.iter().copied()))?;
    let hit = ne_hit_ratio(&references, &transcripts, tagger)?;

    let mut ner_pairs = Vec::with_capacity(dataset.len());
    let mut gold_sets = Vec::new();
    let mut surviving_sets = Vec::new();
    for (sample, record) in dataset.iter().zip(&ordered) {
        let pseudo: Vec<String> = tagger.tag(&sample.reference)?.into_iter().map(|s| s.surface).collect();
        let predicted: Vec<String> = tagger.tag(sample.h1())?.into_iter().map(|s| s.surface).collect();
        if let Some(kept) = &record.surviving {
            let gold = sample.gold_entities.clone().unwrap_or_else(|| pseudo.clone());
            gold_sets.push(gold);
            surviving_sets.push(kept.clone());
        }
        ner_pairs.push((pseudo, predicted));
    }
    let (recall, precision) = if surviving_sets.is_empty() {
        (None, None)
    } else {
        let (r, p) = candidate_recall_precision(&surviving_sets, &gold_sets);
        (Some(r), Some(p))
    };

    Ok(EvalReport {
        method: method.to_owned(),
        samples: dataset.len(),
        ref_words: w.ref_words,
        excluded_references: w.excluded,
        wer: w.wer,
        gold_entities: hit.gold,
        ne_hits: hit.hits,
        ne_hit_ratio: hit.ratio,
        ne_hit_ratio_literal: hit.literal_ratio,
        candidate_recall: recall,
        candidate_precision: precision,
        ner_f1: Some(corpus_ner_f1(&ner_pairs)),
    })
}

pub const CSV_HEADER: &str = "method,recall,precision,wer,ne_hit";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// One CSV row per report under [`CSV_HEADER`].
pub fn render_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            csv_field(&r.method),
            opt(r.candidate_recall),
            opt(r.candidate_precision),
            r.wer,
            r.ne_hit_ratio
        ));
    }
    out
}

/// Writes `reports` as pretty JSON (a single object for one report, an
/// array otherwise) and the CSV beside it.
pub fn write_reports(json_path: &Path, csv_path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(json_path)?);
    if let [one] = reports {
        serde_json::to_writer_pretty(&mut f, one)?;
    } else {
        serde_json::to_writer_pretty(&mut f, reports)?;
    }
    f.write_all(b"\n")?;
    f.flush()?;
    std::fs::write(csv_path, render_csv(reports))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correction::PipelineMode;
    use crate::tagging::GazetteerTagger;

    #[test]
    fn wer_basics() {
        assert_eq!(wer("a b c", "a b c").distance, 0);
        let c = wer("a b c", "a x c");
        assert_eq!((c.distance, c.ref_words), (1, 3));
        assert_eq!(wer("Hello, World!", "hello world").distance, 0);
        assert_eq!(wer("", "x").ref_words, 0);
    }

    #[test]
    fn corpus_wer_excludes_empty() {
        let w = corpus_wer([("a b", "a"), ("", "x"), ("c d", "c d")]).unwrap();
        assert_eq!((w.distance, w.ref_words, w.excluded), (1, 4, 1));
        assert!(corpus_wer([("", "")]).is_err());
    }

    #[test]
    fn f1_cases() {
        assert_eq!(ner_f1(&["a", "b"], &["b", "a"]), 1.0);
        assert_eq!(ner_f1(&["a"], &["b"]), 0.0);
        assert!((ner_f1(&["a", "b"], &["a"]) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(ner_f1::<&str>(&[], &[]), 1.0);
        assert_eq!(ner_f1(&[], &["a"]), 0.0);
        assert_eq!(ner_f1(&["a", "a"], &["a"]), 2.0 / 3.0);
    }

    #[test]
    fn hit_ratio() {
        let tagger = GazetteerTagger::new(["Adele", "New York"]);
        let refs = ["songs by Adele", "flights to new york"];
        let h = ne_hit_ratio(&refs, &refs, &tagger).unwrap();
        assert_eq!((h.hits, h.gold, h.ratio), (2, 2, 1.0));
        let h = ne_hit_ratio(&refs, &["songs by adel", "flights to newark"], &tagger).unwrap();
        assert_eq!(h.ratio, 0.0);
        assert_eq!(h.literal_ratio, None);
        assert!(ne_hit_ratio(&["nothing"], &["nothing"], &tagger).is_err());
    }

    #[test]
    fn hits_respect_multiplicity() {
        let gold = vec![vec!["paris", "paris"]];
        assert_eq!(ne_hits(&gold, &["paris and paris"]), (2, 2));
        assert_eq!(ne_hits(&gold, &["paris only"]), (1, 2));
    }

    fn rec(id: &str, t: &str, surviving: Option<Vec<&str>>) -> RunRecord {
        RunRecord {
            id: id.into(),
            mode: PipelineMode::Asr,
            transcript: t.into(),
            selections: vec![],
            fallbacks: vec![],
            surviving: surviving.map(|v| v.into_iter().map(String::from).collect()),
        }
    }

    fn ds() -> Vec<Sample> {
        vec![Sample {
            id: "a".into(),
            hypotheses: vec!["songs by adel".into(); 5],
            reference: "songs by Adele".into(),
            gold_entities: Some(vec!["Adele".into()]),
            padded_from: None,
        }]
    }

    #[test]
    fn report_identity_and_ids() {
        let tagger = GazetteerTagger::new(["Adele"]);
        let r = assemble_report("asr", &[rec("a", "songs by Adele", None)], &ds(), &tagger).unwrap();
        assert_eq!((r.wer, r.ne_hit_ratio), (0.0, 1.0));
        assert_eq!(r.candidate_recall, None);
        assert_eq!(r.ner_f1, Some(0.0));
        match assemble_report("asr", &[rec("b", "x", None)], &ds(), &tagger) {
            Err(Error::MismatchedIds { missing, extra }) => {
                assert_eq!(missing, vec!["a"]);
                assert_eq!(extra, vec!["b"]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let surv = vec!["Adele", "adel", "adel", "adel", "adel", "adel"];
        let r = assemble_report("deragec", &[rec("a", "songs by Adele", Some(surv))], &ds(), &tagger).unwrap();
        assert_eq!(r.candidate_recall, Some(1.0));
        assert!((r.candidate_precision.unwrap() - 1.0 / 6.0).abs() < 1e-9);
        let back: EvalReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn csv_rows() {
        let tagger = GazetteerTagger::new(["Adele"]);
        let a = assemble_report("asr", &[rec("a", "songs by adel", None)], &ds(), &tagger).unwrap();
        let csv = render_csv(&[a.clone(), a]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "asr,,,0.333333,0.000000");
    }
}
