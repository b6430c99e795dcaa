#![allow(dead_code)]

use deragec::corpus::{synth_corpus, synth_gazetteer, NoiseConfig, SynthCorpus};
use deragec::ne_index::PhoneticIndex;
use deragec::tagging::GazetteerTagger;

pub fn index(n: usize, seed: u64) -> PhoneticIndex {
    PhoneticIndex::build(synth_gazetteer(n, seed)).expect("synthetic gazetteer builds")
}

pub fn corpus(index: &PhoneticIndex, n: usize, max_edits: usize, seed: u64) -> SynthCorpus {
    let noise = NoiseConfig {
        max_edits,
        ..NoiseConfig::default()
    };
    synth_corpus(index.records(), n, &noise, seed)
}

/// Tags every gazetteer surface and every spelling the corpus produced.
pub fn tagger(index: &PhoneticIndex, corpus: &SynthCorpus) -> GazetteerTagger {
    let mut t = GazetteerTagger::new(index.records().iter().map(|r| r.surface.as_str()));
    t.extend(&corpus.mentions);
    t
}

use deragec::ne_index::{rank_order, Candidate};
use deragec::phonetics::{phonetic_similarity, EditCosts, IpaString, Segment};

/// Minimum cost over every alignment path, enumerated without memoization.
pub fn brute_alignment<T>(a: &[T], b: &[T], sub: &dyn Fn(&T, &T) -> f64, indel: f64) -> f64 {
    match (a.split_first(), b.split_first()) {
        (None, None) => 0.0,
        (Some(_), None) => indel * a.len() as f64,
        (None, Some(_)) => indel * b.len() as f64,
        (Some((x, ra)), Some((y, rb))) => {
            let diag = sub(x, y) + brute_alignment(ra, rb, sub, indel);
            let del = indel + brute_alignment(ra, b, sub, indel);
            let ins = indel + brute_alignment(a, rb, sub, indel);
            diag.min(del).min(ins)
        }
    }
}

pub fn brute_word_distance(a: &[String], b: &[String]) -> usize {
    brute_alignment(a, b, &|x, y| if x == y { 0.0 } else { 1.0 }, 1.0) as usize
}

pub fn brute_feature_distance(a: &IpaString, b: &IpaString, costs: &EditCosts) -> f64 {
    brute_alignment(a.segments(), b.segments(), &|x: &Segment, y: &Segment| costs.substitution(*x, *y), costs.insert_cost())
}

/// Top-k by scoring every record.
pub fn linear_topk(index: &PhoneticIndex, query: &IpaString, k: usize) -> Vec<(String, f64)> {
    let mut all: Vec<Candidate> = index
        .records()
        .iter()
        .map(|r| Candidate {
            record: r.clone(),
            ps: phonetic_similarity(query, &r.ipa, index.costs()).expect("nonempty query"),
        })
        .collect();
    all.sort_by(|a, b| rank_order(a.ps, a.surface(), b.ps, b.surface()));
    all.truncate(k);
    all.into_iter().map(|c| (c.record.surface, c.ps)).collect()
}
