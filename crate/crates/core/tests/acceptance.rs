//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use deragec::corpus::{load_dataset, write_jsonl, Sample, SynthCorpus};
use deragec::correction::{build_gec_prompt, prepare_rationale_items, Pipeline, PipelineMode, RunConfig, RunRecord};
use deragec::denoising::{build_mcq, parse_rationale_answer, rationale_prompt, render_candidate, synthesize_rationales};
use deragec::filtering::{candidate_recall_precision, filter_threshold, filter_topk};
use deragec::llm::{GenParams, HeuristicBackend, OracleBackend};
use deragec::metrics::{assemble_report, corpus_wer, normalize, word_distance};
use deragec::ne_index::{Candidate, NamedEntityRecord, PhoneticIndex};
use deragec::phonetics::{embedded_lexicon, feature_table, phonemize, IpaString, Segment};
use deragec::tagging::{GazetteerTagger, Tagger};

/// WER reduction (absolute, as a fraction) of heuristic deragec over the
/// ASR baseline on the fixed synthetic corpus, frozen from the first
/// measurement.
const HEURISTIC_WER_MARGIN: f64 = 0.086181;
/// Allowed drift of the margin: 0.1 WER points.
const MARGIN_TOLERANCE: f64 = 0.001;

const GAZETTEER_SEED: u64 = 7;
const CORPUS_SEED: u64 = 11;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Shared fixture for criteria 3, 5, 6 and 7: 5000 entities, 500 samples
/// with up to two phoneme edits per hypothesis.
struct Fixture {
    index: PhoneticIndex,
    corpus: SynthCorpus,
    tagger: GazetteerTagger,
    eval_tagger: GazetteerTagger,
}

fn fixture() -> Fixture {
    let index = common::index(5000, GAZETTEER_SEED);
    let corpus = common::corpus(&index, 500, 2, CORPUS_SEED);
    let tagger = common::tagger(&index, &corpus);
    let eval_tagger = GazetteerTagger::new(
        corpus
            .samples
            .iter()
            .flat_map(|s| s.gold_entities.clone().unwrap_or_default()),
    );
    Fixture {
        index,
        corpus,
        tagger,
        eval_tagger,
    }
}

fn run(fx: &Fixture, samples: &[Sample], config: RunConfig, selector: &dyn deragec::llm::LlmBackend, corrector: &dyn deragec::llm::LlmBackend) -> Vec<RunRecord> {
    Pipeline::new(config, &fx.index, &fx.tagger, selector, corrector, &[])
        .expect("pipeline")
        .run(samples)
        .expect("run")
}

fn random_query(rng: &mut ChaCha8Rng) -> IpaString {
    let n = feature_table().len();
    let len = rng.random_range(1..=12);
    IpaString::new((0..len).map(|_| Segment::from_index(rng.random_range(0..n)).unwrap()).collect())
}

fn retrieval_exactness() -> Outcome {
    let index = common::index(10_000, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for q in 0..200 {
        // half random segment strings, half perturbed gazetteer entries
        let query = if q % 2 == 0 {
            random_query(&mut rng)
        } else {
            let r = &index.records()[rng.random_range(0..index.len())];
            let mut segs = r.ipa.segments().to_vec();
            if !segs.is_empty() {
                let i = rng.random_range(0..segs.len());
                segs[i] = Segment::from_index(rng.random_range(0..feature_table().len())).unwrap();
            }
            IpaString::new(segs)
        };
        if query.is_empty() {
            continue;
        }
        for k in [1, 5, 10, 15] {
            let got: Vec<(String, f64)> = index
                .retrieve_topk(&query, k)
                .unwrap()
                .into_iter()
                .map(|c| (c.record.surface, c.ps))
                .collect();
            if got != common::linear_topk(&index, &query, k) {
                mismatches += 1;
            }
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatching result lists over 200 queries x 4 k values"))
}

fn precision_ceiling() -> Outcome {
    // every sample keeps the selected entity plus five hypothesis
    // mentions; gold appears once among the six
    let mut surviving = Vec::new();
    let mut gold = Vec::new();
    for i in 0..300 {
        let g = format!("Entity {i}");
        let mut kept = vec![g.clone()];
        kept.extend((0..5).map(|j| format!("entyty {i} {j}")));
        surviving.push(kept);
        gold.push(vec![g]);
    }
    let (recall, precision) = candidate_recall_precision(&surviving, &gold);
    let pass = (precision - 1.0 / 6.0).abs() < 1e-9 && recall == 1.0;
    outcome(pass, format!("precision {precision:.12} (1/6 = {:.12}), recall {recall}", 1.0 / 6.0))
}

fn filtering_trends(fx: &Fixture) -> Outcome {
    let mut lists: Vec<Vec<Candidate>> = Vec::new();
    let mut gold = Vec::new();
    for s in &fx.corpus.samples {
        let spans = fx.tagger.tag(s.h1()).unwrap();
        let Some(span) = spans.first() else { continue };
        let q = phonemize(&span.surface, embedded_lexicon());
        if q.is_empty() {
            continue;
        }
        lists.push(fx.index.retrieve_topk(&q, 15).unwrap());
        gold.push(s.gold_entities.clone().unwrap());
    }
    let measure = |f: &dyn Fn(&[Candidate]) -> Vec<Candidate>| {
        let kept: Vec<Vec<String>> =
            lists.iter().map(|l| f(l).into_iter().map(|c| c.record.surface).collect()).collect();
        candidate_recall_precision(&kept, &gold)
    };
    let by_k: Vec<(f64, f64)> = [1, 5, 10, 15].iter().map(|&k| measure(&|l| filter_topk(l, k))).collect();
    let by_theta: Vec<(f64, f64)> =
        [0.6, 0.7, 0.8, 0.9].iter().map(|&t| measure(&|l| filter_threshold(l, t))).collect();
    let recall_k_ok = by_k.windows(2).all(|w| w[1].0 > w[0].0);
    let recall_t_ok = by_theta.windows(2).all(|w| w[1].0 < w[0].0);
    let prec_k_ok = by_k[0].1 > by_k[3].1;
    let prec_t_ok = by_theta[3].1 > by_theta[0].1;
    let fmt = |v: &[(f64, f64)]| v.iter().map(|(r, p)| format!("{r:.3}/{p:.3}")).collect::<Vec<_>>().join(" ");
    outcome(
        recall_k_ok && recall_t_ok && prec_k_ok && prec_t_ok,
        format!(
            "{} samples; recall/precision by K 1,5,10,15: {}; by theta .6-.9: {}",
            lists.len(),
            fmt(&by_k),
            fmt(&by_theta)
        ),
    )
}

fn wer_correctness() -> Outcome {
    let vocab = ["a", "b", "c", "d", "the", "paris"];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut bad = 0;
    for _ in 0..500 {
        let words = |rng: &mut ChaCha8Rng| -> Vec<String> {
            let n = rng.random_range(0..=8);
            (0..n).map(|_| vocab[rng.random_range(0..vocab.len())].to_string()).collect()
        };
        let a = words(&mut rng);
        let b = words(&mut rng);
        if word_distance(&a, &b) != common::brute_word_distance(&a, &b) {
            bad += 1;
        }
    }
    let refs = ["play songs by Adele", "call me, maybe?", "x"];
    let identity = corpus_wer(refs.iter().map(|r| (*r, *r))).unwrap().wer;
    outcome(bad == 0 && identity == 0.0, format!("{bad} DP/oracle disagreements in 500 pairs; identity WER {identity}"))
}

fn oracle_ceiling(fx: &Fixture) -> Outcome {
    // keep samples whose gold entity is among the top-10 for the h1 mention
    let samples: Vec<Sample> = fx
        .corpus
        .samples
        .iter()
        .filter(|s| {
            let gold = &s.gold_entities.as_ref().unwrap()[0];
            fx.tagger.tag(s.h1()).unwrap().first().is_some_and(|span| {
                let q = phonemize(&span.surface, embedded_lexicon());
                !q.is_empty()
                    && fx.index.retrieve_topk(&q, 10).unwrap().iter().any(|c| c.surface().eq_ignore_ascii_case(gold))
            })
        })
        .cloned()
        .collect();
    let asr = run(fx, &samples, RunConfig::new(PipelineMode::Asr), &HeuristicBackend, &HeuristicBackend);
    let der = run(fx, &samples, RunConfig::new(PipelineMode::Deragec), &OracleBackend, &HeuristicBackend);
    let a = assemble_report("asr", &asr, &samples, &fx.eval_tagger).unwrap();
    let d = assemble_report("deragec", &der, &samples, &fx.eval_tagger).unwrap();
    let misspelled = samples.iter().filter(|s| normalize(s.h1()) != normalize(&s.reference)).count();
    let wer_ok = misspelled == 0 || d.wer < a.wer;
    outcome(
        d.ne_hit_ratio == 1.0 && wer_ok,
        format!(
            "{} samples ({misspelled} misspelled h1); NE hit {:.4} vs asr {:.4}; WER {:.4} vs asr {:.4}",
            samples.len(),
            d.ne_hit_ratio,
            a.ne_hit_ratio,
            d.wer,
            a.wer
        ),
    )
}

fn heuristic_improvement(fx: &Fixture) -> Outcome {
    let samples = &fx.corpus.samples;
    let asr = run(fx, samples, RunConfig::new(PipelineMode::Asr), &HeuristicBackend, &HeuristicBackend);
    let der = run(fx, samples, RunConfig::new(PipelineMode::Deragec), &HeuristicBackend, &HeuristicBackend);
    let a = assemble_report("asr", &asr, samples, &fx.eval_tagger).unwrap();
    let d = assemble_report("deragec", &der, samples, &fx.eval_tagger).unwrap();
    let margin = a.wer - d.wer;
    let pass = margin > 0.0 && (margin - HEURISTIC_WER_MARGIN).abs() <= MARGIN_TOLERANCE;
    outcome(
        pass,
        format!(
            "asr WER {:.4}, deragec WER {:.4}, margin {margin:.6} (frozen {HEURISTIC_WER_MARGIN:.6} +/- {MARGIN_TOLERANCE})",
            a.wer, d.wer
        ),
    )
}

fn determinism(fx: &Fixture) -> Outcome {
    let samples = &fx.corpus.samples[..200];
    let pool_src = &fx.corpus.samples[200..260];
    let (items, _) = prepare_rationale_items(pool_src, &fx.index, &fx.tagger, 10).unwrap();
    let pool = synthesize_rationales(&HeuristicBackend, &items, &GenParams::default(), 1, 1).samples;
    let bytes = |jobs: usize| {
        let mut config = RunConfig::new(PipelineMode::Deragec);
        config.jobs = jobs;
        config.seed = 42;
        let p = Pipeline::new(config, &fx.index, &fx.tagger, &HeuristicBackend, &HeuristicBackend, &pool).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        write_jsonl(&path, &p.run(samples).unwrap()).unwrap();
        std::fs::read(path).unwrap()
    };
    let one = bytes(1);
    let again = bytes(1);
    let four = bytes(4);
    outcome(
        one == again && one == four,
        format!("{} bytes; jobs=1 twice equal: {}; jobs=1 vs jobs=4 equal: {}", one.len(), one == again, one == four),
    )
}

fn round_trips() -> Outcome {
    let index = common::index(3000, 21);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.drgc");
    index.save(&path).unwrap();
    let loaded = PhoneticIndex::load(&path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut index_ok = true;
    for _ in 0..50 {
        let q = random_query(&mut rng);
        index_ok &= index.retrieve_topk(&q, 10).unwrap() == loaded.retrieve_topk(&q, 10).unwrap();
    }

    let cands: Vec<Candidate> = (0..26)
        .map(|i| Candidate {
            record: NamedEntityRecord::new(&format!("Option {i}"), "d", "", embedded_lexicon()),
            ps: 1.0 - i as f64 / 30.0,
        })
        .collect();
    let (mcq, _) = build_mcq("go to [BLANK] now", &cands, &[]).unwrap();
    let mcq_ok = mcq.options.iter().all(|(l, c)| {
        let reply = format!("<think>t</think><answer>{l}: {}</answer>", c.surface());
        parse_rationale_answer(&reply, &mcq).is_ok_and(|a| a.letter == *l)
    });

    let corpus = common::corpus(&index, 40, 2, 8);
    let first = dir.path().join("a.jsonl");
    let second = dir.path().join("b.jsonl");
    write_jsonl(&first, &corpus.samples).unwrap();
    write_jsonl(&second, &load_dataset(&first, false).unwrap()).unwrap();
    let dataset_ok = std::fs::read(&first).unwrap() == std::fs::read(&second).unwrap();
    outcome(
        index_ok && mcq_ok && dataset_ok,
        format!("index save/load: {index_ok}; MCQ 26 letters: {mcq_ok}; dataset rewrite stable: {dataset_ok}"),
    )
}

fn prompt_fidelity() -> Outcome {
    let cands = vec![Candidate {
        record: NamedEntityRecord::new("Adele", "English singer", "", embedded_lexicon()),
        ps: 0.9234,
    }];
    let (mcq, select) = build_mcq("songs by [BLANK]", &cands, &[]).unwrap();
    let rationale = rationale_prompt(&mcq, 'A').unwrap();
    let hyps: Vec<String> = (0..5).map(|i| format!("songs by adel {i}")).collect();
    let gec = build_gec_prompt(&hyps, Some(&render_candidate(&cands[0])), &[]);
    let serialized = render_candidate(&cands[0]);
    let checks = [
        ("module 1", rationale.contains("Answer should not be said at first.")),
        ("module 2", select.contains("identify the most appropriate Named-Entity for [BLANK]")),
        ("module 3", gec.contains("not return any explanation")),
        (
            "serialization",
            serialized.starts_with("< ")
                && serialized.contains(" | phonetic-score: ")
                && serialized.contains(" | def: ")
                && serialized.ends_with(" >")
                && gec.contains(&serialized),
        ),
    ];
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    outcome(failed.is_empty(), if failed.is_empty() { "all substrings present".into() } else { format!("missing in {failed:?}") })
}

fn main() {
    let fx_cell = std::cell::OnceCell::new();
    let fx = || fx_cell.get_or_init(fixture);
    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(&str, Duration, Check)> = vec![
        ("retrieval exactness", Duration::from_secs(30), Box::new(retrieval_exactness)),
        ("precision ceiling", Duration::from_secs(1), Box::new(precision_ceiling)),
        ("filtering trends", Duration::from_secs(120), Box::new(|| filtering_trends(fx()))),
        ("WER correctness", Duration::from_secs(10), Box::new(wer_correctness)),
        ("oracle pipeline ceiling", Duration::from_secs(60), Box::new(|| oracle_ceiling(fx()))),
        ("heuristic improvement", Duration::from_secs(120), Box::new(|| heuristic_improvement(fx()))),
        ("determinism", Duration::from_secs(120), Box::new(|| determinism(fx()))),
        ("round trips", Duration::from_secs(60), Box::new(round_trips)),
        ("prompt fidelity", Duration::from_secs(5), Box::new(prompt_fidelity)),
    ];
    let mut failures = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check));
        let elapsed = start.elapsed();
        let (pass, detail) = match result {
            Ok(o) => (o.pass && elapsed <= *limit, o.detail),
            Err(_) => (false, "panicked".into()),
        };
        if !pass {
            failures += 1;
        }
        println!(
            "{} [{}] {name} ({:.2}s, limit {}s): {detail}",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
