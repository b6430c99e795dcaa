use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Subcommand;
use deragec::corpus::{load_augmented, load_dataset, read_jsonl, synth_corpus, synth_gazetteer, write_jsonl, NoiseConfig, Sample};
use deragec::correction::{prepare_rationale_items, Pipeline, PipelineMode, RunRecord};
use deragec::denoising::synthesize_rationales;
use deragec::filtering::{candidate_recall_precision, FilterMethod, FilterSpec};
use deragec::llm::Recorder;
use deragec::metrics::{assemble_report, render_csv, write_reports, EvalReport};
use deragec::ne_index::{read_gazetteer, PhoneticIndex};
use deragec::tagging::{GazetteerTagger, RemoteTagger, Tagger};

use crate::config::{Settings, TaggerKind};
use crate::error::{CliError, CliResult};

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a phonetic index from --gazetteer
    BuildIndex {
        /// Index file to write
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Print the --k most similar gazetteer entries for a text
    Retrieve {
        /// Text to phonemize and look up
        #[arg(long)]
        query: String,
    },
    /// Write a gazetteer of pronounceable pseudo-names (seeded by --seed)
    SynthGazetteer {
        /// Number of entries
        #[arg(long)]
        n: usize,
        /// Gazetteer JSONL to write
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Write a noisy N-best dataset over the gazetteer (seeded by --seed),
    /// plus every entity spelling used in `<out>.mentions.txt`
    SynthCorpus {
        /// Number of samples
        #[arg(long)]
        n: usize,
        /// Most phoneme edits applied to an entity in one hypothesis
        #[arg(long, default_value_t = 2)]
        max_edits: usize,
        /// Probability of swapping a non-entity word for a confusable one
        #[arg(long, default_value_t = 0.0)]
        word_substitution: f64,
        /// Dataset JSONL to write
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Generate rationales for --dataset with --backend, producing a
    /// few-shot pool
    SynthRationales {
        /// Augmented JSONL to write
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Correct --dataset in --mode and write one record per sample
    Run {
        /// Run JSONL to write
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Apply --method to the candidates of an augmented file and print
    /// candidate recall and precision; --k is the topk size when
    /// --filter-k is absent
    Filter {
        /// Augmented JSONL to read
        #[arg(long, value_name = "FILE")]
        augmented: PathBuf,
        /// Filtered augmented JSONL to write
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Score run files against --dataset; writes JSON and a CSV beside it
    Eval {
        /// Run JSONL, repeatable
        #[arg(long = "run", value_name = "FILE", required = true)]
        runs: Vec<PathBuf>,
        /// Report JSON to write
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Run --dataset once per few-shot count and write WER per count as CSV
    SweepFewshots {
        /// Inclusive range `a..b`, or a single count
        #[arg(long, default_value = "0..5", value_name = "RANGE")]
        t: FewshotRange,
        /// CSV to write
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FewshotRange {
    pub start: usize,
    pub end: usize,
}

impl FromStr for FewshotRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parse = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
        let (start, end) = match s.split_once("..") {
            Some((a, b)) => (parse(a)?, parse(b.strip_prefix('=').unwrap_or(b))?),
            None => {
                let t = parse(s)?;
                (t, t)
            }
        };
        if start > end {
            return Err(format!("empty range {s:?}"));
        }
        Ok(Self { start, end })
    }
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    value.as_deref().ok_or_else(|| CliError::Usage(format!("{flag} is required")))
}

fn load_index(s: &Settings) -> CliResult<PhoneticIndex> {
    if let Some(path) = &s.paths.index {
        return Ok(PhoneticIndex::load(path)?);
    }
    match &s.paths.gazetteer {
        Some(path) => Ok(PhoneticIndex::build(read_gazetteer(path)?)?),
        None => Err(CliError::Usage("--index or --gazetteer is required".into())),
    }
}

fn read_lines(path: &Path) -> CliResult<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

/// The configured tagger; the gazetteer variant knows `surfaces` and the
/// --mentions file.
fn build_tagger<'a>(s: &Settings, surfaces: impl IntoIterator<Item = &'a str>) -> CliResult<Box<dyn Tagger>> {
    match s.tagger.kind.unwrap_or(TaggerKind::Gazetteer) {
        TaggerKind::Gazetteer => {
            let mut t = GazetteerTagger::new(surfaces);
            if let Some(path) = &s.paths.mentions {
                t.extend(read_lines(path)?);
            }
            Ok(Box::new(t))
        }
        TaggerKind::Remote => {
            let endpoint = s
                .tagger
                .endpoint
                .as_deref()
                .ok_or_else(|| CliError::Usage("--tagger remote requires --tagger-endpoint".into()))?;
            Ok(Box::new(RemoteTagger::new(
                endpoint,
                s.tagger.labels.clone().unwrap_or_default(),
                s.tagger_timeout(),
                s.tagger.max_in_flight.unwrap_or(4),
            )?))
        }
    }
}

fn index_tagger(s: &Settings, index: &PhoneticIndex) -> CliResult<Box<dyn Tagger>> {
    build_tagger(s, index.records().iter().map(|r| r.surface.as_str()))
}

fn guard(out: &Path, inputs: &[Option<&Path>]) -> CliResult<()> {
    if let Ok(target) = out.canonicalize() {
        for input in inputs.iter().flatten() {
            if input.canonicalize().is_ok_and(|p| p == target) {
                return Err(CliError::Usage(format!("output {} would overwrite an input", out.display())));
            }
        }
    }
    Ok(())
}

/// Resolves `out`, refuses to overwrite any input and creates its
/// directory.
fn output(s: &Settings, out: &Path, inputs: &[Option<&Path>]) -> CliResult<PathBuf> {
    let out = s.out_path(out);
    guard(&out, inputs)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(out)
}

fn config_inputs(s: &Settings) -> Vec<Option<&Path>> {
    vec![
        s.paths.gazetteer.as_deref(),
        s.paths.index.as_deref(),
        s.paths.dataset.as_deref(),
        s.paths.fewshot_pool.as_deref(),
        s.paths.mentions.as_deref(),
        s.backend.transcript.as_deref(),
        s.gec_backend.transcript.as_deref(),
    ]
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

fn dataset(s: &Settings) -> CliResult<Vec<Sample>> {
    Ok(load_dataset(require(&s.paths.dataset, "--dataset")?, true)?)
}

pub fn execute(command: Command, s: &Settings) -> CliResult<()> {
    match command {
        Command::BuildIndex { out } => {
            let entries = read_gazetteer(require(&s.paths.gazetteer, "--gazetteer")?)?;
            let index = PhoneticIndex::build(entries)?;
            let out = output(s, &out, &config_inputs(s))?;
            index.save(&out)?;
            log::info!("indexed {} entities into {}", index.len(), out.display());
            Ok(())
        }
        Command::Retrieve { query } => {
            let index = load_index(s)?;
            let k = s.run.k.unwrap_or(10);
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "rank\tps\tsurface\tdefinition")?;
            for (i, c) in index.retrieve_text(&query, k)?.iter().enumerate() {
                writeln!(stdout, "{}\t{:.4}\t{}\t{}", i + 1, c.ps, c.surface(), c.definition())?;
            }
            Ok(())
        }
        Command::SynthGazetteer { n, out } => {
            let out = output(s, &out, &config_inputs(s))?;
            write_jsonl(&out, &synth_gazetteer(n, s.run.seed.unwrap_or(0)))?;
            Ok(())
        }
        Command::SynthCorpus {
            n,
            max_edits,
            word_substitution,
            out,
        } => {
            if !(0.0..=1.0).contains(&word_substitution) {
                return Err(CliError::Usage("--word-substitution must lie in [0, 1]".into()));
            }
            let index = load_index(s)?;
            let noise = NoiseConfig {
                max_edits,
                word_substitution,
            };
            let corpus = synth_corpus(index.records(), n, &noise, s.run.seed.unwrap_or(0));
            let out = output(s, &out, &config_inputs(s))?;
            write_jsonl(&out, &corpus.samples)?;
            let mut mentions = out.clone().into_os_string();
            mentions.push(".mentions.txt");
            let mut text = corpus.mentions.join("\n");
            text.push('\n');
            write_text(Path::new(&mentions), &text)?;
            Ok(())
        }
        Command::SynthRationales { out } => {
            let config = s.run_config(Some(PipelineMode::Deragec))?;
            let index = load_index(s)?;
            let tagger = index_tagger(s, &index)?;
            let samples = dataset(s)?;
            let (items, skipped) = prepare_rationale_items(&samples, &index, tagger.as_ref(), config.k)?;
            if !skipped.is_empty() {
                log::warn!("{} samples have no gold entity or no tagged span and are skipped", skipped.len());
            }
            let generator = s.backend_spec().build()?;
            let recorder = Recorder::new(generator);
            let synthesis = synthesize_rationales(&recorder, &items, &config.params, config.retries, config.jobs);
            for (id, reason) in &synthesis.failures {
                log::warn!("{id}: no rationale ({reason})");
            }
            let out = output(s, &out, &config_inputs(s))?;
            write_jsonl(&out, &synthesis.samples)?;
            if let Some(path) = &s.paths.record {
                write_jsonl(&output(s, path, &config_inputs(s))?, &recorder.into_replies())?;
            }
            log::info!(
                "{} rationales, {} failures, {} skipped",
                synthesis.samples.len(),
                synthesis.failures.len(),
                skipped.len()
            );
            Ok(())
        }
        Command::Run { out } => {
            let config = s.run_config(None)?;
            let index = load_index(s)?;
            let tagger = index_tagger(s, &index)?;
            let samples = dataset(s)?;
            let pool = match &s.paths.fewshot_pool {
                Some(p) => load_augmented(p)?,
                None => Vec::new(),
            };
            let selector = Recorder::new(s.backend_spec().build()?);
            let corrector = Recorder::new(s.gec_backend_spec().build()?);
            let records = Pipeline::new(config, &index, tagger.as_ref(), &selector, &corrector, &pool)?.run(&samples)?;
            let out = output(s, &out, &config_inputs(s))?;
            write_jsonl(&out, &records)?;
            if let Some(path) = &s.paths.record {
                let mut replies = selector.into_replies();
                replies.extend(corrector.into_replies());
                replies.sort_by(|a, b| a.key.cmp(&b.key));
                replies.dedup_by(|a, b| a.key == b.key);
                write_jsonl(&output(s, path, &config_inputs(s))?, &replies)?;
            }
            Ok(())
        }
        Command::Filter { augmented, out } => {
            let mut filter = s.filter.clone();
            if filter.method == Some(FilterMethod::TopK) && filter.k.is_none() {
                filter.k = s.run.k;
            }
            let method = filter
                .method
                .ok_or_else(|| CliError::Usage("--method is required".into()))?;
            let spec = FilterSpec::from_parts(method, filter.k, filter.theta, filter.sigma)?;
            let mut items = load_augmented(&augmented)?;
            let mut surviving = Vec::new();
            let mut gold = Vec::new();
            for item in &mut items {
                item.candidates = spec.apply(&item.candidates);
                if let Some(g) = item.sample.gold_entities.as_ref().filter(|g| !g.is_empty()) {
                    surviving.push(item.candidates.iter().map(|c| c.surface().to_owned()).collect::<Vec<_>>());
                    gold.push(g.clone());
                }
            }
            let mut inputs = config_inputs(s);
            inputs.push(Some(&augmented));
            let out = output(s, &out, &inputs)?;
            write_jsonl(&out, &items)?;
            if gold.is_empty() {
                println!("samples=0 recall= precision=");
            } else {
                let (recall, precision) = candidate_recall_precision(&surviving, &gold);
                println!("samples={} recall={recall:.6} precision={precision:.6}", gold.len());
            }
            Ok(())
        }
        Command::Eval { runs, out } => {
            let samples = dataset(s)?;
            let gold = samples
                .iter()
                .flat_map(|x| x.gold_entities.iter().flatten())
                .map(String::as_str)
                .collect::<Vec<_>>();
            let index = match (&s.paths.index, &s.paths.gazetteer) {
                (None, None) => None,
                _ => Some(load_index(s)?),
            };
            let surfaces = gold
                .into_iter()
                .chain(index.iter().flat_map(|i| i.records().iter().map(|r| r.surface.as_str())));
            let tagger = build_tagger(s, surfaces)?;
            let mut reports: Vec<EvalReport> = Vec::new();
            let mut labels: HashMap<String, usize> = HashMap::new();
            for path in &runs {
                let records: Vec<RunRecord> = read_jsonl(path)?;
                let stem = path.file_stem().map(|x| x.to_string_lossy().into_owned()).unwrap_or_default();
                let mut method = records.first().map(|r| r.mode.to_string()).unwrap_or_else(|| stem.clone());
                let seen = labels.entry(method.clone()).or_default();
                *seen += 1;
                if *seen > 1 {
                    method = format!("{method} ({stem})");
                }
                reports.push(assemble_report(&method, &records, &samples, tagger.as_ref())?);
            }
            let mut inputs = config_inputs(s);
            inputs.extend(runs.iter().map(|p| Some(p.as_path())));
            let json = output(s, &out, &inputs)?;
            let csv = json.with_extension("csv");
            guard(&csv, &inputs)?;
            write_reports(&json, &csv, &reports)?;
            print!("{}", render_csv(&reports));
            Ok(())
        }
        Command::SweepFewshots { t, out } => {
            let base = s.run_config(Some(PipelineMode::Deragec))?;
            let index = load_index(s)?;
            let tagger = index_tagger(s, &index)?;
            let samples = dataset(s)?;
            let eval_tagger = GazetteerTagger::new(samples.iter().flat_map(|x| x.gold_entities.iter().flatten()));
            let pool = match &s.paths.fewshot_pool {
                Some(p) => load_augmented(p)?,
                None => Vec::new(),
            };
            let usable = pool.iter().filter(|p| p.has_rationale()).count();
            if usable < t.end {
                log::warn!("few-shot pool has {usable} usable examples; counts above that repeat the full pool");
            }
            let selector = s.backend_spec().build()?;
            let corrector = s.gec_backend_spec().build()?;
            let mut csv = String::from("fewshot_count,wer,ne_hit\n");
            for count in t.start..=t.end {
                let mut config = base.clone();
                config.fewshot_count = count;
                let records = Pipeline::new(config, &index, tagger.as_ref(), &selector, &corrector, &pool)?.run(&samples)?;
                let report = assemble_report(base.mode.as_str(), &records, &samples, &eval_tagger)?;
                csv.push_str(&format!("{count},{:.6},{:.6}\n", report.wer, report.ne_hit_ratio));
            }
            let out = output(s, &out, &config_inputs(s))?;
            write_text(&out, &csv)?;
            print!("{csv}");
            Ok(())
        }
    }
}
