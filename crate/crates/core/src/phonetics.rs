//! Grapheme-to-phoneme conversion and articulatory-feature edit distance.
//!
//! Two tables are embedded at compile time:
//!
//! * `data/features.tsv`: one row per IPA segment with 24 ternary
//!   articulatory features (`+`, `-`, `0`).
//! * `data/lexicon.tsv`: `word<TAB>space separated IPA segments`.
//!
//! Both are generated by `tools/build_tables.py`. Words missing from the
//! lexicon go through [`LETTER_TO_SOUND`], a greedy longest-match rule table.

use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

use crate::error::{Error, Result};

const FEATURES_TSV: &str = include_str!("../data/features.tsv");
const LEXICON_TSV: &str = include_str!("../data/lexicon.tsv");

/// Alternative spellings accepted when parsing IPA text.
const SEGMENT_ALIASES: &[(&str, &str)] = &[("g", "ɡ"), ("r", "ɹ"), ("ɚ", "ə")];

/// Ternary articulatory feature vector, one value per feature in
/// [`FeatureTable::feature_names`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeatureVector(Vec<i8>);

impl FeatureVector {
    pub fn values(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of positions where the two vectors disagree.
    pub fn hamming(&self, other: &FeatureVector) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }
}

/// Segment inventory and the feature row of every segment.
#[derive(Debug)]
pub struct FeatureTable {
    feature_names: Vec<String>,
    symbols: Vec<String>,
    rows: Vec<FeatureVector>,
    by_symbol: HashMap<String, u8>,
    substitution: Vec<f64>,
    min_substitution: f64,
}

impl FeatureTable {
    /// Parses the TSV layout described in the module docs.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Table {
            what: "feature",
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
        let feature_names: Vec<String> = header.split('\t').skip(1).map(str::to_owned).collect();
        if feature_names.is_empty() {
            return Err(err(1, "header names no features".into()));
        }

        let mut symbols = Vec::new();
        let mut rows = Vec::new();
        let mut by_symbol = HashMap::new();
        for (i, line) in lines {
            let mut cols = line.split('\t');
            let symbol = cols.next().unwrap_or_default().to_owned();
            let values = cols
                .map(|c| match c {
                    "+" => Ok(1),
                    "-" => Ok(-1),
                    "0" => Ok(0),
                    other => Err(err(i + 1, format!("bad feature value {other:?}"))),
                })
                .collect::<Result<Vec<i8>>>()?;
            if values.len() != feature_names.len() {
                return Err(err(
                    i + 1,
                    format!("expected {} values, found {}", feature_names.len(), values.len()),
                ));
            }
            if symbols.len() == u8::MAX as usize {
                return Err(err(i + 1, "too many segments".into()));
            }
            if by_symbol.insert(symbol.clone(), symbols.len() as u8).is_some() {
                return Err(err(i + 1, format!("duplicate segment {symbol:?}")));
            }
            symbols.push(symbol);
            rows.push(FeatureVector(values));
        }

        let n = symbols.len();
        let width = feature_names.len() as f64;
        let mut substitution = vec![0.0; n * n];
        let mut min_substitution = f64::INFINITY;
        for a in 0..n {
            for b in 0..n {
                let cost = rows[a].hamming(&rows[b]) as f64 / width;
                substitution[a * n + b] = cost;
                if a != b {
                    if cost == 0.0 {
                        return Err(err(
                            0,
                            format!("segments {:?} and {:?} share a feature row", symbols[a], symbols[b]),
                        ));
                    }
                    min_substitution = min_substitution.min(cost);
                }
            }
        }

        Ok(Self {
            feature_names,
            symbols,
            rows,
            by_symbol,
            substitution,
            min_substitution,
        })
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn segments(&self) -> impl Iterator<Item = Segment> + '_ {
        (0..self.symbols.len()).map(|i| Segment(i as u8))
    }

    /// Smallest substitution cost between two distinct segments.
    pub fn min_substitution(&self) -> f64 {
        self.min_substitution
    }

    fn lookup(&self, symbol: &str) -> Option<Segment> {
        let canonical = SEGMENT_ALIASES
            .iter()
            .find(|(alias, _)| *alias == symbol)
            .map_or(symbol, |(_, target)| target);
        self.by_symbol.get(canonical).map(|&i| Segment(i))
    }
}

/// The compiled-in feature table.
pub fn feature_table() -> &'static FeatureTable {
    static TABLE: OnceLock<FeatureTable> = OnceLock::new();
    TABLE.get_or_init(|| FeatureTable::from_tsv(FEATURES_TSV).expect("embedded feature table is valid"))
}

/// A segment of the embedded inventory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Segment(u8);

impl Segment {
    pub fn from_symbol(symbol: &str) -> Result<Self> {
        feature_table()
            .lookup(symbol)
            .ok_or_else(|| Error::UnknownSegment(symbol.to_owned()))
    }

    pub fn from_index(index: usize) -> Option<Self> {
        (index < feature_table().len()).then_some(Segment(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn symbol(self) -> &'static str {
        &feature_table().symbols[self.index()]
    }

    pub fn features(self) -> &'static FeatureVector {
        &feature_table().rows[self.index()]
    }

    /// Normalized Hamming distance between the two feature rows.
    pub fn substitution_cost(self, other: Segment) -> f64 {
        let table = feature_table();
        table.substitution[self.index() * table.len() + other.index()]
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// Feature row of an IPA symbol.
pub fn segment_features(symbol: &str) -> Result<&'static FeatureVector> {
    Segment::from_symbol(symbol).map(Segment::features)
}

/// Phonemic form of a word or phrase.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IpaString {
    segments: Vec<Segment>,
}

impl IpaString {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    /// Parses IPA text. Whitespace separates segments when present;
    /// otherwise the longest known symbol is matched greedily. Stress,
    /// length and combining diacritics are dropped.
    pub fn parse(text: &str) -> Result<Self> {
        let table = feature_table();
        let mut segments = Vec::new();
        for token in text.split_whitespace() {
            let cleaned: Vec<char> = token.chars().filter(|&c| !is_diacritic(c)).collect();
            let mut pos = 0;
            while pos < cleaned.len() {
                let longest = (1..=(cleaned.len() - pos).min(3)).rev().find_map(|len| {
                    let symbol: String = cleaned[pos..pos + len].iter().collect();
                    table.lookup(&symbol).map(|s| (s, len))
                });
                match longest {
                    Some((segment, len)) => {
                        segments.push(segment);
                        pos += len;
                    }
                    None => return Err(Error::UnknownSegment(cleaned[pos].to_string())),
                }
            }
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Segments joined by single spaces, the lexicon file layout.
    pub fn to_spaced(&self) -> String {
        self.segments.iter().map(|s| s.symbol()).collect::<Vec<_>>().join(" ")
    }
}

impl fmt::Display for IpaString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.segments {
            f.write_str(s.symbol())?;
        }
        Ok(())
    }
}

impl From<Vec<Segment>> for IpaString {
    fn from(segments: Vec<Segment>) -> Self {
        Self { segments }
    }
}

fn is_diacritic(c: char) -> bool {
    matches!(c, '\u{0300}'..='\u{036F}' | 'ˈ' | 'ˌ' | 'ː' | 'ˑ' | '.' | '\u{02B0}'..='\u{02FF}')
}

/// Insertion and deletion costs. Substitution is always the normalized
/// Hamming distance between feature vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EditCosts {
    indel: f64,
}

impl EditCosts {
    pub fn new(insert_cost: f64, delete_cost: f64) -> Result<Self> {
        if !(insert_cost.is_finite() && insert_cost >= 0.0) {
            return Err(Error::InvalidCosts(format!("insert cost {insert_cost} must be finite and nonnegative")));
        }
        if insert_cost != delete_cost {
            return Err(Error::InvalidCosts(format!(
                "insert cost {insert_cost} and delete cost {delete_cost} must be equal"
            )));
        }
        Ok(Self { indel: insert_cost })
    }

    pub fn insert_cost(&self) -> f64 {
        self.indel
    }

    pub fn delete_cost(&self) -> f64 {
        self.indel
    }

    pub fn substitution(&self, a: Segment, b: Segment) -> f64 {
        a.substitution_cost(b)
    }

    /// Denominator scale used by [`phonetic_similarity`].
    pub(crate) fn normalizer(&self, len: usize) -> f64 {
        len as f64 * self.indel.max(1.0)
    }
}

impl Default for EditCosts {
    fn default() -> Self {
        Self { indel: 1.0 }
    }
}

/// Minimal alignment cost between `a` and `b`.
pub fn feature_edit_distance(a: &IpaString, b: &IpaString, costs: &EditCosts) -> f64 {
    edit_distance_segments(a.segments(), b.segments(), costs)
}

pub(crate) fn edit_distance_segments(a: &[Segment], b: &[Segment], costs: &EditCosts) -> f64 {
    let indel = costs.indel;
    let mut prev: Vec<f64> = (0..=b.len()).map(|j| j as f64 * indel).collect();
    let mut cur = vec![0.0; b.len() + 1];
    for (i, &sa) in a.iter().enumerate() {
        cur[0] = (i + 1) as f64 * indel;
        for (j, &sb) in b.iter().enumerate() {
            let sub = prev[j] + sa.substitution_cost(sb);
            let del = prev[j + 1] + indel;
            let ins = cur[j] + indel;
            cur[j + 1] = sub.min(del).min(ins);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Similarity in `[0, 1]` derived from [`feature_edit_distance`],
/// normalized by the longer string.
pub fn phonetic_similarity(a: &IpaString, b: &IpaString, costs: &EditCosts) -> Result<f64> {
    similarity_from_distance(feature_edit_distance(a, b, costs), a.len(), b.len(), costs)
}

pub(crate) fn similarity_from_distance(
    distance: f64,
    len_a: usize,
    len_b: usize,
    costs: &EditCosts,
) -> Result<f64> {
    let longest = len_a.max(len_b);
    if longest == 0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok((1.0 - distance / costs.normalizer(longest)).clamp(0.0, 1.0))
}

/// Word to pronunciation map.
#[derive(Debug, Default, Clone)]
pub struct Lexicon {
    entries: HashMap<String, IpaString>,
}

impl Lexicon {
    /// Parses `word<TAB>seg seg seg` lines. Blank lines and lines starting
    /// with `#` are skipped.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, ipa) = line.split_once('\t').ok_or_else(|| Error::Table {
                what: "lexicon",
                line: i + 1,
                message: "expected word<TAB>ipa".into(),
            })?;
            let ipa = IpaString::parse(ipa).map_err(|e| Error::Table {
                what: "lexicon",
                line: i + 1,
                message: e.to_string(),
            })?;
            entries.entry(word.to_lowercase()).or_insert(ipa);
        }
        Ok(Self { entries })
    }

    pub fn insert(&mut self, word: &str, ipa: IpaString) {
        self.entries.insert(word.to_lowercase(), ipa);
    }

    pub fn get(&self, word: &str) -> Option<&IpaString> {
        self.entries.get(word)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// The compiled-in pronunciation lexicon.
pub fn embedded_lexicon() -> &'static Lexicon {
    static LEXICON: OnceLock<Lexicon> = OnceLock::new();
    LEXICON.get_or_init(|| Lexicon::from_tsv(LEXICON_TSV).expect("embedded lexicon is valid"))
}

/// Letter-to-sound fallback for out-of-vocabulary words, tried longest
/// grapheme first at each position. Context rules applied on top:
/// `c` before `e`/`i`/`y` is /s/, word-final `y` after a consonant is /i/,
/// non-initial `y` elsewhere is /ɪ/, and a word-final `e` after a consonant
/// is silent in words longer than two letters.
pub const LETTER_TO_SOUND: &[(&str, &[&str])] = &[
    ("tch", &["tʃ"]),
    ("sch", &["s", "k"]),
    ("ch", &["tʃ"]),
    ("sh", &["ʃ"]),
    ("th", &["θ"]),
    ("ph", &["f"]),
    ("ng", &["ŋ"]),
    ("ck", &["k"]),
    ("qu", &["k", "w"]),
    ("wh", &["w"]),
    ("gh", &["ɡ"]),
    ("kn", &["n"]),
    ("ee", &["i"]),
    ("ea", &["i"]),
    ("oo", &["u"]),
    ("ou", &["a", "ʊ"]),
    ("ow", &["o", "ʊ"]),
    ("ai", &["e", "ɪ"]),
    ("ay", &["e", "ɪ"]),
    ("ei", &["e", "ɪ"]),
    ("oi", &["ɔ", "ɪ"]),
    ("oy", &["ɔ", "ɪ"]),
    ("au", &["ɔ"]),
    ("aw", &["ɔ"]),
    ("ie", &["i"]),
    ("er", &["ə", "ɹ"]),
    ("ur", &["ə", "ɹ"]),
    ("ir", &["ə", "ɹ"]),
    ("ar", &["ɑ", "ɹ"]),
    ("or", &["ɔ", "ɹ"]),
    ("bb", &["b"]),
    ("cc", &["k"]),
    ("dd", &["d"]),
    ("ff", &["f"]),
    ("gg", &["ɡ"]),
    ("ll", &["l"]),
    ("mm", &["m"]),
    ("nn", &["n"]),
    ("pp", &["p"]),
    ("rr", &["ɹ"]),
    ("ss", &["s"]),
    ("tt", &["t"]),
    ("zz", &["z"]),
    ("a", &["æ"]),
    ("b", &["b"]),
    ("c", &["k"]),
    ("d", &["d"]),
    ("e", &["ɛ"]),
    ("f", &["f"]),
    ("g", &["ɡ"]),
    ("h", &["h"]),
    ("i", &["ɪ"]),
    ("j", &["dʒ"]),
    ("k", &["k"]),
    ("l", &["l"]),
    ("m", &["m"]),
    ("n", &["n"]),
    ("o", &["ɑ"]),
    ("p", &["p"]),
    ("q", &["k"]),
    ("r", &["ɹ"]),
    ("s", &["s"]),
    ("t", &["t"]),
    ("u", &["ʌ"]),
    ("v", &["v"]),
    ("w", &["w"]),
    ("x", &["k", "s"]),
    ("y", &["j"]),
    ("z", &["z"]),
];

fn is_vowel_letter(c: u8) -> bool {
    matches!(c, b'a' | b'e' | b'i' | b'o' | b'u')
}

/// Applies [`LETTER_TO_SOUND`] to a lowercase ASCII word.
pub fn letter_to_sound(word: &str) -> IpaString {
    let letters: Vec<u8> = word.bytes().filter(u8::is_ascii_lowercase).collect();
    let n = letters.len();
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < n {
        let c = letters[pos];
        let next = letters.get(pos + 1).copied();
        let is_last = pos + 1 == n;

        if c == b'c' && matches!(next, Some(b'e' | b'i' | b'y')) {
            out.push("s");
            pos += 1;
            continue;
        }
        if c == b'e' && is_last && n > 2 && !is_vowel_letter(letters[pos - 1]) {
            break;
        }
        if c == b'y' && pos > 0 {
            out.push(if is_last && !is_vowel_letter(letters[pos - 1]) { "i" } else { "ɪ" });
            pos += 1;
            continue;
        }

        let (grapheme, segments) = LETTER_TO_SOUND
            .iter()
            .find(|(g, _)| letters[pos..].starts_with(g.as_bytes()))
            .expect("every lowercase letter has a rule");
        out.extend_from_slice(segments);
        pos += grapheme.len();
    }
    IpaString::new(
        out.into_iter()
            .map(|s| Segment::from_symbol(s).expect("rule table uses inventory symbols"))
            .collect(),
    )
}

fn fold_latin(c: char) -> char {
    match c {
        'à' | 'á' | 'â' | 'ã' | 'ä' | 'å' => 'a',
        'ç' => 'c',
        'è' | 'é' | 'ê' | 'ë' => 'e',
        'ì' | 'í' | 'î' | 'ï' => 'i',
        'ñ' => 'n',
        'ò' | 'ó' | 'ô' | 'õ' | 'ö' | 'ø' => 'o',
        'ù' | 'ú' | 'û' | 'ü' => 'u',
        'ý' | 'ÿ' => 'y',
        other => other,
    }
}

/// Converts text to its phonemic form: each whitespace token is looked
/// up in `lexicon`, falling back to the letter-to-sound rules piecewise
/// over its alphabetic runs. Punctuation never contributes segments.
pub fn phonemize(text: &str, lexicon: &Lexicon) -> IpaString {
    let mut segments = Vec::new();
    for token in text.split_whitespace() {
        let token: String = token.to_lowercase().chars().map(fold_latin).collect();
        let trimmed = token.trim_matches(|c: char| !c.is_ascii_alphanumeric());
        if trimmed.is_empty() {
            continue;
        }
        if let Some(ipa) = lexicon.get(trimmed) {
            segments.extend_from_slice(ipa.segments());
            continue;
        }
        for piece in trimmed.split(|c: char| !(c.is_ascii_lowercase() || c == '\'')) {
            let piece = piece.trim_matches('\'');
            if piece.is_empty() {
                continue;
            }
            match lexicon.get(piece) {
                Some(ipa) => segments.extend_from_slice(ipa.segments()),
                None => segments.extend_from_slice(letter_to_sound(piece).segments()),
            }
        }
    }
    IpaString::new(segments)
}

/// Spelling for each segment, chosen so that [`letter_to_sound`] maps it
/// back to the same segment when spelled in isolation where possible.
pub const RESPELLING: &[(&str, &str)] = &[
    ("a", "a"),
    ("b", "b"),
    ("d", "d"),
    ("dʒ", "j"),
    ("e", "e"),
    ("f", "f"),
    ("h", "h"),
    ("i", "ee"),
    ("j", "y"),
    ("k", "k"),
    ("l", "l"),
    ("m", "m"),
    ("n", "n"),
    ("o", "o"),
    ("p", "p"),
    ("s", "s"),
    ("t", "t"),
    ("tʃ", "ch"),
    ("u", "oo"),
    ("v", "v"),
    ("w", "w"),
    ("z", "z"),
    ("æ", "a"),
    ("ð", "th"),
    ("ŋ", "ng"),
    ("ɑ", "o"),
    ("ɔ", "aw"),
    ("ə", "u"),
    ("ɛ", "e"),
    ("ɡ", "g"),
    ("ɪ", "i"),
    ("ɹ", "r"),
    ("ʃ", "sh"),
    ("ʊ", "oo"),
    ("ʌ", "u"),
    ("ʒ", "zh"),
    ("θ", "th"),
];

/// Spells a phonemic string with [`RESPELLING`].
pub fn respell(ipa: &IpaString) -> String {
    ipa.segments()
        .iter()
        .map(|s| {
            RESPELLING
                .iter()
                .find(|(sym, _)| *sym == s.symbol())
                .map_or("", |(_, spelling)| spelling)
        })
        .collect()
}
