//! Exact top-k phonetic retrieval over a named-entity gazetteer.
//!
//! Records are grouped into bands by segment count and carry a
//! bag-of-segments signature. A query visits bands in order of their best
//! achievable similarity and computes the full alignment only for records
//! whose signature lower bound could still beat the current k-th result.
//! The answer is always identical to a linear scan.
//!
//! # Index file layout
//!
//! All integers little-endian; strings are `u32` byte length + UTF-8.
//!
//! ```text
//! "DRGC"  u32 version (=1)  f64 indel cost
//! u32 n_symbols, n_symbols x string            segment inventory
//! u32 n_records, per record:                   records section
//!     string surface, string definition, string source,
//!     u32 n_segments, n_segments x u8 symbol index
//! u32 n_bands, per band:                       bands section
//!     u32 segment count, u32 n_ids, n_ids x u32 record id
//! u32 n_records, u32 width,                    signatures section
//!     n_records x width x u16 segment counts
//! ```

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phonetics::{
    edit_distance_segments, embedded_lexicon, feature_table, phonemize, similarity_from_distance, EditCosts,
    IpaString, Lexicon, Segment,
};

const MAGIC: &[u8; 4] = b"DRGC";
const FORMAT_VERSION: u32 = 1;

/// Slack applied when comparing bounds against exact similarities, so
/// rounding in the bound never prunes a true result.
const BOUND_SLACK: f64 = 1e-9;

/// One gazetteer line as read from JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GazetteerEntry {
    pub surface: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub definition: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl GazetteerEntry {
    pub fn new(surface: impl Into<String>, definition: impl Into<String>) -> Self {
        Self {
            surface: surface.into(),
            definition: Some(definition.into()),
            source: None,
        }
    }
}

/// Reads a gazetteer JSONL file, one [`GazetteerEntry`] per line.
pub fn read_gazetteer(path: &Path) -> Result<Vec<GazetteerEntry>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|e| Error::Data {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedEntityRecord {
    pub surface: String,
    pub ipa: IpaString,
    pub definition: String,
    pub source: String,
}

impl NamedEntityRecord {
    pub fn new(surface: &str, definition: &str, source: &str, lexicon: &Lexicon) -> Self {
        Self {
            surface: surface.to_owned(),
            ipa: phonemize(surface, lexicon),
            definition: one_line(definition),
            source: source.to_owned(),
        }
    }
}

fn one_line(text: &str) -> String {
    text.split(['\n', '\r']).map(str::trim).filter(|s| !s.is_empty()).collect::<Vec<_>>().join(" ")
}

/// A retrieved record and its similarity to the query.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub record: NamedEntityRecord,
    pub ps: f64,
}

impl Candidate {
    pub fn surface(&self) -> &str {
        &self.record.surface
    }

    pub fn definition(&self) -> &str {
        &self.record.definition
    }
}

/// JSON form `{"surface", "ps", "definition"}`; the phonemic form is
/// recomputed from the surface when reading.
#[derive(Serialize, Deserialize)]
struct CandidateJson {
    surface: String,
    ps: f64,
    #[serde(default)]
    definition: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    source: String,
}

impl Serialize for Candidate {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        CandidateJson {
            surface: self.record.surface.clone(),
            ps: self.ps,
            definition: self.record.definition.clone(),
            source: self.record.source.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Candidate {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let c = CandidateJson::deserialize(deserializer)?;
        Ok(Candidate {
            record: NamedEntityRecord::new(&c.surface, &c.definition, &c.source, embedded_lexicon()),
            ps: c.ps,
        })
    }
}

/// Total order used for every ranked candidate list: similarity
/// descending, then surface ascending.
pub fn rank_order(a_ps: f64, a_surface: &str, b_ps: f64, b_surface: &str) -> Ordering {
    b_ps.total_cmp(&a_ps).then_with(|| a_surface.cmp(b_surface))
}

pub fn sort_candidates(cands: &mut [Candidate]) {
    cands.sort_by(|a, b| rank_order(a.ps, a.surface(), b.ps, b.surface()));
}

#[derive(Debug, Clone)]
pub struct PhoneticIndex {
    records: Vec<NamedEntityRecord>,
    bands: BTreeMap<usize, Vec<u32>>,
    signature_width: usize,
    signatures: Vec<u16>,
    by_surface: HashMap<String, u32>,
    costs: EditCosts,
}

impl PhoneticIndex {
    /// Builds an index with the embedded lexicon and default costs.
    pub fn build(entries: impl IntoIterator<Item = GazetteerEntry>) -> Result<Self> {
        Self::build_with(entries, embedded_lexicon(), EditCosts::default())
    }

    /// Deduplicates surfaces case-insensitively (first occurrence wins,
    /// its empty definition is filled by the first later non-empty one),
    /// then phonemizes every record.
    pub fn build_with(
        entries: impl IntoIterator<Item = GazetteerEntry>,
        lexicon: &Lexicon,
        costs: EditCosts,
    ) -> Result<Self> {
        let mut merged: Vec<GazetteerEntry> = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for mut entry in entries {
            entry.surface = entry.surface.trim().to_owned();
            if entry.surface.is_empty() {
                log::warn!("skipping gazetteer entry with empty surface");
                continue;
            }
            match seen.get(&entry.surface.to_lowercase()) {
                Some(&pos) => {
                    let kept = &mut merged[pos];
                    let kept_empty = kept.definition.as_deref().is_none_or(|d| d.trim().is_empty());
                    let new_def = entry.definition.filter(|d| !d.trim().is_empty());
                    if kept_empty && new_def.is_some() {
                        kept.definition = new_def;
                    }
                }
                None => {
                    seen.insert(entry.surface.to_lowercase(), merged.len());
                    merged.push(entry);
                }
            }
        }
        if merged.is_empty() {
            return Err(Error::EmptyGazetteer);
        }

        let records: Vec<NamedEntityRecord> = merged
            .par_iter()
            .map(|e| {
                NamedEntityRecord::new(
                    &e.surface,
                    e.definition.as_deref().unwrap_or(""),
                    e.source.as_deref().unwrap_or(""),
                    lexicon,
                )
            })
            .collect();
        Ok(Self::from_records(records, costs))
    }

    fn from_records(records: Vec<NamedEntityRecord>, costs: EditCosts) -> Self {
        let width = feature_table().len();
        let mut bands: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
        let mut signatures = vec![0u16; records.len() * width];
        let mut by_surface = HashMap::with_capacity(records.len());
        for (id, record) in records.iter().enumerate() {
            bands.entry(record.ipa.len()).or_default().push(id as u32);
            let row = &mut signatures[id * width..(id + 1) * width];
            for s in record.ipa.segments() {
                row[s.index()] = row[s.index()].saturating_add(1);
            }
            by_surface.insert(record.surface.to_lowercase(), id as u32);
        }
        Self {
            records,
            bands,
            signature_width: width,
            signatures,
            by_surface,
            costs,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[NamedEntityRecord] {
        &self.records
    }

    pub fn costs(&self) -> &EditCosts {
        &self.costs
    }

    /// Case-insensitive surface lookup.
    pub fn find(&self, surface: &str) -> Option<&NamedEntityRecord> {
        self.by_surface.get(&surface.trim().to_lowercase()).map(|&id| &self.records[id as usize])
    }

    /// Number of records in each length band.
    pub fn band_sizes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bands.iter().map(|(len, ids)| (*len, ids.len()))
    }

    /// The `k` most similar records, best first. Returns every record
    /// when `k` exceeds the index size.
    pub fn retrieve_topk(&self, query: &IpaString, k: usize) -> Result<Vec<Candidate>> {
        Ok(self
            .topk_ids(query, k)?
            .into_iter()
            .map(|(id, ps)| Candidate {
                record: self.records[id as usize].clone(),
                ps,
            })
            .collect())
    }

    /// Phonemizes `text` with the embedded lexicon and retrieves.
    pub fn retrieve_text(&self, text: &str, k: usize) -> Result<Vec<Candidate>> {
        self.retrieve_topk(&phonemize(text, embedded_lexicon()), k)
    }

    fn topk_ids(&self, query: &IpaString, k: usize) -> Result<Vec<(u32, f64)>> {
        if query.is_empty() {
            return Err(Error::EmptyQuery);
        }
        if k == 0 {
            return Err(Error::ZeroK);
        }
        let k = k.min(self.records.len());
        let q = query.segments();
        let qlen = q.len();
        let indel = self.costs.insert_cost();
        let pair_cost = feature_table().min_substitution().min(2.0 * indel);

        let mut qsig = vec![0u16; self.signature_width];
        for s in q {
            qsig[s.index()] = qsig[s.index()].saturating_add(1);
        }

        // Best achievable similarity per band, from the length gap alone.
        let mut bands: Vec<(f64, usize, &Vec<u32>)> = self
            .bands
            .iter()
            .map(|(&len, ids)| {
                let gap = len.abs_diff(qlen) as f64 * indel;
                (1.0 - gap / self.costs.normalizer(len.max(qlen)), len, ids)
            })
            .collect();
        bands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

        let mut heap: BinaryHeap<Ranked<'_>> = BinaryHeap::with_capacity(k + 1);
        for (band_bound, len, ids) in bands {
            if heap.len() == k && band_bound < heap.peek().map_or(0.0, |w| w.ps) - BOUND_SLACK {
                break;
            }
            let denom = self.costs.normalizer(len.max(qlen));
            for &id in ids {
                if heap.len() == k {
                    let sig = &self.signatures[id as usize * self.signature_width..][..self.signature_width];
                    let common: usize = sig.iter().zip(&qsig).map(|(&a, &b)| a.min(b) as usize).sum();
                    let (ua, ub) = (len - common, qlen - common);
                    let lower = pair_cost * ua.min(ub) as f64 + indel * ua.abs_diff(ub) as f64;
                    let worst = heap.peek().map_or(0.0, |w| w.ps);
                    if 1.0 - lower / denom < worst - BOUND_SLACK {
                        continue;
                    }
                }
                let record = &self.records[id as usize];
                let distance = edit_distance_segments(record.ipa.segments(), q, &self.costs);
                let ps = similarity_from_distance(distance, len, qlen, &self.costs)?;
                let entry = Ranked {
                    ps,
                    surface: &record.surface,
                    id,
                };
                if heap.len() < k {
                    heap.push(entry);
                } else if entry < *heap.peek().expect("heap is full") {
                    heap.pop();
                    heap.push(entry);
                }
            }
        }

        let mut out: Vec<Ranked<'_>> = heap.into_vec();
        out.sort();
        Ok(out.into_iter().map(|r| (r.id, r.ps)).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.costs.insert_cost().to_le_bytes())?;

        let table = feature_table();
        write_u32(&mut w, table.len())?;
        for s in table.segments() {
            write_str(&mut w, s.symbol())?;
        }

        write_u32(&mut w, self.records.len())?;
        for r in &self.records {
            write_str(&mut w, &r.surface)?;
            write_str(&mut w, &r.definition)?;
            write_str(&mut w, &r.source)?;
            write_u32(&mut w, r.ipa.len())?;
            let ids: Vec<u8> = r.ipa.segments().iter().map(|s| s.index() as u8).collect();
            w.write_all(&ids)?;
        }

        write_u32(&mut w, self.bands.len())?;
        for (len, ids) in &self.bands {
            write_u32(&mut w, *len)?;
            write_u32(&mut w, ids.len())?;
            for id in ids {
                w.write_all(&id.to_le_bytes())?;
            }
        }

        write_u32(&mut w, self.records.len())?;
        write_u32(&mut w, self.signature_width)?;
        for c in &self.signatures {
            w.write_all(&c.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.is_empty() {
            return Err(Error::IndexFormat("file is empty".into()));
        }
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::IndexFormat("bad magic bytes, not a DRGC index".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::IndexFormat(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let indel = f64::from_le_bytes(r.take(8, "edit costs")?.try_into().expect("8 bytes"));
        let costs = EditCosts::new(indel, indel).map_err(|e| Error::IndexFormat(e.to_string()))?;

        let n_symbols = r.u32("inventory")? as usize;
        let mut symbol_map = Vec::with_capacity(n_symbols.min(256));
        for _ in 0..n_symbols {
            let symbol = r.string("inventory")?;
            let segment = Segment::from_symbol(&symbol)
                .map_err(|_| Error::IndexFormat(format!("unknown segment {symbol:?} in inventory")))?;
            symbol_map.push(segment);
        }

        let n_records = r.u32("records")? as usize;
        let mut records = Vec::with_capacity(n_records.min(bytes.len()));
        for _ in 0..n_records {
            let surface = r.string("records")?;
            let definition = r.string("records")?;
            let source = r.string("records")?;
            let n = r.u32("records")? as usize;
            let segments = r
                .take(n, "records")?
                .iter()
                .map(|&i| {
                    symbol_map
                        .get(i as usize)
                        .copied()
                        .ok_or_else(|| Error::IndexFormat(format!("segment index {i} out of range")))
                })
                .collect::<Result<Vec<_>>>()?;
            records.push(NamedEntityRecord {
                surface,
                ipa: IpaString::new(segments),
                definition,
                source,
            });
        }
        if records.is_empty() {
            return Err(Error::IndexFormat("index holds no records".into()));
        }

        let n_bands = r.u32("bands")? as usize;
        let mut bands = BTreeMap::new();
        let mut seen = vec![false; records.len()];
        for _ in 0..n_bands {
            let len = r.u32("bands")? as usize;
            let n = r.u32("bands")? as usize;
            let mut ids = Vec::with_capacity(n.min(records.len()));
            for _ in 0..n {
                let id = r.u32("bands")?;
                let record = records
                    .get(id as usize)
                    .ok_or_else(|| Error::IndexFormat(format!("band references missing record {id}")))?;
                if record.ipa.len() != len || std::mem::replace(&mut seen[id as usize], true) {
                    return Err(Error::IndexFormat(format!("record {id} is misplaced in band {len}")));
                }
                ids.push(id);
            }
            bands.insert(len, ids);
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::IndexFormat("bands do not cover every record".into()));
        }

        let sig_records = r.u32("signatures")? as usize;
        let width = r.u32("signatures")? as usize;
        if sig_records != records.len() || width != n_symbols {
            return Err(Error::IndexFormat("signature section shape mismatch".into()));
        }
        let raw = r.take(sig_records * width * 2, "signatures")?;
        if r.pos != bytes.len() {
            return Err(Error::IndexFormat(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let index = Self::from_records(records, costs);
        // stored signatures are in file-inventory order; compare after remapping
        for (id, chunk) in raw.chunks_exact(width * 2).enumerate() {
            let row = &index.signatures[id * index.signature_width..][..index.signature_width];
            for (sym, pair) in chunk.chunks_exact(2).enumerate() {
                let count = u16::from_le_bytes([pair[0], pair[1]]);
                if row[symbol_map[sym].index()] != count {
                    return Err(Error::IndexFormat(format!("signature of record {id} is inconsistent")));
                }
            }
        }
        if index.bands != bands {
            return Err(Error::IndexFormat("band order is inconsistent".into()));
        }
        Ok(index)
    }
}

/// Heap entry ordered so that the worst kept result sits on top.
#[derive(Debug)]
struct Ranked<'a> {
    ps: f64,
    surface: &'a str,
    id: u32,
}

impl Ord for Ranked<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order(self.ps, self.surface, other.ps, other.surface).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Ranked<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Ranked<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked<'_> {}

fn write_u32(w: &mut impl Write, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::IndexFormat(format!("{n} does not fit in u32")))?;
    w.write_all(&n.to_le_bytes())?;
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::IndexFormat(format!("truncated file while reading {section} at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, section: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, section: &str) -> Result<String> {
        let n = self.u32(section)? as usize;
        String::from_utf8(self.take(n, section)?.to_vec())
            .map_err(|_| Error::IndexFormat(format!("invalid UTF-8 in {section}")))
    }
}
