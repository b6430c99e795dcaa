//! Named-entity mention detection.

use std::collections::HashSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sync::Semaphore;

/// Half-open word range `[start_word, end_word)` over the whitespace
/// tokens of a text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start_word: usize,
    pub end_word: usize,
    pub surface: String,
}

impl EntitySpan {
    /// Builds a span over `text`, deriving the surface from its words.
    pub fn over(text: &str, start_word: usize, end_word: usize) -> Result<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        if start_word >= end_word || end_word > words.len() {
            return Err(Error::SpanOutOfRange {
                start: start_word,
                end: end_word,
                words: words.len(),
            });
        }
        Ok(Self {
            start_word,
            end_word,
            surface: span_surface(&words[start_word..end_word]),
        })
    }

    pub fn len(&self) -> usize {
        self.end_word - self.start_word
    }

    pub fn is_empty(&self) -> bool {
        self.end_word <= self.start_word
    }

    pub fn check(&self, word_count: usize) -> Result<()> {
        if self.start_word >= self.end_word || self.end_word > word_count {
            return Err(Error::SpanOutOfRange {
                start: self.start_word,
                end: self.end_word,
                words: word_count,
            });
        }
        Ok(())
    }
}

/// Covered words joined by single spaces, without the punctuation that
/// surrounds the span as a whole.
fn span_surface(words: &[&str]) -> String {
    let joined = words.join(" ");
    trim_punct(&joined).to_owned()
}

/// Punctuation glued to the outside of a span's first and last words,
/// kept when the span is replaced.
pub(crate) fn span_affixes<'t>(words: &[&'t str], span: &EntitySpan) -> (&'t str, &'t str) {
    let first = words[span.start_word];
    let last = words[span.end_word - 1];
    let lead = first.len() - first.trim_start_matches(|c: char| !c.is_alphanumeric()).len();
    let tail = last.trim_end_matches(|c: char| !c.is_alphanumeric()).len();
    // a span made only of punctuation keeps nothing twice
    if span.len() == 1 && lead >= tail {
        return (&first[..lead], "");
    }
    (&first[..lead], &last[tail..])
}

fn trim_punct(s: &str) -> &str {
    s.trim_matches(|c: char| !c.is_alphanumeric())
}

fn match_key(word: &str) -> String {
    trim_punct(word).to_lowercase()
}

/// Finds entity mentions in text.
pub trait Tagger: Send + Sync {
    /// Non-overlapping spans sorted by start.
    fn tag(&self, text: &str) -> Result<Vec<EntitySpan>>;
}

/// Longest-match, leftmost-first, case-insensitive dictionary tagger.
#[derive(Debug, Clone, Default)]
pub struct GazetteerTagger {
    phrases: HashSet<Vec<String>>,
    max_words: usize,
}

impl GazetteerTagger {
    pub fn new<I, S>(surfaces: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tagger = Self::default();
        tagger.extend(surfaces);
        tagger
    }

    pub fn extend<I, S>(&mut self, surfaces: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        for s in surfaces {
            let key: Vec<String> = s.as_ref().split_whitespace().map(match_key).filter(|w| !w.is_empty()).collect();
            if key.is_empty() {
                continue;
            }
            self.max_words = self.max_words.max(key.len());
            self.phrases.insert(key);
        }
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn contains(&self, surface: &str) -> bool {
        let key: Vec<String> = surface.split_whitespace().map(match_key).collect();
        self.phrases.contains(&key)
    }
}

impl Tagger for GazetteerTagger {
    fn tag(&self, text: &str) -> Result<Vec<EntitySpan>> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let keys: Vec<String> = words.iter().map(|w| match_key(w)).collect();
        let mut spans = Vec::new();
        let mut start = 0;
        while start < words.len() {
            let longest = (1..=self.max_words.min(words.len() - start))
                .rev()
                .find(|&n| !keys[start].is_empty() && self.phrases.contains(&keys[start..start + n]));
            match longest {
                Some(n) => {
                    spans.push(EntitySpan {
                        start_word: start,
                        end_word: start + n,
                        surface: span_surface(&words[start..start + n]),
                    });
                    start += n;
                }
                None => start += 1,
            }
        }
        Ok(spans)
    }
}

#[derive(Debug, Serialize)]
struct TagRequest<'a> {
    text: &'a str,
    labels: &'a [String],
}

#[derive(Debug, Deserialize)]
struct TagResponse {
    entities: Vec<EntitySpan>,
}

/// Tagger backed by an HTTP endpoint speaking
/// `POST {"text", "labels"} -> {"entities": [{"start_word", "end_word", "surface"}]}`.
pub struct RemoteTagger {
    endpoint: String,
    labels: Vec<String>,
    client: reqwest::blocking::Client,
    in_flight: Semaphore,
}

impl RemoteTagger {
    pub fn new(endpoint: &str, labels: Vec<String>, timeout: Duration, max_in_flight: usize) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Tagger {
                endpoint: endpoint.to_owned(),
                cause: e.to_string(),
            })?;
        Ok(Self {
            endpoint: endpoint.to_owned(),
            labels,
            client,
            in_flight: Semaphore::new(max_in_flight.max(1)),
        })
    }

    fn fail(&self, cause: impl ToString) -> Error {
        Error::Tagger {
            endpoint: self.endpoint.clone(),
            cause: cause.to_string(),
        }
    }
}

impl Tagger for RemoteTagger {
    fn tag(&self, text: &str) -> Result<Vec<EntitySpan>> {
        let _permit = self.in_flight.acquire();
        let response = self
            .client
            .post(&self.endpoint)
            .json(&TagRequest {
                text,
                labels: &self.labels,
            })
            .send()
            .map_err(|e| self.fail(e))?;
        let status = response.status();
        if !status.is_success() {
            return Err(self.fail(format!("HTTP {status}")));
        }
        let body: TagResponse = response.json().map_err(|e| self.fail(e))?;

        let word_count = text.split_whitespace().count();
        let mut spans = body.entities;
        spans.sort_by_key(|s| (s.start_word, s.end_word));
        for (i, span) in spans.iter().enumerate() {
            span.check(word_count).map_err(|e| self.fail(e))?;
            if i > 0 && spans[i - 1].end_word > span.start_word {
                return Err(self.fail("overlapping entity spans"));
            }
        }
        Ok(spans)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn starts(spans: &[EntitySpan]) -> Vec<(usize, usize)> {
        spans.iter().map(|s| (s.start_word, s.end_word)).collect()
    }

    #[test]
    fn longest_match() {
        let t = GazetteerTagger::new(["john smith"]);
        let spans = t.tag("call john smith now").unwrap();
        assert_eq!(starts(&spans), vec![(1, 3)]);
        assert_eq!(spans[0].surface, "john smith");
    }

    #[test]
    fn empty_text() {
        assert!(GazetteerTagger::new(["x"]).tag("").unwrap().is_empty());
    }

    #[test]
    fn longer_phrase_wins() {
        let t = GazetteerTagger::new(["new york", "york"]);
        let spans = t.tag("visit new york").unwrap();
        assert_eq!(starts(&spans), vec![(1, 3)]);
        assert_eq!(spans[0].surface, "new york");
    }

    #[test]
    fn case_and_punctuation_insensitive() {
        let t = GazetteerTagger::new(["Ruth Ellis", "Paris"]);
        let spans = t.tag("Was RUTH ellis, in paris?").unwrap();
        assert_eq!(starts(&spans), vec![(1, 3), (4, 5)]);
        assert_eq!(spans[0].surface, "RUTH ellis");
        assert_eq!(spans[1].surface, "paris");
    }

    #[test]
    fn leftmost_first() {
        let t = GazetteerTagger::new(["a b", "b c"]);
        assert_eq!(starts(&t.tag("a b c").unwrap()), vec![(0, 2)]);
    }

    #[test]
    fn span_over_validates() {
        assert!(EntitySpan::over("a b", 1, 3).is_err());
        assert!(EntitySpan::over("a b", 1, 1).is_err());
        assert_eq!(EntitySpan::over("a b", 0, 2).unwrap().surface, "a b");
    }

    #[test]
    fn remote_tagger_network_failure_names_endpoint() {
        // nothing listens on port 9 of localhost
        let t = RemoteTagger::new("http://127.0.0.1:9/tag", vec![], Duration::from_millis(500), 2).unwrap();
        match t.tag("hello") {
            Err(Error::Tagger { endpoint, .. }) => assert_eq!(endpoint, "http://127.0.0.1:9/tag"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn affixes_outside_span_only() {
        let text = "(new york), ok";
        let words: Vec<&str> = text.split_whitespace().collect();
        let span = EntitySpan::over(text, 0, 2).unwrap();
        assert_eq!(span.surface, "new york");
        assert_eq!(span_affixes(&words, &span), ("(", "),"));
        let dash = EntitySpan::over("a -- b", 1, 2).unwrap();
        assert_eq!(span_affixes(&["a", "--", "b"], &dash), ("--", ""));
    }
}
