//! Noun synonym lexicon read from a WordNet `data.noun` database file.
//!
//! Two lemmas count as synonyms when they share a synset or when a synset
//! of one is a direct hypernym or hyponym of a synset of the other.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::error::{Result, ScarError};

#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    /// Lemma to synset offsets.
    lemmas: BTreeMap<String, BTreeSet<u64>>,
    /// Synset offset to direct hypernyms and hyponyms.
    links: BTreeMap<u64, BTreeSet<u64>>,
}

const DETERMINERS: [&str; 6] = ["a", "an", "the", "some", "its", "their"];
const PREPOSITIONS: [&str; 18] = [
    "in", "on", "at", "by", "near", "inside", "under", "beside", "behind", "across", "along", "over", "within",
    "into", "onto", "of", "front", "top",
];

/// Lowercases, drops leading prepositions and determiners, and joins the
/// remaining words with underscores as WordNet lemmas are written.
pub fn normalize_phrase(phrase: &str) -> String {
    let words: Vec<String> = phrase
        .split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    let start = words
        .iter()
        .position(|w| !DETERMINERS.contains(&w.as_str()) && !PREPOSITIONS.contains(&w.as_str()))
        .unwrap_or(words.len());
    words[start..].join("_")
}

impl Lexicon {
    pub fn load(path: &Path) -> Result<Lexicon> {
        let text = fs::read_to_string(path).map_err(|e| {
            ScarError::Config(format!("cannot read lexicon {}: {e}", path.display()))
        })?;
        Lexicon::parse(&text)
    }

    /// Parses `data.noun` lines; license header lines start with a space.
    pub fn parse(text: &str) -> Result<Lexicon> {
        let mut lex = Lexicon::default();
        for (n, line) in text.lines().enumerate() {
            if line.starts_with(' ') || line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| ScarError::Config(format!("lexicon line {}: {what}", n + 1));
            let body = line.split(" | ").next().unwrap_or(line);
            let f: Vec<&str> = body.split_whitespace().collect();
            if f.len() < 4 {
                return Err(bad("too few fields"));
            }
            let offset: u64 = f[0].parse().map_err(|_| bad("bad synset offset"))?;
            let w_cnt = usize::from_str_radix(f[3], 16).map_err(|_| bad("bad word count"))?;
            let mut i = 4;
            for _ in 0..w_cnt {
                let word = f.get(i).ok_or_else(|| bad("missing word"))?;
                let lemma = strip_marker(word).to_lowercase();
                lex.lemmas.entry(lemma).or_default().insert(offset);
                i += 2;
            }
            let p_cnt: usize = f.get(i).ok_or_else(|| bad("missing pointer count"))?.parse().map_err(|_| bad("bad pointer count"))?;
            i += 1;
            for _ in 0..p_cnt {
                let sym = *f.get(i).ok_or_else(|| bad("missing pointer"))?;
                let target: u64 = f.get(i + 1).ok_or_else(|| bad("missing pointer target"))?.parse().map_err(|_| bad("bad pointer target"))?;
                let pos = *f.get(i + 2).ok_or_else(|| bad("missing pointer pos"))?;
                if pos == "n" && matches!(sym, "@" | "@i" | "~" | "~i") {
                    lex.links.entry(offset).or_default().insert(target);
                    lex.links.entry(target).or_default().insert(offset);
                }
                i += 4;
            }
        }
        Ok(lex)
    }

    pub fn len(&self) -> usize {
        self.lemmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lemmas.is_empty()
    }

    fn synsets(&self, phrase: &str) -> Option<&BTreeSet<u64>> {
        let key = normalize_phrase(phrase);
        self.lemmas.get(&key).or_else(|| {
            let singular = key.strip_suffix("es").filter(|s| self.lemmas.contains_key(*s))
                .or_else(|| key.strip_suffix('s'))?;
            self.lemmas.get(singular)
        })
    }

    /// Identical phrases, shared synsets or a one-hop hypernym link.
    pub fn related(&self, a: &str, b: &str) -> bool {
        let (na, nb) = (normalize_phrase(a), normalize_phrase(b));
        if na == nb {
            return true;
        }
        let (Some(sa), Some(sb)) = (self.synsets(a), self.synsets(b)) else {
            return false;
        };
        sa.iter().any(|x| {
            sb.contains(x) || self.links.get(x).is_some_and(|l| l.iter().any(|y| sb.contains(y)))
        })
    }
}

/// Adjective lemmas carry a syntactic marker such as `(a)`.
fn strip_marker(word: &str) -> &str {
    word.split('(').next().unwrap_or(word)
}

#[cfg(test)]
mod tests {
    use super::*;

    const DATA: &str = "  1 license line\n\
00000001 06 n 03 traffic_light 0 traffic_signal 0 stoplight 0 001 @ 00000002 n 0000 | a signal\n\
00000002 06 n 01 light 0 001 ~ 00000001 n 0000 | a source\n\
00000003 06 n 01 wine_glass 0 000 | a glass\n";

    #[test]
    fn synonyms_and_hypernyms() {
        let lex = Lexicon::parse(DATA).unwrap();
        assert!(lex.related("Traffic light", "stoplight"));
        assert!(lex.related("the stoplight", "light"));
        assert!(!lex.related("stoplight", "wine glass"));
        assert!(lex.related("kiosk", "Kiosk"));
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_phrase("in the Garage"), "garage");
        assert_eq!(normalize_phrase("in front of a computer screen"), "computer_screen");
    }
}
