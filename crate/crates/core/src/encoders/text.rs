//! Word-level tokenizer, vocabulary and embedding-table lookup.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Grads, ParamStore, Tensor};

pub const UNK: usize = 0;
pub const NUM: usize = 1;
const RESERVED: [&str; 2] = ["<unk>", "<num>"];

/// Lowercases and splits into alphanumeric runs and single punctuation
/// characters. A run of digits with an inner decimal point stays one token.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().flat_map(char::to_lowercase).collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_alphanumeric() {
            let start = i;
            while i < chars.len()
                && (chars[i].is_alphanumeric()
                    || (chars[i] == '.'
                        && chars[i - 1].is_ascii_digit()
                        && chars.get(i + 1).is_some_and(char::is_ascii_digit)))
            {
                i += 1;
            }
            out.push(chars[start..i].iter().collect());
        } else {
            out.push(c.to_string());
            i += 1;
        }
    }
    out
}

fn is_number(token: &str) -> bool {
    token.chars().next().is_some_and(|c| c.is_ascii_digit())
        && token.chars().all(|c| c.is_ascii_digit() || c == '.')
}

/// Token table. Ids 0 and 1 are reserved for unknown words and numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Vocab {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Vec<String> {
        v.words
    }
}

impl Vocab {
    /// Builds a vocabulary from every non-numeric token of `texts`, sorted.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vocab {
        let mut set = BTreeSet::new();
        for t in texts {
            set.extend(tokenize(t).into_iter().filter(|w| !is_number(w)));
        }
        let mut words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        words.extend(set.into_iter().filter(|w| !RESERVED.contains(&w.as_str())));
        Vocab::from(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        if is_number(token) {
            return NUM;
        }
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }
}

/// `|t|×d` rows looked up from the embedding table, with their ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddings {
    pub tokens: Tensor,
    pub token_ids: Vec<usize>,
}

/// Looks up each token of `text` in the table stored under `table_id`.
pub fn embed_text(p: &ParamStore, table_id: &str, vocab: &Vocab, text: &str) -> Result<TextEmbeddings> {
    let ids = vocab.encode(text);
    if ids.is_empty() {
        return Err(Error::EmptyInput("text has no tokens".into()));
    }
    embed_ids(p, table_id, ids)
}

pub(crate) fn embed_ids(p: &ParamStore, table_id: &str, ids: Vec<usize>) -> Result<TextEmbeddings> {
    let table = p.get(table_id)?;
    let (rows, d) = table.dims2()?;
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in &ids {
        if id >= rows {
            return Err(Error::Validation(format!(
                "token id {id} outside embedding table of {rows} rows"
            )));
        }
        data.extend_from_slice(table.row(id));
    }
    Ok(TextEmbeddings {
        tokens: Tensor::with_dtype(vec![ids.len(), d], data, table.dtype())?,
        token_ids: ids,
    })
}

/// Scatter-adds row gradients back into the embedding table.
pub(crate) fn embed_backward(
    p: &ParamStore,
    table_id: &str,
    ids: &[usize],
    dy: &Tensor,
    g: &mut Grads,
) -> Result<()> {
    if !g.wants(table_id) {
        return Ok(());
    }
    let table = p.get(table_id)?;
    let mut grad = Tensor::zeros(table.shape());
    let d = table.dims2()?.1;
    for (row, &id) in ids.iter().enumerate() {
        for (a, b) in grad.row_mut(id).iter_mut().zip(dy.row(row)) {
            *a += b;
        }
    }
    debug_assert_eq!(dy.len(), ids.len() * d);
    g.accumulate(table_id, grad)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::SeededRng;

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("A red Cube, left."), ["a", "red", "cube", ",", "left", "."]);
        assert_eq!(
            tokenize("bbox: [135.57, 248.43]"),
            ["bbox", ":", "[", "135.57", ",", "248.43", "]"]
        );
        assert_eq!(tokenize("end 3."), ["end", "3", "."]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn lookup_and_unknowns() {
        let vocab = Vocab::build(["a cat"]);
        assert_eq!(vocab.encode("a a"), vec![2, 2]);
        assert_eq!(vocab.encode("dog 12.5"), vec![UNK, NUM]);
        let mut p = ParamStore::new();
        p.insert("embed", SeededRng::new(0).normal_tensor(&[vocab.len(), 4], 1.0));
        let t = embed_text(&p, "embed", &vocab, "a a").unwrap();
        assert_eq!(t.tokens.row(0), t.tokens.row(1));
        let u = embed_text(&p, "embed", &vocab, "zebra").unwrap();
        assert_eq!(u.tokens.row(0), p.get("embed").unwrap().row(UNK));
        assert!(matches!(embed_text(&p, "embed", &vocab, " "), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn vocab_json_roundtrip() {
        let v = Vocab::build(["red cube", "blue ball"]);
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("ball"), v.id("ball"));
    }
}
