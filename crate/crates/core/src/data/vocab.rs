use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::UNK_ID;

/// Reserved entries, in id order: unknown, start and end of sequence.
pub const RESERVED_TOKENS: [&str; 3] = ["<unk>", "<sos>", "<eos>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pub min_freq: usize,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            tokens,
            index,
            min_freq,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED_TOKENS[UNK_ID])
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, words: &[&str]) -> Vec<usize> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut seen = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            if line.is_empty() || line.chars().any(char::is_whitespace) {
                return Err(err(format!("invalid token {line:?}")));
            }
            if i < RESERVED_TOKENS.len() && line != RESERVED_TOKENS[i] {
                return Err(err(format!("expected reserved token {}", RESERVED_TOKENS[i])));
            }
            if let Some(prev) = seen.insert(line.to_string(), i) {
                return Err(err(format!("duplicate token {line:?} (first on line {})", prev + 1)));
            }
            tokens.push(line.to_string());
        }
        if tokens.len() < RESERVED_TOKENS.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: tokens.len() + 1,
                msg: "missing reserved tokens".into(),
            });
        }
        Ok(Vocabulary::from_tokens(tokens, 1))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Counts tokens over `corpus` and keeps those seen at least `min_freq`
/// times, ordered by descending frequency and then lexicographically, after
/// the reserved entries.
pub fn build_vocab<S: AsRef<str>>(corpus: &[Vec<S>], min_freq: usize) -> Vocabulary {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for phrase in corpus {
        for t in phrase {
            let t = t.as_ref();
            if !RESERVED_TOKENS.contains(&t) {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_freq.max(1)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let tokens = RESERVED_TOKENS
        .iter()
        .map(|t| t.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
        .collect();
    Vocabulary::from_tokens(tokens, min_freq)
}
