use std::collections::{BTreeSet, HashMap};

use crate::data::{render_sentence, AnomalySpec, LabelRegistry, PrimitiveKind};
use crate::error::{Error, Result};
use crate::text::{join_words, words};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["[PAD]", "[BOS]", "[EOS]", "[UNK]"];

/// Word-level token table. Ids 0..4 are the specials, the rest are sorted
/// lowercase words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = corpus.into_iter().flat_map(words).collect();
        let tokens = SPECIALS.iter().map(|s| s.to_string()).chain(words).collect();
        Self::from_tokens(tokens).expect("specials are unique")
    }

    /// Every sentence the report grammar can produce for `registry`.
    pub fn for_registry(registry: &LabelRegistry, shape: [usize; 3]) -> Self {
        let mut corpus = Vec::new();
        let sizes = [2.5, 3.5, 4.5];
        for label in 0..registry.len() {
            for size in sizes {
                for corner in 0..8usize {
                    let pick = |bit: usize, axis: usize| if corner >> bit & 1 == 0 { 0 } else { shape[axis] - 1 };
                    let spec = AnomalySpec {
                        label,
                        kind: PrimitiveKind::for_label(label),
                        center: [pick(0, 0), pick(1, 1), pick(2, 2)],
                        size,
                        intensity: 0.0,
                    };
                    corpus.push(render_sentence(&spec, registry, shape));
                }
            }
        }
        Self::build(corpus.iter().map(String::as_str))
    }

    /// Rebuilds a table from its serialized token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..4].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Format("vocabulary must start with the special tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Word ids without `[BOS]`/`[EOS]`; unknown words map to `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        words(text)
            .iter()
            .map(|w| match self.index.get(w) {
                Some(&i) if i >= SPECIALS.len() => i,
                _ => UNK,
            })
            .collect()
    }

    /// `[BOS] words [EOS]`, the training target form.
    pub fn encode_sentence(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.tokenize(text));
        ids.push(EOS);
        ids
    }

    /// Text of the word tokens; `[PAD]`, `[BOS]` and `[EOS]` are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.tokens.get(i).map_or(SPECIALS[UNK], String::as_str))
            .collect();
        join_words(&words)
    }

    /// One token per line.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}
