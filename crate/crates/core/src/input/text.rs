use std::collections::HashMap;

/// Reserved ids.
pub const T_CLS: usize = 0;
pub const T_SEP: usize = 1;
pub const T_MASK: usize = 2;
pub const PAD: usize = 3;
pub const NUM_SPECIALS: usize = 4;
pub const BYTE_OFFSET: usize = NUM_SPECIALS;
pub const NUM_BYTES: usize = 256;

/// Words of the synthetic caption, question, and statement grammar.
pub const LEXICON: &[&str] = &[
    "a", "and", "blue", "circle", "circles", "color", "fewer", "green", "has", "how", "image", "is",
    "left", "many", "more", "no", "object", "one", "red", "right", "shape", "shapes", "square",
    "squares", "the", "there", "three", "triangle", "triangles", "two", "what", "yes", "zero",
];

/// Byte-level vocabulary with an optional word lexicon.
///
/// Ids: four specials, then 256 byte ids, then one id per lexicon word.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn bytes_only() -> Self {
        Self {
            words: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn with_lexicon<S: AsRef<str>>(words: &[S]) -> Self {
        let mut v = Self::bytes_only();
        for w in words {
            let w = w.as_ref();
            if !v.index.contains_key(w) {
                v.index.insert(w.to_string(), NUM_SPECIALS + NUM_BYTES + v.words.len());
                v.words.push(w.to_string());
            }
        }
        v
    }

    /// The vocabulary used for all synthetic data.
    pub fn synthetic() -> Self {
        Self::with_lexicon(LEXICON)
    }

    pub fn size(&self) -> usize {
        NUM_SPECIALS + NUM_BYTES + self.words.len()
    }

    pub fn word_id(&self, w: &str) -> Option<usize> {
        self.index.get(w).copied()
    }

    /// Maps ids back to text. Word ids are joined with single spaces; byte ids
    /// are concatenated; specials are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut bytes = Vec::new();
        let mut words = Vec::new();
        for &id in ids {
            if (BYTE_OFFSET..BYTE_OFFSET + NUM_BYTES).contains(&id) {
                bytes.push((id - BYTE_OFFSET) as u8);
            } else if id >= NUM_SPECIALS + NUM_BYTES {
                if let Some(w) = self.words.get(id - NUM_SPECIALS - NUM_BYTES) {
                    words.push(w.as_str());
                }
            }
        }
        if words.is_empty() {
            String::from_utf8_lossy(&bytes).into_owned()
        } else {
            words.join(" ")
        }
    }
}

/// Token ids of one text, without the `[T_CLS]`/`[T_SEP]` specials.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TextTokens {
    pub ids: Vec<usize>,
}

impl TextTokens {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Keeps the first `max` ids.
    pub fn truncated(&self, max: usize) -> Self {
        Self {
            ids: self.ids[..self.ids.len().min(max)].to_vec(),
        }
    }
}

/// Word-level ids when every space-separated word is in the lexicon, byte ids
/// (one per UTF-8 byte) otherwise.
pub fn tokenize(text: &str, vocab: &Vocab) -> TextTokens {
    if text.is_empty() {
        return TextTokens { ids: Vec::new() };
    }
    let words: Vec<&str> = text.split(' ').collect();
    let word_ids: Option<Vec<usize>> = words.iter().map(|w| vocab.word_id(w)).collect();
    let ids = match word_ids {
        Some(ids) => ids,
        None => text.bytes().map(|b| BYTE_OFFSET + b as usize).collect(),
    };
    TextTokens { ids }
}
