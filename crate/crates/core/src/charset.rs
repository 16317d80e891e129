//! Character and relative-position alphabets, and the label transformations
//! built on them.

use crate::error::{Error, Result};

/// Symbol printed for the "not a character" class (also the CTC blank).
pub const NULL_MARKER: char = '-';

const SYMBOLS: [char; 36] = [
    '0', '1', '2', '3', '4', '5', '6', '7', '8', '9', 'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h',
    'i', 'j', 'k', 'l', 'm', 'n', 'o', 'p', 'q', 'r', 's', 't', 'u', 'v', 'w', 'x', 'y', 'z',
];

/// The 36 case-folded alphanumerics plus a trailing "not a character" class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CharSet;

impl CharSet {
    pub const SIZE: usize = 37;
    pub const NULL: usize = 36;

    pub fn size(&self) -> usize {
        Self::SIZE
    }

    pub fn null_char_index(&self) -> usize {
        Self::NULL
    }

    pub fn chars(&self) -> &'static [char] {
        &SYMBOLS
    }

    /// Class index of `symbol`; uppercase folds to lowercase.
    pub fn char_index(&self, symbol: char) -> Result<usize> {
        match symbol {
            '0'..='9' => Ok(symbol as usize - '0' as usize),
            'a'..='z' => Ok(10 + symbol as usize - 'a' as usize),
            'A'..='Z' => Ok(10 + symbol as usize - 'A' as usize),
            NULL_MARKER => Ok(Self::NULL),
            _ => Err(Error::UnknownSymbol(symbol)),
        }
    }

    /// Symbol for a class index; the null class maps to [`NULL_MARKER`].
    pub fn symbol(&self, index: usize) -> char {
        SYMBOLS.get(index).copied().unwrap_or(NULL_MARKER)
    }
}

/// The `N` relative positions plus a "not belongs to word" class at index `N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PositionSet {
    n: usize,
}

impl PositionSet {
    pub fn new(n: usize) -> Self {
        assert!(n >= 3, "at least three detection slots are required");
        Self { n }
    }

    /// Number of detection slots `N`.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn null_pos_index(&self) -> usize {
        self.n
    }

    pub fn size(&self) -> usize {
        self.n + 1
    }

    /// Longest word that can be labeled; two slots always stay free.
    pub fn max_word_len(&self) -> usize {
        self.n - 2
    }
}

impl Default for PositionSet {
    fn default() -> Self {
        Self::new(25)
    }
}

/// Ground truth for one image: `N` (character, position) slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    pub char_classes: Vec<usize>,
    pub pos_classes: Vec<usize>,
    pub word: String,
}

impl LabelSet {
    pub fn word_len(&self) -> usize {
        self.word.chars().count()
    }

    pub fn n(&self) -> usize {
        self.char_classes.len()
    }

    /// Character classes of the word in reading order.
    pub fn target(&self) -> Vec<usize> {
        self.char_classes[..self.word_len()].to_vec()
    }
}

/// Lowercases and drops everything outside `[0-9a-z]`.
pub fn normalize_word(word: &str) -> String {
    word.chars()
        .filter(char::is_ascii_alphanumeric)
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

/// Builds the padded label set for a transcription.
pub fn derive_labels(word: &str, cs: &CharSet, ps: &PositionSet) -> Result<LabelSet> {
    let word = normalize_word(word);
    let len = word.len();
    if len == 0 {
        return Err(Error::EmptyWord);
    }
    if len > ps.max_word_len() {
        return Err(Error::WordTooLong {
            word,
            len,
            max: ps.max_word_len(),
        });
    }
    let n = ps.n();
    let mut char_classes = vec![cs.null_char_index(); n];
    let mut pos_classes = vec![ps.null_pos_index(); n];
    for (i, ch) in word.chars().enumerate() {
        char_classes[i] = cs.char_index(ch)?;
        pos_classes[i] = i;
    }
    Ok(LabelSet {
        char_classes,
        pos_classes,
        word,
    })
}

/// Classes to string, skipping the null class.
pub fn classes_to_string(classes: &[usize], cs: &CharSet) -> String {
    classes
        .iter()
        .filter(|&&c| c != cs.null_char_index())
        .map(|&c| cs.symbol(c))
        .collect()
}

/// The CTC collapse map: merge adjacent duplicates, then drop blanks.
pub fn collapse_b(seq: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(seq.len());
    let mut prev = None;
    for &s in seq {
        if Some(s) != prev && s != blank {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}
