//! Rule-based tokenizer and suffix-stripping lemmatizer.

use serde::{Deserialize, Serialize};

/// One token with the three surface forms used for exact-match features.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub lower: String,
    pub lemma: String,
}

impl Token {
    pub fn new(surface: &str) -> Self {
        let lower = surface.to_lowercase();
        let lemma = lemmatize(&lower);
        Token {
            surface: surface.to_string(),
            lower,
            lemma,
        }
    }
}

const SUFFIXES: [&str; 4] = ["ing", "ed", "es", "s"];
const MIN_STEM: usize = 4;

/// Strips one common English suffix, keeping at least a four-letter stem.
/// Operates on the case-folded form.
pub fn lemmatize(lower: &str) -> String {
    for suffix in SUFFIXES {
        if let Some(stem) = lower.strip_suffix(suffix) {
            if stem.chars().count() >= MIN_STEM && stem.chars().all(char::is_alphabetic) {
                return stem.to_string();
            }
        }
    }
    lower.to_string()
}

/// Splits on whitespace, then separates every non-alphanumeric character into
/// its own token.
pub fn tokenize_str(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars() {
            if c.is_alphanumeric() {
                word.push(c);
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

pub fn tokenize(text: &str) -> Vec<Token> {
    tokenize_str(text).iter().map(|s| Token::new(s)).collect()
}

/// Joins token surfaces with single spaces. Re-tokenizing the result yields the
/// same surfaces.
pub fn detokenize(tokens: &[Token]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&t.surface);
    }
    out
}
