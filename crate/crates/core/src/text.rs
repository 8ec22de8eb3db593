//! Text normalization shared by the index, the dedup step and the tokenizer.

use unicode_normalization::UnicodeNormalization;

/// Splits `text` into lowercase tokens.
///
/// A token is a maximal run of Unicode letters or digits; every other
/// character separates tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// NFC-normalizes and trims a corpus line.
pub fn normalize_sentence(line: &str) -> String {
    line.nfc().collect::<String>().trim().to_string()
}

/// Key used to deduplicate retrieved sentences: NFC, whitespace runs
/// collapsed to one space, case preserved.
pub fn dedup_key(sentence: &str) -> String {
    let nfc: String = sentence.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}
