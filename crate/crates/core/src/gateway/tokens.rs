/// Approximate token count for cost reporting.
///
/// Each whitespace-delimited chunk (a word, or a punctuation mark standing on
/// its own) counts as one word; words convert to tokens at 4/3, rounded up.
/// Provider-reported usage, when present, takes precedence over this figure.
pub fn count_tokens(text: &str) -> u64 {
    let words = text.split_whitespace().count() as u64;
    (words * 4).div_ceil(3)
}
