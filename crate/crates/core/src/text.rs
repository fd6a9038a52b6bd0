//! Tokenisation and sentence helpers shared by the mock backends, the hash
//! embedder and the answer judge.

/// Lowercased alphanumeric runs.
pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

pub const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "all", "also", "am", "an", "and", "any", "are", "as",
    "at", "be", "been", "before", "being", "below", "between", "both", "but", "by", "can", "could",
    "did", "do", "does", "doing", "down", "during", "each", "few", "for", "from", "further", "had",
    "has", "have", "having", "he", "her", "here", "hers", "herself", "him", "himself", "his", "how",
    "i", "if", "in", "into", "is", "it", "its", "itself", "just", "me", "more", "most", "my",
    "myself", "no", "nor", "not", "now", "of", "off", "on", "once", "only", "or", "other", "our",
    "ours", "ourselves", "out", "over", "own", "s", "same", "she", "should", "so", "some", "such",
    "t", "than", "that", "the", "their", "theirs", "them", "themselves", "then", "there", "these",
    "they", "this", "those", "through", "to", "too", "under", "until", "up", "very", "was", "we",
    "were", "what", "when", "where", "which", "while", "who", "whom", "why", "will", "with",
    "would", "you", "your", "yours", "yourself", "yourselves",
];

pub const COPULAS: &[&str] = &["is", "am", "are", "was", "were", "be", "been", "being"];

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.binary_search(&token).is_ok()
}

pub fn content_words(text: &str) -> Vec<String> {
    tokens(text).into_iter().filter(|t| !is_stopword(t)).collect()
}

/// Splits on sentence-final `.`, `!`, `?` (followed by whitespace or end of
/// text) and on newlines. Terminal punctuation stays with its sentence.
pub fn sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in text.lines() {
        let chars: Vec<char> = line.chars().collect();
        let mut start = 0;
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if matches!(c, '.' | '!' | '?') {
                let mut end = i + 1;
                while end < chars.len() && matches!(chars[end], '.' | '!' | '?') {
                    end += 1;
                }
                if end == chars.len() || chars[end].is_whitespace() {
                    push_trimmed(&mut out, &chars[start..end]);
                    start = end;
                    i = end;
                    continue;
                }
            }
            i += 1;
        }
        push_trimmed(&mut out, &chars[start..]);
    }
    out
}

fn push_trimmed(out: &mut Vec<String>, chars: &[char]) {
    let s: String = chars.iter().collect();
    let s = s.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
}

pub fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Lowercased, whitespace-collapsed form used for duplicate detection.
pub fn normalize_for_match(text: &str) -> String {
    collapse_whitespace(text).to_lowercase()
}

/// Lowercased tokens joined by single spaces; punctuation-insensitive.
pub fn normalize_answer(text: &str) -> String {
    tokens(text).join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stopwords_sorted_for_binary_search() {
        let mut sorted = STOPWORDS.to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, STOPWORDS);
    }

    #[test]
    fn tokenizes_lowercase_alnum() {
        assert_eq!(tokens("I moved to Berlin in 2021."), ["i", "moved", "to", "berlin", "in", "2021"]);
        assert!(tokens("  ...  ").is_empty());
    }

    #[test]
    fn splits_sentences_keeping_decimals() {
        assert_eq!(
            sentences("I paid 2.5 euros. Then I left!\nNew line here"),
            ["I paid 2.5 euros.", "Then I left!", "New line here"]
        );
        assert!(sentences("").is_empty());
    }

    #[test]
    fn answer_normalization() {
        assert_eq!(normalize_answer("  Blue, obviously!"), "blue obviously");
    }
}
