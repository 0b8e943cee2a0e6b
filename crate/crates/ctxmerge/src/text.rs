//! Text helpers shared by scoring, fusion, and evaluation: one token
//! normalizer and one sentence splitter, so every module agrees on what a
//! "word" and a "sentence" are.

/// Lowercase, drop ASCII punctuation, split on whitespace.
pub fn normalized_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .filter_map(|w| {
            let cleaned: String = w.chars().filter(|c| !c.is_ascii_punctuation()).collect();
            if cleaned.is_empty() {
                None
            } else {
                Some(cleaned)
            }
        })
        .collect()
}

/// Split on '.', '!' or '?' followed by whitespace (or end of text),
/// keeping the delimiter with the sentence it terminates.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c == '.' || c == '!' || c == '?' {
            let at_end = i + 1 == bytes.len();
            let before_space = !at_end && (bytes[i + 1] as char).is_whitespace();
            if at_end || before_space {
                let sentence = text[start..=i].trim();
                if !sentence.is_empty() {
                    out.push(sentence);
                }
                start = i + 1;
            }
        }
        i += 1;
    }
    if start < bytes.len() {
        let tail = text[start..].trim();
        if !tail.is_empty() {
            out.push(tail);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_case_and_punctuation() {
        assert_eq!(
            normalized_words("The, Quick  brown-FOX!"),
            vec!["the", "quick", "brownfox"]
        );
    }

    #[test]
    fn pure_punctuation_tokens_vanish() {
        assert_eq!(normalized_words("-- ?! ..."), Vec::<String>::new());
    }

    #[test]
    fn splits_on_terminators_followed_by_space() {
        let s = split_sentences("One fact. Another fact! A third? tail");
        assert_eq!(s, vec!["One fact.", "Another fact!", "A third?", "tail"]);
    }

    #[test]
    fn keeps_inline_dots_without_space() {
        // "3.14" has no whitespace after the dot, so it does not split.
        assert_eq!(split_sentences("pi is 3.14 exactly"), vec!["pi is 3.14 exactly"]);
    }

    #[test]
    fn empty_text_gives_no_sentences() {
        assert!(split_sentences("   ").is_empty());
    }
}
