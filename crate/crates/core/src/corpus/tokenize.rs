//! The mteval-v13a tokenizer, as used by SacreBLEU's `tok.13a`.

use std::sync::OnceLock;

use regex::Regex;

struct Rules {
    symbols: Regex,
    period_comma_after_non_digit: Regex,
    period_comma_before_non_digit: Regex,
    dash_after_digit: Regex,
    whitespace: Regex,
}

fn rules() -> &'static Rules {
    static RULES: OnceLock<Rules> = OnceLock::new();
    RULES.get_or_init(|| Rules {
        symbols: Regex::new(r"([\{-~\[-` -&\(-\+:-@/])").expect("valid regex"),
        period_comma_after_non_digit: Regex::new(r"([^0-9])([\.,])").expect("valid regex"),
        period_comma_before_non_digit: Regex::new(r"([\.,])([^0-9])").expect("valid regex"),
        dash_after_digit: Regex::new(r"([0-9])(-)").expect("valid regex"),
        whitespace: Regex::new(r"\s+").expect("valid regex"),
    })
}

/// Normalized 13a string (tokens joined by single spaces).
pub fn tokenize_13a_string(text: &str) -> String {
    let r = rules();
    let mut norm = text
        .replace("<skipped>", "")
        .replace("-\n", "")
        .replace('\n', " ")
        .replace("&quot;", "\"")
        .replace("&amp;", "&")
        .replace("&lt;", "<")
        .replace("&gt;", ">");
    norm = format!(" {norm} ");
    norm = r.symbols.replace_all(&norm, " $1 ").into_owned();
    norm = r
        .period_comma_after_non_digit
        .replace_all(&norm, "$1 $2 ")
        .into_owned();
    norm = r
        .period_comma_before_non_digit
        .replace_all(&norm, " $1 $2")
        .into_owned();
    norm = r.dash_after_digit.replace_all(&norm, "$1 $2 ").into_owned();
    norm = r.whitespace.replace_all(&norm, " ").into_owned();
    norm.trim_matches(|c: char| c.is_whitespace()).to_string()
}

/// Splits `text` into 13a tokens. Case is preserved.
pub fn tokenize_13a(text: &str) -> Vec<String> {
    let norm = tokenize_13a_string(text);
    if norm.is_empty() {
        return Vec::new();
    }
    norm.split(' ').map(str::to_string).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_input() {
        assert!(tokenize_13a("").is_empty());
        assert!(tokenize_13a("   ").is_empty());
    }

    #[test]
    fn punctuation_is_split() {
        assert_eq!(tokenize_13a("Hello, world!"), ["Hello", ",", "world", "!"]);
    }

    #[test]
    fn digits_keep_their_period_but_not_dash() {
        assert_eq!(
            tokenize_13a("3.5 and 3-4 end."),
            ["3.5", "and", "3", "-", "4", "end", "."]
        );
    }

    #[test]
    fn entities_are_unescaped() {
        assert_eq!(tokenize_13a("a &amp; b &quot;c&quot;"), ["a", "&", "b", "\"", "c", "\""]);
    }

    #[test]
    fn case_is_preserved() {
        assert_eq!(tokenize_13a("The CAT"), ["The", "CAT"]);
    }

    #[test]
    fn punctuation_run_before_digit_splits_once() {
        // Matches the reference scorer; a second pass would split again.
        assert_eq!(tokenize_13a("..0"), [".", ".0"]);
        assert_eq!(tokenize_13a(". .0"), [".", ".", "0"]);
    }

    proptest! {
        #[test]
        fn idempotent_on_own_output(s in "[a-zA-Z .,!?()'\"$%:/-]{0,40}") {
            let once = tokenize_13a(&s);
            let twice = tokenize_13a(&once.join(" "));
            prop_assert_eq!(once, twice);
        }
    }
}
