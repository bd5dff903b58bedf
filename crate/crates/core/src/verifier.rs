//! Rule-based answer checking.
//!
//! A completion earns reward 1 when it ends with a well-formed `\boxed{X}`
//! whose content matches the gold label, and 0 otherwise. No partial credit,
//! no semantic matching.

const BOXED_OPEN: &str = "\\boxed{";

/// The final answer pulled out of a generated response.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ExtractedAnswer {
    /// Trimmed content of the last well-formed boxed expression.
    pub value: Option<String>,
    /// Character offsets `(start, end)` of that expression, `end` exclusive.
    pub span: Option<(usize, usize)>,
}

impl ExtractedAnswer {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_some(&self) -> bool {
        self.value.is_some()
    }
}

/// Byte range of every well-formed `\boxed{...}` in `text`.
///
/// The content ends at the first unescaped `}`; an unescaped `{` before it
/// makes the occurrence malformed (single-level matching only).
fn boxed_occurrences(text: &str) -> Vec<(usize, usize, usize, usize)> {
    let bytes = text.as_bytes();
    let mut found = Vec::new();
    let mut from = 0;
    while let Some(rel) = text[from..].find(BOXED_OPEN) {
        let start = from + rel;
        let content_start = start + BOXED_OPEN.len();
        let mut i = content_start;
        let mut close = None;
        while i < bytes.len() {
            match bytes[i] {
                b'\\' => i += 2,
                b'{' => break,
                b'}' => {
                    close = Some(i);
                    break;
                }
                _ => i += 1,
            }
        }
        if let Some(close) = close {
            found.push((start, content_start, close, close + 1));
        }
        from = content_start;
    }
    found
}

/// Returns the last well-formed boxed answer in `text`, whitespace-trimmed.
pub fn extract_boxed_answer(text: &str) -> ExtractedAnswer {
    match boxed_occurrences(text).last() {
        Some(&(start, cs, ce, end)) => {
            let to_chars = |b: usize| text[..b].chars().count();
            ExtractedAnswer {
                value: Some(text[cs..ce].trim().to_string()),
                span: Some((to_chars(start), to_chars(end))),
            }
        }
        None => ExtractedAnswer::none(),
    }
}

fn labels_match(a: &str, b: &str) -> bool {
    a.trim().to_lowercase() == b.trim().to_lowercase()
}

/// Case-insensitive, whitespace-trimmed comparison against the gold label.
pub fn is_answer_correct(pred: &ExtractedAnswer, gold: &str) -> bool {
    pred.value.as_deref().is_some_and(|v| labels_match(v, gold))
}

/// Binary reward: 1 iff the response ends (modulo whitespace) with a boxed
/// answer equal to `gold`.
pub fn reward(text: &str, gold: &str) -> f64 {
    let Some(&(_, cs, ce, end)) = boxed_occurrences(text).last() else {
        return 0.0;
    };
    if !text[end..].trim().is_empty() {
        return 0.0;
    }
    if labels_match(&text[cs..ce], gold) {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn extracts_single_boxed_label() {
        let e = extract_boxed_answer("so the answer is therefore \\boxed{C}");
        assert_eq!(e.value.as_deref(), Some("C"));
        let (s, t) = e.span.unwrap();
        assert_eq!(t - s, "\\boxed{C}".len());
    }

    #[test]
    fn absence_yields_none() {
        let e = extract_boxed_answer("no conclusion reached");
        assert_eq!(e, ExtractedAnswer::none());
    }

    #[test]
    fn last_occurrence_wins() {
        let e = extract_boxed_answer("\\boxed{A} ... revised: \\boxed{B}");
        assert_eq!(e.value.as_deref(), Some("B"));
    }

    #[test]
    fn unterminated_and_nested_are_malformed() {
        assert!(!extract_boxed_answer("\\boxed{C").is_some());
        assert!(!extract_boxed_answer("\\boxed{\\frac{1}{2}}").is_some());
        // a malformed trailing occurrence does not hide an earlier good one
        let e = extract_boxed_answer("\\boxed{D} then \\boxed{");
        assert_eq!(e.value.as_deref(), Some("D"));
    }

    #[test]
    fn span_counts_characters_not_bytes() {
        let e = extract_boxed_answer("é \\boxed{A}");
        assert_eq!(e.span, Some((2, 11)));
    }

    #[test]
    fn correctness_rules() {
        let c = extract_boxed_answer("\\boxed{C}");
        assert!(is_answer_correct(&c, "C"));
        assert!(!is_answer_correct(&ExtractedAnswer::none(), "A"));
        let lower = extract_boxed_answer("\\boxed{ c }");
        assert!(is_answer_correct(&lower, "C"));
    }

    #[test]
    fn reward_requires_boxed_at_end() {
        assert_eq!(reward("thinking...\\boxed{C}", "C"), 1.0);
        assert_eq!(reward("thinking...\\boxed{C}. Done.", "C"), 0.0);
        assert_eq!(reward("thinking...\\boxed{B}", "C"), 0.0);
        assert_eq!(reward("\\boxed{C}  \n\t", "C"), 1.0);
    }

    proptest! {
        #[test]
        fn reward_is_binary(text in ".{0,64}", gold in "[A-E]") {
            let r = reward(&text, &gold);
            prop_assert!(r == 0.0 || r == 1.0);
        }

        #[test]
        fn reward_one_implies_extracted_match(
            prefix in "[a-z \\\\{}]{0,24}",
            label in "[A-Ea-e]",
            gold in "[A-E]",
            tail in "[ \t\n]{0,4}",
        ) {
            let text = format!("{prefix}\\boxed{{{label}}}{tail}");
            let r = reward(&text, &gold);
            if r == 1.0 {
                let e = extract_boxed_answer(&text);
                prop_assert!(e.value.unwrap().eq_ignore_ascii_case(&gold));
            }
            // invariance to trailing whitespace and to label case
            prop_assert_eq!(r, reward(text.trim_end(), &gold));
            let flipped = format!("{prefix}\\boxed{{{}}}", label.to_uppercase());
            let lowered = format!("{prefix}\\boxed{{{}}}", label.to_lowercase());
            prop_assert_eq!(reward(&flipped, &gold), reward(&lowered, &gold));
        }
    }
}
