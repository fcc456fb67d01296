use crate::distributions::TokenId;

/// Tokens between the last complete `open ... close` pair. A close marker
/// with no open marker before it is ignored.
pub fn extract_answer(tokens: &[TokenId], open: TokenId, close: TokenId) -> Option<&[TokenId]> {
    let mut start = None;
    let mut found = None;
    for (i, &t) in tokens.iter().enumerate() {
        if t == open {
            start = Some(i + 1);
        } else if t == close {
            if let Some(s) = start.take() {
                found = Some(&tokens[s..i]);
            }
        }
    }
    found
}
