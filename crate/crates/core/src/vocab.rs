//! Character vocabulary: 26 letters, space, apostrophe, plus the CTC blank
//! at index 0. 29 classes total.

pub const BLANK: usize = 0;
pub const SPACE: usize = 27;
pub const APOSTROPHE: usize = 28;
pub const VOCAB_SIZE: usize = 29;

pub fn char_to_class(c: char) -> Option<usize> {
    match c {
        'A'..='Z' => Some(1 + (c as usize - 'A' as usize)),
        ' ' => Some(SPACE),
        '\'' => Some(APOSTROPHE),
        _ => None,
    }
}

pub fn class_to_char(k: usize) -> Option<char> {
    match k {
        1..=26 => Some((b'A' + (k as u8 - 1)) as char),
        SPACE => Some(' '),
        APOSTROPHE => Some('\''),
        _ => None,
    }
}

/// Upper-case letters, keep apostrophes, drop all other punctuation, and
/// collapse whitespace runs to single spaces.
pub fn canonicalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        let c = c.to_ascii_uppercase();
        if c.is_ascii_uppercase() || c == '\'' {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        } else if c.is_whitespace() {
            pending_space = true;
        }
        // everything else is punctuation: dropped
    }
    out
}

/// Canonical text to class indices. Input must already be canonical.
pub fn encode(text: &str) -> Option<Vec<usize>> {
    text.chars().map(char_to_class).collect()
}
