// SPDX-License-Identifier: MIT OR Apache-2.0

//! The shipped list of 50 steering prompt prefixes.

const PREFIXES: &str = include_str!("../data/prefixes.txt");

/// Neutral prompt used for output scoring.
pub const NEUTRAL_PROMPT: &str = "In my experience,";

pub fn default_prefixes() -> Vec<String> {
    PREFIXES.lines().filter(|l| !l.is_empty()).map(str::to_string).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifty_prefixes() {
        let p = default_prefixes();
        assert_eq!(p.len(), 50);
        assert_eq!(p[0], "Findings show that");
        assert!(p.iter().all(|s| s.trim() == s));
    }
}
