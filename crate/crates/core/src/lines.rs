//! Shared reader for the `key: value` line format used by scene, example
//! library, and gold-standard files.

pub(crate) struct Line<'a> {
    /// 1-based.
    pub number: usize,
    pub key: &'a str,
    pub value: &'a str,
}

/// Yields `key: value` lines, skipping blanks and `#` comments. A line
/// without a colon yields `Err(line_number)`.
pub(crate) fn keyed_lines(text: &str) -> impl Iterator<Item = Result<Line<'_>, usize>> {
    content_lines(text).map(|(number, line)| {
        let (key, value) = line.split_once(':').ok_or(number)?;
        Ok(Line {
            number,
            key: key.trim(),
            value: value.trim(),
        })
    })
}

/// Non-blank, non-comment lines with their 1-based numbers, trimmed.
pub(crate) fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub(crate) fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
