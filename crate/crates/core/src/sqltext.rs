//! Lexical helpers over SQL text: statement splitting that respects quotes and comments.

/// Byte ranges of the `;`-separated statements in `sql`, ignoring separators
/// inside string literals, quoted identifiers and comments.
fn statement_spans(sql: &str) -> Vec<(usize, usize)> {
    let bytes = sql.as_bytes();
    let mut spans = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            q @ (b'\'' | b'"' | b'`') => {
                i += 1;
                while i < bytes.len() {
                    if bytes[i] == q {
                        // doubled quote is an escaped quote
                        if bytes.get(i + 1) == Some(&q) {
                            i += 2;
                            continue;
                        }
                        break;
                    }
                    i += 1;
                }
            }
            b'[' => {
                while i < bytes.len() && bytes[i] != b']' {
                    i += 1;
                }
            }
            b'-' if bytes.get(i + 1) == Some(&b'-') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            b'/' if bytes.get(i + 1) == Some(&b'*') => {
                i += 2;
                while i < bytes.len() && !(bytes[i] == b'*' && bytes.get(i + 1) == Some(&b'/')) {
                    i += 1;
                }
                i += 1;
            }
            b';' => {
                spans.push((start, i));
                start = i + 1;
            }
            _ => {}
        }
        i += 1;
    }
    if start < bytes.len() {
        spans.push((start, bytes.len()));
    }
    spans
}

fn is_blank(fragment: &str) -> bool {
    strip_comments(fragment).trim().is_empty()
}

fn strip_comments(fragment: &str) -> String {
    let mut out = String::with_capacity(fragment.len());
    let mut rest = fragment;
    while !rest.is_empty() {
        if let Some(r) = rest.strip_prefix("--") {
            rest = r.find('\n').map_or("", |n| &r[n..]);
        } else if let Some(r) = rest.strip_prefix("/*") {
            rest = r.find("*/").map_or("", |n| &r[n + 2..]);
        } else {
            let ch = rest.chars().next().unwrap();
            out.push(ch);
            rest = &rest[ch.len_utf8()..];
        }
    }
    out
}

/// The first non-empty statement, trimmed and without its terminating `;`.
pub fn first_statement(sql: &str) -> Option<&str> {
    statement_spans(sql)
        .into_iter()
        .map(|(s, e)| sql[s..e].trim())
        .find(|stmt| !is_blank(stmt))
}

/// Number of non-empty statements.
pub fn statement_count(sql: &str) -> usize {
    statement_spans(sql)
        .into_iter()
        .filter(|&(s, e)| !is_blank(&sql[s..e]))
        .count()
}
