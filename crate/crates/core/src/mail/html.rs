//! Markup stripping for HTML-only message bodies.
//!
//! Inline tags vanish without a trace so `<span>p</span><span>ayment</span>`
//! reads as one word; block-level tags become word breaks.

const BLOCK_TAGS: &[&str] = &[
    "address", "article", "aside", "blockquote", "body", "br", "caption", "center", "dd", "div", "dl", "dt",
    "fieldset", "figcaption", "figure", "footer", "form", "h1", "h2", "h3", "h4", "h5", "h6", "head", "header",
    "hr", "html", "li", "main", "nav", "ol", "option", "p", "pre", "section", "table", "tbody", "td", "tfoot",
    "th", "thead", "title", "tr", "ul",
];

/// Elements whose content is never text.
const RAW_TAGS: &[&str] = &["script", "style", "noscript", "template"];

fn find_ci(haystack: &[char], from: usize, needle: &str) -> Option<usize> {
    let needle: Vec<char> = needle.chars().collect();
    if needle.is_empty() || haystack.len() < needle.len() {
        return None;
    }
    (from..=haystack.len() - needle.len()).find(|&i| {
        haystack[i..i + needle.len()]
            .iter()
            .zip(&needle)
            .all(|(a, b)| a.to_ascii_lowercase() == *b)
    })
}

fn decode_entity(chars: &[char], start: usize) -> Option<(String, usize)> {
    // chars[start] == '&'
    let end = (start + 1..chars.len().min(start + 12)).find(|&i| chars[i] == ';')?;
    let name: String = chars[start + 1..end].iter().collect();
    let decoded = if let Some(num) = name.strip_prefix('#') {
        let code = match num.strip_prefix(['x', 'X']) {
            Some(hex) => u32::from_str_radix(hex, 16).ok()?,
            None => num.parse::<u32>().ok()?,
        };
        char::from_u32(code)?.to_string()
    } else {
        match name.as_str() {
            "amp" => "&",
            "lt" => "<",
            "gt" => ">",
            "quot" => "\"",
            "apos" => "'",
            "nbsp" => " ",
            _ => return None,
        }
        .to_string()
    };
    Some((decoded, end + 1))
}

/// Extracts readable text from HTML.
///
/// Script and style contents are dropped, comments removed, common
/// entities decoded, block-level tags turned into spaces, and whitespace
/// runs collapsed. Malformed markup is handled best-effort: an unclosed
/// tag swallows the rest of the input.
pub fn html_to_text(html: &str) -> String {
    let chars: Vec<char> = html.chars().collect();
    let mut out = String::with_capacity(html.len());
    let mut i = 0;
    while i < chars.len() {
        match chars[i] {
            '<' => {
                if chars[i..].starts_with(&['<', '!', '-', '-']) {
                    i = find_ci(&chars, i + 4, "-->").map_or(chars.len(), |e| e + 3);
                    continue;
                }
                let mut j = i + 1;
                let closing = chars.get(j) == Some(&'/');
                if closing {
                    j += 1;
                }
                let name_start = j;
                while j < chars.len() && (chars[j].is_ascii_alphanumeric()) {
                    j += 1;
                }
                let name: String = chars[name_start..j].iter().collect::<String>().to_ascii_lowercase();
                let declaration = !closing && matches!(chars.get(i + 1), Some('!') | Some('?'));
                if name.is_empty() && !declaration {
                    // a bare '<' in text
                    out.push('<');
                    i += 1;
                    continue;
                }
                let tag_end = (j..chars.len()).find(|&k| chars[k] == '>').map_or(chars.len(), |k| k + 1);
                if !closing && RAW_TAGS.contains(&name.as_str()) {
                    let close = format!("</{name}");
                    i = match find_ci(&chars, tag_end, &close) {
                        Some(c) => (c..chars.len()).find(|&k| chars[k] == '>').map_or(chars.len(), |k| k + 1),
                        None => chars.len(),
                    };
                    continue;
                }
                if BLOCK_TAGS.contains(&name.as_str()) {
                    out.push(' ');
                }
                i = tag_end;
            }
            '&' => match decode_entity(&chars, i) {
                Some((text, next)) => {
                    out.push_str(&text);
                    i = next;
                }
                None => {
                    out.push('&');
                    i += 1;
                }
            },
            c => {
                out.push(c);
                i += 1;
            }
        }
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}
