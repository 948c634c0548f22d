//! Email records and the two model inputs derived from them: content text
//! and header context features.

mod context;
mod html;
mod record;

pub use context::{extract_context, ContextFeatures, ParseWarning, CONTEXT_DIM};
pub use html::html_to_text;
pub use record::{load_dataset, parse_dataset, write_dataset, Dataset, EmailRecord, Group, LineError};

/// `subject + " " + body`, where the body is the plain-text part when one
/// exists and the text extracted from the HTML part otherwise.
pub fn build_content(record: &EmailRecord) -> String {
    let body = match (&record.body_text, &record.body_html) {
        (Some(text), Some(html)) if text.is_empty() => html_to_text(html),
        (Some(text), _) => text.clone(),
        (None, Some(html)) => html_to_text(html),
        (None, None) => String::new(),
    };
    format!("{} {}", record.subject, body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn content_examples() {
        let mut r = EmailRecord {
            subject: "hi".into(),
            body_text: Some("pay me".into()),
            ..Default::default()
        };
        assert_eq!(build_content(&r), "hi pay me");

        r.body_text = None;
        r.body_html = Some("<p>pay</p>".into());
        assert_eq!(build_content(&r), "hi pay");

        r.body_text = Some("plain".into());
        assert_eq!(build_content(&r), "hi plain");

        assert_eq!(build_content(&EmailRecord::default()), " ");
    }

    #[test]
    fn content_has_no_markup_from_html() {
        let r = EmailRecord {
            subject: "s".into(),
            body_html: Some("<div><b>x</b><br/><a href='y'>z</a></div>".into()),
            ..Default::default()
        };
        let c = build_content(&r);
        assert!(!c.contains('<') && !c.contains('>'), "{c}");
    }
}
