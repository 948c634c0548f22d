use serde::{Deserialize, Serialize};

use super::EmailRecord;

/// Width of the context vector fed to the classifier head.
pub const CONTEXT_DIM: usize = 4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextFeatures {
    pub internal: u8,
    pub external: u8,
    pub n_recipients: u32,
    pub n_cc: u32,
}

impl ContextFeatures {
    /// Model input: the two flags, then `ln(1 + n)` of each count.
    pub fn to_vector(&self) -> [f64; CONTEXT_DIM] {
        [
            f64::from(self.internal),
            f64::from(self.external),
            f64::from(self.n_recipients).ln_1p(),
            f64::from(self.n_cc).ln_1p(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseWarning(pub String);

/// Domain of an address such as `a@acme.com` or `Name <a@acme.com>`.
fn domain(addr: &str) -> Option<String> {
    let addr = addr.trim();
    let addr = match (addr.rfind('<'), addr.rfind('>')) {
        (Some(open), Some(close)) if open < close => &addr[open + 1..close],
        _ => addr,
    };
    let at = addr.rfind('@')?;
    if at == 0 {
        return None;
    }
    let d = addr[at + 1..].trim().trim_end_matches('.').to_lowercase();
    (!d.is_empty() && !d.contains(char::is_whitespace)).then_some(d)
}

/// Header context of one message.
///
/// The message is internal when the sender's domain matches the domain of
/// every To and Cc recipient (case-insensitive, trailing dots ignored).
/// Unparseable senders or recipients, or no recipients at all, fall back
/// to external with a warning.
pub fn extract_context(record: &EmailRecord) -> (ContextFeatures, Option<ParseWarning>) {
    let mut features = ContextFeatures {
        internal: 0,
        external: 1,
        n_recipients: record.to_addrs.len() as u32,
        n_cc: record.cc_addrs.len() as u32,
    };
    let Some(sender) = domain(&record.from_addr) else {
        return (
            features,
            Some(ParseWarning(format!("unparseable sender {:?}", record.from_addr))),
        );
    };
    if record.to_addrs.is_empty() {
        return (features, Some(ParseWarning("no recipients".into())));
    }
    let mut all_same = true;
    for addr in record.to_addrs.iter().chain(&record.cc_addrs) {
        match domain(addr) {
            Some(d) => all_same &= d == sender,
            None => {
                return (features, Some(ParseWarning(format!("unparseable recipient {addr:?}"))));
            }
        }
    }
    if all_same {
        features.internal = 1;
        features.external = 0;
    }
    (features, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(from: &str, to: &[&str], cc: &[&str]) -> EmailRecord {
        EmailRecord {
            from_addr: from.into(),
            to_addrs: to.iter().map(|s| s.to_string()).collect(),
            cc_addrs: cc.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        }
    }

    #[test]
    fn same_domain_is_internal() {
        let (f, w) = extract_context(&rec("a@acme.com", &["b@acme.com"], &[]));
        assert_eq!(f, ContextFeatures { internal: 1, external: 0, n_recipients: 1, n_cc: 0 });
        assert!(w.is_none());
    }

    #[test]
    fn any_foreign_domain_is_external() {
        let (f, _) = extract_context(&rec("a@acme.com", &["b@other.org", "c@acme.com"], &["d@x.io", "e@x.io"]));
        assert_eq!(f, ContextFeatures { internal: 0, external: 1, n_recipients: 2, n_cc: 2 });
    }

    #[test]
    fn degenerate_input_warns() {
        let (f, w) = extract_context(&rec("", &[], &[]));
        assert_eq!(f, ContextFeatures { internal: 0, external: 1, n_recipients: 0, n_cc: 0 });
        assert!(w.is_some());
    }

    #[test]
    fn case_display_names_and_trailing_dots() {
        let (f, w) = extract_context(&rec("Boss <Boss@ACME.com.>", &["b@acme.COM"], &[]));
        assert_eq!((f.internal, f.external), (1, 0));
        assert!(w.is_none());
    }

    #[test]
    fn log_scaled_vector() {
        let f = ContextFeatures { internal: 1, external: 0, n_recipients: 0, n_cc: 3 };
        let v = f.to_vector();
        assert_eq!(v[0], 1.0);
        assert_eq!(v[2], 0.0);
        assert!((v[3] - 4f64.ln()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn flags_are_exclusive(
            from in "[a-c]{1,3}@[xy]\\.com",
            to in proptest::collection::vec("[a-c]{1,3}@[xy]\\.com", 1..4),
            cc in proptest::collection::vec("[a-c]{1,3}@[xy]\\.com", 0..3),
        ) {
            let r = EmailRecord { from_addr: from, to_addrs: to.clone(), cc_addrs: cc.clone(), ..Default::default() };
            let (f, w) = extract_context(&r);
            prop_assert!(w.is_none());
            prop_assert_eq!(f.internal + f.external, 1);
            prop_assert_eq!(f.n_recipients as usize, to.len());
            prop_assert_eq!(f.n_cc as usize, cc.len());
        }
    }
}
