//! Flat `key = value` text with dotted section paths, used for model and
//! training configs and embedded verbatim in checkpoints.
//!
//! ```text
//! # comment
//! stage1.block0.kernel = 3
//! ablation.residual_off = false
//! ```

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{config_err, Result};

/// Ordered key/value document. Later duplicates overwrite earlier ones.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvDoc {
    entries: Vec<(String, String)>,
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = Self::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(config_err(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1)));
            };
            let key = k.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(config_err(format!("line {}: invalid key {key:?}", lineno + 1)));
            }
            doc.set(key, v.trim());
        }
        Ok(doc)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.get(key).is_some()
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|(k, _)| !k.starts_with(prefix));
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Typed lookup of a required key.
    pub fn req<V: FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.get(key).ok_or_else(|| config_err(format!("missing key `{key}`")))?;
        raw.parse().map_err(|_| config_err(format!("key `{key}`: cannot parse {raw:?}")))
    }

    /// Typed lookup with a default for absent keys.
    pub fn opt<V: FromStr>(&self, key: &str, default: V) -> Result<V> {
        if self.contains(key) {
            self.req(key)
        } else {
            Ok(default)
        }
    }

    /// Entries whose key starts with `prefix`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> KvDoc {
        KvDoc {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Overlays `other` on top of `self`.
    pub fn merge(&mut self, other: &KvDoc) {
        for (k, v) in &other.entries {
            self.set(k, v);
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_round_trip() {
        let doc = KvDoc::parse("# model\na.b = 1\n\nc = true # trailing\na.b = 2\n").unwrap();
        assert_eq!(doc.get("a.b"), Some("2"));
        assert_eq!(doc.req::<bool>("c").unwrap(), true);
        assert_eq!(KvDoc::parse(&doc.to_text()).unwrap(), doc);
    }

    #[test]
    fn errors_name_the_line_and_key() {
        let e = KvDoc::parse("a = 1\nbroken\n").unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
        let doc = KvDoc::parse("n = x").unwrap();
        assert!(doc.req::<usize>("n").unwrap_err().to_string().contains("`n`"));
        assert!(doc.req::<usize>("m").is_err());
        assert_eq!(doc.opt("m", 4usize).unwrap(), 4);
    }

    #[test]
    fn sections() {
        let doc = KvDoc::parse("train.lr = 1\ntrain.epochs = 3\nmodel = x").unwrap();
        let s = doc.section("train.");
        assert_eq!(s.keys().collect::<Vec<_>>(), ["lr", "epochs"]);
    }
}
