//! Plain-text `key = value` documents with `[section]` headers.
//!
//! Sections and keys may repeat; order is preserved. `#` starts a comment.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Section {
    pub name: String,
    pub entries: Vec<(String, String)>,
}

impl Section {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.entries.push((key.into(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .iter()
            .filter(move |(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("[{}] is missing `{key}`", self.name)))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("[{}] `{key}`: cannot parse `{raw}`", self.name)))
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(_) => self.parse(key),
        }
    }

    pub fn floats(&self, key: &str) -> Result<Vec<f64>> {
        parse_floats(self.require(key)?)
            .map_err(|e| Error::Config(format!("[{}] `{key}`: {e}", self.name)))
    }
}

/// Parses a whitespace- or comma-separated list of numbers.
pub fn parse_floats(raw: &str) -> std::result::Result<Vec<f64>, String> {
    raw.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("`{s}` is not a number")))
        .collect()
}

pub fn join_floats(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v}"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Document {
    pub sections: Vec<Section>,
}

impl Document {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: Vec<Section> = vec![Section::new("")];
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| {
                    Error::Config(format!("line {}: unterminated section header", lineno + 1))
                })?;
                sections.push(Section::new(name.trim()));
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            sections
                .last_mut()
                .unwrap()
                .push(k.trim(), v.trim());
        }
        if sections[0].entries.is_empty() {
            sections.remove(0);
        }
        Ok(Self { sections })
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn sections_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Section> + 'a {
        self.sections.iter().filter(move |s| s.name == name)
    }

    /// Sections whose header is `prefix` followed by a space and a label.
    pub fn sections_with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a Section)> + 'a {
        self.sections.iter().filter_map(move |s| {
            s.name
                .strip_prefix(prefix)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(|label| (label.trim(), s))
        })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            if !s.name.is_empty() {
                writeln!(out, "[{}]", s.name).unwrap();
            }
            for (k, v) in &s.entries {
                writeln!(out, "{k} = {v}").unwrap();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_repeats() {
        let doc = Document::parse(
            "top = 1\n# note\n[a]\nx = 1 2, 3\nx = 4\n[camera front]\nfx = 10 # focal\n",
        )
        .unwrap();
        assert_eq!(doc.sections.len(), 3);
        let a = doc.section("a").unwrap();
        assert_eq!(a.get("x"), Some("4"));
        assert_eq!(a.get_all("x").count(), 2);
        assert_eq!(parse_floats("1 2, 3").unwrap(), vec![1.0, 2.0, 3.0]);
        let (label, cam) = doc.sections_with_prefix("camera").next().unwrap();
        assert_eq!(label, "front");
        assert_eq!(cam.parse::<f64>("fx").unwrap(), 10.0);
    }

    #[test]
    fn render_round_trips() {
        let text = "[a]\nx = 0.1 0.30000000000000004\n\n[b]\ny = z\n";
        let doc = Document::parse(text).unwrap();
        assert_eq!(doc.render(), text);
        let floats = doc.section("a").unwrap().floats("x").unwrap();
        assert_eq!(join_floats(&floats), "0.1 0.30000000000000004");
    }

    #[test]
    fn reports_bad_lines() {
        assert!(Document::parse("[open\n").is_err());
        assert!(Document::parse("novalue\n").is_err());
        let doc = Document::parse("[s]\nk = abc\n").unwrap();
        assert!(doc.section("s").unwrap().parse::<f64>("k").is_err());
        assert!(doc.section("s").unwrap().require("missing").is_err());
    }
}
