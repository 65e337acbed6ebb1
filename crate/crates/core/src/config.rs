//! Plain-text `key = value` configuration with `[section]` blocks.
//!
//! Sections may repeat (one primitive per block in scene files). Every key a
//! reader does not consume is reported as an error, so typos never pass
//! silently.

use std::str::FromStr;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfigDoc {
    pub sections: Vec<Section>,
}

impl ConfigDoc {
    /// Parses the document. Keys before the first header are an error;
    /// `#` starts a comment anywhere on a line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = ConfigDoc::default();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| Error::Config {
                    line: line_no,
                    message: format!("unterminated section header `{line}`"),
                })?;
                doc.sections.push(Section { name: name.trim().to_string(), line: line_no, entries: Vec::new() });
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let section = doc.sections.last_mut().ok_or_else(|| Error::Config {
                line: line_no,
                message: "key outside of any [section]".into(),
            })?;
            let key = key.trim().to_string();
            if section.entries.iter().any(|e| e.key == key) {
                return Err(Error::Config { line: line_no, message: format!("duplicate key `{key}`") });
            }
            section.entries.push(Entry { key, value: value.trim().to_string(), line: line_no });
        }
        Ok(doc)
    }

    pub fn sections_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Section> + 'a {
        self.sections.iter().filter(move |s| s.name == name)
    }

    /// The single section with this name, if present. Repeats are an error.
    pub fn unique<'a>(&'a self, name: &'a str) -> Result<Option<&'a Section>> {
        let mut it = self.sections_named(name);
        let first = it.next();
        if let Some(dup) = it.next() {
            return Err(Error::Config { line: dup.line, message: format!("section [{name}] given twice") });
        }
        Ok(first)
    }

    /// Rejects any section whose name is not in `known`.
    pub fn check_sections(&self, known: &[&str]) -> Result<()> {
        match self.sections.iter().find(|s| !known.contains(&s.name.as_str())) {
            Some(s) => Err(Error::Config { line: s.line, message: format!("unknown section [{}]", s.name) }),
            None => Ok(()),
        }
    }
}

/// Typed, consuming view over one section.
pub struct SectionReader<'a> {
    section: &'a Section,
    used: Vec<bool>,
}

impl<'a> SectionReader<'a> {
    pub fn new(section: &'a Section) -> Self {
        Self { section, used: vec![false; section.entries.len()] }
    }

    pub fn name(&self) -> &str {
        &self.section.name
    }

    fn take_raw(&mut self, key: &str) -> Option<&'a Entry> {
        let idx = self.section.entries.iter().position(|e| e.key == key)?;
        self.used[idx] = true;
        Some(&self.section.entries[idx])
    }

    pub fn opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take_raw(key) {
            None => Ok(None),
            Some(e) => e.value.parse::<T>().map(Some).map_err(|_| Error::Config {
                line: e.line,
                message: format!("cannot parse `{}` for key `{key}`", e.value),
            }),
        }
    }

    pub fn req<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let line = self.section.line;
        let name = self.section.name.clone();
        self.opt(key)?.ok_or_else(|| Error::Config {
            line,
            message: format!("missing key `{key}` in [{name}]"),
        })
    }

    pub fn or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    /// Comma-separated list of `N` numbers.
    pub fn vec_opt<const N: usize>(&mut self, key: &str) -> Result<Option<[f64; N]>> {
        let Some(e) = self.take_raw(key) else { return Ok(None) };
        let bad = || Error::Config { line: e.line, message: format!("key `{key}` needs {N} comma-separated numbers") };
        let parts: Vec<f64> = e
            .value
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        let arr: [f64; N] = parts.try_into().map_err(|_| bad())?;
        Ok(Some(arr))
    }

    /// Comma-separated list of any length.
    pub fn list_opt<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        let Some(e) = self.take_raw(key) else { return Ok(None) };
        e.value
            .split(',')
            .map(|p| p.trim().parse::<T>())
            .collect::<std::result::Result<Vec<T>, _>>()
            .map(Some)
            .map_err(|_| Error::Config { line: e.line, message: format!("cannot parse list `{}` for key `{key}`", e.value) })
    }

    pub fn vec_req<const N: usize>(&mut self, key: &str) -> Result<[f64; N]> {
        let line = self.section.line;
        self.vec_opt(key)?.ok_or_else(|| Error::Config { line, message: format!("missing key `{key}`") })
    }

    /// Errors on the first entry no accessor consumed.
    pub fn finish(self) -> Result<()> {
        match self.used.iter().position(|u| !u) {
            Some(i) => Err(Error::UnknownKey {
                section: self.section.name.clone(),
                key: self.section.entries[i].key.clone(),
            }),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = "
# comment
[scene]
bounds = 30   # trailing
[box]
min = -1, -1, 0
max = 1, 1, 2
class = 3
[box]
min = 4,4,0
max = 5,5,1
class = 1
";

    #[test]
    fn parses_repeated_sections() {
        let doc = ConfigDoc::parse(DOC).unwrap();
        assert_eq!(doc.sections.len(), 3);
        assert_eq!(doc.sections_named("box").count(), 2);
        let mut r = SectionReader::new(doc.unique("scene").unwrap().unwrap());
        assert_eq!(r.req::<f64>("bounds").unwrap(), 30.0);
        r.finish().unwrap();
        let b = doc.sections_named("box").next().unwrap();
        let mut r = SectionReader::new(b);
        assert_eq!(r.vec_req::<3>("min").unwrap(), [-1.0, -1.0, 0.0]);
        assert!(matches!(r.finish(), Err(Error::UnknownKey { key, .. }) if key == "max"));
    }

    #[test]
    fn rejects_malformed() {
        assert!(ConfigDoc::parse("x = 1").is_err());
        assert!(ConfigDoc::parse("[a\nx=1").is_err());
        assert!(ConfigDoc::parse("[a]\nnovalue").is_err());
        assert!(ConfigDoc::parse("[a]\nx=1\nx=2").is_err());
        let doc = ConfigDoc::parse("[a]\nx = abc\n[a]").unwrap();
        assert!(doc.unique("a").is_err());
        let mut r = SectionReader::new(&doc.sections[0]);
        assert!(r.req::<f64>("x").is_err());
        assert!(doc.check_sections(&["b"]).is_err());
    }
}
