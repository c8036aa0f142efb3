//! Flat `key = value` text files with `#` comments.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct KvFile {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                msg: format!("expected `key = value`, found `{line}`"),
            })?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: "empty key".into(),
                });
            }
            if entries.insert(key.clone(), (idx + 1, v.trim().to_string())).is_some() {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    /// Parses `key` if present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| Error::Parse {
                line: *line,
                msg: format!("invalid value `{v}` for `{key}`"),
            }),
        }
    }

    /// Keys not in `known`, in sorted order.
    pub fn unknown_keys<'a>(&'a self, known: &[&str]) -> Vec<&'a str> {
        self.entries
            .keys()
            .map(String::as_str)
            .filter(|k| !known.contains(k))
            .collect()
    }

    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.unknown_keys(known).first() {
            None => Ok(()),
            Some(k) => Err(Error::Parse {
                line: self.entries[*k].0,
                msg: format!("unknown key `{k}`"),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let kv = KvFile::parse("# header\n a = 3 # trailing\n\nb=x\n").unwrap();
        assert_eq!(kv.get::<u32>("a").unwrap(), Some(3));
        assert_eq!(kv.get_str("b"), Some("x"));
        assert_eq!(kv.get::<u32>("missing").unwrap(), None);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = KvFile::parse("a = 1\nnot a pair\n").unwrap_err();
        assert!(err.to_string().starts_with("line 2"));
        assert!(KvFile::parse("a=1\na=2").is_err());
        let kv = KvFile::parse("a = x").unwrap();
        assert!(kv.get::<u32>("a").is_err());
        let kv = KvFile::parse("a = 1\nzzz = 2").unwrap();
        assert!(kv.reject_unknown(&["a"]).unwrap_err().to_string().contains("zzz"));
    }
}
