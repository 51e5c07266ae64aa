//! Plain-text `key = value` maps.
//!
//! Used for model configs embedded in checkpoints and as the base of the
//! toolkit's config files. Lines starting with `#` are comments; emitted text
//! is sorted by key so it is byte-stable.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Display;
use core::str::FromStr;

use crate::error::{invalid_arg, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Kv(BTreeMap<String, String>);

impl Kv {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid_arg!("line {}: expected `key = value`, got `{}`", n + 1, line))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(invalid_arg!("line {}: empty key", n + 1));
            }
            out.0.insert(k.to_string(), v.trim().to_string());
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.0 {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn set_list<T: Display>(&mut self, key: &str, values: &[T]) {
        let joined: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        self.set(key, joined.join(","));
    }

    pub fn contains(&self, key: &str) -> bool {
        self.0.contains_key(key)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| invalid_arg!("cannot parse `{}` for key `{}`", v, key)),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) if v.is_empty() => Ok(Some(Vec::new())),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| invalid_arg!("cannot parse `{}` in list `{}`", p, key))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    pub fn get_list_or<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        Ok(self.get_list(key)?.unwrap_or(default))
    }

    /// Overlays `other` on top of `self`.
    pub fn merge(&mut self, other: &Kv) {
        for (k, v) in &other.0 {
            self.0.insert(k.clone(), v.clone());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.0.remove(key)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn parse_and_emit() {
        let kv = Kv::parse("# comment\n b = 2\na=1\n\nlist = 1, 2,3\n").unwrap();
        assert_eq!(kv.get::<u32>("a").unwrap(), Some(1));
        assert_eq!(kv.get_list::<u32>("list").unwrap(), Some(vec![1, 2, 3]));
        assert_eq!(kv.to_text(), "a = 1\nb = 2\nlist = 1, 2,3\n");
        assert_eq!(Kv::parse(&kv.to_text()).unwrap(), kv);
    }

    #[test]
    fn errors_name_the_key() {
        let kv = Kv::parse("x = nope").unwrap();
        let err = kv.get::<f64>("x").unwrap_err();
        assert!(alloc::format!("{err}").contains("`x`"));
        assert!(Kv::parse("novalue").is_err());
    }
}
