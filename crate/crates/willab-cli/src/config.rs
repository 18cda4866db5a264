//! Scenario configuration: a flat key-value tree with `[section]` headers,
//! parsed with full error collection (every problem is reported, not just
//! the first).

use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone)]
pub struct ConfigError {
    pub line: usize,
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line > 0 {
            write!(f, "line {}: {}: {}", self.line, self.field, self.message)
        } else {
            write!(f, "{}: {}", self.field, self.message)
        }
    }
}

/// Raw parsed tree: section -> key -> (value, line).
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    pub sections: BTreeMap<String, BTreeMap<String, (String, usize)>>,
    /// Canonical text used for the config hash.
    pub canonical: String,
}

pub fn parse_raw(text: &str) -> Result<RawConfig, Vec<ConfigError>> {
    let mut cfg = RawConfig::default();
    let mut errors = Vec::new();
    let mut section = String::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            match name.strip_suffix(']') {
                Some(name) if !name.trim().is_empty() => {
                    section = name.trim().to_string();
                    cfg.sections.entry(section.clone()).or_default();
                }
                _ => errors.push(ConfigError {
                    line: line_no,
                    field: line.to_string(),
                    message: "malformed section header".into(),
                }),
            }
            continue;
        }
        match line.split_once('=') {
            Some((key, value)) => {
                let key = key.trim().to_string();
                if key.is_empty() {
                    errors.push(ConfigError {
                        line: line_no,
                        field: line.to_string(),
                        message: "empty key".into(),
                    });
                    continue;
                }
                if section.is_empty() {
                    errors.push(ConfigError {
                        line: line_no,
                        field: key,
                        message: "key outside of any [section]".into(),
                    });
                    continue;
                }
                cfg.sections
                    .get_mut(&section)
                    .unwrap()
                    .insert(key, (value.trim().to_string(), line_no));
            }
            None => errors.push(ConfigError {
                line: line_no,
                field: line.to_string(),
                message: "expected `key = value`".into(),
            }),
        }
    }
    // canonical form: sorted sections and keys
    let mut canonical = String::new();
    for (name, entries) in &cfg.sections {
        canonical.push_str(&format!("[{name}]\n"));
        for (k, (v, _)) in entries {
            canonical.push_str(&format!("{k} = {v}\n"));
        }
    }
    cfg.canonical = canonical;
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(errors)
    }
}

/// Typed accessor that collects errors instead of failing fast.
pub struct Reader<'a> {
    raw: &'a RawConfig,
    pub errors: Vec<ConfigError>,
}

impl<'a> Reader<'a> {
    pub fn new(raw: &'a RawConfig) -> Self {
        Self { raw, errors: Vec::new() }
    }

    fn entry(&self, section: &str, key: &str) -> Option<&'a (String, usize)> {
        self.raw.sections.get(section).and_then(|s| s.get(key))
    }

    pub fn has(&self, section: &str, key: &str) -> bool {
        self.entry(section, key).is_some()
    }

    pub fn string(&mut self, section: &str, key: &str, default: &str) -> String {
        match self.entry(section, key) {
            Some((v, _)) => v.clone(),
            None => default.to_string(),
        }
    }

    pub fn require_string(&mut self, section: &str, key: &str) -> String {
        match self.entry(section, key) {
            Some((v, _)) => v.clone(),
            None => {
                self.errors.push(ConfigError {
                    line: 0,
                    field: format!("{section}.{key}"),
                    message: "required field is missing".into(),
                });
                String::new()
            }
        }
    }

    pub fn f64(&mut self, section: &str, key: &str, default: f64) -> f64 {
        match self.entry(section, key) {
            None => default,
            Some((v, line)) => match v.parse::<f64>() {
                Ok(x) => x,
                Err(_) => {
                    self.errors.push(ConfigError {
                        line: *line,
                        field: format!("{section}.{key}"),
                        message: format!("`{v}` is not a number"),
                    });
                    default
                }
            },
        }
    }

    pub fn f64_opt(&mut self, section: &str, key: &str) -> Option<f64> {
        self.entry(section, key).map(|(v, line)| match v.parse::<f64>() {
            Ok(x) => x,
            Err(_) => {
                self.errors.push(ConfigError {
                    line: *line,
                    field: format!("{section}.{key}"),
                    message: format!("`{v}` is not a number"),
                });
                0.0
            }
        })
    }

    pub fn usize(&mut self, section: &str, key: &str, default: usize) -> usize {
        match self.entry(section, key) {
            None => default,
            Some((v, line)) => match v.parse::<usize>() {
                Ok(x) => x,
                Err(_) => {
                    self.errors.push(ConfigError {
                        line: *line,
                        field: format!("{section}.{key}"),
                        message: format!("`{v}` is not a nonnegative integer"),
                    });
                    default
                }
            },
        }
    }

    pub fn bool(&mut self, section: &str, key: &str, default: bool) -> bool {
        match self.entry(section, key) {
            None => default,
            Some((v, line)) => match v.as_str() {
                "true" | "yes" | "1" => true,
                "false" | "no" | "0" => false,
                _ => {
                    self.errors.push(ConfigError {
                        line: *line,
                        field: format!("{section}.{key}"),
                        message: format!("`{v}` is not a boolean"),
                    });
                    default
                }
            },
        }
    }

    pub fn u64_opt(&mut self, section: &str, key: &str) -> Option<u64> {
        self.entry(section, key).map(|(v, line)| match v.parse::<u64>() {
            Ok(x) => x,
            Err(_) => {
                self.errors.push(ConfigError {
                    line: *line,
                    field: format!("{section}.{key}"),
                    message: format!("`{v}` is not an unsigned integer"),
                });
                0
            }
        })
    }

    pub fn f64_list(&mut self, section: &str, key: &str, default: &[f64]) -> Vec<f64> {
        match self.entry(section, key) {
            None => default.to_vec(),
            Some((v, line)) => {
                let mut out = Vec::new();
                for token in v.split_whitespace() {
                    match token.parse::<f64>() {
                        Ok(x) => out.push(x),
                        Err(_) => self.errors.push(ConfigError {
                            line: *line,
                            field: format!("{section}.{key}"),
                            message: format!("`{token}` is not a number"),
                        }),
                    }
                }
                out
            }
        }
    }

    pub fn vec3(&mut self, section: &str, key: &str, default: [f64; 3]) -> [f64; 3] {
        let list = self.f64_list(section, key, &default);
        if list.len() != 3 {
            if self.has(section, key) {
                self.errors.push(ConfigError {
                    line: 0,
                    field: format!("{section}.{key}"),
                    message: format!("expected 3 components, got {}", list.len()),
                });
            }
            return default;
        }
        [list[0], list[1], list[2]]
    }

    pub fn reject_unknown_value(&mut self, section: &str, key: &str, value: &str, allowed: &[&str]) {
        if !allowed.contains(&value) {
            self.errors.push(ConfigError {
                line: 0,
                field: format!("{section}.{key}"),
                message: format!("`{value}` is not one of {allowed:?}"),
            });
        }
    }
}
