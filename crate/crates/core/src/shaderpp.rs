//! A small preprocessor for WGSL templates.
//!
//! Directives occupy whole lines and start with `#`:
//!
//! ```text
//! #define NAME value      (value defaults to "1")
//! #undef NAME
//! #include "path"
//! #ifdef NAME / #ifndef NAME / #else / #endif
//! ```
//!
//! On every other line `{{NAME}}` sites are replaced with the value of `NAME`
//! (a missing value is an error) and then every `#define`d identifier is
//! substituted as a whole token. Only object-like macros exist.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::PathBuf;

use indexmap::IndexMap;
use thiserror::Error;

/// Template text plus the logical path used in diagnostics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSource {
    pub text: String,
    pub origin: String,
}

impl TemplateSource {
    pub fn new(origin: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            origin: origin.into(),
        }
    }
}

/// A position in a template, 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SourceLoc {
    pub origin: String,
    pub line: usize,
}

impl fmt::Display for SourceLoc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.origin, self.line)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PreprocessError {
    #[error("{0}: unbalanced conditional")]
    UnbalancedConditional(SourceLoc),
    #[error("include cycle: {}", .0.join(" -> "))]
    IncludeCycle(Vec<String>),
    #[error("{at}: include \"{path}\" not found")]
    IncludeNotFound { path: String, at: SourceLoc },
    #[error("{at}: no value for interpolation {{{{{name}}}}}")]
    UnresolvedInterpolation { name: String, at: SourceLoc },
    #[error("{at}: malformed directive `{text}`")]
    MalformedDirective { text: String, at: SourceLoc },
    #[error("invalid identifier `{0}`")]
    InvalidIdentifier(String),
}

pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_') && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Ordered `IDENT -> value` map; flags map to `"1"`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DefineSet(IndexMap<String, String>);

impl DefineSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, name: &str, value: impl fmt::Display) -> Result<&mut Self, PreprocessError> {
        if !is_identifier(name) {
            return Err(PreprocessError::InvalidIdentifier(name.to_string()));
        }
        self.0.insert(name.to_string(), value.to_string());
        Ok(self)
    }

    pub fn flag(&mut self, name: &str) -> Result<&mut Self, PreprocessError> {
        self.set(name, "1")
    }

    pub fn with(mut self, name: &str, value: impl fmt::Display) -> Self {
        self.set(name, value).expect("invalid identifier");
        self
    }

    pub fn with_flag(self, name: &str) -> Self {
        self.with(name, "1")
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<String> {
        self.0.shift_remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Looks up `#include` targets relative to a single template root.
pub trait TemplateResolver {
    fn resolve(&self, path: &str) -> Option<TemplateSource>;
}

impl TemplateResolver for HashMap<String, String> {
    fn resolve(&self, path: &str) -> Option<TemplateSource> {
        self.get(path).map(|t| TemplateSource::new(path, t.clone()))
    }
}

impl TemplateResolver for [(&'static str, &'static str)] {
    fn resolve(&self, path: &str) -> Option<TemplateSource> {
        self.iter().find(|(p, _)| *p == path).map(|(p, t)| TemplateSource::new(*p, *t))
    }
}

/// Resolves includes from files under a directory.
#[derive(Debug, Clone)]
pub struct DirResolver {
    pub root: PathBuf,
}

impl TemplateResolver for DirResolver {
    fn resolve(&self, path: &str) -> Option<TemplateSource> {
        if path.split('/').any(|c| c == "..") {
            return None;
        }
        let text = std::fs::read_to_string(self.root.join(path)).ok()?;
        Some(TemplateSource::new(path, text))
    }
}

/// Resolver with nothing to include.
pub struct NoIncludes;

impl TemplateResolver for NoIncludes {
    fn resolve(&self, _path: &str) -> Option<TemplateSource> {
        None
    }
}

/// Preprocessed text plus the template location of every output line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Preprocessed {
    pub text: String,
    pub lines: Vec<SourceLoc>,
}

impl Preprocessed {
    /// Template location of 1-based output line `line`.
    pub fn origin_of(&self, line: usize) -> Option<&SourceLoc> {
        line.checked_sub(1).and_then(|i| self.lines.get(i))
    }
}

pub fn preprocess(src: &TemplateSource, defines: &DefineSet, resolver: &dyn TemplateResolver) -> Result<String, PreprocessError> {
    preprocess_mapped(src, defines, resolver).map(|p| p.text)
}

pub fn preprocess_mapped(
    src: &TemplateSource,
    defines: &DefineSet,
    resolver: &dyn TemplateResolver,
) -> Result<Preprocessed, PreprocessError> {
    let mut state = Expander {
        defines: defines.0.clone(),
        resolver,
        stack: Vec::new(),
        out: Preprocessed {
            text: String::new(),
            lines: Vec::new(),
        },
    };
    state.expand(src, true)?;
    Ok(state.out)
}

enum Directive<'a> {
    Define(&'a str, &'a str),
    Undef(&'a str),
    Include(&'a str),
    Ifdef(&'a str),
    Ifndef(&'a str),
    Else,
    Endif,
}

fn parse_directive<'a>(line: &'a str, at: &SourceLoc) -> Result<Directive<'a>, PreprocessError> {
    let body = line.trim_start().trim_start_matches('#');
    let (word, rest) = body
        .split_once(char::is_whitespace)
        .map(|(w, r)| (w, r.trim()))
        .unwrap_or((body.trim(), ""));
    let malformed = || PreprocessError::MalformedDirective {
        text: line.trim().to_string(),
        at: at.clone(),
    };
    let ident = |s: &'a str| if is_identifier(s) { Ok(s) } else { Err(malformed()) };
    match word {
        "define" => {
            let (name, value) = rest
                .split_once(char::is_whitespace)
                .map(|(n, v)| (n, v.trim()))
                .unwrap_or((rest, ""));
            Ok(Directive::Define(ident(name)?, if value.is_empty() { "1" } else { value }))
        }
        "undef" => Ok(Directive::Undef(ident(rest)?)),
        "ifdef" => Ok(Directive::Ifdef(ident(rest)?)),
        "ifndef" => Ok(Directive::Ifndef(ident(rest)?)),
        "else" if rest.is_empty() => Ok(Directive::Else),
        "endif" if rest.is_empty() => Ok(Directive::Endif),
        "include" => {
            let path = rest
                .strip_prefix('"')
                .and_then(|r| r.strip_suffix('"'))
                .filter(|p| !p.is_empty() && !p.contains('"'))
                .ok_or_else(malformed)?;
            Ok(Directive::Include(path))
        }
        _ => Err(malformed()),
    }
}

struct Frame {
    parent_active: bool,
    taken: bool,
    seen_else: bool,
    opened_at: SourceLoc,
}

struct Expander<'r> {
    defines: IndexMap<String, String>,
    resolver: &'r dyn TemplateResolver,
    stack: Vec<String>,
    out: Preprocessed,
}

/// Lines with a flag telling whether the source line ended in `\n`.
fn split_lines(text: &str) -> impl Iterator<Item = (usize, &str, bool)> {
    let mut rest = text;
    let mut n = 0;
    std::iter::from_fn(move || {
        if rest.is_empty() {
            return None;
        }
        n += 1;
        Some(match rest.find('\n') {
            Some(i) => {
                let line = rest[..i].strip_suffix('\r').unwrap_or(&rest[..i]);
                rest = &rest[i + 1..];
                (n, line, true)
            }
            None => {
                let line = rest;
                rest = "";
                (n, line, false)
            }
        })
    })
}

fn is_directive(line: &str) -> bool {
    line.trim_start().starts_with('#')
}

impl Expander<'_> {
    fn expand(&mut self, src: &TemplateSource, top_level: bool) -> Result<(), PreprocessError> {
        if self.stack.contains(&src.origin) {
            let mut chain = self.stack.clone();
            chain.push(src.origin.clone());
            return Err(PreprocessError::IncludeCycle(chain));
        }
        self.stack.push(src.origin.clone());
        let mut frames: Vec<Frame> = Vec::new();
        let active = |frames: &[Frame]| frames.last().is_none_or(|f| f.parent_active && f.taken);

        for (n, line, had_newline) in split_lines(&src.text) {
            let at = SourceLoc {
                origin: src.origin.clone(),
                line: n,
            };
            if is_directive(line) {
                let live = active(&frames);
                let directive = match parse_directive(line, &at) {
                    Ok(d) => d,
                    // Only structure is checked inside excluded regions.
                    Err(_) if !live => continue,
                    Err(e) => return Err(e),
                };
                match directive {
                    Directive::Ifdef(name) | Directive::Ifndef(name) => {
                        let defined = self.defines.contains_key(name);
                        let want = matches!(directive, Directive::Ifdef(_));
                        frames.push(Frame {
                            parent_active: live,
                            taken: defined == want,
                            seen_else: false,
                            opened_at: at,
                        });
                    }
                    Directive::Else => {
                        let frame = frames.last_mut().ok_or(PreprocessError::UnbalancedConditional(at.clone()))?;
                        if frame.seen_else {
                            return Err(PreprocessError::MalformedDirective {
                                text: line.trim().to_string(),
                                at,
                            });
                        }
                        frame.seen_else = true;
                        frame.taken = !frame.taken;
                    }
                    Directive::Endif => {
                        frames.pop().ok_or(PreprocessError::UnbalancedConditional(at))?;
                    }
                    _ if !live => {}
                    Directive::Define(name, value) => {
                        self.defines.insert(name.to_string(), value.to_string());
                    }
                    Directive::Undef(name) => {
                        self.defines.shift_remove(name);
                    }
                    Directive::Include(path) => {
                        let inc = self.resolver.resolve(path).ok_or_else(|| PreprocessError::IncludeNotFound {
                            path: path.to_string(),
                            at: at.clone(),
                        })?;
                        self.expand(&inc, false)?;
                    }
                }
                continue;
            }
            if !active(&frames) {
                continue;
            }
            let interpolated = self.interpolate(line, &at)?;
            let substituted = self.substitute(&interpolated);
            self.out.text.push_str(&substituted);
            if had_newline || !top_level {
                self.out.text.push('\n');
            }
            self.out.lines.push(at);
        }
        if let Some(open) = frames.pop() {
            return Err(PreprocessError::UnbalancedConditional(open.opened_at));
        }
        self.stack.pop();
        Ok(())
    }

    fn interpolate(&self, line: &str, at: &SourceLoc) -> Result<String, PreprocessError> {
        let mut out = String::with_capacity(line.len());
        let mut rest = line;
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after.find("}}").ok_or_else(|| PreprocessError::UnresolvedInterpolation {
                name: after.to_string(),
                at: at.clone(),
            })?;
            let name = after[..end].trim();
            let value = self
                .defines
                .get(name)
                .filter(|_| is_identifier(name))
                .ok_or_else(|| PreprocessError::UnresolvedInterpolation {
                    name: name.to_string(),
                    at: at.clone(),
                })?;
            out.push_str(value);
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }

    fn substitute(&self, line: &str) -> String {
        if self.defines.is_empty() {
            return line.to_string();
        }
        let mut out = String::with_capacity(line.len());
        self.substitute_into(line, &mut Vec::new(), &mut out);
        out
    }

    /// Whole-token replacement; a macro is not re-expanded inside its own
    /// expansion.
    fn substitute_into<'a>(&'a self, text: &'a str, disabled: &mut Vec<&'a str>, out: &mut String) {
        let bytes = text.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            let c = bytes[i];
            if c.is_ascii_alphabetic() || c == b'_' {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                let token = &text[start..i];
                match self.defines.get_key_value(token) {
                    Some((name, value)) if !disabled.contains(&name.as_str()) => {
                        disabled.push(name);
                        self.substitute_into(value, disabled, out);
                        disabled.pop();
                    }
                    _ => out.push_str(token),
                }
            } else if c.is_ascii_digit() {
                // Numeric literals such as `1u` or `0x1f` are not identifiers.
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_' || bytes[i] == b'.') {
                    i += 1;
                }
                out.push_str(&text[start..i]);
            } else {
                let ch = text[i..].chars().next().unwrap();
                out.push(ch);
                i += ch.len_utf8();
            }
        }
    }
}

/// Parameters a template (and everything it can include) refers to.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamSet {
    /// `{{NAME}}` sites.
    pub interpolations: BTreeSet<String>,
    /// Names tested by `#ifdef` / `#ifndef`.
    pub flags: BTreeSet<String>,
}

impl ParamSet {
    pub fn all(&self) -> BTreeSet<String> {
        self.interpolations.union(&self.flags).cloned().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.interpolations.is_empty() && self.flags.is_empty()
    }
}

/// Collect every interpolation name and conditional flag reachable from
/// `src`, following includes in all branches.
pub fn scan_params(src: &TemplateSource, resolver: &dyn TemplateResolver) -> Result<ParamSet, PreprocessError> {
    let mut params = ParamSet::default();
    let mut stack = Vec::new();
    let mut done = HashSet::new();
    scan_into(src, resolver, &mut stack, &mut done, &mut params)?;
    Ok(params)
}

fn scan_into(
    src: &TemplateSource,
    resolver: &dyn TemplateResolver,
    stack: &mut Vec<String>,
    done: &mut HashSet<String>,
    params: &mut ParamSet,
) -> Result<(), PreprocessError> {
    if stack.contains(&src.origin) {
        let mut chain = stack.clone();
        chain.push(src.origin.clone());
        return Err(PreprocessError::IncludeCycle(chain));
    }
    if !done.insert(src.origin.clone()) {
        return Ok(());
    }
    stack.push(src.origin.clone());
    for (n, line, _) in split_lines(&src.text) {
        let at = SourceLoc {
            origin: src.origin.clone(),
            line: n,
        };
        if is_directive(line) {
            match parse_directive(line, &at)? {
                Directive::Ifdef(name) | Directive::Ifndef(name) => {
                    params.flags.insert(name.to_string());
                }
                Directive::Include(path) => {
                    let inc = resolver.resolve(path).ok_or_else(|| PreprocessError::IncludeNotFound {
                        path: path.to_string(),
                        at: at.clone(),
                    })?;
                    scan_into(&inc, resolver, stack, done, params)?;
                }
                _ => {}
            }
            continue;
        }
        let mut rest = line;
        while let Some(start) = rest.find("{{") {
            let after = &rest[start + 2..];
            let Some(end) = after.find("}}") else { break };
            params.interpolations.insert(after[..end].trim().to_string());
            rest = &after[end + 2..];
        }
    }
    stack.pop();
    Ok(())
}
