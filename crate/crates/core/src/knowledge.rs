//! Knowledge base of private-domain applications.
//!
//! A KB document lists packages; each package describes the pages of one
//! application and the elements on them (position, functional description,
//! nested sub-elements). At run time [`decide_invocation`] picks the packages
//! a task mentions and [`render_prompt_fragment`] turns them into prompt text.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::grammar::is_identifier;
use crate::geometry::BoundingBox;
use crate::platform::Platform;
use crate::schema;

/// Character budget for injected knowledge when none is configured.
pub const DEFAULT_FRAGMENT_BUDGET: usize = 4000;

/// Final line of a fragment that did not fit its budget.
pub const TRUNCATION_MARKER: &str = "[knowledge truncated]\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementRecord {
    pub element_id: String,
    pub position: BoundingBox,
    pub description: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sub_elements: Vec<ElementRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageRecord {
    pub page_id: String,
    pub description: String,
    #[serde(default)]
    pub elements: Vec<ElementRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgePackage {
    pub package_name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
    pub platform: Platform,
    #[serde(default)]
    pub pages: Vec<PageRecord>,
}

impl KnowledgePackage {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.package_name.as_str()).chain(self.aliases.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub schema: String,
    pub packages: Vec<KnowledgePackage>,
}

impl Default for KnowledgeBase {
    fn default() -> Self {
        Self {
            schema: schema::KB.to_string(),
            packages: Vec::new(),
        }
    }
}

impl KnowledgeBase {
    pub fn package(&self, name: &str) -> Option<&KnowledgePackage> {
        self.packages.iter().find(|p| p.package_name == name)
    }

    /// Packages whose canonical names appear in `names`, in KB order.
    pub fn select(&self, names: &[String]) -> Vec<&KnowledgePackage> {
        self.packages
            .iter()
            .filter(|p| names.contains(&p.package_name))
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum KbError {
    #[error("malformed knowledge base: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Schema(#[from] schema::SchemaMismatch),
    #[error("{path}: {rule}")]
    SchemaViolation { path: String, rule: String },
    #[error("failed to write knowledge base: {0}")]
    Io(#[from] std::io::Error),
}

fn violation(path: impl Into<String>, rule: impl Into<String>) -> KbError {
    KbError::SchemaViolation {
        path: path.into(),
        rule: rule.into(),
    }
}

/// Lowercases and collapses every whitespace run to one space.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn check_element(
    el: &ElementRecord,
    path: &str,
    parent: Option<&BoundingBox>,
    seen: &mut BTreeMap<String, String>,
) -> Result<(), KbError> {
    if !is_identifier(&el.element_id) {
        return Err(violation(
            format!("{path}.element_id"),
            "must be a non-empty identifier of [A-Za-z0-9_.-]",
        ));
    }
    if let Some(first) = seen.insert(el.element_id.clone(), path.to_string()) {
        return Err(violation(
            format!("{path}.element_id"),
            format!("duplicate element id `{}` (first at {first})", el.element_id),
        ));
    }
    let pos = &el.position;
    if pos.x < 0 || pos.y < 0 {
        return Err(violation(format!("{path}.position"), "origin must be non-negative"));
    }
    if pos.width <= 0 || pos.height <= 0 {
        return Err(violation(format!("{path}.position"), "width and height must be positive"));
    }
    if let Some(parent) = parent {
        if !parent.contains_box(pos) {
            return Err(violation(format!("{path}.position"), "must lie within the parent element"));
        }
    }
    for (i, sub) in el.sub_elements.iter().enumerate() {
        check_element(sub, &format!("{path}.sub_elements[{i}]"), Some(pos), seen)?;
    }
    Ok(())
}

impl KnowledgeBase {
    /// Checks every structural invariant, reporting the first offending field.
    pub fn validate(&self) -> Result<(), KbError> {
        schema::expect(schema::KB, &self.schema)?;
        let mut owners: BTreeMap<String, String> = BTreeMap::new();
        for (pi, pkg) in self.packages.iter().enumerate() {
            let ppath = format!("packages[{pi}]");
            if pkg.package_name.trim().is_empty() {
                return Err(violation(format!("{ppath}.package_name"), "must be non-empty"));
            }
            for (ni, name) in pkg.names().enumerate() {
                let field = if ni == 0 {
                    format!("{ppath}.package_name")
                } else {
                    format!("{ppath}.aliases[{}]", ni - 1)
                };
                let key = normalize(name);
                if key.is_empty() {
                    return Err(violation(field, "must be non-empty"));
                }
                if let Some(owner) = owners.get(&key) {
                    let rule = if *owner == pkg.package_name {
                        format!("duplicate name `{name}` within package")
                    } else {
                        format!("name `{name}` collides with package `{owner}`")
                    };
                    return Err(violation(field, rule));
                }
                owners.insert(key, pkg.package_name.clone());
            }
            let mut pages = BTreeMap::new();
            for (gi, page) in pkg.pages.iter().enumerate() {
                let gpath = format!("{ppath}.pages[{gi}]");
                if page.page_id.is_empty() {
                    return Err(violation(format!("{gpath}.page_id"), "must be non-empty"));
                }
                if pages.insert(page.page_id.clone(), gi).is_some() {
                    return Err(violation(
                        format!("{gpath}.page_id"),
                        format!("duplicate page id `{}`", page.page_id),
                    ));
                }
                let mut seen = BTreeMap::new();
                for (ei, el) in page.elements.iter().enumerate() {
                    check_element(el, &format!("{gpath}.elements[{ei}]"), None, &mut seen)?;
                }
            }
        }
        Ok(())
    }
}

pub fn load_kb(source: impl Read) -> Result<KnowledgeBase, KbError> {
    let kb: KnowledgeBase = serde_json::from_reader(source)?;
    kb.validate()?;
    Ok(kb)
}

pub fn save_kb(kb: &KnowledgeBase, mut sink: impl Write) -> Result<(), KbError> {
    serde_json::to_writer_pretty(&mut sink, kb)?;
    sink.write_all(b"\n")?;
    Ok(())
}

/// Canonical names of the packages mentioned in `instruction`, in KB order.
///
/// A package is mentioned when its name or one of its aliases occurs as a
/// substring after case folding and whitespace normalisation.
pub fn decide_invocation(instruction: &str, packages: &[KnowledgePackage]) -> Vec<String> {
    let haystack = normalize(instruction);
    packages
        .iter()
        .filter(|pkg| pkg.names().any(|name| haystack.contains(&normalize(name))))
        .map(|pkg| pkg.package_name.clone())
        .collect()
}

fn one_line(text: &str) -> String {
    text.split(['\n', '\r']).collect::<Vec<_>>().join(" ")
}

fn element_units(el: &ElementRecord, depth: usize, out: &mut Vec<String>) {
    out.push(format!(
        "{}- {} @ {}: {}\n",
        "  ".repeat(depth + 1),
        el.element_id,
        el.position,
        one_line(&el.description)
    ));
    for sub in &el.sub_elements {
        element_units(sub, depth + 1, out);
    }
}

fn package_units(pkg: &KnowledgePackage) -> Vec<String> {
    let mut header = format!("Package: {}\nPlatform: {}\n", one_line(&pkg.package_name), pkg.platform);
    if !pkg.aliases.is_empty() {
        let aliases: Vec<String> = pkg.aliases.iter().map(|a| one_line(a)).collect();
        header.push_str(&format!("Aliases: {}\n", aliases.join(" | ")));
    }
    let mut units = vec![header];
    for page in &pkg.pages {
        units.push(format!("Page {}: {}\n", page.page_id, one_line(&page.description)));
        for el in &page.elements {
            element_units(el, 0, &mut units);
        }
    }
    units
}

/// Renders packages as prompt text of at most `budget` characters, plus the
/// truncation marker when something had to be dropped.
///
/// Records (package header, page line, element line) are never split; the
/// output is always a prefix of the full rendering.
pub fn render_prompt_fragment(packages: &[&KnowledgePackage], budget: usize) -> String {
    let mut out = String::new();
    let mut used = 0;
    for unit in packages.iter().flat_map(|p| package_units(p)) {
        let len = unit.chars().count();
        if used + len > budget {
            out.push_str(TRUNCATION_MARKER);
            return out;
        }
        used += len;
        out.push_str(&unit);
    }
    out
}
