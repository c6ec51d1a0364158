//! Sub-goal completion predicates.
//!
//! A [`CheckerSpec`] is the serialisable reference stored on a task node: a
//! predicate name plus string parameters. [`Checker::resolve`] turns it into a
//! typed condition that can be evaluated against a live [`Session`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::Session;

/// Store consulted by `note_contains` when no `store` parameter is given.
pub const DEFAULT_NOTE_STORE: &str = "keep_notes";

/// Names accepted by [`Checker::resolve`].
pub const PREDICATES: &[&str] = &["on_page", "app_opened", "element_value_equals", "note_contains"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckerSpec {
    pub predicate: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, String>,
}

impl CheckerSpec {
    pub fn new<'a>(predicate: &str, params: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        Self {
            predicate: predicate.to_string(),
            params: params
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckerError {
    #[error("unknown checker predicate `{0}`")]
    UnknownPredicate(String),
    #[error("checker `{predicate}` is missing parameter `{param}`")]
    MissingParam { predicate: String, param: String },
    #[error("checker `{predicate}` does not take parameter `{param}`")]
    UnexpectedParam { predicate: String, param: String },
}

/// A resolved completion predicate. `device: None` matches any device.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Checker {
    OnPage {
        device: Option<String>,
        app: String,
        page: String,
    },
    AppOpened {
        device: Option<String>,
        app: String,
    },
    ElementValueEquals {
        device: Option<String>,
        app: String,
        page: String,
        element: String,
        value: String,
    },
    NoteContains {
        store: String,
        text: String,
    },
}

struct Params<'a> {
    spec: &'a CheckerSpec,
    used: Vec<&'static str>,
}

impl<'a> Params<'a> {
    fn required(&mut self, key: &'static str) -> Result<String, CheckerError> {
        self.used.push(key);
        self.spec
            .params
            .get(key)
            .cloned()
            .ok_or_else(|| CheckerError::MissingParam {
                predicate: self.spec.predicate.clone(),
                param: key.to_string(),
            })
    }

    fn optional(&mut self, key: &'static str) -> Option<String> {
        self.used.push(key);
        self.spec.params.get(key).cloned()
    }

    fn finish(self) -> Result<(), CheckerError> {
        match self.spec.params.keys().find(|k| !self.used.contains(&k.as_str())) {
            Some(extra) => Err(CheckerError::UnexpectedParam {
                predicate: self.spec.predicate.clone(),
                param: extra.clone(),
            }),
            None => Ok(()),
        }
    }
}

impl Checker {
    pub fn resolve(spec: &CheckerSpec) -> Result<Self, CheckerError> {
        let mut p = Params { spec, used: Vec::new() };
        let checker = match spec.predicate.as_str() {
            "on_page" => Checker::OnPage {
                device: p.optional("device"),
                app: p.required("app")?,
                page: p.required("page")?,
            },
            "app_opened" => Checker::AppOpened {
                device: p.optional("device"),
                app: p.required("app")?,
            },
            "element_value_equals" => Checker::ElementValueEquals {
                device: p.optional("device"),
                app: p.required("app")?,
                page: p.required("page")?,
                element: p.required("element")?,
                value: p.required("value")?,
            },
            "note_contains" => Checker::NoteContains {
                store: p
                    .optional("store")
                    .unwrap_or_else(|| DEFAULT_NOTE_STORE.to_string()),
                text: p.required("text")?,
            },
            other => return Err(CheckerError::UnknownPredicate(other.to_string())),
        };
        p.finish()?;
        Ok(checker)
    }

    pub fn holds(&self, session: &Session) -> bool {
        let devices = |device: &Option<String>| -> Vec<String> {
            match device {
                Some(d) => vec![d.clone()],
                None => session.device_ids().map(str::to_string).collect(),
            }
        };
        match self {
            Checker::OnPage { device, app, page } => devices(device).iter().any(|d| {
                session.foreground_app(d) == Some(app.as_str())
                    && session.current_page(d) == Some(page.as_str())
            }),
            Checker::AppOpened { device, app } => devices(device)
                .iter()
                .any(|d| session.foreground_app(d) == Some(app.as_str())),
            Checker::ElementValueEquals {
                device,
                app,
                page,
                element,
                value,
            } => devices(device)
                .iter()
                .any(|d| session.field_value(d, app, page, element) == Some(value.as_str())),
            Checker::NoteContains { store, text } => {
                session.store(store).iter().any(|entry| entry.contains(text.as_str()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolves_known_predicates() {
        let spec = CheckerSpec::new("on_page", [("app", "Tasks"), ("page", "task_list")]);
        assert_eq!(
            Checker::resolve(&spec).unwrap(),
            Checker::OnPage {
                device: None,
                app: "Tasks".into(),
                page: "task_list".into()
            }
        );
        let note = CheckerSpec::new("note_contains", [("text", "exam")]);
        assert_eq!(
            Checker::resolve(&note).unwrap(),
            Checker::NoteContains {
                store: DEFAULT_NOTE_STORE.into(),
                text: "exam".into()
            }
        );
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let spec = CheckerSpec::new("screen_is_blue", []);
        assert_eq!(
            Checker::resolve(&spec),
            Err(CheckerError::UnknownPredicate("screen_is_blue".into()))
        );
        let missing = CheckerSpec::new("app_opened", []);
        assert!(matches!(
            Checker::resolve(&missing),
            Err(CheckerError::MissingParam { .. })
        ));
        let extra = CheckerSpec::new("app_opened", [("app", "x"), ("colour", "red")]);
        assert!(matches!(
            Checker::resolve(&extra),
            Err(CheckerError::UnexpectedParam { .. })
        ));
    }
}
