use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::grammar::is_identifier;
use crate::geometry::BoundingBox;
use crate::platform::Platform;
use crate::schema;

/// Page id of the launcher shown when no app is in the foreground.
pub const HOME_PAGE: &str = "home";

const LAUNCHER_COLUMNS: i64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreenSize {
    pub width: i64,
    pub height: i64,
}

impl ScreenSize {
    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && x < self.width && y < self.height
    }

    fn bounds(&self) -> BoundingBox {
        BoundingBox::new(0, 0, self.width, self.height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Button,
    TextField,
    ListItem,
    StaticText,
}

impl ElementKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ElementKind::Button => "button",
            ElementKind::TextField => "text_field",
            ElementKind::ListItem => "list_item",
            ElementKind::StaticText => "static_text",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Tap,
    Type,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "effect", rename_all = "snake_case")]
pub enum Effect {
    /// Go to another page of the same app.
    Navigate { page: String },
    /// Store the typed text as the field's value.
    SetField,
    /// Append the typed text to a named session store.
    AppendToStore { store: String },
    /// Bring an app on the same device to the foreground.
    OpenApp { app: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimElement {
    pub element_id: String,
    pub bbox: BoundingBox,
    pub kind: ElementKind,
    pub description: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub transitions: BTreeMap<ActionKind, Effect>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageModel {
    pub description: String,
    #[serde(default)]
    pub elements: Vec<SimElement>,
}

impl PageModel {
    pub fn element(&self, id: &str) -> Option<&SimElement> {
        self.elements.iter().find(|e| e.element_id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppModel {
    pub initial_page: String,
    pub pages: BTreeMap<String, PageModel>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceModel {
    pub platform: Platform,
    pub screen: ScreenSize,
    pub apps: BTreeMap<String, AppModel>,
}

impl DeviceModel {
    /// Launcher icons for every installed app, laid out on a fixed grid in
    /// app-name order.
    pub fn launcher(&self) -> Vec<SimElement> {
        let cell = self.screen.width / LAUNCHER_COLUMNS;
        let top = self.screen.height / 10;
        self.apps
            .keys()
            .enumerate()
            .map(|(i, name)| {
                let (row, col) = (i as i64 / LAUNCHER_COLUMNS, i as i64 % LAUNCHER_COLUMNS);
                SimElement {
                    element_id: launcher_id(name),
                    bbox: BoundingBox::new(
                        col * cell + cell / 8,
                        top + row * cell + cell / 8,
                        cell * 3 / 4,
                        cell * 3 / 4,
                    ),
                    kind: ElementKind::Button,
                    description: name.clone(),
                    transitions: BTreeMap::from([(ActionKind::Tap, Effect::OpenApp { app: name.clone() })]),
                }
            })
            .collect()
    }
}

/// Launcher element id for an app: lowercase, runs of other characters
/// replaced by `_`.
pub fn launcher_id(app: &str) -> String {
    let mut out = String::new();
    for ch in app.chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch.to_ascii_lowercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldModel {
    pub schema: String,
    pub devices: BTreeMap<String, DeviceModel>,
}

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("malformed world document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Schema(#[from] schema::SchemaMismatch),
    #[error("{path}: {rule}")]
    Invalid { path: String, rule: String },
}

fn invalid(path: String, rule: impl Into<String>) -> WorldError {
    WorldError::Invalid {
        path,
        rule: rule.into(),
    }
}

impl WorldModel {
    pub fn from_reader(reader: impl Read) -> Result<Self, WorldError> {
        let world: WorldModel = serde_json::from_reader(reader)?;
        world.validate()?;
        Ok(world)
    }

    pub fn platforms(&self) -> BTreeSet<Platform> {
        self.devices.values().map(|d| d.platform).collect()
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        schema::expect(schema::WORLD, &self.schema)?;
        if self.devices.is_empty() {
            return Err(invalid("devices".into(), "at least one device is required"));
        }
        for (dev_id, dev) in &self.devices {
            let dpath = format!("devices.{dev_id}");
            if dev.screen.width <= 0 || dev.screen.height <= 0 {
                return Err(invalid(format!("{dpath}.screen"), "screen size must be positive"));
            }
            let mut launcher_ids = BTreeSet::new();
            for icon in dev.launcher() {
                if !dev.screen.bounds().contains_box(&icon.bbox) {
                    return Err(invalid(format!("{dpath}.apps"), "too many apps for the launcher grid"));
                }
                if !is_identifier(&icon.element_id) || !launcher_ids.insert(icon.element_id.clone()) {
                    return Err(invalid(
                        format!("{dpath}.apps.{}", icon.description),
                        "app name must map to a unique launcher id",
                    ));
                }
            }
            for (app_id, app) in &dev.apps {
                let apath = format!("{dpath}.apps.{app_id}");
                if !app.pages.contains_key(&app.initial_page) {
                    return Err(invalid(
                        format!("{apath}.initial_page"),
                        format!("page `{}` does not exist", app.initial_page),
                    ));
                }
                for (page_id, page) in &app.pages {
                    let ppath = format!("{apath}.pages.{page_id}");
                    let mut ids = BTreeSet::new();
                    for (i, el) in page.elements.iter().enumerate() {
                        let epath = format!("{ppath}.elements[{i}]");
                        if !is_identifier(&el.element_id) {
                            return Err(invalid(format!("{epath}.element_id"), "not a valid identifier"));
                        }
                        if !ids.insert(el.element_id.as_str()) {
                            return Err(invalid(format!("{epath}.element_id"), "duplicate element id"));
                        }
                        if el.bbox.width <= 0 || el.bbox.height <= 0 || !dev.screen.bounds().contains_box(&el.bbox) {
                            return Err(invalid(format!("{epath}.bbox"), "box must be non-empty and on screen"));
                        }
                        for (kind, effect) in &el.transitions {
                            let tpath = format!("{epath}.transitions");
                            match (kind, effect) {
                                (ActionKind::Tap, Effect::Navigate { page }) => {
                                    if !app.pages.contains_key(page) {
                                        return Err(invalid(tpath, format!("unknown page `{page}`")));
                                    }
                                }
                                (ActionKind::Tap, Effect::OpenApp { app: target }) => {
                                    if !dev.apps.contains_key(target) {
                                        return Err(invalid(tpath, format!("app `{target}` is not installed")));
                                    }
                                }
                                (ActionKind::Type, Effect::SetField | Effect::AppendToStore { .. }) => {
                                    if el.kind != ElementKind::TextField {
                                        return Err(invalid(tpath, "only text fields accept typing"));
                                    }
                                }
                                _ => return Err(invalid(tpath, "effect does not fit the action kind")),
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn launcher_ids_slugify() {
        assert_eq!(launcher_id("Xiaoya Intelligent Assistant"), "xiaoya_intelligent_assistant");
        assert_eq!(launcher_id("One-Stop Service Platform"), "one_stop_service_platform");
        assert_eq!(launcher_id("Keep Notes"), "keep_notes");
    }
}
