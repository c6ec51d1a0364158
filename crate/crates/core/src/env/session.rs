use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::action::Action;
use super::observation::{ObservedElement, Observation};
use super::world::{ActionKind, DeviceModel, Effect, ElementKind, SimElement, WorldModel, HOME_PAGE};
use crate::platform::Platform;
use crate::task_graph::TaskSpec;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvError {
    #[error("task needs a {0} device but the world has none")]
    PlatformUnavailable(Platform),
    #[error("task declares no platform")]
    NoPlatform,
    #[error("session already terminated")]
    SessionTerminated,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    #[default]
    None,
    DoneSignaled,
    MaxStepsReached,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepFlags {
    pub out_of_range: bool,
    pub invalid_target: bool,
    pub effect_applied: bool,
    pub revisit: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepResult {
    pub observation: Observation,
    pub flags: StepFlags,
    pub terminal: Terminal,
    pub pre_signature: StateSignature,
    pub post_signature: StateSignature,
}

/// Hex digest of the observable session state.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateSignature(pub String);

impl std::fmt::Display for StateSignature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
struct Location {
    app: Option<String>,
    page: String,
}

impl Location {
    fn home() -> Self {
        Self {
            app: None,
            page: HOME_PAGE.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
struct DeviceState {
    location: Location,
    #[serde(skip)]
    nav_stack: Vec<Location>,
    focus: Option<String>,
    fields: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct SignatureView<'a> {
    active_device: &'a str,
    devices: &'a BTreeMap<String, DeviceState>,
    store_lengths: BTreeMap<&'a str, usize>,
}

/// One episode's mutable view of a shared [`WorldModel`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    world: Arc<WorldModel>,
    max_steps: usize,
    active_device: String,
    devices: BTreeMap<String, DeviceState>,
    stores: BTreeMap<String, Vec<String>>,
    step_count: usize,
    visited: BTreeMap<StateSignature, usize>,
    terminal: Terminal,
}

/// Fresh session for `task`: every device on its launcher, stores empty.
///
/// The active device is the lexicographically first device whose platform is
/// the task's first platform.
pub fn reset(world: Arc<WorldModel>, task: &TaskSpec) -> Result<Session, EnvError> {
    let available = world.platforms();
    if let Some(missing) = task.platforms.iter().find(|p| !available.contains(p)) {
        return Err(EnvError::PlatformUnavailable(*missing));
    }
    let first = *task.platforms.first().ok_or(EnvError::NoPlatform)?;
    let active_device = world
        .devices
        .iter()
        .find(|(_, d)| d.platform == first)
        .map(|(id, _)| id.clone())
        .expect("platform checked above");
    let devices = world
        .devices
        .keys()
        .map(|id| {
            (
                id.clone(),
                DeviceState {
                    location: Location::home(),
                    nav_stack: Vec::new(),
                    focus: None,
                    fields: BTreeMap::new(),
                },
            )
        })
        .collect();
    let mut session = Session {
        world,
        max_steps: task.max_steps,
        active_device,
        devices,
        stores: BTreeMap::new(),
        step_count: 0,
        visited: BTreeMap::new(),
        terminal: Terminal::None,
    };
    let initial = session.signature();
    session.visited.insert(initial, 1);
    Ok(session)
}

fn field_key(app: &str, page: &str, element: &str) -> String {
    format!("{app}/{page}/{element}")
}

impl Session {
    pub fn world(&self) -> &Arc<WorldModel> {
        &self.world
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    pub fn terminal(&self) -> Terminal {
        self.terminal
    }

    pub fn active_device(&self) -> &str {
        &self.active_device
    }

    pub fn device_ids(&self) -> impl Iterator<Item = &str> {
        self.devices.keys().map(String::as_str)
    }

    pub fn foreground_app(&self, device: &str) -> Option<&str> {
        self.devices.get(device)?.location.app.as_deref()
    }

    pub fn current_page(&self, device: &str) -> Option<&str> {
        Some(self.devices.get(device)?.location.page.as_str())
    }

    pub fn field_value(&self, device: &str, app: &str, page: &str, element: &str) -> Option<&str> {
        self.devices
            .get(device)?
            .fields
            .get(&field_key(app, page, element))
            .map(String::as_str)
    }

    pub fn store(&self, name: &str) -> &[String] {
        self.stores.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    /// How many times `sig` has been the session state so far.
    pub fn visits(&self, sig: &StateSignature) -> usize {
        self.visited.get(sig).copied().unwrap_or(0)
    }

    /// Digest of active device, per-device location, focus and field values,
    /// and store lengths.
    pub fn signature(&self) -> StateSignature {
        let view = SignatureView {
            active_device: &self.active_device,
            devices: &self.devices,
            store_lengths: self.stores.iter().map(|(k, v)| (k.as_str(), v.len())).collect(),
        };
        let bytes = serde_json::to_vec(&view).expect("signature view serialises");
        StateSignature(hex::encode(&Sha256::digest(&bytes)[..16]))
    }

    fn device_model(&self) -> &DeviceModel {
        &self.world.devices[&self.active_device]
    }

    fn device_state(&self) -> &DeviceState {
        &self.devices[&self.active_device]
    }

    fn device_state_mut(&mut self) -> &mut DeviceState {
        self.devices.get_mut(&self.active_device).expect("active device exists")
    }

    /// Elements on the active device's current page (launcher icons at home).
    fn visible_elements(&self) -> Vec<SimElement> {
        let model = self.device_model();
        let loc = &self.device_state().location;
        match &loc.app {
            None => model.launcher(),
            Some(app) => model.apps[app].pages[&loc.page].elements.clone(),
        }
    }

    pub fn observe(&self) -> Observation {
        let model = self.device_model();
        let state = self.device_state();
        let loc = &state.location;
        let visible = self.visible_elements();
        let elements = visible
            .iter()
            .map(|el| ObservedElement {
                element_id: el.element_id.clone(),
                bbox: el.bbox,
                kind: el.kind,
                description: el.description.clone(),
                value: match (&loc.app, el.kind) {
                    (Some(app), ElementKind::TextField) => state
                        .fields
                        .get(&field_key(app, &loc.page, &el.element_id))
                        .cloned(),
                    _ => None,
                },
            })
            .collect();
        let (page_description, ocr_text) = match &loc.app {
            None => (
                "Home screen with installed applications".to_string(),
                visible.iter().map(|e| e.description.as_str()).collect::<Vec<_>>().join(" | "),
            ),
            Some(app) => (
                model.apps[app].pages[&loc.page].description.clone(),
                visible
                    .iter()
                    .filter(|e| e.kind == ElementKind::StaticText)
                    .map(|e| e.description.as_str())
                    .collect::<Vec<_>>()
                    .join(" | "),
            ),
        };
        Observation {
            device_id: self.active_device.clone(),
            platform: model.platform,
            app: loc.app.clone(),
            page_id: loc.page.clone(),
            page_description,
            elements,
            ocr_text,
        }
    }

    fn open_app(&mut self, app: &str) -> bool {
        let Some(initial) = self.device_model().apps.get(app).map(|a| a.initial_page.clone()) else {
            return false;
        };
        let state = self.device_state_mut();
        let prev = std::mem::replace(
            &mut state.location,
            Location {
                app: Some(app.to_string()),
                page: initial,
            },
        );
        state.nav_stack.push(prev);
        state.focus = None;
        true
    }

    fn navigate(&mut self, page: &str) {
        let state = self.device_state_mut();
        let next = Location {
            app: state.location.app.clone(),
            page: page.to_string(),
        };
        let prev = std::mem::replace(&mut state.location, next);
        state.nav_stack.push(prev);
        state.focus = None;
    }

    fn back(&mut self) -> bool {
        let state = self.device_state_mut();
        let target = match state.nav_stack.pop() {
            Some(prev) => prev,
            None if state.location.app.is_some() => Location::home(),
            None => return false,
        };
        state.location = target;
        state.focus = None;
        true
    }

    fn tap_element(&mut self, el: &SimElement, flags: &mut StepFlags) {
        flags.effect_applied = match el.transitions.get(&ActionKind::Tap) {
            Some(Effect::Navigate { page }) => {
                self.navigate(page);
                true
            }
            Some(Effect::OpenApp { app }) => self.open_app(app),
            Some(_) => false,
            None if el.kind == ElementKind::TextField => {
                let state = self.device_state_mut();
                let changed = state.focus.as_deref() != Some(el.element_id.as_str());
                state.focus = Some(el.element_id.clone());
                changed
            }
            None => false,
        };
    }

    fn type_text(&mut self, text: &str, flags: &mut StepFlags) {
        let state = self.device_state();
        let Some(app) = state.location.app.clone() else {
            flags.invalid_target = true;
            return;
        };
        let page = state.location.page.clone();
        let elements = self.visible_elements();
        let target = match &state.focus {
            Some(id) => elements.iter().find(|e| &e.element_id == id),
            None => elements.iter().find(|e| e.kind == ElementKind::TextField),
        };
        let Some(target) = target.filter(|_| !text.is_empty()) else {
            flags.invalid_target = true;
            return;
        };
        match target.transitions.get(&ActionKind::Type) {
            Some(Effect::AppendToStore { store }) => {
                self.stores.entry(store.clone()).or_default().push(text.to_string());
            }
            _ => {
                let key = field_key(&app, &page, &target.element_id);
                self.device_state_mut().fields.insert(key, text.to_string());
            }
        }
        flags.effect_applied = true;
    }

    fn apply(&mut self, action: &Action, flags: &mut StepFlags) {
        match action {
            Action::Done => self.terminal = Terminal::DoneSignaled,
            Action::TapXy(x, y) => {
                if !self.device_model().screen.contains(*x, *y) {
                    flags.out_of_range = true;
                    return;
                }
                match self
                    .visible_elements()
                    .into_iter()
                    .find(|e| e.bbox.contains_point(*x, *y))
                {
                    Some(el) => self.tap_element(&el, flags),
                    None => flags.invalid_target = true,
                }
            }
            Action::Tap(id) => match self.visible_elements().into_iter().find(|e| &e.element_id == id) {
                Some(el) => self.tap_element(&el, flags),
                None => flags.invalid_target = true,
            },
            Action::TypeText(text) => self.type_text(text, flags),
            Action::OpenApp(app) => {
                if self.open_app(app) {
                    flags.effect_applied = true;
                } else {
                    flags.invalid_target = true;
                }
            }
            Action::SwitchDevice(id) => {
                if !self.devices.contains_key(id) {
                    flags.invalid_target = true;
                } else if *id != self.active_device {
                    self.active_device = id.clone();
                    flags.effect_applied = true;
                }
            }
            Action::Back => flags.effect_applied = self.back(),
        }
    }

    fn finish_step(&mut self, pre: StateSignature, flags: StepFlags) -> StepResult {
        let mut flags = flags;
        let post = self.signature();
        let seen = self.visited.entry(post.clone()).or_insert(0);
        flags.revisit = *seen > 0;
        *seen += 1;
        if self.terminal == Terminal::None && self.step_count >= self.max_steps {
            self.terminal = Terminal::MaxStepsReached;
        }
        StepResult {
            observation: self.observe(),
            flags,
            terminal: self.terminal,
            pre_signature: pre,
            post_signature: post,
        }
    }

    /// Executes one action. Every call counts against the step budget.
    pub fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        if self.terminal != Terminal::None {
            return Err(EnvError::SessionTerminated);
        }
        let pre = self.signature();
        self.step_count += 1;
        let mut flags = StepFlags::default();
        self.apply(action, &mut flags);
        Ok(self.finish_step(pre, flags))
    }

    /// Consumes a step for an agent reply that did not parse as an action.
    pub fn step_unparsed(&mut self) -> Result<StepResult, EnvError> {
        if self.terminal != Terminal::None {
            return Err(EnvError::SessionTerminated);
        }
        let pre = self.signature();
        self.step_count += 1;
        let flags = StepFlags {
            invalid_target: true,
            ..StepFlags::default()
        };
        Ok(self.finish_step(pre, flags))
    }
}
