//! Deterministic simulated desktop/mobile fleet.
//!
//! A [`WorldModel`] describes devices, their apps, pages and elements, and
//! what each element does when tapped or typed into. A [`Session`] executes
//! [`Action`]s against it, one step at a time, and reports structured
//! [`Observation`]s in place of screenshots.

mod action;
mod observation;
mod session;
mod world;

pub use action::Action;
pub use observation::{ObservedElement, Observation};
pub use session::{reset, EnvError, Session, StateSignature, StepFlags, StepResult, Terminal};
pub use world::{
    ActionKind, AppModel, DeviceModel, Effect, ElementKind, PageModel, ScreenSize, SimElement, WorldError,
    WorldModel, HOME_PAGE,
};
