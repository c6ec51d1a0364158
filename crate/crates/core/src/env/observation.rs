use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::world::ElementKind;
use crate::geometry::BoundingBox;
use crate::platform::Platform;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservedElement {
    pub element_id: String,
    pub bbox: BoundingBox,
    pub kind: ElementKind,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
}

/// Text rendering of what the active device currently shows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub device_id: String,
    pub platform: Platform,
    /// `None` on the launcher.
    pub app: Option<String>,
    pub page_id: String,
    pub page_description: String,
    pub elements: Vec<ObservedElement>,
    pub ocr_text: String,
}

impl Observation {
    /// Short hex digest of the rendered observation.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.to_string().as_bytes());
        hex::encode(&hash[..8])
    }
}

impl fmt::Display for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Device: {} ({})", self.device_id, self.platform)?;
        writeln!(f, "App: {}", self.app.as_deref().unwrap_or("(home screen)"))?;
        writeln!(f, "Page: {} - {}", self.page_id, self.page_description)?;
        writeln!(f, "Elements:")?;
        for el in &self.elements {
            write!(
                f,
                "- {} [{}] @ {}: {}",
                el.element_id,
                el.kind.as_str(),
                el.bbox,
                el.description
            )?;
            if let Some(v) = &el.value {
                write!(f, " value={}", super::action::quote(v))?;
            }
            writeln!(f)?;
        }
        writeln!(f, "OCR: {}", self.ocr_text)
    }
}
