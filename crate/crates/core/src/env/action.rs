use std::fmt;

/// One agent command. `Display` renders the textual action grammar.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Action {
    Tap(String),
    TapXy(i64, i64),
    TypeText(String),
    OpenApp(String),
    SwitchDevice(String),
    Back,
    Done,
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Tap(_) => "tap",
            Action::TapXy(..) => "tap_xy",
            Action::TypeText(_) => "type",
            Action::OpenApp(_) => "open_app",
            Action::SwitchDevice(_) => "switch_device",
            Action::Back => "back",
            Action::Done => "done",
        }
    }
}

/// Double-quoted literal; only `"` and `\` are escaped.
pub(crate) fn quote(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 2);
    out.push('"');
    for ch in text.chars() {
        if ch == '"' || ch == '\\' {
            out.push('\\');
        }
        out.push(ch);
    }
    out.push('"');
    out
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Tap(id) => write!(f, "tap({id})"),
            Action::TapXy(x, y) => write!(f, "tap_xy({x}, {y})"),
            Action::TypeText(t) => write!(f, "type({})", quote(t)),
            Action::OpenApp(a) => write!(f, "open_app({})", quote(a)),
            Action::SwitchDevice(d) => write!(f, "switch_device({})", quote(d)),
            Action::Back => write!(f, "back()"),
            Action::Done => write!(f, "done()"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_grammar() {
        assert_eq!(Action::TapXy(120, -4).to_string(), "tap_xy(120, -4)");
        assert_eq!(
            Action::TypeText(r#"Big Data "HW1" \o/"#.into()).to_string(),
            r#"type("Big Data \"HW1\" \\o/")"#
        );
        assert_eq!(Action::Back.to_string(), "back()");
    }
}
