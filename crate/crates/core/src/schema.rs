//! Versioned document tags carried in every file the harness reads or writes.

use thiserror::Error;

pub const TASK: &str = "kgce-task/1";
pub const TEMPLATE: &str = "kgce-template/1";
pub const BINDINGS: &str = "kgce-bindings/1";
pub const KB: &str = "kgce-kb/1";
pub const WORLD: &str = "kgce-world/1";
pub const TRACE: &str = "kgce-trace/1";
pub const METRICS: &str = "kgce-metrics/1";
pub const REPORT: &str = "kgce-report/1";
pub const AGGREGATE: &str = "kgce-aggregate/1";
pub const SCRIPT: &str = "kgce-script/1";
pub const MOCK: &str = "kgce-mock/1";
pub const RUN: &str = "kgce-run/1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("expected schema `{expected}`, found `{found}`")]
pub struct SchemaMismatch {
    pub expected: &'static str,
    pub found: String,
}

pub fn expect(expected: &'static str, found: &str) -> Result<(), SchemaMismatch> {
    if found == expected {
        Ok(())
    } else {
        Err(SchemaMismatch {
            expected,
            found: found.to_string(),
        })
    }
}
