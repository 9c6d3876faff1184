//! Transaction-level simulator of a clustered run-time management
//! infrastructure for many-core chips, with a closed-form overhead model.

pub mod analytic;
pub mod chip;
pub mod experiments;
pub mod interconnect;
pub mod kernel;
pub mod nodes;
pub mod protocol;
pub mod taskmgr;
pub mod traces;
