//! Check suites shared by this crate's tests and the workspace acceptance run.
#![allow(dead_code)]

pub mod primitives;
pub mod oracles;
pub mod model;
