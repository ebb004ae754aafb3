//! Oracles and fixtures shared by the integration tests and the acceptance run.
#![allow(dead_code)]

pub mod grad;
pub mod fixtures;
pub mod oracles;
