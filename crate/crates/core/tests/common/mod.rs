//! Test-only oracles shared by the integration suites.
#![allow(unused_imports)]

pub use vqrefine::numkernel::gradcheck::*;
