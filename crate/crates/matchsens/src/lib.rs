//! File formats, simulation harness and command-line front end for
//! [`matchsens_core`].

pub mod checks;
pub mod cli;
pub mod io;
pub mod simlab;
