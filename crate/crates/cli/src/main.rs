//! `sdde-bem`: runs simulations, convergence studies and assumption audits.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 audit violation, 1 anything else (I/O).

mod app;
mod config;

use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(app::run(std::env::args_os()))
}
