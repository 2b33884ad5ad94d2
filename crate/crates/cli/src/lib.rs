//! Command-line experiment runner for `biaslab`: declarative JSON configs,
//! deterministic artifacts, run records and plot-ready tables.

pub mod config;
pub mod plotdata;
pub mod record;
pub mod runner;

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const VALIDATION: i32 = 1;
    pub const RUNTIME: i32 = 2;
}
