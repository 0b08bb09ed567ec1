//! Library half of the `hpotriage` command-line tool: configuration, the
//! result store, report rendering, table replay and the command runners.

pub mod commands;
pub mod config;
pub mod replay;
pub mod report;
pub mod store;
