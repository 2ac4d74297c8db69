//! Command line front end and job service for `meshreason`.

pub mod commands;
pub mod jobs;
pub mod server;
