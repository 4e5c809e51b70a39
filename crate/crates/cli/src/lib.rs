//! Command line tools and the HTTP editing service.

pub mod commands;
pub mod server;
pub mod session;
