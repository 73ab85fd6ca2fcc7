//! Command implementations behind the `wsdt` binary, plus the image and
//! checkpoint formats they read and write.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod pnm;
