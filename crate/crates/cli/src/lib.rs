//! Experiment harness around `sfac-core`: TOML experiment descriptions,
//! binary family files, CSV traces, SVG plots, and the orchestration that
//! fans replicas out over a thread pool. The `sfac` binary is a thin
//! argument parser over [`runner`] and [`plot`].

pub mod baseline;
pub mod config;
pub mod family_io;
pub mod plot;
pub mod runner;
pub mod traces;
