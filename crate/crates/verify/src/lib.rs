//! Holds the end-to-end acceptance suite (`tests/acceptance.rs`), which spans
//! both the core library and the command-line pipeline. Run it with
//! `cargo test -p sts-verify --test acceptance`.
