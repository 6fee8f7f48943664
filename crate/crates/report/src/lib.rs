//! Holds the workspace acceptance report (`tests/acceptance.rs`). It lives in
//! its own package so that `cargo test --workspace` runs it after every other
//! suite: a failing criterion stops cargo, but cannot hide other results.
