//! Holds the end-to-end acceptance suite in `tests/acceptance.rs`. It sits in
//! its own package so it runs after every other test target in the workspace.
