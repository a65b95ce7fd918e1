//! Holds the `acceptance` test target, which checks the workspace end to end
//! against its acceptance criteria. Run it with `cargo test -p mamp-tests`.
