//! Holds the `acceptance` test target; run it with
//! `cargo test -p lamole-validation -- --nocapture` to see one line per criterion.
