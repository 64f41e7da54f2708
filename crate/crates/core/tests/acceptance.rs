//! End-to-end acceptance checks (in progress).
