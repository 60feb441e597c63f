//! Empty on purpose; this crate only hosts the criterion bench targets.
