//! Placeholder library; the crate exists to host the criterion benches
//! under `benches/`.
