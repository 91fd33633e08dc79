//! Oblivious SQL selection and key-value PIR over homomorphically encrypted
//! tables.

pub mod access;
pub mod bench;
pub mod client;
pub mod crypto;
pub mod engine;
pub mod net;
pub mod schema;
pub mod sql;
pub mod storage;
