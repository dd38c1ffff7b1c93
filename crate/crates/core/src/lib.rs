//! Grammar-constrained greedy decoding of function calls.
//!
//! A decode session tracks where the generated text sits in the response
//! grammar `name(arg, ...)<nexa_end>` and, before each greedy step, masks out
//! every vocabulary token that would break it. Function names and enum
//! values are checked against tries; other argument types run through
//! incremental literal recognizers.

pub mod dataset;
pub mod decoder;
pub mod eval;
pub mod metrics;
pub mod schema;
pub mod trie;
pub mod typematch;
