//! Interval-of-validity conditions data: the data model, the master store,
//! portable snapshots, release slices and the integrity layer they share.

pub mod codec;
pub mod integrity;
pub mod model;
pub mod query;
pub mod object;
pub mod snapshot;
pub mod store;
pub mod release;
