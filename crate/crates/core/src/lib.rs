//! Federated learning with several independent global servers. Clients train
//! a linear model on their region's charging sessions and deliver updates to
//! the first reachable server in their list.

pub mod aggregation;
pub mod data;
pub mod params;
pub mod trainer;
pub mod transport;
pub mod server;
pub mod harness;
