//! Group key management built on CRT key locks over a ternary key hierarchy.

pub mod crt_lock;
pub mod crypto_prims;
pub mod key_tree;
pub mod messages;
pub mod group_controller;
pub mod client;
pub mod transport_sim;
pub mod baselines;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MemberId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupId(pub u32);
