//! Protocol core for a mobile-energy network: a two-tier signed ledger, a
//! typed transaction vocabulary, one-time trip keys, anonymous trip
//! verification, regional price signals, EV decisions and O-D matrices.
//!
//! Everything here is deterministic and `no_std` (with `alloc`). IO, config
//! files and the simulator live in the companion `iome-sim` crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod codec;
pub mod ev_agent;
pub mod hash;
pub mod identity;
pub mod ledger;
pub mod market;
pub mod mobility;
pub mod trip_extraction;
pub mod txvocab;

pub use hash::Hash;
pub use identity::{KeyPair, PublicKey, Signature};
pub use ledger::{Block, Chain, ChainAnchor, ChainKind};
pub use txvocab::{TxBody, TxEnvelope, TxKind};
