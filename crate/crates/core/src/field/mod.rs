//! Trainable appearance fields: the spatial hash grid, the direction
//! encoding, the decoder MLP, and the Adam optimizer they share.

mod adam;
mod decoder;
mod hashgrid;
mod sh;

pub use adam::{Adam, AdamParams};
pub use decoder::{Activations, Decoder};
pub use hashgrid::{hash_index, GridConfig, HashGrid, HASH_PRIMES};
pub use sh::{sh_encode, SH_DIM};
