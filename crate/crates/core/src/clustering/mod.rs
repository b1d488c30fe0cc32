//! Sub-population assignment: federated SOM, prototypes, head remapping.

mod prototype;
mod remap;
mod som;

pub use prototype::{triplet_grad, triplet_loss, triplet_update, PrototypeReport, PrototypeSet};
pub use remap::{apply_remap, remap_heads};
pub use som::{
    most_square_grid, nearest, purity, select_winners, sq_dist, SoMap, SomClientReport, SomConfig,
    SomNeighborhood, SomSelection,
};

#[cfg(test)]
mod tests;
