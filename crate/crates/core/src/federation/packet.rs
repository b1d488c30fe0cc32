use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::model::ModelParams;
use crate::nn::{add_into, flat, flat_mut, same_shapes, scale_all, ParamTensors};

/// One client's gradients for every block of [`ModelParams`].
///
/// Carries no user id, sub-population id or embedding: the server only
/// learns which round a packet belongs to and an opaque packet id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientPacket {
    pub round: usize,
    pub packet_id: u64,
    pub encoder: ParamTensors,
    pub heads: Vec<ParamTensors>,
    pub global: ParamTensors,
    pub kway: ParamTensors,
}

impl GradientPacket {
    pub fn zeros(params: &ModelParams, round: usize, packet_id: u64) -> Self {
        GradientPacket {
            round,
            packet_id,
            encoder: params.encoder.zero_grads(),
            heads: params.subpop_heads.iter().map(|h| h.zero_grads()).collect(),
            global: params.global_head.zero_grads(),
            kway: params.kway_head.zero_grads(),
        }
    }

    fn blocks(&self) -> impl Iterator<Item = &ParamTensors> + '_ {
        std::iter::once(&self.encoder)
            .chain(self.heads.iter())
            .chain([&self.global, &self.kway])
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ParamTensors> + '_ {
        std::iter::once(&mut self.encoder)
            .chain(self.heads.iter_mut())
            .chain([&mut self.global, &mut self.kway])
    }

    /// Entries in the canonical flat order (matches `ModelParams::flat_params`).
    pub fn values(&self) -> impl Iterator<Item = &f64> + '_ {
        self.blocks().flat_map(flat)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.blocks_mut().flat_map(flat_mut)
    }

    pub fn len(&self) -> usize {
        self.values().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for b in self.blocks_mut() {
            scale_all(b, factor);
        }
    }

    pub fn same_shape(&self, other: &GradientPacket) -> bool {
        self.heads.len() == other.heads.len()
            && self
                .blocks()
                .zip(other.blocks())
                .all(|(a, b)| same_shapes(a, b))
    }

    /// Checks that the packet mirrors `params` block by block.
    pub fn check_against(&self, params: &ModelParams) -> Result<()> {
        let template = GradientPacket::zeros(params, self.round, 0);
        if !self.same_shape(&template) {
            return Err(FedError::Protocol(
                "gradient packet does not mirror the model parameters".into(),
            ));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &GradientPacket) -> Result<()> {
        if !self.same_shape(other) {
            return Err(FedError::Protocol(
                "gradient packets have different shapes".into(),
            ));
        }
        for (a, b) in self.blocks_mut().zip(other.blocks()) {
            add_into(a, b);
        }
        Ok(())
    }

    /// Flat range of head `k` inside [`GradientPacket::values`].
    pub fn head_range(&self, k: usize) -> std::ops::Range<usize> {
        let start = crate::nn::count(&self.encoder)
            + self.heads[..k].iter().map(crate::nn::count).sum::<usize>();
        start..start + crate::nn::count(&self.heads[k])
    }
}
