use rand::Rng;

use super::packet::GradientPacket;
use crate::error::{FedError, Result};
use crate::model::ModelParams;
use crate::nn::AdamState;
use crate::privacy::{add_noise, DpConfig};

/// Elementwise mean of the packets, every head block included.
pub fn server_aggregate(packets: &[GradientPacket]) -> Result<GradientPacket> {
    let (first, rest) = packets
        .split_first()
        .ok_or_else(|| FedError::Protocol("no packets to aggregate".into()))?;
    let mut sum = first.clone();
    for p in rest {
        if p.round != first.round {
            return Err(FedError::Protocol(format!(
                "packet from round {} mixed into round {}",
                p.round, first.round
            )));
        }
        sum.add_assign(p)?;
    }
    if packets.len() > 1 {
        sum.scale(1.0 / packets.len() as f64);
    }
    sum.packet_id = 0;
    Ok(sum)
}

/// Server-side Gaussian noise on the mean of `count` clipped packets:
/// the noise on the sum has std sigma * C, so the mean gets sigma * C / count.
pub fn server_noise<R: Rng + ?Sized>(
    mean: &mut GradientPacket,
    dp: &DpConfig,
    count: usize,
    rng: &mut R,
) {
    if dp.enabled && dp.server_side && count > 0 {
        add_noise(mean.values_mut(), dp.noise_std() / count as f64, rng);
    }
}

/// One central optimizer step on every parameter block.
pub fn server_apply(
    opt: &mut AdamState,
    params: &mut ModelParams,
    bundle: &GradientPacket,
) -> Result<()> {
    bundle.check_against(params)?;
    if opt.len() != params.num_params() {
        return Err(FedError::Protocol(format!(
            "central optimizer tracks {} parameters, model has {}",
            opt.len(),
            params.num_params()
        )));
    }
    opt.step(params.flat_params_mut(), bundle.values())
}
