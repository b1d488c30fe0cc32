//! Gaussian mechanism on gradient packets: clip the whole packet to an L2
//! ball, then add i.i.d. normal noise to every entry.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::federation::GradientPacket;
use crate::nn::{flat_mut, norm_sq, scale_all, ParamTensors};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpConfig {
    pub enabled: bool,
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    /// Add the noise to the server-side mean instead of to each packet.
    /// Clipping always happens on the client.
    pub server_side: bool,
    /// Clip on-device head gradients jointly with the packet and noise them.
    /// The heads are never transmitted but train on the same user data.
    pub local_heads: bool,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            enabled: false,
            clip_norm: 1.0,
            noise_multiplier: 0.5,
            server_side: false,
            local_heads: true,
        }
    }
}

impl DpConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.enabled && !(self.clip_norm > 0.0) {
            out.push(format!(
                "privacy.clip_norm must be positive, got {}",
                self.clip_norm
            ));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            out.push(format!(
                "privacy.noise_multiplier must be finite and >= 0, got {}",
                self.noise_multiplier
            ));
        }
        out
    }

    /// Standard deviation of the noise added to one packet entry.
    pub fn noise_std(&self) -> f64 {
        self.noise_multiplier * self.clip_norm
    }
}

/// Scales the packet into the L2 ball of radius `clip_norm`. Returns the
/// norm before clipping.
pub fn clip_packet(packet: &mut GradientPacket, clip_norm: f64) -> Result<f64> {
    if !(clip_norm > 0.0) {
        return Err(FedError::Config(format!(
            "clip norm must be positive, got {clip_norm}"
        )));
    }
    let norm = packet.norm();
    if norm > clip_norm {
        packet.scale(clip_norm / norm);
    }
    Ok(norm)
}

/// Adds N(0, (sigma * clip_norm)^2) to every entry, zero blocks included.
pub fn gaussianize<R: Rng + ?Sized>(
    packet: &mut GradientPacket,
    sigma: f64,
    clip_norm: f64,
    rng: &mut R,
) {
    if sigma == 0.0 {
        return;
    }
    add_noise(packet.values_mut(), sigma * clip_norm, rng);
}

pub(crate) fn add_noise<'a, R: Rng + ?Sized>(
    values: impl Iterator<Item = &'a mut f64>,
    std: f64,
    rng: &mut R,
) {
    if std == 0.0 {
        return;
    }
    for v in values {
        let z: f64 = StandardNormal.sample(rng);
        *v += std * z;
    }
}

/// Clips the packet and a client-held gradient block as one vector, then noises both.
///
/// The local block never leaves the client, so it is noised here even when the
/// server adds the packet noise.
pub fn privatize_joint<R: Rng + ?Sized>(
    packet: &mut GradientPacket,
    local: &mut ParamTensors,
    dp: &DpConfig,
    rng: &mut R,
) -> Result<bool> {
    if !dp.enabled {
        return Ok(false);
    }
    if !(dp.clip_norm > 0.0) {
        return Err(FedError::Config(format!(
            "clip norm must be positive, got {}",
            dp.clip_norm
        )));
    }
    let norm = (packet.norm().powi(2) + norm_sq(local)).sqrt();
    if norm > dp.clip_norm {
        packet.scale(dp.clip_norm / norm);
        scale_all(local, dp.clip_norm / norm);
    }
    if !dp.server_side {
        gaussianize(packet, dp.noise_multiplier, dp.clip_norm, rng);
    }
    add_noise(flat_mut(local), dp.noise_std(), rng);
    Ok(norm > dp.clip_norm)
}

/// Client-side mechanism: clip, then noise unless the server adds it.
pub fn privatize<R: Rng + ?Sized>(
    packet: &mut GradientPacket,
    dp: &DpConfig,
    rng: &mut R,
) -> Result<bool> {
    if !dp.enabled {
        return Ok(false);
    }
    let norm = clip_packet(packet, dp.clip_norm)?;
    if !dp.server_side {
        gaussianize(packet, dp.noise_multiplier, dp.clip_norm, rng);
    }
    Ok(norm > dp.clip_norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ArchConfig, EncoderOptions, EncoderPreset};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn packet() -> GradientPacket {
        let p = build_model(&ArchConfig {
            preset: EncoderPreset::SmallMlp,
            encoder: EncoderOptions::new(4, 3),
            embed_dim: 4,
            num_heads: 3,
            num_styles: 3,
            seed: 0,
        })
        .unwrap();
        GradientPacket::zeros(&p, 0, 0)
    }

    fn with_norm(norm: f64) -> GradientPacket {
        let mut p = packet();
        let n = p.len() as f64;
        p.values_mut().for_each(|v| *v = norm / n.sqrt());
        p
    }

    #[test]
    fn clipping_examples() {
        let mut p = with_norm(2.0);
        let before = p.to_vec();
        clip_packet(&mut p, 1.0).unwrap();
        assert!((p.norm() - 1.0).abs() < 1e-12);
        for (a, b) in p.values().zip(&before) {
            assert!((a - b / 2.0).abs() < 1e-15);
        }
        let mut q = with_norm(0.5);
        let q0 = q.clone();
        clip_packet(&mut q, 1.0).unwrap();
        assert_eq!(q, q0);
        let mut z = packet();
        clip_packet(&mut z, 1.0).unwrap();
        assert_eq!(z, packet());
    }

    #[test]
    fn zero_sigma_is_identity() {
        let mut p = with_norm(0.7);
        let p0 = p.clone();
        gaussianize(&mut p, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(p, p0);
    }

    #[test]
    fn disabled_mechanism_is_bit_exact_identity() {
        let mut p = with_norm(3.0);
        let p0 = p.clone();
        let dp = DpConfig::default();
        privatize(&mut p, &dp, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(p, p0);
        let mut q = with_norm(3.0);
        clip_packet(&mut q, f64::INFINITY).unwrap();
        gaussianize(
            &mut q,
            0.0,
            f64::INFINITY,
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        assert_eq!(q, p0);
    }

    #[test]
    fn noise_reaches_zero_blocks_and_is_seeded() {
        let dp = DpConfig {
            enabled: true,
            ..DpConfig::default()
        };
        let mut a = packet();
        let mut b = packet();
        privatize(&mut a, &dp, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        privatize(&mut b, &dp, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let r = a.head_range(2);
        assert!(a.to_vec()[r].iter().all(|&v| v != 0.0));
    }

    #[test]
    fn config_problems_are_reported() {
        let dp = DpConfig {
            enabled: true,
            clip_norm: 0.0,
            noise_multiplier: -1.0,
            server_side: false,
            local_heads: true,
        };
        assert_eq!(dp.problems().len(), 2);
    }

    #[test]
    fn joint_clip_shares_one_budget() {
        let mut p = with_norm(3.0);
        let mut local: ParamTensors = vec![vec![
            crate::nn::Tensor::new(vec![2], vec![4.0, 0.0]).unwrap()
        ]];
        let dp = DpConfig {
            enabled: true,
            clip_norm: 1.0,
            noise_multiplier: 0.0,
            server_side: false,
            local_heads: true,
        };
        assert!(
            privatize_joint(&mut p, &mut local, &dp, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
        );
        assert!((p.norm() - 0.6).abs() < 1e-12);
        assert!((norm_sq(&local).sqrt() - 0.8).abs() < 1e-12);
    }
}
