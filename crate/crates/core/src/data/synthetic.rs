//! Interpolated-style image dataset.
//!
//! A handful of smooth random base images play the role of source speakers.
//! Styles are either a base itself or a mixture of two bases, so some styles
//! share ingredients and sit close together.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::StyledSample;
use crate::error::{FedError, Result};
use crate::nn::Tensor;
use crate::seed::{stream_rng, streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_base_styles: usize,
    pub styles: usize,
    pub samples_per_style: usize,
    pub noise_scale: f64,
    pub side: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_base_styles: 8,
            styles: 20,
            samples_per_style: 200,
            noise_scale: 0.15,
            side: 28,
            seed: 0,
        }
    }
}

/// How a style is built from the bases: `weight * base[a] + (1 - weight) * base[b]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mixture {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// Mixture recipe for every style. The first `n_base` styles are the bases;
/// the rest walk around neighbouring base pairs with weights 1/2, 1/4, 3/4.
pub fn style_mixtures(n_base: usize, styles: usize) -> Vec<Mixture> {
    const WEIGHTS: [f64; 3] = [0.5, 0.25, 0.75];
    (0..styles)
        .map(|s| {
            if s < n_base {
                Mixture {
                    a: s,
                    b: s,
                    weight: 1.0,
                }
            } else {
                let e = s - n_base;
                let a = e % n_base;
                Mixture {
                    a,
                    b: (a + 1) % n_base,
                    weight: WEIGHTS[(e / n_base) % WEIGHTS.len()],
                }
            }
        })
        .collect()
}

fn validate(spec: &SyntheticSpec) -> Result<()> {
    let mut problems = Vec::new();
    if spec.n_base_styles < 2 {
        problems.push("n_base_styles must be at least 2".to_string());
    }
    if spec.styles < spec.n_base_styles {
        problems.push(format!(
            "styles ({}) must be at least n_base_styles ({})",
            spec.styles, spec.n_base_styles
        ));
    }
    if spec.samples_per_style == 0 {
        problems.push("samples_per_style must be positive".into());
    }
    if !(spec.noise_scale >= 0.0 && spec.noise_scale.is_finite()) {
        problems.push("noise_scale must be finite and non-negative".into());
    }
    if spec.side < 4 {
        problems.push("side must be at least 4".into());
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(FedError::Config(problems.join("; ")))
    }
}

/// A base image: a sum of four Gaussian blobs, rescaled so its peak is 1.
fn base_image<R: Rng + ?Sized>(side: usize, rng: &mut R) -> Vec<f64> {
    let s = side as f64;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.15 * s..0.85 * s),
                rng.random_range(0.15 * s..0.85 * s),
                rng.random_range(0.06 * s..0.16 * s),
                rng.random_range(0.5..1.0),
            )
        })
        .collect();
    let mut img = vec![0.0; side * side];
    for (r, row) in img.chunks_mut(side).enumerate() {
        for (c, px) in row.iter_mut().enumerate() {
            *px = blobs
                .iter()
                .map(|&(cy, cx, w, a)| {
                    let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                    a * (-d2 / (2.0 * w * w)).exp()
                })
                .sum();
        }
    }
    let peak = img.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        img.iter_mut().for_each(|p| *p /= peak);
    }
    img
}

/// Noise-free style images, one per style.
pub fn style_prototypes(spec: &SyntheticSpec) -> Result<Vec<Tensor>> {
    validate(spec)?;
    let mut rng = stream_rng(spec.seed, streams::DATA, &[0]);
    let bases: Vec<Vec<f64>> = (0..spec.n_base_styles)
        .map(|_| base_image(spec.side, &mut rng))
        .collect();
    style_mixtures(spec.n_base_styles, spec.styles)
        .into_iter()
        .map(|m| {
            let px = bases[m.a]
                .iter()
                .zip(&bases[m.b])
                .map(|(x, y)| m.weight * x + (1.0 - m.weight) * y)
                .collect();
            Tensor::new(vec![spec.side, spec.side], px)
        })
        .collect()
}

/// Generates `samples_per_style` noisy samples per style, clipped to [0, 1].
pub fn gen_interpolated_dataset(spec: &SyntheticSpec) -> Result<Vec<StyledSample>> {
    let protos = style_prototypes(spec)?;
    let noise = Normal::new(0.0, spec.noise_scale.max(f64::MIN_POSITIVE))
        .map_err(|e| FedError::Config(format!("noise_scale: {e}")))?;
    let mut out = Vec::with_capacity(protos.len() * spec.samples_per_style);
    for (style, proto) in protos.iter().enumerate() {
        let mut rng = stream_rng(spec.seed, streams::DATA, &[1, style as u64]);
        for _ in 0..spec.samples_per_style {
            let px: Vec<f64> = proto
                .data()
                .iter()
                .map(|&p| {
                    let n = if spec.noise_scale > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    (p + n).clamp(0.0, 1.0)
                })
                .collect();
            out.push(StyledSample {
                input: Tensor::new(vec![spec.side, spec.side], px)?,
                style,
            });
        }
    }
    Ok(out)
}
