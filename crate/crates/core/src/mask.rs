//! Parameter sensitivity, critical-parameter masks, and the mask wire format.
//!
//! Sensitivity of a parameter after a round of local training is
//! `|(end - start) * end|`: how far the parameter moved, weighted by where
//! it ended up. Within every trainable layer the `round(tau * len)` most
//! sensitive positions are marked critical. Running-statistic layers have no
//! gradient, so they get zero sensitivity and are always marked critical.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerKind, ParameterSet};

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityLayer {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: LayerKind,
    pub values: Vec<f64>,
}

/// One non-negative score per parameter, laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMap {
    layers: Vec<SensitivityLayer>,
}

impl SensitivityMap {
    pub fn layers(&self) -> &[SensitivityLayer] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&SensitivityLayer> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Builds a map from explicit per-layer scores (all trainable).
    pub fn from_values(layers: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let layers = layers
            .into_iter()
            .map(|(name, values)| {
                if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                    return Err(Error::data(format!("layer `{name}` has a negative or non-finite score")));
                }
                Ok(SensitivityLayer {
                    shape: vec![values.len()],
                    name,
                    kind: LayerKind::Trainable,
                    values,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }
}

pub fn compute_sensitivity(theta_start: &ParameterSet, theta_end: &ParameterSet) -> Result<SensitivityMap> {
    theta_start.ensure_same_structure(theta_end)?;
    let layers = theta_start
        .layers()
        .iter()
        .zip(theta_end.layers())
        .map(|(s, e)| SensitivityLayer {
            name: e.name.clone(),
            shape: e.shape.clone(),
            kind: e.kind,
            values: match e.kind {
                LayerKind::Trainable => s.values.iter().zip(&e.values).map(|(&a, &b)| ((b - a) * b).abs()).collect(),
                LayerKind::Statistic => vec![0.0; e.len()],
            },
        })
        .collect();
    Ok(SensitivityMap { layers })
}

/// How critical positions are chosen within a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    /// The most sensitive positions.
    #[default]
    Sensitivity,
    /// Uniformly random positions.
    Random,
    /// The least sensitive positions.
    SensitivityReverse,
}

/// Number of critical positions in a layer of `len` parameters.
pub fn critical_count(len: usize, tau: f64) -> usize {
    ((tau * len as f64).round().max(0.0) as usize).min(len)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskLayer {
    pub kind: LayerKind,
    pub bits: Vec<bool>,
}

impl MaskLayer {
    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// One bit per parameter; `true` marks a critical position.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticalMask {
    layers: Vec<MaskLayer>,
    /// Fraction used to build the mask; unknown for masks decoded off the wire.
    tau: Option<f64>,
}

impl CriticalMask {
    pub fn new(layers: Vec<MaskLayer>, tau: Option<f64>) -> Self {
        Self { layers, tau }
    }

    /// All-ones mask shaped like `model`.
    pub fn ones_like(model: &ParameterSet) -> Self {
        Self::filled_like(model, true)
    }

    /// All-zeros mask shaped like `model`.
    pub fn zeros_like(model: &ParameterSet) -> Self {
        Self::filled_like(model, false)
    }

    fn filled_like(model: &ParameterSet, bit: bool) -> Self {
        let layers = model
            .layers()
            .iter()
            .map(|l| MaskLayer {
                kind: l.kind,
                bits: vec![bit; l.len()],
            })
            .collect();
        Self { layers, tau: None }
    }

    pub fn layers(&self) -> &[MaskLayer] {
        &self.layers
    }

    pub fn tau(&self) -> Option<f64> {
        self.tau
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.bits.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn popcount(&self) -> usize {
        self.layers.iter().map(MaskLayer::popcount).sum()
    }

    /// Same bit pattern, ignoring `tau` and layer kinds.
    pub fn same_bits(&self, other: &CriticalMask) -> bool {
        self.layers.len() == other.layers.len() && self.layers.iter().zip(&other.layers).all(|(a, b)| a.bits == b.bits)
    }

    pub fn matches_model(&self, model: &ParameterSet) -> bool {
        self.layers.len() == model.layers().len()
            && self.layers.iter().zip(model.layers()).all(|(m, l)| m.bits.len() == l.len())
    }

    fn ensure_comparable(&self, other: &CriticalMask) -> Result<()> {
        let ok = self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.bits.len() == b.bits.len());
        if ok {
            Ok(())
        } else {
            Err(Error::structure("masks have different layer sizes"))
        }
    }
}

/// Top-`tau` selection per layer by sensitivity, ties to the lowest index.
pub fn select_critical(sens: &SensitivityMap, tau: f64) -> Result<CriticalMask> {
    check_tau(tau)?;
    Ok(select_by(sens, tau, |values, k| top_k(values, k, false)))
}

/// Selection with an ablation selector. `rng` is only drawn from by
/// [`Selector::Random`].
pub fn select_with(sens: &SensitivityMap, tau: f64, selector: Selector, rng: &mut impl Rng) -> Result<CriticalMask> {
    check_tau(tau)?;
    Ok(match selector {
        Selector::Sensitivity => select_by(sens, tau, |values, k| top_k(values, k, false)),
        Selector::SensitivityReverse => select_by(sens, tau, |values, k| top_k(values, k, true)),
        Selector::Random => select_by(sens, tau, |values, k| index::sample(rng, values.len(), k).into_vec()),
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if (0.0..=1.0).contains(&tau) {
        Ok(())
    } else {
        Err(Error::config(format!("tau must lie in [0, 1], got {tau}")))
    }
}

fn select_by(sens: &SensitivityMap, tau: f64, mut pick: impl FnMut(&[f64], usize) -> Vec<usize>) -> CriticalMask {
    let layers = sens
        .layers
        .iter()
        .map(|l| match l.kind {
            LayerKind::Statistic => MaskLayer {
                kind: l.kind,
                bits: vec![true; l.values.len()],
            },
            LayerKind::Trainable => {
                let mut bits = vec![false; l.values.len()];
                for i in pick(&l.values, critical_count(l.values.len(), tau)) {
                    bits[i] = true;
                }
                MaskLayer { kind: l.kind, bits }
            }
        })
        .collect();
    CriticalMask { layers, tau: Some(tau) }
}

/// Indices of the `k` largest (or smallest, when `reverse`) values; equal
/// values prefer the lower index either way.
fn top_k(values: &[f64], k: usize, reverse: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let by_value = if reverse {
            values[a].total_cmp(&values[b])
        } else {
            values[b].total_cmp(&values[a])
        };
        by_value.then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Wire encoding: `u32` layer count, one `u32` bit length per layer (all
/// little-endian), then each layer's bits packed LSB-first into
/// `ceil(len / 8)` bytes. Padding bits are zero.
pub fn serialize_mask(mask: &CriticalMask) -> Vec<u8> {
    let payload: usize = mask.layers.iter().map(|l| l.bits.len().div_ceil(8)).sum();
    let mut out = Vec::with_capacity(4 + 4 * mask.layers.len() + payload);
    out.extend_from_slice(&(mask.layers.len() as u32).to_le_bytes());
    for l in &mask.layers {
        out.extend_from_slice(&(l.bits.len() as u32).to_le_bytes());
    }
    for l in &mask.layers {
        for chunk in l.bits.chunks(8) {
            let byte = chunk.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | (u8::from(b) << i));
            out.push(byte);
        }
    }
    out
}

/// Size in bytes of the encoding of a mask with the given layer lengths.
pub fn encoded_len(layer_lengths: &[usize]) -> usize {
    4 + 4 * layer_lengths.len() + layer_lengths.iter().map(|n| n.div_ceil(8)).sum::<usize>()
}

/// Inverse of [`serialize_mask`]. Layer kinds are not on the wire; decoded
/// layers are reported as trainable.
pub fn deserialize_mask(bytes: &[u8]) -> Result<CriticalMask> {
    let mut cursor = bytes;
    let mut read_u32 = |what: &str| -> Result<usize> {
        if cursor.len() < 4 {
            return Err(Error::Wire(format!("truncated {what}")));
        }
        let (head, rest) = cursor.split_at(4);
        cursor = rest;
        Ok(u32::from_le_bytes(head.try_into().expect("four bytes")) as usize)
    };
    let count = read_u32("layer count")?;
    let lengths = (0..count).map(|_| read_u32("layer length")).collect::<Result<Vec<_>>>()?;
    let needed: usize = lengths.iter().map(|n| n.div_ceil(8)).sum();
    if cursor.len() != needed {
        return Err(Error::Wire(format!(
            "expected {needed} payload bytes, found {}",
            cursor.len()
        )));
    }
    let mut layers = Vec::with_capacity(count);
    for len in lengths {
        let (head, rest) = cursor.split_at(len.div_ceil(8));
        cursor = rest;
        let bits: Vec<bool> = (0..len).map(|i| head[i / 8] >> (i % 8) & 1 == 1).collect();
        if len % 8 != 0 && head[len / 8] >> (len % 8) != 0 {
            return Err(Error::Wire("non-zero padding bits".into()));
        }
        layers.push(MaskLayer {
            kind: LayerKind::Trainable,
            bits,
        });
    }
    Ok(CriticalMask { layers, tau: None })
}

/// Number of positions where the two masks differ.
pub fn hamming(a: &CriticalMask, b: &CriticalMask) -> Result<usize> {
    a.ensure_comparable(b)?;
    Ok(a.layers
        .iter()
        .zip(&b.layers)
        .map(|(x, y)| x.bits.iter().zip(&y.bits).filter(|(p, q)| p != q).count())
        .sum())
}

/// Similarity of critical locations: `1 - hamming / (2n)`, with `n` the
/// total number of positions (statistics included). Identical masks give 1;
/// complementary ones give 1/2.
pub fn overlap_ratio(a: &CriticalMask, b: &CriticalMask) -> Result<f64> {
    let d = hamming(a, b)?;
    let n = a.len();
    if n == 0 {
        return Ok(1.0);
    }
    Ok(1.0 - d as f64 / (2 * n) as f64)
}
