//! Diagnostic experiments built on top of [`Simulation`].

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RunConfig, Simulation};
use crate::client::ClientState;
use crate::data;
use crate::error::{Error, Result};
use crate::mask::{self, SensitivityMap};

/// Angle in degrees between two vectors; `None` if either has zero norm.
pub fn angle_degrees(u: &[f64], v: &[f64]) -> Option<f64> {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum();
    let nv: f64 = v.iter().map(|b| b * b).sum();
    if nu == 0.0 || nv == 0.0 {
        return None;
    }
    let cos = (dot / (nu * nv).sqrt()).clamp(-1.0, 1.0);
    Some(cos.acos().to_degrees())
}

/// Per round, the angle between clients `a` and `b`'s local updates
/// (`end - start` over trainable layers).
pub fn gradient_angle_probe(config: &RunConfig, a: usize, b: usize) -> Result<Vec<Option<f64>>> {
    gradient_angle_probe_on(Simulation::new(config.clone())?, a, b)
}

pub fn gradient_angle_probe_on(mut sim: Simulation, a: usize, b: usize) -> Result<Vec<Option<f64>>> {
    let n = sim.clients().len();
    if a == b || a >= n || b >= n {
        return Err(Error::config(format!("probe needs two distinct clients in [0, {n}), got {a} and {b}")));
    }
    let mut angles = Vec::with_capacity(sim.config().rounds);
    while !sim.is_finished() {
        let rec = sim.step()?;
        let ua = rec.outcomes[a].update_vector(&rec.trained[a]);
        let ub = rec.outcomes[b].update_vector(&rec.trained[b]);
        angles.push(angle_degrees(&ua, &ub));
    }
    Ok(angles)
}

/// `round,angle_deg`; rounds with an undefined angle leave the cell empty.
pub fn write_angles<W: Write>(angles: &[Option<f64>], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["round", "angle_deg"])?;
    for (i, a) in angles.iter().enumerate() {
        w.serialize((i + 1, a))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairType {
    SameDistribution,
    ClassOverlap,
    Disjoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub pair_type: PairType,
    pub mean_overlap: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OverlapStudy {
    /// Second client of every planted pair is an exact copy of the first
    /// (same shard, same random streams) instead of a fresh draw from the
    /// same classes.
    pub duplicate_pairs: bool,
}

/// Clients `2g` and `2g+1` hold classes `{g, g+1} mod C`, so neighbouring
/// groups share one class and distant groups share none.
pub fn planted_class_sets(num_clients: usize, num_classes: usize) -> Result<Vec<Vec<usize>>> {
    if num_clients < 2 || !num_clients.is_multiple_of(2) {
        return Err(Error::config(format!("the overlap study needs an even number of clients, got {num_clients}")));
    }
    if num_classes < 2 {
        return Err(Error::config("the overlap study needs at least two classes"));
    }
    Ok((0..num_clients)
        .map(|i| {
            let g = i / 2;
            let mut s = vec![g % num_classes, (g + 1) % num_classes];
            s.sort_unstable();
            s
        })
        .collect())
}

fn pair_type(a: &[usize], b: &[usize]) -> PairType {
    if a == b {
        PairType::SameDistribution
    } else if a.iter().any(|c| b.contains(c)) {
        PairType::ClassOverlap
    } else {
        PairType::Disjoint
    }
}

/// A simulation over the planted partition of [`planted_class_sets`],
/// together with each client's class set.
pub fn planted_simulation(config: &RunConfig, study: OverlapStudy) -> Result<(Simulation, Vec<Vec<usize>>)> {
    config.validate()?;
    let sets = planted_class_sets(config.clients, config.data.classes)?;
    let source = config.data.generate(config.seed)?;
    let mut shards = data::partition_by_class_sets(
        &source,
        &sets,
        config.partition.train_per_client,
        config.partition.test_per_client,
        config.seed,
    )?;
    let mut seeds: Vec<u64> = (0..config.clients).map(|i| config.client_seed(i)).collect();
    if study.duplicate_pairs {
        for g in (0..config.clients).step_by(2) {
            let mut copy = shards[g].clone();
            copy.client_id = g + 1;
            shards[g + 1] = copy;
            seeds[g + 1] = seeds[g];
        }
    }
    Ok((Simulation::from_shards(config.clone(), shards, seeds)?, sets))
}

/// Trains on a planted partition for `config.rounds` rounds and reports the
/// mean final mask overlap for each kind of client pair.
pub fn overlap_similarity_study(config: &RunConfig, study: OverlapStudy) -> Result<Vec<OverlapRow>> {
    let (mut sim, sets) = planted_simulation(config, study)?;
    while !sim.is_finished() {
        sim.step()?;
    }
    let masks: Vec<_> = sim
        .clients()
        .iter()
        .map(|c| c.mask.as_ref().expect("trained at least one round"))
        .collect();

    let mut sums = [(0.0, 0usize); 3];
    for i in 0..masks.len() {
        for j in (i + 1)..masks.len() {
            let slot = pair_type(&sets[i], &sets[j]) as usize;
            sums[slot].0 += mask::overlap_ratio(masks[i], masks[j])?;
            sums[slot].1 += 1;
        }
    }
    [PairType::SameDistribution, PairType::ClassOverlap, PairType::Disjoint]
        .into_iter()
        .map(|t| {
            let (sum, pairs) = sums[t as usize];
            if pairs == 0 {
                return Err(Error::config(format!(
                    "planted partition with {} clients and {} classes has no {t:?} pairs",
                    config.clients, config.data.classes
                )));
            }
            Ok(OverlapRow {
                pair_type: t,
                mean_overlap: sum / pairs as f64,
                pairs,
            })
        })
        .collect()
}

pub fn write_overlap_study<W: Write>(rows: &[OverlapRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// A layer's sensitivities as a matrix, one CSV row per output unit, no header.
pub fn write_sensitivity_heatmap<W: Write>(sens: &SensitivityMap, layer: &str, writer: W) -> Result<()> {
    let l = sens.layer(layer).ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
    let cols = if l.shape.len() >= 2 { l.shape[1..].iter().product() } else { 1 };
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for row in l.values.chunks(cols) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_sensitivity_heatmap(state: &ClientState, layer: &str, path: impl AsRef<Path>) -> Result<()> {
    let sens = state
        .sensitivity
        .as_ref()
        .ok_or_else(|| Error::config(format!("client {} has not trained yet", state.client_id)))?;
    // Check before creating the file so a bad name leaves nothing behind.
    sens.layer(layer).ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
    write_sensitivity_heatmap(sens, layer, BufWriter::new(File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn angle_basics() {
        assert_eq!(angle_degrees(&[1.0, 0.0], &[0.0, 3.0]), Some(90.0));
        assert_eq!(angle_degrees(&[0.3, -1.7, 2.2], &[0.3, -1.7, 2.2]), Some(0.0));
        assert_eq!(angle_degrees(&[1.0, 1.0], &[-2.0, -2.0]).map(|a| a.round()), Some(180.0));
        assert_eq!(angle_degrees(&[0.0, 0.0], &[1.0, 0.0]), None);
    }

    #[test]
    fn planted_sets_contain_every_pair_type() {
        let sets = planted_class_sets(8, 8).unwrap();
        assert_eq!(sets[0], vec![0, 1]);
        assert_eq!(sets[1], vec![0, 1]);
        assert_eq!(sets[2], vec![1, 2]);
        assert_eq!(pair_type(&sets[0], &sets[1]), PairType::SameDistribution);
        assert_eq!(pair_type(&sets[0], &sets[2]), PairType::ClassOverlap);
        assert_eq!(pair_type(&sets[0], &sets[4]), PairType::Disjoint);
        assert!(planted_class_sets(7, 8).is_err());
    }

    #[test]
    fn heatmap_rows_follow_layer_shape() {
        let sens = SensitivityMap::from_values(vec![("w".into(), vec![0.0; 6])]).unwrap();
        let mut buf = Vec::new();
        write_sensitivity_heatmap(&sens, "w", &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 6);
        assert!(matches!(write_sensitivity_heatmap(&sens, "nope", Vec::new()), Err(Error::UnknownLayer(_))));
    }
}
