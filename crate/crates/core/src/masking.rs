//! Per-example binary masks over memorization units.
//!
//! Masks are assigned ahead of training (or at unlearning time) and never
//! change afterwards. Active-bit counts are exact: each layer of a mask has
//! `ceil(density * mem_units)` ones, sampled without replacement.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Per-layer bit vectors over a network's memorization units.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    /// One vector per hidden layer; entries are 0 or 1, length = mem_units.
    pub layers: Vec<Vec<u8>>,
}

impl Mask {
    /// Exact-count random mask: ceil(density * mem) active bits per layer.
    fn sample(mem_shape: &[usize], density: f64, rng: &mut ChaCha8Rng) -> Mask {
        let layers = mem_shape
            .iter()
            .map(|&mem| {
                let k = active_count(density, mem);
                let mut idx: Vec<usize> = (0..mem).collect();
                idx.shuffle(rng);
                let mut bits = vec![0u8; mem];
                for &i in &idx[..k] {
                    bits[i] = 1;
                }
                bits
            })
            .collect();
        Mask { layers }
    }

    pub fn ones(mem_shape: &[usize]) -> Mask {
        Mask {
            layers: mem_shape.iter().map(|&m| vec![1u8; m]).collect(),
        }
    }

    pub fn active_counts(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| l.iter().filter(|&&b| b == 1).count())
            .collect()
    }
}

pub fn active_count(density: f64, mem_units: usize) -> usize {
    (density * mem_units as f64).ceil() as usize
}

/// How a table's masks were assigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Etd,
    Rem,
    Ideal,
}

/// Immutable map from example id to its mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskTable {
    pub density: f64,
    pub provenance: Provenance,
    /// Sorted by id; serialization order is therefore canonical.
    pub entries: BTreeMap<u64, Mask>,
}

impl MaskTable {
    pub fn get(&self, id: u64) -> Option<&Mask> {
        self.entries.get(&id)
    }

    pub fn mem_shape(&self) -> Vec<usize> {
        self.entries
            .values()
            .next()
            .map(|m| m.layers.iter().map(|l| l.len()).collect())
            .unwrap_or_default()
    }
}

/// Independent random mask per example (ETD training).
pub fn assign_etd_masks(
    example_ids: &[u64],
    mem_shape: &[usize],
    density: f64,
    seed: u64,
) -> Result<MaskTable> {
    check_density(density)?;
    let mut entries = BTreeMap::new();
    let mut ids: Vec<u64> = example_ids.to_vec();
    ids.sort_unstable();
    for id in ids {
        let mut r = rng::stream(seed, &[rng::tag("etd-mask"), id]);
        entries.insert(id, Mask::sample(mem_shape, density, &mut r));
    }
    Ok(MaskTable {
        density,
        provenance: Provenance::Etd,
        entries,
    })
}

/// One shared mask for every forget id; independent masks elsewhere, or the
/// base (ETD) mask when a base table is given.
pub fn assign_rem_masks(
    all_ids: &[u64],
    forget_ids: &[u64],
    mem_shape: &[usize],
    density: f64,
    seed: u64,
    base: Option<&MaskTable>,
) -> Result<MaskTable> {
    build_grouped(
        all_ids,
        forget_ids,
        mem_shape,
        density,
        seed,
        base,
        Provenance::Rem,
    )
}

/// Like [`assign_rem_masks`] but the shared group is the full corrupted set.
pub fn assign_ideal_masks(
    all_ids: &[u64],
    corrupted_ids: &[u64],
    mem_shape: &[usize],
    density: f64,
    seed: u64,
) -> Result<MaskTable> {
    build_grouped(
        all_ids,
        corrupted_ids,
        mem_shape,
        density,
        seed,
        None,
        Provenance::Ideal,
    )
}

fn build_grouped(
    all_ids: &[u64],
    group_ids: &[u64],
    mem_shape: &[usize],
    density: f64,
    seed: u64,
    base: Option<&MaskTable>,
    provenance: Provenance,
) -> Result<MaskTable> {
    check_density(density)?;
    let all: std::collections::BTreeSet<u64> = all_ids.iter().copied().collect();
    for id in group_ids {
        if !all.contains(id) {
            return Err(Error::InvalidArgument(format!(
                "forget id {id} not present in the id universe"
            )));
        }
    }
    let group: std::collections::BTreeSet<u64> = group_ids.iter().copied().collect();
    let mut shared_rng = rng::stream(seed, &[rng::tag("shared-mask")]);
    let shared = Mask::sample(mem_shape, density, &mut shared_rng);
    let mut entries = BTreeMap::new();
    for &id in &all {
        let mask = if group.contains(&id) {
            shared.clone()
        } else if let Some(t) = base {
            match t.get(id) {
                Some(m) => m.clone(),
                None => {
                    let mut r = rng::stream(seed, &[rng::tag("rem-mask"), id]);
                    Mask::sample(mem_shape, density, &mut r)
                }
            }
        } else {
            let mut r = rng::stream(seed, &[rng::tag("rem-mask"), id]);
            Mask::sample(mem_shape, density, &mut r)
        };
        entries.insert(id, mask);
    }
    Ok(MaskTable {
        density,
        provenance,
        entries,
    })
}

fn check_density(density: f64) -> Result<()> {
    if density <= 0.0 || density > 1.0 {
        return Err(Error::InvalidArgument(format!(
            "mask density must be in (0, 1], got {density}"
        )));
    }
    Ok(())
}
