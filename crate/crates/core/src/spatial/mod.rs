//! Spatial baselines: the train-location index, the closest-location
//! classifier, abundance vectors, and the coordinates-only random forest.
//!
//! All nearest-location queries use Euclidean distance in meters and return
//! the full tie set at the minimal distance; tied locations are merged
//! before counting. A location exactly equal to the query can be excluded,
//! which is always done when building abundance vectors so a query never
//! sees its own occurrences.

mod forest;
mod kdtree;

pub use forest::{
    load_forest, rf_fit, rf_predict_proba, save_forest, ForestConfig, RandomForestModel, Tree,
    TreeNode,
};
pub use kdtree::KdTree;

use crate::data::{quantize_indices, Dataset, LocationKey, SpeciesId, SplitTag};
use crate::error::{Error, Result};
use crate::eval::RankedPrediction;

/// Distinct training locations in a k-d tree, with per-location species
/// count tables and the global train species frequencies. Immutable after
/// build; queries are pure.
#[derive(Debug, Clone)]
pub struct LocationIndex {
    locations: Vec<LocationKey>,
    /// Per location: (species, count), species ascending.
    counts: Vec<Vec<(SpeciesId, u32)>>,
    tree: KdTree,
    global_freq: Vec<u64>,
    n_species: usize,
}

impl LocationIndex {
    /// Index over the occurrences carrying `tag` (normally the train split).
    pub fn build(ds: &Dataset, tag: SplitTag) -> Result<Self> {
        let indices: Vec<usize> = ds.tagged(tag);
        Self::build_from_indices(ds, &indices)
    }

    /// Index over an explicit occurrence subset.
    pub fn build_from_indices(ds: &Dataset, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("location index: no occurrences to index"));
        }
        let locations = quantize_indices(ds, indices.to_vec());
        let mut counts = Vec::with_capacity(locations.len());
        let mut global_freq = vec![0u64; ds.n_species];
        for loc in &locations {
            let mut table: Vec<(SpeciesId, u32)> = Vec::new();
            for &i in &loc.occ_indices {
                let sp = ds.occurrences[i].species;
                global_freq[sp.index()] += 1;
                match table.binary_search_by_key(&sp, |e| e.0) {
                    Ok(slot) => table[slot].1 += 1,
                    Err(slot) => table.insert(slot, (sp, 1)),
                }
            }
            counts.push(table);
        }
        let points: Vec<(f64, f64)> = locations.iter().map(|l| (l.x, l.y)).collect();
        let tree = KdTree::build(&points);
        Ok(LocationIndex {
            locations,
            counts,
            tree,
            global_freq,
            n_species: ds.n_species,
        })
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn n_species(&self) -> usize {
        self.n_species
    }

    pub fn locations(&self) -> &[LocationKey] {
        &self.locations
    }

    pub fn global_freq(&self) -> &[u64] {
        &self.global_freq
    }

    /// Species counts at one location slot.
    pub fn counts_at(&self, slot: usize) -> &[(SpeciesId, u32)] {
        &self.counts[slot]
    }
}

/// All indexed locations at minimal Euclidean distance from `q` (the tie
/// set). With `exclude_exact`, a location equal to `q` is skipped. Errors
/// when the index is empty after exclusion.
pub fn nearest_location<'a>(
    index: &'a LocationIndex,
    q: (f64, f64),
    exclude_exact: bool,
) -> Result<Vec<&'a LocationKey>> {
    let (_, slots) = index
        .tree
        .nearest_ties(q, exclude_exact)
        .ok_or_else(|| Error::invalid("nearest location: index empty after exclusion"))?;
    Ok(slots
        .iter()
        .map(|&s| &index.locations[s as usize])
        .collect())
}

fn nearest_slots(index: &LocationIndex, q: (f64, f64), exclude_exact: bool) -> Result<Vec<u32>> {
    index
        .tree
        .nearest_ties(q, exclude_exact)
        .map(|(_, slots)| slots)
        .ok_or_else(|| Error::invalid("nearest location: index empty after exclusion"))
}

/// Per-species occurrence counts aggregated over the nearest tie-set
/// locations, excluding a location equal to `q` itself.
#[derive(Debug, Clone, PartialEq)]
pub struct AbundanceVector {
    pub z: Vec<u32>,
    /// Positions of the tie-set locations the counts came from.
    pub source_locations: Vec<(f64, f64)>,
}

impl AbundanceVector {
    pub fn total(&self) -> u64 {
        self.z.iter().map(|&c| c as u64).sum()
    }
}

/// Builds the abundance vector for a query position from the nearest train
/// location(s), never counting occurrences at the query's own position.
pub fn abundance_vector(index: &LocationIndex, q: (f64, f64)) -> Result<AbundanceVector> {
    let slots = nearest_slots(index, q, true)?;
    let mut z = vec![0u32; index.n_species];
    let mut sources = Vec::with_capacity(slots.len());
    for &slot in &slots {
        for &(sp, c) in &index.counts[slot as usize] {
            z[sp.index()] += c;
        }
        let loc = &index.locations[slot as usize];
        sources.push((loc.x, loc.y));
    }
    Ok(AbundanceVector {
        z,
        source_locations: sources,
    })
}

/// The closest-location classifier: species seen at the nearest train
/// location(s) ranked by local count descending, backfilled with the most
/// frequent train species, up to `limit` predictions.
///
/// The full ordering key is (local count desc, global train frequency desc,
/// species id asc), which makes the ranking total and deterministic.
pub fn closest_location_rank(
    index: &LocationIndex,
    q: (f64, f64),
    limit: usize,
) -> Result<RankedPrediction> {
    let slots = nearest_slots(index, q, true)?;
    let mut local = vec![0u64; index.n_species];
    for &slot in &slots {
        for &(sp, c) in &index.counts[slot as usize] {
            local[sp.index()] += c as u64;
        }
    }
    let mut order: Vec<u32> = (0..index.n_species as u32).collect();
    order.sort_by(|&a, &b| {
        local[b as usize]
            .cmp(&local[a as usize])
            .then(index.global_freq[b as usize].cmp(&index.global_freq[a as usize]))
            .then(a.cmp(&b))
    });
    let entries = order
        .into_iter()
        .take(limit)
        .map(|s| (SpeciesId(s), local[s as usize] as f64))
        .collect();
    Ok(RankedPrediction { occ_id: 0, entries })
}

/// Random-forest ranking: mean leaf probability across trees, descending,
/// species-id tie-break, truncated to `limit`.
pub fn rf_predict(model: &RandomForestModel, q: (f64, f64), limit: usize) -> RankedPrediction {
    let scores = rf_predict_proba(model, q);
    RankedPrediction {
        occ_id: 0,
        entries: crate::eval::rank_scores(&scores, limit),
    }
}
