//! Ranking evaluation: mean reciprocal rank, the ideal-MRR bound for query
//! sets with repeated inputs, and the holdout / Monte Carlo validation
//! protocols.
//!
//! Reciprocal rank of a query is 1/rank of the true species in the predicted
//! list, or 0 when the truth is absent (lists are capped, by default at 100).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SpeciesId, SplitTag};
use crate::error::{Error, Result};
use crate::spatial::{self, ForestConfig, LocationIndex};

/// Maximum prediction list length accepted by the evaluator.
pub const PREDICTION_LIMIT: usize = 100;

/// A per-query ordered species list with scores, at most
/// [`PREDICTION_LIMIT`] entries long.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedPrediction {
    pub occ_id: u64,
    /// (species, score), scores non-increasing, species unique.
    pub entries: Vec<(SpeciesId, f64)>,
}

impl RankedPrediction {
    /// Checks the structural invariants: unique species, non-increasing
    /// scores, length within the cap.
    pub fn validate(&self) -> Result<()> {
        if self.entries.len() > PREDICTION_LIMIT {
            return Err(Error::invalid(format!(
                "prediction for occ {} has {} entries (cap {PREDICTION_LIMIT})",
                self.occ_id,
                self.entries.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for w in self.entries.windows(2) {
            if w[1].1 > w[0].1 {
                return Err(Error::invalid(format!(
                    "prediction for occ {} has increasing scores",
                    self.occ_id
                )));
            }
        }
        for (s, _) in &self.entries {
            if !seen.insert(*s) {
                return Err(Error::invalid(format!(
                    "prediction for occ {} lists species {s} twice",
                    self.occ_id
                )));
            }
        }
        Ok(())
    }

    /// 1-based rank of a species, or None when absent.
    pub fn rank_of(&self, species: SpeciesId) -> Option<usize> {
        self.entries
            .iter()
            .position(|(s, _)| *s == species)
            .map(|i| i + 1)
    }
}

/// Sorts (species, score) pairs by score descending with species-id ascending
/// tie-break, truncating to `limit`. The shared ranking rule for every model.
pub fn rank_scores(scores: &[f64], limit: usize) -> Vec<(SpeciesId, f64)> {
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    order.sort_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .expect("scores must not be NaN")
            .then(a.cmp(&b))
    });
    order
        .into_iter()
        .take(limit)
        .map(|i| (SpeciesId(i), scores[i as usize]))
        .collect()
}

/// Ground truth for one query plus the grouping key used by the ideal-MRR
/// bound (exact model-visible input; position for every current model).
#[derive(Debug, Clone, Copy)]
pub struct QueryTruth {
    pub occ_id: u64,
    pub species: SpeciesId,
    pub group: (u64, u64),
}

/// Grouping key from an exact position.
pub fn position_group(x: f64, y: f64) -> (u64, u64) {
    (x.to_bits(), y.to_bits())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerQuery {
    pub occ_id: u64,
    /// 1-based rank of the truth, 0 when absent from the list.
    pub rank: usize,
    pub reciprocal_rank: f64,
}

/// Evaluation summary for one prediction set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub queries: usize,
    pub mrr: f64,
    pub ideal_mrr: f64,
    pub top1: f64,
    pub top10: f64,
    pub top100: f64,
    /// How queries were grouped for the ideal bound. Position grouping
    /// upper-bounds spatial ambiguity only.
    pub grouping: String,
    pub per_query: Vec<PerQuery>,
}

impl EvalReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializable");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Flat per-query CSV for plotting.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("occ_id,rank,reciprocal_rank\n");
        for q in &self.per_query {
            out.push_str(&format!("{},{},{}\n", q.occ_id, q.rank, q.reciprocal_rank));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Mean reciprocal rank plus top-k hit rates and the ideal bound for the
/// grouped query set. Every truth must have a prediction.
pub fn evaluate(predictions: &[RankedPrediction], truths: &[QueryTruth]) -> Result<EvalReport> {
    if truths.is_empty() {
        return Err(Error::invalid("empty query set"));
    }
    let by_id: HashMap<u64, &RankedPrediction> =
        predictions.iter().map(|p| (p.occ_id, p)).collect();
    let mut per_query = Vec::with_capacity(truths.len());
    let mut sum_rr = 0.0;
    let mut hits = [0usize; 3];
    for t in truths {
        let pred = by_id
            .get(&t.occ_id)
            .ok_or_else(|| Error::invalid(format!("missing prediction for occ_id {}", t.occ_id)))?;
        let rank = pred.rank_of(t.species).unwrap_or(0);
        let rr = if rank == 0 { 0.0 } else { 1.0 / rank as f64 };
        sum_rr += rr;
        for (slot, k) in [1usize, 10, 100].iter().enumerate() {
            if rank >= 1 && rank <= *k {
                hits[slot] += 1;
            }
        }
        per_query.push(PerQuery {
            occ_id: t.occ_id,
            rank,
            reciprocal_rank: rr,
        });
    }
    let q = truths.len() as f64;
    let ideal = ideal_mrr(&truths.iter().map(|t| (t.group, t.species)).collect::<Vec<_>>())?;
    Ok(EvalReport {
        queries: truths.len(),
        mrr: sum_rr / q,
        ideal_mrr: ideal,
        top1: hits[0] as f64 / q,
        top10: hits[1] as f64 / q,
        top100: hits[2] as f64 / q,
        grouping: "position".into(),
        per_query,
    })
}

/// The best MRR any single-ranking-per-input model can achieve on a query
/// set where several queries share an input: within each group the optimal
/// ranking orders the distinct truths by count descending.
pub fn ideal_mrr(queries: &[((u64, u64), SpeciesId)]) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::invalid("empty query set"));
    }
    let mut groups: HashMap<(u64, u64), HashMap<SpeciesId, usize>> = HashMap::new();
    for (g, s) in queries {
        *groups.entry(*g).or_default().entry(*s).or_insert(0) += 1;
    }
    let mut total = 0.0;
    for counts in groups.values() {
        let mut ordered: Vec<(SpeciesId, usize)> = counts.iter().map(|(&s, &c)| (s, c)).collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        for (pos, (_, count)) in ordered.iter().enumerate() {
            total += *count as f64 / (pos + 1) as f64;
        }
    }
    Ok(total / queries.len() as f64)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct HoldoutSummary {
    pub n_train: usize,
    pub n_validation: usize,
    pub n_prevalidation: usize,
}

/// Tags 10% of the non-test occurrences as validation, 10% of the remainder
/// as prevalidation, and the rest as train. Deterministic in the seed.
pub fn holdout_protocol(ds: &mut Dataset, seed: u64) -> Result<HoldoutSummary> {
    let mut eligible: Vec<usize> = (0..ds.len())
        .filter(|&i| ds.tags[i] != SplitTag::Test)
        .collect();
    let n = eligible.len();
    if n < 10 {
        return Err(Error::invalid(format!(
            "dataset too small for holdout protocol: {n} non-test occurrences (need >= 10)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    let n_val = (n as f64 * 0.1).round() as usize;
    let n_preval = ((n - n_val) as f64 * 0.1).round() as usize;
    for (pos, &i) in eligible.iter().enumerate() {
        ds.tags[i] = if pos < n_val {
            SplitTag::Validation
        } else if pos < n_val + n_preval {
            SplitTag::Prevalidation
        } else {
            SplitTag::Train
        };
    }
    Ok(HoldoutSummary {
        n_train: n - n_val - n_preval,
        n_validation: n_val,
        n_prevalidation: n_preval,
    })
}

/// The two model families evaluated with Monte Carlo cross-validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialModelKind {
    ClosestLocation,
    RandomForest,
}

impl SpatialModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SpatialModelKind::ClosestLocation => "spa-cc",
            SpatialModelKind::RandomForest => "spa-rf",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McReport {
    pub model: String,
    pub splits: usize,
    pub per_split_mrr: Vec<f64>,
    pub mean_mrr: f64,
}

impl McReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializable");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Monte Carlo cross-validation for the spatial models: `n_splits`
/// independent shuffled 90/10 train-validation splits over the non-test
/// occurrences, scored by the mean of the per-split MRRs. Split seeds are
/// `base_seed + split_index`.
///
/// The random forest needs every species on both sides, so species with
/// fewer than two occurrences are removed before splitting, and a validation
/// species left without a train occurrence has one moved over.
pub fn monte_carlo_protocol(
    ds: &Dataset,
    kind: SpatialModelKind,
    n_splits: usize,
    base_seed: u64,
    forest: ForestConfig,
) -> Result<McReport> {
    let mut eligible: Vec<usize> = (0..ds.len())
        .filter(|&i| ds.tags[i] != SplitTag::Test)
        .collect();
    if kind == SpatialModelKind::RandomForest {
        let mut counts = vec![0usize; ds.n_species];
        for &i in &eligible {
            counts[ds.occurrences[i].species.index()] += 1;
        }
        eligible.retain(|&i| counts[ds.occurrences[i].species.index()] >= 2);
    }
    if eligible.len() < 10 {
        return Err(Error::invalid(
            "dataset too small for Monte Carlo protocol (need >= 10 usable occurrences)",
        ));
    }

    let mut per_split = Vec::with_capacity(n_splits);
    for split in 0..n_splits {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed + split as u64);
        let mut order = eligible.clone();
        order.shuffle(&mut rng);
        let n_val = (order.len() as f64 * 0.1).round().max(1.0) as usize;
        let mut val: Vec<usize> = order[..n_val].to_vec();
        let mut train: Vec<usize> = order[n_val..].to_vec();

        if kind == SpatialModelKind::RandomForest {
            // Keep at least one train occurrence per validation species.
            let mut in_train = vec![false; ds.n_species];
            for &i in &train {
                in_train[ds.occurrences[i].species.index()] = true;
            }
            let mut moved = Vec::new();
            for (pos, &i) in val.iter().enumerate() {
                let sp = ds.occurrences[i].species.index();
                if !in_train[sp] {
                    in_train[sp] = true;
                    moved.push(pos);
                }
            }
            for &pos in moved.iter().rev() {
                train.push(val.remove(pos));
            }
        }
        if val.is_empty() || train.is_empty() {
            return Err(Error::invalid("degenerate Monte Carlo split"));
        }

        per_split.push(match kind {
            SpatialModelKind::ClosestLocation => {
                let index = LocationIndex::build_from_indices(ds, &train)?;
                mean_rr(ds, &val, |q| {
                    spatial::closest_location_rank(&index, q, PREDICTION_LIMIT)
                })?
            }
            SpatialModelKind::RandomForest => {
                let points: Vec<(f64, f64)> =
                    train.iter().map(|&i| ds.occurrences[i].position()).collect();
                let labels: Vec<u32> =
                    train.iter().map(|&i| ds.occurrences[i].species.0).collect();
                let model = spatial::rf_fit(&points, &labels, ds.n_species, forest)?;
                mean_rr(ds, &val, |q| Ok(spatial::rf_predict(&model, q, PREDICTION_LIMIT)))?
            }
        });
    }

    let mean = per_split.iter().sum::<f64>() / per_split.len() as f64;
    Ok(McReport {
        model: kind.as_str().into(),
        splits: n_splits,
        per_split_mrr: per_split,
        mean_mrr: mean,
    })
}

fn mean_rr<F>(ds: &Dataset, queries: &[usize], mut predict: F) -> Result<f64>
where
    F: FnMut((f64, f64)) -> Result<RankedPrediction>,
{
    let mut sum = 0.0;
    for &i in queries {
        let occ = &ds.occurrences[i];
        let pred = predict(occ.position())?;
        sum += pred
            .rank_of(occ.species)
            .map(|r| 1.0 / r as f64)
            .unwrap_or(0.0);
    }
    Ok(sum / queries.len() as f64)
}

const PREDICTION_HEADER: &str = "occ_id,rank,species_id,score";

/// Writes predictions as `occ_id,rank,species_id,score` with external
/// species labels, ranks 1-based.
pub fn write_predictions(preds: &[RankedPrediction], labels: &[i64], path: &Path) -> Result<()> {
    let mut out = String::from(PREDICTION_HEADER);
    out.push('\n');
    for p in preds {
        for (rank, (species, score)) in p.entries.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                p.occ_id,
                rank + 1,
                labels[species.index()],
                score
            ));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a prediction CSV back, mapping external labels to the dataset's
/// dense species ids.
pub fn read_predictions(path: &Path, ds: &Dataset) -> Result<Vec<RankedPrediction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut preds: Vec<RankedPrediction> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if idx == 0 {
            if line.trim() != PREDICTION_HEADER {
                return Err(Error::Csv {
                    path: path.to_path_buf(),
                    line: 1,
                    msg: format!("expected header `{PREDICTION_HEADER}`"),
                });
            }
            continue;
        }
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let bad = |what: &str| Error::Csv {
            path: path.to_path_buf(),
            line: line_no,
            msg: format!("invalid {what}"),
        };
        let occ_id: u64 = fields[0].trim().parse().map_err(|_| bad("occ_id"))?;
        let rank: usize = fields[1].trim().parse().map_err(|_| bad("rank"))?;
        let label: i64 = fields[2].trim().parse().map_err(|_| bad("species_id"))?;
        let score: f64 = fields[3].trim().parse().map_err(|_| bad("score"))?;
        let species = ds.dense_id(label).ok_or_else(|| Error::Csv {
            path: path.to_path_buf(),
            line: line_no,
            msg: format!("species label {label} not in dataset"),
        })?;
        let start_new = preds.last().map(|p| p.occ_id != occ_id).unwrap_or(true);
        if start_new {
            preds.push(RankedPrediction {
                occ_id,
                entries: Vec::new(),
            });
        }
        let current = preds.last_mut().unwrap();
        if rank != current.entries.len() + 1 {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!(
                    "rank {rank} out of order (expected {})",
                    current.entries.len() + 1
                ),
            });
        }
        current.entries.push((species, score));
    }
    for p in &preds {
        p.validate()?;
    }
    Ok(preds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng as _};
    use rand_chacha::ChaCha8Rng;

    fn pred(occ_id: u64, species: &[u32]) -> RankedPrediction {
        RankedPrediction {
            occ_id,
            entries: species
                .iter()
                .enumerate()
                .map(|(i, &s)| (SpeciesId(s), 1.0 - i as f64 * 0.01))
                .collect(),
        }
    }

    fn truth(occ_id: u64, species: u32, group: u64) -> QueryTruth {
        QueryTruth {
            occ_id,
            species: SpeciesId(species),
            group: (group, 0),
        }
    }

    #[test]
    fn single_query_rank_one() {
        let report = evaluate(&[pred(0, &[4, 2, 9])], &[truth(0, 4, 0)]).unwrap();
        assert_eq!(report.mrr, 1.0);
        assert_eq!(report.top1, 1.0);
    }

    #[test]
    fn mrr_arithmetic_ranks_1_2_4() {
        let preds = vec![
            pred(0, &[5, 1, 2, 3]),
            pred(1, &[9, 5, 2, 3]),
            pred(2, &[9, 8, 7, 5]),
        ];
        let truths = vec![truth(0, 5, 0), truth(1, 5, 1), truth(2, 5, 2)];
        let report = evaluate(&preds, &truths).unwrap();
        assert!((report.mrr - 7.0 / 12.0).abs() < 1e-12, "mrr {}", report.mrr);
    }

    #[test]
    fn truth_absent_from_full_list_counts_zero() {
        let species: Vec<u32> = (0..100).collect();
        let p = pred(0, &species);
        assert_eq!(p.entries.len(), 100);
        let report = evaluate(&[p], &[truth(0, 500, 0)]).unwrap();
        assert_eq!(report.mrr, 0.0);
        assert_eq!(report.per_query[0].rank, 0);
    }

    #[test]
    fn missing_prediction_is_an_error() {
        let err = evaluate(&[pred(0, &[1])], &[truth(7, 1, 0)]).unwrap_err();
        assert!(err.to_string().contains("occ_id 7"), "{err}");
    }

    #[test]
    fn ideal_mrr_distinct_inputs_is_one() {
        let queries: Vec<((u64, u64), SpeciesId)> =
            (0..10).map(|i| ((i, 0), SpeciesId(i as u32))).collect();
        assert_eq!(ideal_mrr(&queries).unwrap(), 1.0);
    }

    #[test]
    fn ideal_mrr_two_truths_same_input() {
        // One location, two queries with different truths: enumerating both
        // orderings gives max (1 + 1/2)/2 = 0.75.
        let queries = vec![((0, 0), SpeciesId(1)), ((0, 0), SpeciesId(2))];
        let got = ideal_mrr(&queries).unwrap();
        let orderings = [(1.0 + 0.5) / 2.0, (0.5 + 1.0) / 2.0];
        let best = orderings.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(got, best);
        assert_eq!(got, 0.75);
    }

    #[test]
    fn ideal_mrr_count_weighted() {
        // One location, truths A x3 and B x1: count-descending gives
        // (3*1 + 1*0.5)/4 = 0.875; the swapped ordering only 0.625.
        let mut queries = vec![((0, 0), SpeciesId(0)); 3];
        queries.push(((0, 0), SpeciesId(1)));
        let got = ideal_mrr(&queries).unwrap();
        assert_eq!(got, 0.875);
        let swapped = (3.0 * 0.5 + 1.0) / 4.0;
        assert_eq!(swapped, 0.625);
        assert!(got > swapped);
    }

    /// Exhaustive check that count-descending ordering is optimal for small
    /// groups: compares against every permutation of <= 5 distinct species.
    #[test]
    fn ideal_ordering_beats_all_permutations() {
        fn permutations(items: &[u32]) -> Vec<Vec<u32>> {
            if items.len() <= 1 {
                return vec![items.to_vec()];
            }
            let mut out = Vec::new();
            for (i, &head) in items.iter().enumerate() {
                let mut rest = items.to_vec();
                rest.remove(i);
                for mut tail in permutations(&rest) {
                    tail.insert(0, head);
                    out.push(tail);
                }
            }
            out
        }

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..30 {
            let k = rng.gen_range(1..=5usize);
            let counts: Vec<usize> = (0..k).map(|_| rng.gen_range(1..5usize)).collect();
            let mut queries = Vec::new();
            for (sp, &c) in counts.iter().enumerate() {
                for _ in 0..c {
                    queries.push(((0u64, 0u64), SpeciesId(sp as u32)));
                }
            }
            let got = ideal_mrr(&queries).unwrap();
            let total: usize = counts.iter().sum();
            let species: Vec<u32> = (0..k as u32).collect();
            let mut best = f64::MIN;
            for perm in permutations(&species) {
                let mut sum = 0.0;
                for (pos, &sp) in perm.iter().enumerate() {
                    sum += counts[sp as usize] as f64 / (pos + 1) as f64;
                }
                best = best.max(sum / total as f64);
            }
            assert!((got - best).abs() < 1e-12, "got {got}, best {best}");
        }
    }

    fn toy_dataset(n: usize, n_species: usize, seed: u64) -> Dataset {
        use crate::data::{Bounds, CrsMode, Occurrence};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let occurrences: Vec<Occurrence> = (0..n)
            .map(|i| Occurrence {
                occ_id: i as u64,
                x: rng.gen_range(0.0..1000.0),
                y: rng.gen_range(0.0..1000.0),
                species: SpeciesId(rng.gen_range(0..n_species as u32)),
            })
            .collect();
        let bounds = Bounds::from_points(occurrences.iter().map(|o| (o.x, o.y))).unwrap();
        Dataset {
            occurrences,
            n_species,
            labels: (0..n_species as i64).collect(),
            bounds,
            tags: vec![SplitTag::None; n],
            crs: CrsMode::Planar,
        }
    }

    #[test]
    fn holdout_proportions_exact_at_1000() {
        let mut ds = toy_dataset(1000, 5, 1);
        let summary = holdout_protocol(&mut ds, 42).unwrap();
        assert_eq!(summary.n_validation, 100);
        assert_eq!(summary.n_prevalidation, 90);
        assert_eq!(summary.n_train, 810);
        assert_eq!(ds.tagged(SplitTag::Validation).len(), 100);
        assert_eq!(ds.tagged(SplitTag::Prevalidation).len(), 90);
        assert_eq!(ds.tagged(SplitTag::Train).len(), 810);
    }

    #[test]
    fn holdout_is_deterministic() {
        let mut a = toy_dataset(137, 5, 1);
        let mut b = toy_dataset(137, 5, 1);
        holdout_protocol(&mut a, 9).unwrap();
        holdout_protocol(&mut b, 9).unwrap();
        assert_eq!(a.tags, b.tags);
        let mut c = toy_dataset(137, 5, 1);
        holdout_protocol(&mut c, 10).unwrap();
        assert_ne!(a.tags, c.tags);
    }

    #[test]
    fn holdout_too_small_errors() {
        let mut ds = toy_dataset(9, 2, 1);
        assert!(holdout_protocol(&mut ds, 0).is_err());
    }

    #[test]
    fn holdout_keeps_test_untouched() {
        let mut ds = toy_dataset(50, 3, 2);
        ds.tags[7] = SplitTag::Test;
        ds.tags[13] = SplitTag::Test;
        holdout_protocol(&mut ds, 5).unwrap();
        assert_eq!(ds.tags[7], SplitTag::Test);
        assert_eq!(ds.tags[13], SplitTag::Test);
        assert_eq!(ds.tagged(SplitTag::None).len(), 0);
    }

    #[test]
    fn monte_carlo_reports_twenty_splits_and_mean() {
        let ds = toy_dataset(200, 4, 3);
        let report = monte_carlo_protocol(
            &ds,
            SpatialModelKind::ClosestLocation,
            20,
            77,
            ForestConfig::default(),
        )
        .unwrap();
        assert_eq!(report.per_split_mrr.len(), 20);
        let mean = report.per_split_mrr.iter().sum::<f64>() / 20.0;
        assert!((report.mean_mrr - mean).abs() < 1e-15);
    }

    #[test]
    fn monte_carlo_zero_variance_for_split_invariant_model() {
        // Single-species dataset: the closest-location classifier always
        // ranks that species first, so every split scores exactly 1.
        let ds = toy_dataset(60, 1, 4);
        let report = monte_carlo_protocol(
            &ds,
            SpatialModelKind::ClosestLocation,
            20,
            5,
            ForestConfig::default(),
        )
        .unwrap();
        assert!(report.per_split_mrr.iter().all(|&m| m == 1.0));
        assert_eq!(report.mean_mrr, 1.0);
    }

    #[test]
    fn monte_carlo_rf_drops_singletons() {
        // Species 3 appears once; the RF protocol must drop it and still run.
        let mut ds = toy_dataset(80, 3, 5);
        ds.n_species = 4;
        ds.labels = vec![0, 1, 2, 3];
        ds.occurrences[0].species = SpeciesId(3);
        let report = monte_carlo_protocol(
            &ds,
            SpatialModelKind::RandomForest,
            3,
            1,
            ForestConfig {
                n_trees: 5,
                max_depth: 4,
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(report.per_split_mrr.len(), 3);
    }

    #[test]
    fn truncated_mrr_never_exceeds_untruncated() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let n = 30u32;
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let full = RankedPrediction {
                occ_id: 0,
                entries: rank_scores(&scores, n as usize),
            };
            let cut = RankedPrediction {
                occ_id: 0,
                entries: rank_scores(&scores, 5),
            };
            let t = SpeciesId(rng.gen_range(0..n));
            let rr_full = full.rank_of(t).map(|r| 1.0 / r as f64).unwrap_or(0.0);
            let rr_cut = cut.rank_of(t).map(|r| 1.0 / r as f64).unwrap_or(0.0);
            assert!(rr_cut <= rr_full + 1e-15);
        }
    }

    #[test]
    fn prediction_csv_round_trip() {
        let ds = toy_dataset(3, 5, 6);
        let preds = vec![pred(0, &[3, 1]), pred(1, &[0, 4, 2])];
        let f = tempfile::NamedTempFile::new().unwrap();
        write_predictions(&preds, &ds.labels, f.path()).unwrap();
        let got = read_predictions(f.path(), &ds).unwrap();
        assert_eq!(got, preds);
    }

    proptest! {
        /// MRR is invariant under permutation of query order.
        #[test]
        fn mrr_permutation_invariant(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = rng.gen_range(2..20usize);
            let preds: Vec<RankedPrediction> = (0..q)
                .map(|i| {
                    let scores: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..1.0)).collect();
                    RankedPrediction { occ_id: i as u64, entries: rank_scores(&scores, 10) }
                })
                .collect();
            let truths: Vec<QueryTruth> = (0..q)
                .map(|i| truth(i as u64, rng.gen_range(0..12), i as u64))
                .collect();
            let base = evaluate(&preds, &truths).unwrap();
            let mut shuffled = truths.clone();
            use rand::seq::SliceRandom as _;
            shuffled.shuffle(&mut rng);
            let perm = evaluate(&preds, &shuffled).unwrap();
            prop_assert!((base.mrr - perm.mrr).abs() < 1e-12);
        }

        /// The ideal bound dominates any real model on the same grouped set.
        #[test]
        fn ideal_bounds_any_model(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n_groups = rng.gen_range(1..6u64);
            let q = rng.gen_range(3..25usize);
            let n_species = 8u32;
            // One fixed ranking per group, as any deterministic model gives.
            let group_rankings: Vec<Vec<(SpeciesId, f64)>> = (0..n_groups)
                .map(|_| {
                    let scores: Vec<f64> =
                        (0..n_species).map(|_| rng.gen_range(0.0..1.0)).collect();
                    rank_scores(&scores, 8)
                })
                .collect();
            let truths: Vec<QueryTruth> = (0..q)
                .map(|i| {
                    let g = rng.gen_range(0..n_groups);
                    QueryTruth {
                        occ_id: i as u64,
                        species: SpeciesId(rng.gen_range(0..n_species)),
                        group: (g, 0),
                    }
                })
                .collect();
            let preds: Vec<RankedPrediction> = truths
                .iter()
                .map(|t| RankedPrediction {
                    occ_id: t.occ_id,
                    entries: group_rankings[t.group.0 as usize].clone(),
                })
                .collect();
            let report = evaluate(&preds, &truths).unwrap();
            prop_assert!(report.mrr <= report.ideal_mrr + 1e-12,
                "mrr {} > ideal {}", report.mrr, report.ideal_mrr);
        }
    }
}
