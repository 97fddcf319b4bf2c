//! Random forest on spatial coordinates, built from scratch so every detail
//! is pinned: bootstrap with replacement, Gini impurity, candidate thresholds
//! at midpoints of sorted unique values, both features considered at every
//! node, per-tree RNG streams derived from (seed, tree index).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 50,
            max_depth: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Split {
        /// 0 = x, 1 = y.
        feature: u8,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        /// Sparse class distribution, species ascending, probabilities sum
        /// to 1.
        dist: Vec<(u32, f64)>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    /// Leaf distribution for a query point. Points with feature value <=
    /// threshold go left.
    pub fn leaf(&self, q: (f64, f64)) -> &[(u32, f64)] {
        let mut i = 0usize;
        loop {
            match &self.nodes[i] {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let v = if *feature == 0 { q.0 } else { q.1 };
                    i = if v <= *threshold { *left } else { *right } as usize;
                }
                TreeNode::Leaf { dist } => return dist,
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn rec(nodes: &[TreeNode], i: usize) -> usize {
            match &nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => {
                    1 + rec(nodes, *left as usize).max(rec(nodes, *right as usize))
                }
            }
        }
        rec(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForestModel {
    pub trees: Vec<Tree>,
    pub n_species: usize,
    pub config: ForestConfig,
}

/// Fits a forest of depth-capped trees on bootstrap resamples. Deterministic
/// in (data, seed); trees are fitted in parallel with independent RNG
/// streams.
pub fn rf_fit(
    points: &[(f64, f64)],
    labels: &[u32],
    n_species: usize,
    config: ForestConfig,
) -> Result<RandomForestModel> {
    if points.is_empty() {
        return Err(Error::invalid("random forest: empty training set"));
    }
    if points.len() != labels.len() {
        return Err(Error::invalid("random forest: points/labels length mismatch"));
    }
    let trees: Vec<Tree> = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(t as u64 + 1);
            let sample: Vec<u32> = (0..points.len())
                .map(|_| rng.gen_range(0..points.len()) as u32)
                .collect();
            let mut nodes = Vec::new();
            grow(points, labels, n_species, &sample, 0, config.max_depth, &mut nodes);
            Tree { nodes }
        })
        .collect();
    Ok(RandomForestModel {
        trees,
        n_species,
        config,
    })
}

/// Recursively grows a node over `sample` (indices into the training data,
/// duplicates allowed from the bootstrap). Returns the node's index.
fn grow(
    points: &[(f64, f64)],
    labels: &[u32],
    n_species: usize,
    sample: &[u32],
    depth: usize,
    max_depth: usize,
    nodes: &mut Vec<TreeNode>,
) -> u32 {
    let mut counts = vec![0usize; n_species];
    for &i in sample {
        counts[labels[i as usize] as usize] += 1;
    }
    let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;

    let make_leaf = |nodes: &mut Vec<TreeNode>| -> u32 {
        let total = sample.len() as f64;
        let dist: Vec<(u32, f64)> = counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(s, &c)| (s as u32, c as f64 / total))
            .collect();
        nodes.push(TreeNode::Leaf { dist });
        (nodes.len() - 1) as u32
    };

    if depth >= max_depth || pure {
        return make_leaf(nodes);
    }

    let Some((feature, threshold)) = best_split(points, labels, n_species, sample) else {
        return make_leaf(nodes);
    };

    let (left_s, right_s): (Vec<u32>, Vec<u32>) = sample.iter().partition(|&&i| {
        let p = points[i as usize];
        let v = if feature == 0 { p.0 } else { p.1 };
        v <= threshold
    });
    debug_assert!(!left_s.is_empty() && !right_s.is_empty());

    let slot = nodes.len();
    nodes.push(TreeNode::Split {
        feature,
        threshold,
        left: 0,
        right: 0,
    });
    let left = grow(points, labels, n_species, &left_s, depth + 1, max_depth, nodes);
    let right = grow(points, labels, n_species, &right_s, depth + 1, max_depth, nodes);
    if let TreeNode::Split {
        left: l, right: r, ..
    } = &mut nodes[slot]
    {
        *l = left;
        *r = right;
    }
    slot as u32
}

/// Minimizes weighted child Gini impurity over both features and all
/// midpoint thresholds. Ties keep the first candidate in (feature, ascending
/// threshold) order. Returns None when every point is identical in both
/// features.
fn best_split(
    points: &[(f64, f64)],
    labels: &[u32],
    n_species: usize,
    sample: &[u32],
) -> Option<(u8, f64)> {
    let n = sample.len() as f64;
    let mut best: Option<(f64, u8, f64)> = None;

    for feature in 0u8..2 {
        let mut order: Vec<u32> = sample.to_vec();
        order.sort_by(|&a, &b| {
            let va = feat(points, a, feature);
            let vb = feat(points, b, feature);
            va.total_cmp(&vb)
        });

        let mut left_counts = vec![0usize; n_species];
        let mut right_counts = vec![0usize; n_species];
        for &i in &order {
            right_counts[labels[i as usize] as usize] += 1;
        }
        let mut left_sq = 0.0f64;
        let mut right_sq: f64 = right_counts.iter().map(|&c| (c * c) as f64).sum();

        for k in 0..order.len() - 1 {
            let i = order[k];
            let c = labels[i as usize] as usize;
            // Move point i from the right partition to the left, updating
            // the sums of squared counts incrementally.
            left_sq += (2 * left_counts[c] + 1) as f64;
            left_counts[c] += 1;
            right_sq -= (2 * right_counts[c] - 1) as f64;
            right_counts[c] -= 1;

            let v = feat(points, i, feature);
            let v_next = feat(points, order[k + 1], feature);
            if v == v_next {
                continue;
            }
            let threshold = v + (v_next - v) / 2.0;
            let nl = (k + 1) as f64;
            let nr = n - nl;
            // Weighted Gini: sum over children of n_child * (1 - sum p^2)
            // = n - left_sq/nl - right_sq/nr; minimizing it maximizes the
            // bracketed sums.
            let score = n - left_sq / nl - right_sq / nr;
            let better = match &best {
                None => true,
                Some((bs, _, _)) => score < *bs,
            };
            if better {
                best = Some((score, feature, threshold));
            }
        }
    }
    best.map(|(_, f, t)| (f, t))
}

fn feat(points: &[(f64, f64)], i: u32, feature: u8) -> f64 {
    let p = points[i as usize];
    if feature == 0 {
        p.0
    } else {
        p.1
    }
}

/// Mean leaf probability per species across all trees.
pub fn rf_predict_proba(model: &RandomForestModel, q: (f64, f64)) -> Vec<f64> {
    let mut scores = vec![0.0; model.n_species];
    for tree in &model.trees {
        for &(s, p) in tree.leaf(q) {
            scores[s as usize] += p;
        }
    }
    let nt = model.trees.len() as f64;
    for s in &mut scores {
        *s /= nt;
    }
    scores
}

const FOREST_MAGIC: &[u8; 4] = b"SDMF";
const FOREST_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct ForestSidecar {
    seed: u64,
    max_depth: usize,
    n_trees: usize,
    n_species: usize,
}

/// Serializes the forest: magic `SDMF`, version, tree count, species count,
/// then preorder-serialized nodes per tree. A JSON sidecar records the
/// fitting configuration.
pub fn save_forest(model: &RandomForestModel, bin_path: &Path, sidecar_path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(FOREST_MAGIC);
    out.extend_from_slice(&FOREST_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.trees.len() as u32).to_le_bytes());
    out.extend_from_slice(&(model.n_species as u32).to_le_bytes());
    for tree in &model.trees {
        write_node(&tree.nodes, 0, &mut out);
    }
    let mut f = fs::File::create(bin_path).map_err(|e| Error::io(bin_path, e))?;
    f.write_all(&out).map_err(|e| Error::io(bin_path, e))?;

    let sidecar = ForestSidecar {
        seed: model.config.seed,
        max_depth: model.config.max_depth,
        n_trees: model.config.n_trees,
        n_species: model.n_species,
    };
    let text = serde_json::to_string_pretty(&sidecar).expect("serializable");
    fs::write(sidecar_path, text).map_err(|e| Error::io(sidecar_path, e))
}

fn write_node(nodes: &[TreeNode], i: usize, out: &mut Vec<u8>) {
    match &nodes[i] {
        TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        } => {
            out.push(0);
            out.push(*feature);
            out.extend_from_slice(&threshold.to_le_bytes());
            write_node(nodes, *left as usize, out);
            write_node(nodes, *right as usize, out);
        }
        TreeNode::Leaf { dist } => {
            out.push(1);
            out.extend_from_slice(&(dist.len() as u32).to_le_bytes());
            for &(s, p) in dist {
                out.extend_from_slice(&s.to_le_bytes());
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
    }
}

pub fn load_forest(bin_path: &Path, sidecar_path: &Path) -> Result<RandomForestModel> {
    let mut bytes = Vec::new();
    fs::File::open(bin_path)
        .map_err(|e| Error::io(bin_path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(bin_path, e))?;
    if bytes.len() < 14 || &bytes[0..4] != FOREST_MAGIC {
        return Err(Error::format(bin_path, "bad magic (expected SDMF)"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FOREST_VERSION {
        return Err(Error::format(bin_path, format!("unsupported version {version}")));
    }
    let n_trees = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let n_species = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;

    let mut pos = 14usize;
    let mut trees = Vec::with_capacity(n_trees);
    for _ in 0..n_trees {
        let mut nodes = Vec::new();
        read_node(&bytes, &mut pos, &mut nodes, bin_path)?;
        trees.push(Tree { nodes });
    }
    if pos != bytes.len() {
        return Err(Error::format(bin_path, "trailing bytes after last tree"));
    }

    let text = fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
    let sidecar: ForestSidecar =
        serde_json::from_str(&text).map_err(|e| Error::format(sidecar_path, e.to_string()))?;
    if sidecar.n_species != n_species || sidecar.n_trees != n_trees {
        return Err(Error::format(sidecar_path, "sidecar disagrees with binary"));
    }
    Ok(RandomForestModel {
        trees,
        n_species,
        config: ForestConfig {
            n_trees,
            max_depth: sidecar.max_depth,
            seed: sidecar.seed,
        },
    })
}

fn read_node(bytes: &[u8], pos: &mut usize, nodes: &mut Vec<TreeNode>, path: &Path) -> Result<u32> {
    let need = |pos: usize, n: usize| -> Result<()> {
        if pos + n > bytes.len() {
            Err(Error::format(path, "truncated tree data"))
        } else {
            Ok(())
        }
    };
    need(*pos, 1)?;
    let tag = bytes[*pos];
    *pos += 1;
    match tag {
        0 => {
            need(*pos, 9)?;
            let feature = bytes[*pos];
            let threshold = f64::from_le_bytes(bytes[*pos + 1..*pos + 9].try_into().unwrap());
            *pos += 9;
            let slot = nodes.len();
            nodes.push(TreeNode::Split {
                feature,
                threshold,
                left: 0,
                right: 0,
            });
            let left = read_node(bytes, pos, nodes, path)?;
            let right = read_node(bytes, pos, nodes, path)?;
            if let TreeNode::Split {
                left: l, right: r, ..
            } = &mut nodes[slot]
            {
                *l = left;
                *r = right;
            }
            Ok(slot as u32)
        }
        1 => {
            need(*pos, 4)?;
            let n = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap()) as usize;
            *pos += 4;
            need(*pos, n * 12)?;
            let mut dist = Vec::with_capacity(n);
            for _ in 0..n {
                let s = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
                let p = f64::from_le_bytes(bytes[*pos + 4..*pos + 12].try_into().unwrap());
                *pos += 12;
                dist.push((s, p));
            }
            let slot = nodes.len();
            nodes.push(TreeNode::Leaf { dist });
            Ok(slot as u32)
        }
        t => Err(Error::format(path, format!("unknown node tag {t}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng as _};

    fn cfg(n_trees: usize, max_depth: usize, seed: u64) -> ForestConfig {
        ForestConfig {
            n_trees,
            max_depth,
            seed,
        }
    }

    #[test]
    fn single_species_gives_unit_leaves() {
        let points: Vec<(f64, f64)> = (0..20).map(|i| (i as f64, -(i as f64))).collect();
        let labels = vec![0u32; 20];
        let model = rf_fit(&points, &labels, 1, cfg(10, 8, 3)).unwrap();
        for tree in &model.trees {
            for node in &tree.nodes {
                if let TreeNode::Leaf { dist } = node {
                    assert_eq!(dist, &vec![(0u32, 1.0)]);
                }
            }
        }
    }

    #[test]
    fn separated_clusters_reach_perfect_training_accuracy() {
        // Two clusters split cleanly by x = 50: depth 1 suffices, and the
        // direct threshold-split oracle classifies every point correctly.
        let mut points = Vec::new();
        let mut labels = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            points.push((rng.gen_range(0.0..10.0), rng.gen_range(0.0..100.0)));
            labels.push(0u32);
            points.push((rng.gen_range(90.0..100.0), rng.gen_range(0.0..100.0)));
            labels.push(1u32);
        }
        let model = rf_fit(&points, &labels, 2, cfg(10, 1, 7)).unwrap();
        let oracle = |q: (f64, f64)| u32::from(q.0 >= 50.0);
        let mut correct = 0;
        for (p, &l) in points.iter().zip(&labels) {
            let probs = rf_predict_proba(&model, *p);
            let pred = if probs[0] >= probs[1] { 0 } else { 1 };
            assert_eq!(pred, oracle(*p));
            if pred == l {
                correct += 1;
            }
        }
        assert_eq!(correct, points.len());
    }

    #[test]
    fn same_seed_serializes_byte_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let points: Vec<(f64, f64)> = (0..60)
            .map(|_| (rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0)))
            .collect();
        let labels: Vec<u32> = (0..60).map(|_| rng.gen_range(0..4)).collect();
        let a = rf_fit(&points, &labels, 4, cfg(8, 5, 42)).unwrap();
        let b = rf_fit(&points, &labels, 4, cfg(8, 5, 42)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (pa, sa) = (dir.path().join("a.bin"), dir.path().join("a.json"));
        let (pb, sb) = (dir.path().join("b.bin"), dir.path().join("b.json"));
        save_forest(&a, &pa, &sa).unwrap();
        save_forest(&b, &pb, &sb).unwrap();
        assert_eq!(fs::read(&pa).unwrap(), fs::read(&pb).unwrap());

        let loaded = load_forest(&pa, &sa).unwrap();
        assert_eq!(loaded, a);
    }

    #[test]
    fn depth_cap_and_leaf_sums_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let points: Vec<(f64, f64)> = (0..200)
            .map(|_| (rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0)))
            .collect();
        let labels: Vec<u32> = (0..200).map(|_| rng.gen_range(0..6)).collect();
        let model = rf_fit(&points, &labels, 6, cfg(50, 8, 11)).unwrap();
        assert_eq!(model.trees.len(), 50);
        for tree in &model.trees {
            assert!(tree.depth() <= 8, "depth {}", tree.depth());
            for node in &tree.nodes {
                if let TreeNode::Leaf { dist } = node {
                    let sum: f64 = dist.iter().map(|(_, p)| p).sum();
                    assert!((sum - 1.0).abs() < 1e-9, "leaf sum {sum}");
                    assert!(dist.iter().all(|&(_, p)| p > 0.0));
                }
            }
        }
    }

    #[test]
    fn predict_matches_independent_traversal() {
        // Oracle walks every tree by hand and averages, independently of
        // rf_predict_proba.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let points: Vec<(f64, f64)> = (0..80)
            .map(|_| (rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0)))
            .collect();
        let labels: Vec<u32> = (0..80).map(|_| rng.gen_range(0..5)).collect();
        let model = rf_fit(&points, &labels, 5, cfg(7, 4, 23)).unwrap();

        fn walk(tree: &Tree, i: usize, q: (f64, f64)) -> Vec<(u32, f64)> {
            match &tree.nodes[i] {
                TreeNode::Leaf { dist } => dist.clone(),
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let v = if *feature == 0 { q.0 } else { q.1 };
                    if v <= *threshold {
                        walk(tree, *left as usize, q)
                    } else {
                        walk(tree, *right as usize, q)
                    }
                }
            }
        }

        for _ in 0..40 {
            let q = (rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0));
            let got = rf_predict_proba(&model, q);
            let mut want = vec![0.0; 5];
            for tree in &model.trees {
                for (s, p) in walk(tree, 0, q) {
                    want[s as usize] += p;
                }
            }
            for w in &mut want {
                *w /= model.trees.len() as f64;
            }
            assert_eq!(got, want);
        }
    }

    use rand_chacha::ChaCha8Rng;
}
