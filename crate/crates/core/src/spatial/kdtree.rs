//! Static 2-d k-d tree for exact nearest-location queries, including full
//! tie sets at the minimal distance.

/// One indexed point with its payload (a location slot).
#[derive(Debug, Clone, Copy)]
struct Point {
    x: f64,
    y: f64,
    slot: u32,
}

#[derive(Debug, Clone)]
struct Node {
    point: Point,
    left: Option<Box<Node>>,
    right: Option<Box<Node>>,
    axis: u8,
}

/// K-d tree over distinct 2-d locations. Coordinates must be finite.
#[derive(Debug, Clone)]
pub struct KdTree {
    root: Option<Box<Node>>,
    len: usize,
}

impl KdTree {
    pub fn build(points: &[(f64, f64)]) -> Self {
        let mut pts: Vec<Point> = points
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| Point { x, y, slot: i as u32 })
            .collect();
        let root = build_rec(&mut pts, 0);
        KdTree {
            root,
            len: points.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// All slots at the minimal squared distance from `q`. With
    /// `exclude_exact`, points equal to `q` are skipped entirely. Returns
    /// `None` when no eligible point exists.
    pub fn nearest_ties(&self, q: (f64, f64), exclude_exact: bool) -> Option<(f64, Vec<u32>)> {
        let root = self.root.as_deref()?;
        let mut best = f64::INFINITY;
        min_dist_rec(root, q, exclude_exact, &mut best);
        if !best.is_finite() {
            return None;
        }
        let mut ties = Vec::new();
        collect_rec(root, q, exclude_exact, best, &mut ties);
        ties.sort_unstable();
        Some((best, ties))
    }
}

fn build_rec(pts: &mut [Point], depth: usize) -> Option<Box<Node>> {
    if pts.is_empty() {
        return None;
    }
    let axis = (depth % 2) as u8;
    let mid = pts.len() / 2;
    pts.select_nth_unstable_by(mid, |a, b| {
        let (ka, kb) = if axis == 0 { (a.x, b.x) } else { (a.y, b.y) };
        ka.total_cmp(&kb).then(a.slot.cmp(&b.slot))
    });
    let point = pts[mid];
    let (left, rest) = pts.split_at_mut(mid);
    let right = &mut rest[1..];
    Some(Box::new(Node {
        point,
        left: build_rec(left, depth + 1),
        right: build_rec(right, depth + 1),
        axis,
    }))
}

fn dist_sq(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    dx * dx + dy * dy
}

fn min_dist_rec(node: &Node, q: (f64, f64), exclude_exact: bool, best: &mut f64) {
    let p = (node.point.x, node.point.y);
    let skip = exclude_exact && p == q;
    if !skip {
        let d = dist_sq(p, q);
        if d < *best {
            *best = d;
        }
    }
    let delta = if node.axis == 0 {
        q.0 - node.point.x
    } else {
        q.1 - node.point.y
    };
    let (near, far) = if delta <= 0.0 {
        (&node.left, &node.right)
    } else {
        (&node.right, &node.left)
    };
    if let Some(n) = near {
        min_dist_rec(n, q, exclude_exact, best);
    }
    if let Some(n) = far {
        if delta * delta <= *best {
            min_dist_rec(n, q, exclude_exact, best);
        }
    }
}

fn collect_rec(node: &Node, q: (f64, f64), exclude_exact: bool, target: f64, out: &mut Vec<u32>) {
    let p = (node.point.x, node.point.y);
    let skip = exclude_exact && p == q;
    if !skip && dist_sq(p, q) == target {
        out.push(node.point.slot);
    }
    let delta = if node.axis == 0 {
        q.0 - node.point.x
    } else {
        q.1 - node.point.y
    };
    if let Some(n) = &node.left {
        if delta <= 0.0 || delta * delta <= target {
            collect_rec(n, q, exclude_exact, target, out);
        }
    }
    if let Some(n) = &node.right {
        if delta > 0.0 || delta * delta <= target {
            collect_rec(n, q, exclude_exact, target, out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng as _};
    use rand_chacha::ChaCha8Rng;

    fn brute_ties(points: &[(f64, f64)], q: (f64, f64), exclude: bool) -> Option<(f64, Vec<u32>)> {
        let mut best = f64::INFINITY;
        for &p in points {
            if exclude && p == q {
                continue;
            }
            best = best.min(dist_sq(p, q));
        }
        if !best.is_finite() {
            return None;
        }
        let ties: Vec<u32> = points
            .iter()
            .enumerate()
            .filter(|(_, &p)| !(exclude && p == q) && dist_sq(p, q) == best)
            .map(|(i, _)| i as u32)
            .collect();
        Some((best, ties))
    }

    #[test]
    fn matches_linear_scan_including_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for trial in 0..50 {
            // Grid-valued coordinates force frequent exact ties.
            let n = rng.gen_range(1..200usize);
            let points: Vec<(f64, f64)> = (0..n)
                .map(|_| {
                    (
                        rng.gen_range(0..12) as f64 * 2.0,
                        rng.gen_range(0..12) as f64 * 2.0,
                    )
                })
                .collect();
            let tree = KdTree::build(&points);
            for _ in 0..30 {
                let q = (
                    rng.gen_range(0..12) as f64 * 2.0,
                    rng.gen_range(0..12) as f64 * 2.0,
                );
                for exclude in [false, true] {
                    let got = tree.nearest_ties(q, exclude);
                    let want = brute_ties(&points, q, exclude);
                    match (got, want) {
                        (Some((gd, gt)), Some((wd, wt))) => {
                            assert_eq!(gd, wd, "trial {trial}");
                            assert_eq!(gt, wt, "trial {trial} q {q:?} exclude {exclude}");
                        }
                        (None, None) => {}
                        (g, w) => panic!("mismatch: {g:?} vs {w:?}"),
                    }
                }
            }
        }
    }

    #[test]
    fn empty_after_exclusion() {
        let tree = KdTree::build(&[(1.0, 2.0)]);
        assert!(tree.nearest_ties((1.0, 2.0), true).is_none());
        assert!(tree.nearest_ties((1.0, 2.0), false).is_some());
    }
}
