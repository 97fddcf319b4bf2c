//! Core domain types: occurrences, datasets, split tags, and exact-position
//! location grouping.
//!
//! Coordinates are planar meters internally. Longitude/latitude inputs are
//! converted on load with an equirectangular projection about the dataset
//! centroid, which is accurate to well under a meter at the ~100 m scales the
//! split rule cares about.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in meters, used by the equirectangular projection.
const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Dense species index in `[0, N)`, bijective with the external label table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SpeciesId(pub u32);

impl SpeciesId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for SpeciesId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// How the occurrence CSV's coordinate columns are interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrsMode {
    /// Coordinates are already planar meters.
    Planar,
    /// Coordinates are degrees; projected to meters about the centroid.
    LonLat,
}

impl CrsMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "planar" => Ok(CrsMode::Planar),
            "lonlat" => Ok(CrsMode::LonLat),
            other => Err(Error::invalid(format!(
                "unknown CRS mode `{other}` (expected `planar` or `lonlat`)"
            ))),
        }
    }
}

/// Per-occurrence split assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Validation,
    Prevalidation,
    Test,
    None,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Validation => "validation",
            SplitTag::Prevalidation => "prevalidation",
            SplitTag::Test => "test",
            SplitTag::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "validation" => Ok(SplitTag::Validation),
            "prevalidation" => Ok(SplitTag::Prevalidation),
            "test" => Ok(SplitTag::Test),
            "none" => Ok(SplitTag::None),
            other => Err(Error::invalid(format!("unknown split tag `{other}`"))),
        }
    }
}

/// One geo-located species record. Position is planar meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occurrence {
    pub occ_id: u64,
    pub x: f64,
    pub y: f64,
    pub species: SpeciesId,
}

impl Occurrence {
    pub fn position(&self) -> (f64, f64) {
        (self.x, self.y)
    }
}

/// Axis-aligned bounding rectangle of all positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Bounds {
    pub fn from_points<I: IntoIterator<Item = (f64, f64)>>(points: I) -> Option<Self> {
        let mut it = points.into_iter();
        let (x0, y0) = it.next()?;
        let mut b = Bounds {
            min_x: x0,
            min_y: y0,
            max_x: x0,
            max_y: y0,
        };
        for (x, y) in it {
            b.min_x = b.min_x.min(x);
            b.min_y = b.min_y.min(y);
            b.max_x = b.max_x.max(x);
            b.max_y = b.max_y.max(y);
        }
        Some(b)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x <= self.max_x && y >= self.min_y && y <= self.max_y
    }
}

/// Occurrence collection with dense species ids, the external label table,
/// domain bounds, and per-occurrence split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub occurrences: Vec<Occurrence>,
    pub n_species: usize,
    /// External label for each dense species id, sorted ascending.
    pub labels: Vec<i64>,
    pub bounds: Bounds,
    pub tags: Vec<SplitTag>,
    pub crs: CrsMode,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.occurrences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occurrences.is_empty()
    }

    /// Indices of occurrences carrying the given tag.
    pub fn tagged(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.tags[i] == tag).collect()
    }

    /// Dense id for an external label, if present.
    pub fn dense_id(&self, external: i64) -> Option<SpeciesId> {
        self.labels
            .binary_search(&external)
            .ok()
            .map(|i| SpeciesId(i as u32))
    }

    pub fn external_label(&self, id: SpeciesId) -> i64 {
        self.labels[id.index()]
    }

    /// Species that occur in the test split but never in train. Must be empty
    /// for a valid evaluation dataset.
    pub fn test_species_missing_from_train(&self) -> Vec<SpeciesId> {
        let mut in_train = vec![false; self.n_species];
        for (occ, tag) in self.occurrences.iter().zip(&self.tags) {
            if *tag == SplitTag::Train {
                in_train[occ.species.index()] = true;
            }
        }
        let mut missing = HashSet::new();
        for (occ, tag) in self.occurrences.iter().zip(&self.tags) {
            if *tag == SplitTag::Test && !in_train[occ.species.index()] {
                missing.insert(occ.species);
            }
        }
        let mut out: Vec<_> = missing.into_iter().collect();
        out.sort();
        out
    }

    /// Per-species occurrence counts over the given tag.
    pub fn species_counts(&self, tag: SplitTag) -> Vec<u64> {
        let mut counts = vec![0u64; self.n_species];
        for (occ, t) in self.occurrences.iter().zip(&self.tags) {
            if *t == tag {
                counts[occ.species.index()] += 1;
            }
        }
        counts
    }
}

/// A distinct exact position together with the occurrences observed there.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationKey {
    pub x: f64,
    pub y: f64,
    /// Indices into `Dataset::occurrences`.
    pub occ_indices: Vec<usize>,
}

const OCCURRENCE_HEADER: &str = "occ_id,lon,lat,species_id";

/// Loads an occurrence CSV (`occ_id,lon,lat,species_id`) and remaps species
/// labels to dense ids ordered by external label.
pub fn load_occurrences(path: &Path, crs: CrsMode) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Csv {
            path: path.to_path_buf(),
            line: 1,
            msg: "empty file (missing header)".into(),
        })?;
    if header.trim_start_matches('\u{feff}').trim() != OCCURRENCE_HEADER {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected header `{OCCURRENCE_HEADER}`, got `{}`", header.trim()),
        });
    }

    let mut raw: Vec<(u64, f64, f64, i64)> = Vec::new();
    let mut seen_ids: HashSet<u64> = HashSet::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
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
        let occ_id: u64 = fields[0].trim().parse().map_err(|_| Error::Csv {
            path: path.to_path_buf(),
            line: line_no,
            msg: format!("invalid occ_id `{}`", fields[0]),
        })?;
        if !seen_ids.insert(occ_id) {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("duplicate occ_id {occ_id}"),
            });
        }
        let parse_coord = |s: &str, name: &str| -> Result<f64> {
            let v: f64 = s.trim().parse().map_err(|_| Error::Csv {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("non-numeric {name} `{s}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: format!("non-finite {name} `{s}`"),
                });
            }
            Ok(v)
        };
        let lon = parse_coord(fields[1], "lon")?;
        let lat = parse_coord(fields[2], "lat")?;
        let species: i64 = fields[3].trim().parse().map_err(|_| Error::Csv {
            path: path.to_path_buf(),
            line: line_no,
            msg: format!("invalid species_id `{}`", fields[3]),
        })?;
        raw.push((occ_id, lon, lat, species));
    }

    if raw.is_empty() {
        return Err(Error::invalid("no occurrences"));
    }

    // Dense remapping, deterministic by sorted external label.
    let mut labels: Vec<i64> = raw.iter().map(|r| r.3).collect();
    labels.sort_unstable();
    labels.dedup();
    let label_to_dense: HashMap<i64, u32> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, i as u32))
        .collect();

    let positions: Vec<(f64, f64)> = match crs {
        CrsMode::Planar => raw.iter().map(|r| (r.1, r.2)).collect(),
        CrsMode::LonLat => project_equirectangular(&raw),
    };

    let occurrences: Vec<Occurrence> = raw
        .iter()
        .zip(&positions)
        .map(|(&(occ_id, _, _, species), &(x, y))| Occurrence {
            occ_id,
            x,
            y,
            species: SpeciesId(label_to_dense[&species]),
        })
        .collect();

    let bounds = Bounds::from_points(positions.iter().copied()).unwrap();
    let n = occurrences.len();
    Ok(Dataset {
        occurrences,
        n_species: labels.len(),
        labels,
        bounds,
        tags: vec![SplitTag::None; n],
        crs,
    })
}

fn project_equirectangular(raw: &[(u64, f64, f64, i64)]) -> Vec<(f64, f64)> {
    let n = raw.len() as f64;
    let lon0 = raw.iter().map(|r| r.1).sum::<f64>() / n;
    let lat0 = raw.iter().map(|r| r.2).sum::<f64>() / n;
    let cos_lat0 = lat0.to_radians().cos();
    raw.iter()
        .map(|r| {
            let x = EARTH_RADIUS_M * (r.1 - lon0).to_radians() * cos_lat0;
            let y = EARTH_RADIUS_M * (r.2 - lat0).to_radians();
            (x, y)
        })
        .collect()
}

/// Writes occurrences back out with external species labels. Planar datasets
/// round-trip exactly through [`load_occurrences`].
pub fn write_occurrences(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(ds.len() * 32);
    out.push_str(OCCURRENCE_HEADER);
    out.push('\n');
    for occ in &ds.occurrences {
        out.push_str(&format!(
            "{},{},{},{}\n",
            occ.occ_id,
            occ.x,
            occ.y,
            ds.external_label(occ.species)
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes the dense-id to external-label sidecar table.
pub fn write_species_labels(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::from("species_id,external_label\n");
    for (i, label) in ds.labels.iter().enumerate() {
        out.push_str(&format!("{i},{label}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes the per-occurrence split tags as `occ_id,split`.
pub fn write_tags(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::from("occ_id,split\n");
    for (occ, tag) in ds.occurrences.iter().zip(&ds.tags) {
        out.push_str(&format!("{},{}\n", occ.occ_id, tag.as_str()));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a split-tag CSV and applies it to the dataset. Every occ_id in the
/// file must exist in the dataset; occurrences absent from the file keep
/// their current tag.
pub fn read_tags(ds: &mut Dataset, path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let by_id: HashMap<u64, usize> = ds
        .occurrences
        .iter()
        .enumerate()
        .map(|(i, o)| (o.occ_id, i))
        .collect();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if idx == 0 {
            if line.trim() != "occ_id,split" {
                return Err(Error::Csv {
                    path: path.to_path_buf(),
                    line: 1,
                    msg: format!("expected header `occ_id,split`, got `{}`", line.trim()),
                });
            }
            continue;
        }
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (id_s, tag_s) = line.split_once(',').ok_or_else(|| Error::Csv {
            path: path.to_path_buf(),
            line: line_no,
            msg: "expected `occ_id,split`".into(),
        })?;
        let occ_id: u64 = id_s.trim().parse().map_err(|_| Error::Csv {
            path: path.to_path_buf(),
            line: line_no,
            msg: format!("invalid occ_id `{id_s}`"),
        })?;
        let tag = SplitTag::parse(tag_s.trim()).map_err(|_| Error::Csv {
            path: path.to_path_buf(),
            line: line_no,
            msg: format!("unknown split tag `{}`", tag_s.trim()),
        })?;
        let &i = by_id.get(&occ_id).ok_or_else(|| Error::Csv {
            path: path.to_path_buf(),
            line: line_no,
            msg: format!("occ_id {occ_id} not present in dataset"),
        })?;
        ds.tags[i] = tag;
    }
    Ok(())
}

/// Groups occurrences by exact position equality. Groups are ordered by first
/// appearance; each group's indices are ascending.
pub fn quantize_locations(ds: &Dataset) -> Vec<LocationKey> {
    quantize_indices(ds, (0..ds.len()).collect())
}

/// Exact-position grouping of an arbitrary subset of occurrence indices.
pub fn quantize_indices(ds: &Dataset, indices: Vec<usize>) -> Vec<LocationKey> {
    let mut order: Vec<LocationKey> = Vec::new();
    let mut by_pos: HashMap<(u64, u64), usize> = HashMap::new();
    for i in indices {
        let occ = &ds.occurrences[i];
        let key = (occ.x.to_bits(), occ.y.to_bits());
        match by_pos.get(&key) {
            Some(&slot) => order[slot].occ_indices.push(i),
            None => {
                by_pos.insert(key, order.len());
                order.push(LocationKey {
                    x: occ.x,
                    y: occ.y,
                    occ_indices: vec![i],
                });
            }
        }
    }
    order
}
