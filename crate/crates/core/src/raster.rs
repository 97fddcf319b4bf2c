//! Environmental raster stacks and per-occurrence patch tensors.
//!
//! Layers are ESRI ASCII grids. A stack is described by a JSON manifest
//! listing each layer's kind (continuous, ordinal, categorical); categorical
//! layers are unstacked into one binary channel per category, so a stack of
//! 32 scalar layers plus one 45-category layer yields 77 tensor channels.
//!
//! Patch sampling is nearest-cell at each layer's native resolution: one
//! patch pixel reads one source cell. Out-of-bounds and nodata pixels are
//! masked and filled downstream (zero after standardization for scalar
//! channels, all-zero for categorical ones).

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::CrsMode;
use crate::error::{Error, Result};

/// Standard-deviation floor applied when standardizing, so constant layers
/// map to all-zeros instead of dividing by zero.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Continuous,
    Ordinal,
    Categorical,
}

impl LayerKind {
    pub fn is_categorical(self) -> bool {
        self == LayerKind::Categorical
    }
}

/// One environmental grid. `values` is row-major with row 0 at the top
/// (maximum y), matching the ESRI ASCII layout.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterLayer {
    pub name: String,
    pub kind: LayerKind,
    pub nrows: usize,
    pub ncols: usize,
    pub xll: f64,
    pub yll: f64,
    pub cell_size: f64,
    pub nodata: f64,
    pub values: Vec<f64>,
    pub categories: Option<Vec<f64>>,
}

impl RasterLayer {
    /// Raw cell value, `None` when out of bounds.
    pub fn get(&self, row: isize, col: isize) -> Option<f64> {
        if row < 0 || col < 0 || row as usize >= self.nrows || col as usize >= self.ncols {
            return None;
        }
        Some(self.values[row as usize * self.ncols + col as usize])
    }

    /// Row/column of the cell containing a position. May be out of bounds.
    pub fn cell_of(&self, x: f64, y: f64) -> (isize, isize) {
        let col = ((x - self.xll) / self.cell_size).floor() as isize;
        let row_from_bottom = ((y - self.yll) / self.cell_size).floor() as isize;
        let row = self.nrows as isize - 1 - row_from_bottom;
        (row, col)
    }

    /// Center coordinates of a cell.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let x = self.xll + (col as f64 + 0.5) * self.cell_size;
        let y = self.yll + ((self.nrows - 1 - row) as f64 + 0.5) * self.cell_size;
        (x, y)
    }

    /// Nearest-cell value at a position; `None` when out of bounds or nodata.
    pub fn value_at(&self, x: f64, y: f64) -> Option<f64> {
        let (r, c) = self.cell_of(x, y);
        let v = self.get(r, c)?;
        if v == self.nodata {
            None
        } else {
            Some(v)
        }
    }
}

/// A square patch of raw layer values with a validity mask. `valid` is false
/// for pixels that fell out of bounds or on nodata.
#[derive(Debug, Clone)]
pub struct Patch {
    pub size: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl Patch {
    pub fn fill_fraction(&self) -> f64 {
        let invalid = self.valid.iter().filter(|&&v| !v).count();
        invalid as f64 / self.valid.len() as f64
    }
}

/// Extracts a `size`x`size` patch centered on the cell containing `center`.
/// Pixel (i, j) reads the cell offset by (i - size/2, j - size/2) from the
/// center cell.
pub fn extract_patch(layer: &RasterLayer, center: (f64, f64), size: usize) -> Patch {
    assert!(
        center.0.is_finite() && center.1.is_finite(),
        "patch center must be finite"
    );
    let (r0, c0) = layer.cell_of(center.0, center.1);
    let half = (size / 2) as isize;
    let mut values = vec![0.0; size * size];
    let mut valid = vec![false; size * size];
    for i in 0..size {
        for j in 0..size {
            let r = r0 + i as isize - half;
            let c = c0 + j as isize - half;
            if let Some(v) = layer.get(r, c) {
                let px = i * size + j;
                values[px] = v;
                valid[px] = v != layer.nodata;
            }
        }
    }
    Patch {
        size,
        values,
        valid,
    }
}

/// Unstacks a categorical patch into one binary grid per category. Invalid
/// (out-of-bounds or nodata) pixels are zero in every channel; a valid value
/// outside the category list is an error naming the offending pixel.
pub fn unstack_categorical(patch: &Patch, categories: &[f64]) -> Result<Vec<Vec<f64>>> {
    let mut channels = vec![vec![0.0; patch.values.len()]; categories.len()];
    for (px, (&v, &ok)) in patch.values.iter().zip(&patch.valid).enumerate() {
        if !ok {
            continue;
        }
        match categories.iter().position(|&c| c == v) {
            Some(k) => channels[k][px] = 1.0,
            None => {
                let (i, j) = (px / patch.size, px % patch.size);
                return Err(Error::invalid(format!(
                    "categorical value {v} at pixel ({i},{j}) is not in the category list"
                )));
            }
        }
    }
    Ok(channels)
}

/// Manifest entry for one layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestLayer {
    pub name: String,
    pub kind: LayerKind,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodata: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackManifest {
    #[serde(default = "default_crs")]
    pub crs: CrsMode,
    pub layers: Vec<ManifestLayer>,
}

fn default_crs() -> CrsMode {
    CrsMode::Planar
}

/// An ordered set of layers sharing a coordinate frame, plus the derived
/// channel plan.
#[derive(Debug, Clone)]
pub struct RasterStack {
    pub layers: Vec<RasterLayer>,
    pub crs: CrsMode,
}

impl RasterStack {
    /// Total tensor channels: one per scalar layer, one per category for
    /// categorical layers.
    pub fn channel_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match (&l.kind, &l.categories) {
                (LayerKind::Categorical, Some(cats)) => cats.len(),
                _ => 1,
            })
            .sum()
    }

    /// Indices of scalar (continuous or ordinal) layers, in stack order.
    pub fn scalar_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| !l.kind.is_categorical())
            .map(|(i, _)| i)
            .collect()
    }
}

/// Loads a raster stack from a JSON manifest. Layer paths are resolved
/// relative to the manifest's directory. When `expected_crs` is given, the
/// manifest must agree.
pub fn load_raster_stack(manifest_path: &Path, expected_crs: Option<CrsMode>) -> Result<RasterStack> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: StackManifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(manifest_path, format!("manifest parse error: {e}")))?;
    if let Some(expected) = expected_crs {
        if manifest.crs != expected {
            return Err(Error::invalid(format!(
                "inconsistent CRS mode: manifest declares {:?}, expected {:?}",
                manifest.crs, expected
            )));
        }
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        if entry.kind.is_categorical() && entry.categories.is_none() {
            return Err(Error::invalid(format!(
                "categorical layer `{}` has no category list",
                entry.name
            )));
        }
        let mut layer = read_ascii_grid(&base.join(&entry.path))?;
        layer.name = entry.name.clone();
        layer.kind = entry.kind;
        if let Some(nd) = entry.nodata {
            layer.nodata = nd;
        }
        layer.categories = entry.categories.clone();
        layers.push(layer);
    }
    Ok(RasterStack {
        layers,
        crs: manifest.crs,
    })
}

/// Parses an ESRI ASCII grid. Header keys are case-insensitive; data values
/// may wrap lines arbitrarily. The first data row is the top (northern) row.
pub fn read_ascii_grid(path: &Path) -> Result<RasterLayer> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut tokens = text.split_whitespace().peekable();
    let mut ncols = None;
    let mut nrows = None;
    let mut xll = None;
    let mut yll = None;
    let mut cell_size = None;
    let mut nodata = -9999.0;

    loop {
        let Some(&tok) = tokens.peek() else {
            return Err(Error::format(path, "unexpected end of header"));
        };
        let key = tok.to_ascii_lowercase();
        let is_header = matches!(
            key.as_str(),
            "ncols" | "nrows" | "xllcorner" | "yllcorner" | "cellsize" | "nodata_value"
        );
        if !is_header {
            break;
        }
        tokens.next();
        let val = tokens
            .next()
            .ok_or_else(|| Error::format(path, format!("missing value for `{key}`")))?;
        let parse = |v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::format(path, format!("invalid number `{v}` for `{key}`")))
        };
        match key.as_str() {
            "ncols" => ncols = Some(parse(val)? as usize),
            "nrows" => nrows = Some(parse(val)? as usize),
            "xllcorner" => xll = Some(parse(val)?),
            "yllcorner" => yll = Some(parse(val)?),
            "cellsize" => cell_size = Some(parse(val)?),
            "nodata_value" => nodata = parse(val)?,
            _ => unreachable!(),
        }
    }

    let ncols = ncols.ok_or_else(|| Error::format(path, "missing ncols"))?;
    let nrows = nrows.ok_or_else(|| Error::format(path, "missing nrows"))?;
    let xll = xll.ok_or_else(|| Error::format(path, "missing xllcorner"))?;
    let yll = yll.ok_or_else(|| Error::format(path, "missing yllcorner"))?;
    let cell_size = cell_size.ok_or_else(|| Error::format(path, "missing cellsize"))?;
    if nrows == 0 || ncols == 0 || cell_size <= 0.0 {
        return Err(Error::format(path, "grid dimensions must be positive"));
    }

    let mut values = Vec::with_capacity(nrows * ncols);
    for tok in tokens {
        let v: f64 = tok
            .parse()
            .map_err(|_| Error::format(path, format!("invalid cell value `{tok}`")))?;
        values.push(v);
    }
    if values.len() != nrows * ncols {
        return Err(Error::format(
            path,
            format!(
                "expected {} cell values, found {}",
                nrows * ncols,
                values.len()
            ),
        ));
    }

    Ok(RasterLayer {
        name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        kind: LayerKind::Continuous,
        nrows,
        ncols,
        xll,
        yll,
        cell_size,
        nodata,
        values,
        categories: None,
    })
}

/// Writes a layer as an ESRI ASCII grid (byte-deterministic).
pub fn write_ascii_grid(layer: &RasterLayer, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(layer.values.len() * 8);
    out.push_str(&format!("ncols {}\n", layer.ncols));
    out.push_str(&format!("nrows {}\n", layer.nrows));
    out.push_str(&format!("xllcorner {}\n", layer.xll));
    out.push_str(&format!("yllcorner {}\n", layer.yll));
    out.push_str(&format!("cellsize {}\n", layer.cell_size));
    out.push_str(&format!("NODATA_value {}\n", layer.nodata));
    for r in 0..layer.nrows {
        for c in 0..layer.ncols {
            if c > 0 {
                out.push(' ');
            }
            out.push_str(&format!("{}", layer.values[r * layer.ncols + c]));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Per-scalar-layer standardization statistics, fitted on training patches
/// only. Indexed parallel to [`RasterStack::scalar_layers`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub patch_size: usize,
}

impl NormStats {
    /// Fits mean/std per scalar layer over all valid pixels of all training
    /// patches. Layers whose every pixel is masked get (0, 1).
    pub fn fit(stack: &RasterStack, train_centers: &[(f64, f64)], patch_size: usize) -> Self {
        let scalars = stack.scalar_layers();
        let mut mean = Vec::with_capacity(scalars.len());
        let mut std = Vec::with_capacity(scalars.len());
        for &li in &scalars {
            let layer = &stack.layers[li];
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            let mut count = 0usize;
            for &center in train_centers {
                let patch = extract_patch(layer, center, patch_size);
                for (v, ok) in patch.values.iter().zip(&patch.valid) {
                    if *ok {
                        sum += v;
                        sum_sq += v * v;
                        count += 1;
                    }
                }
            }
            if count == 0 {
                mean.push(0.0);
                std.push(1.0);
            } else {
                let m = sum / count as f64;
                let var = (sum_sq / count as f64 - m * m).max(0.0);
                mean.push(m);
                std.push(var.sqrt().max(STD_FLOOR));
            }
        }
        NormStats {
            mean,
            std,
            patch_size,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializable");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Digest of the serialized stats, for verifying they are not mutated by
    /// downstream extraction.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        serde_json::to_string(self).expect("serializable").hash(&mut h);
        h.finish()
    }
}

/// A standardized multi-channel patch tensor for one occurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvTensor {
    pub channels: usize,
    pub size: usize,
    /// Channel-major values, `channels * size * size` long.
    pub data: Vec<f32>,
    pub occ_id: u64,
    pub center: (f64, f64),
}

/// Builds the standardized patch tensor for one center position. Scalar
/// channels are standardized with the training stats (masked pixels become
/// zero, i.e. the channel mean); categorical channels stay binary.
pub fn build_env_tensor(
    stack: &RasterStack,
    center: (f64, f64),
    occ_id: u64,
    norm: &NormStats,
) -> Result<EnvTensor> {
    let size = norm.patch_size;
    let mut data = Vec::with_capacity(stack.channel_count() * size * size);
    let mut scalar_idx = 0usize;
    for layer in &stack.layers {
        let patch = extract_patch(layer, center, size);
        if layer.kind.is_categorical() {
            let cats = layer
                .categories
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("layer `{}` missing categories", layer.name)))?;
            let channels = unstack_categorical(&patch, cats)
                .map_err(|e| Error::invalid(format!("layer `{}`: {e}", layer.name)))?;
            for ch in channels {
                data.extend(ch.iter().map(|&v| v as f32));
            }
        } else {
            let m = norm.mean[scalar_idx];
            let s = norm.std[scalar_idx];
            scalar_idx += 1;
            for (v, ok) in patch.values.iter().zip(&patch.valid) {
                data.push(if *ok { ((v - m) / s) as f32 } else { 0.0 });
            }
        }
    }
    debug_assert!(data.iter().all(|v| v.is_finite()));
    Ok(EnvTensor {
        channels: stack.channel_count(),
        size,
        data,
        occ_id,
        center,
    })
}

const TENSOR_MAGIC: &[u8; 4] = b"SDMT";
const TENSOR_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct TensorIndex {
    shape: [u32; 3],
    occ_ids: Vec<u64>,
}

/// A persisted set of equally-shaped tensors keyed by occurrence id.
///
/// Binary layout: magic `SDMT`, version u16, shape triple (u32 channels,
/// height, width), record count u64, then little-endian f32 records. The
/// occurrence-id order lives in a JSON index sidecar.
#[derive(Debug, Clone)]
pub struct TensorCache {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub occ_ids: Vec<u64>,
    pub data: Vec<f32>,
    slot_by_id: std::collections::HashMap<u64, usize>,
}

impl TensorCache {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        TensorCache {
            channels,
            height,
            width,
            occ_ids: Vec::new(),
            data: Vec::new(),
            slot_by_id: std::collections::HashMap::new(),
        }
    }

    pub fn record_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.occ_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occ_ids.is_empty()
    }

    pub fn push(&mut self, occ_id: u64, values: &[f32]) {
        assert_eq!(values.len(), self.record_len(), "tensor record length");
        self.slot_by_id.insert(occ_id, self.occ_ids.len());
        self.occ_ids.push(occ_id);
        self.data.extend_from_slice(values);
    }

    pub fn get(&self, occ_id: u64) -> Option<&[f32]> {
        let &slot = self.slot_by_id.get(&occ_id)?;
        let rl = self.record_len();
        Some(&self.data[slot * rl..(slot + 1) * rl])
    }

    pub fn save(&self, bin_path: &Path, index_path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(bin_path).map_err(|e| Error::io(bin_path, e))?;
        f.write_all(&out).map_err(|e| Error::io(bin_path, e))?;
        let index = TensorIndex {
            shape: [
                self.channels as u32,
                self.height as u32,
                self.width as u32,
            ],
            occ_ids: self.occ_ids.clone(),
        };
        let text = serde_json::to_string(&index).expect("serializable");
        fs::write(index_path, text).map_err(|e| Error::io(index_path, e))
    }

    pub fn load(bin_path: &Path, index_path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(bin_path)
            .map_err(|e| Error::io(bin_path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(bin_path, e))?;
        if bytes.len() < 22 || &bytes[0..4] != TENSOR_MAGIC {
            return Err(Error::format(bin_path, "bad magic (expected SDMT)"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != TENSOR_VERSION {
            return Err(Error::format(
                bin_path,
                format!("unsupported version {version}"),
            ));
        }
        let rd_u32 = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let channels = rd_u32(6) as usize;
        let height = rd_u32(10) as usize;
        let width = rd_u32(14) as usize;
        let count = u64::from_le_bytes(bytes[18..26].try_into().unwrap()) as usize;
        let record_len = channels * height * width;
        let expected = 26 + count * record_len * 4;
        if bytes.len() != expected {
            return Err(Error::format(
                bin_path,
                format!("expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        let mut data = Vec::with_capacity(count * record_len);
        for chunk in bytes[26..].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }

        let text = fs::read_to_string(index_path).map_err(|e| Error::io(index_path, e))?;
        let index: TensorIndex =
            serde_json::from_str(&text).map_err(|e| Error::format(index_path, e.to_string()))?;
        if index.shape != [channels as u32, height as u32, width as u32] {
            return Err(Error::format(index_path, "index shape disagrees with binary"));
        }
        if index.occ_ids.len() != count {
            return Err(Error::format(index_path, "index length disagrees with binary"));
        }
        let slot_by_id = index
            .occ_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect();
        Ok(TensorCache {
            channels,
            height,
            width,
            occ_ids: index.occ_ids,
            data,
            slot_by_id,
        })
    }
}

/// Default cache file names inside an extraction output directory.
pub fn cache_paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join("tensors.bin"),
        dir.join("tensors.json"),
        dir.join("norm.json"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng as _};
    use rand_chacha::ChaCha8Rng;

    fn layer(nrows: usize, ncols: usize, values: Vec<f64>) -> RasterLayer {
        RasterLayer {
            name: "t".into(),
            kind: LayerKind::Continuous,
            nrows,
            ncols,
            xll: 0.0,
            yll: 0.0,
            cell_size: 1.0,
            nodata: -9999.0,
            values,
            categories: None,
        }
    }

    fn stack_of(layers: Vec<RasterLayer>) -> RasterStack {
        RasterStack {
            layers,
            crs: CrsMode::Planar,
        }
    }

    #[test]
    fn channel_plan_counts() {
        let mut cat = layer(4, 4, vec![1.0; 16]);
        cat.kind = LayerKind::Categorical;
        cat.categories = Some((0..45).map(|i| i as f64).collect());
        let mut layers: Vec<RasterLayer> = (0..32).map(|_| layer(4, 4, vec![0.0; 16])).collect();
        layers.push(cat);
        assert_eq!(stack_of(layers).channel_count(), 77);

        assert_eq!(stack_of(vec![layer(4, 4, vec![0.0; 16])]).channel_count(), 1);

        let mut cat3 = layer(4, 4, vec![0.0; 16]);
        cat3.kind = LayerKind::Categorical;
        cat3.categories = Some(vec![0.0, 1.0, 2.0]);
        let layers = vec![
            layer(4, 4, vec![0.0; 16]),
            layer(4, 4, vec![0.0; 16]),
            cat3,
        ];
        assert_eq!(stack_of(layers).channel_count(), 5);
    }

    #[test]
    fn constant_layer_gives_constant_patch() {
        let l = layer(100, 100, vec![3.5; 10_000]);
        let p = extract_patch(&l, (50.0, 50.0), 8);
        assert!(p.valid.iter().all(|&v| v));
        assert!(p.values.iter().all(|&v| v == 3.5));
    }

    #[test]
    fn corner_fill_fraction_matches_bounds_oracle() {
        let l = layer(64, 64, (0..64 * 64).map(|i| i as f64).collect());
        // Center in the corner cell (0.5, 0.5) -> cell (row 63, col 0).
        let size = 16;
        let p = extract_patch(&l, (0.5, 0.5), size);
        // Oracle: count offsets that land outside the grid directly.
        let (r0, c0) = l.cell_of(0.5, 0.5);
        let half = (size / 2) as isize;
        let mut oob = 0usize;
        for i in 0..size as isize {
            for j in 0..size as isize {
                let r = r0 + i - half;
                let c = c0 + j - half;
                if r < 0 || c < 0 || r >= 64 || c >= 64 {
                    oob += 1;
                }
            }
        }
        assert_eq!(
            p.fill_fraction(),
            oob as f64 / (size * size) as f64,
            "masked fraction equals direct out-of-bounds count"
        );
    }

    #[test]
    fn full_grid_patch_is_identity() {
        let values: Vec<f64> = (0..64 * 64).map(|i| i as f64 * 0.25).collect();
        let l = layer(64, 64, values.clone());
        // Cell (32, 32) is the center cell of the 64x64 patch; its center is
        // at x = 32.5, y = 64 - 32 - 0.5 = 31.5.
        let p = extract_patch(&l, (32.5, 31.5), 64);
        assert!(p.valid.iter().all(|&v| v));
        assert_eq!(p.values, values);
    }

    #[test]
    fn unstack_all_one_category() {
        let p = Patch {
            size: 4,
            values: vec![3.0; 16],
            valid: vec![true; 16],
        };
        let cats: Vec<f64> = (0..45).map(|i| i as f64).collect();
        let ch = unstack_categorical(&p, &cats).unwrap();
        assert_eq!(ch.len(), 45);
        assert!(ch[3].iter().all(|&v| v == 1.0));
        for (k, c) in ch.iter().enumerate() {
            if k != 3 {
                assert!(c.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn unstack_popcounts() {
        let p = Patch {
            size: 2,
            values: vec![0.0, 1.0, 1.0, 2.0],
            valid: vec![true; 4],
        };
        let ch = unstack_categorical(&p, &[0.0, 1.0, 2.0]).unwrap();
        let pops: Vec<usize> = ch
            .iter()
            .map(|c| c.iter().filter(|&&v| v == 1.0).count())
            .collect();
        assert_eq!(pops, vec![1, 2, 1]);
    }

    #[test]
    fn unstack_unknown_value_errors_with_pixel() {
        let p = Patch {
            size: 2,
            values: vec![0.0, 9.0, 1.0, 2.0],
            valid: vec![true; 4],
        };
        let err = unstack_categorical(&p, &[0.0, 1.0, 2.0]).unwrap_err();
        assert!(err.to_string().contains("(0,1)"), "{err}");
    }

    #[test]
    fn constant_layer_standardizes_to_zero() {
        let stack = stack_of(vec![layer(32, 32, vec![7.0; 1024])]);
        let centers = vec![(16.0, 16.0), (10.0, 10.0)];
        let norm = NormStats::fit(&stack, &centers, 8);
        assert_eq!(norm.std[0], STD_FLOOR);
        let t = build_env_tensor(&stack, (16.0, 16.0), 0, &norm).unwrap();
        assert_eq!(t.channels, 1);
        assert!(t.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn paper_shape_tensor() {
        let mut layers: Vec<RasterLayer> =
            (0..32).map(|i| layer(80, 80, vec![i as f64; 6400])).collect();
        let mut cat = layer(80, 80, vec![1.0; 6400]);
        cat.kind = LayerKind::Categorical;
        cat.categories = Some((0..45).map(|i| i as f64).collect());
        layers.push(cat);
        let stack = stack_of(layers);
        let norm = NormStats::fit(&stack, &[(40.0, 40.0)], 64);
        let t = build_env_tensor(&stack, (40.0, 40.0), 5, &norm).unwrap();
        assert_eq!(t.channels, 77);
        assert_eq!(t.size, 64);
        assert_eq!(t.data.len(), 77 * 64 * 64);
    }

    #[test]
    fn train_stats_standardize_to_unit_moments() {
        // Random 3-layer stack; recompute moments over the emitted tensors.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layers: Vec<RasterLayer> = (0..3)
            .map(|_| {
                layer(
                    64,
                    64,
                    (0..64 * 64).map(|_| rng.gen_range(-5.0..5.0)).collect(),
                )
            })
            .collect();
        let stack = stack_of(layers);
        let centers: Vec<(f64, f64)> = (0..40)
            .map(|_| (rng.gen_range(20.0..44.0), rng.gen_range(20.0..44.0)))
            .collect();
        let norm = NormStats::fit(&stack, &centers, 8);
        let before = norm.checksum();

        let tensors: Vec<EnvTensor> = centers
            .iter()
            .enumerate()
            .map(|(i, &c)| build_env_tensor(&stack, c, i as u64, &norm).unwrap())
            .collect();
        for ch in 0..3 {
            let mut vals = Vec::new();
            for t in &tensors {
                let px = t.size * t.size;
                vals.extend(t.data[ch * px..(ch + 1) * px].iter().map(|&v| v as f64));
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6, "channel {ch} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-6, "channel {ch} std {}", var.sqrt());
        }
        // Building validation tensors must not consult or mutate the stats.
        assert_eq!(norm.checksum(), before);
    }

    #[test]
    fn tensor_extraction_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stack = stack_of(vec![layer(
            32,
            32,
            (0..1024).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )]);
        let norm = NormStats::fit(&stack, &[(16.0, 16.0)], 8);
        let a = build_env_tensor(&stack, (16.0, 16.0), 0, &norm).unwrap();
        let b = build_env_tensor(&stack, (16.0, 16.0), 0, &norm).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ascii_grid_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut l = layer(5, 7, (0..35).map(|_| rng.gen_range(-3.0..3.0)).collect());
        l.xll = -12.5;
        l.yll = 100.25;
        l.cell_size = 30.0;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.asc");
        write_ascii_grid(&l, &p).unwrap();
        let got = read_ascii_grid(&p).unwrap();
        assert_eq!(got.nrows, l.nrows);
        assert_eq!(got.ncols, l.ncols);
        assert_eq!(got.values, l.values);
        assert_eq!(got.xll, l.xll);
        assert_eq!(got.yll, l.yll);
        assert_eq!(got.cell_size, l.cell_size);
    }

    #[test]
    fn manifest_loading_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let g = layer(4, 4, vec![1.0; 16]);
        write_ascii_grid(&g, &dir.path().join("a.asc")).unwrap();
        write_ascii_grid(&g, &dir.path().join("b.asc")).unwrap();

        let manifest = serde_json::json!({
            "crs": "planar",
            "layers": [
                {"name": "a", "kind": "continuous", "path": "a.asc"},
                {"name": "b", "kind": "categorical", "path": "b.asc", "categories": [1.0, 2.0]},
            ]
        });
        let mp = dir.path().join("stack.json");
        fs::write(&mp, serde_json::to_string(&manifest).unwrap()).unwrap();
        let stack = load_raster_stack(&mp, Some(CrsMode::Planar)).unwrap();
        assert_eq!(stack.channel_count(), 3);

        // CRS disagreement.
        let err = load_raster_stack(&mp, Some(CrsMode::LonLat)).unwrap_err();
        assert!(err.to_string().contains("inconsistent CRS"), "{err}");

        // Categorical without categories.
        let bad = serde_json::json!({
            "layers": [{"name": "b", "kind": "categorical", "path": "b.asc"}]
        });
        fs::write(&mp, serde_json::to_string(&bad).unwrap()).unwrap();
        let err = load_raster_stack(&mp, None).unwrap_err();
        assert!(err.to_string().contains("no category list"), "{err}");

        // Missing file.
        let gone = serde_json::json!({
            "layers": [{"name": "x", "kind": "continuous", "path": "nope.asc"}]
        });
        fs::write(&mp, serde_json::to_string(&gone).unwrap()).unwrap();
        assert!(load_raster_stack(&mp, None).is_err());
    }

    #[test]
    fn tensor_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cache = TensorCache::new(2, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for id in [5u64, 9, 2] {
            let rec: Vec<f32> = (0..18).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            cache.push(id, &rec);
        }
        let (bin, idx, _) = cache_paths(dir.path());
        cache.save(&bin, &idx).unwrap();
        let loaded = TensorCache::load(&bin, &idx).unwrap();
        assert_eq!(loaded.occ_ids, cache.occ_ids);
        assert_eq!(loaded.data, cache.data);
        assert_eq!(loaded.get(9), cache.get(9));
        assert!(loaded.get(77).is_none());
    }

    proptest! {
        /// One-hot invariant: per pixel, categorical channels sum to 1 for
        /// valid pixels and 0 for masked ones.
        #[test]
        fn unstack_is_one_hot(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let size = 6;
            let cats: Vec<f64> = (0..4).map(|i| i as f64).collect();
            let values: Vec<f64> = (0..size * size)
                .map(|_| cats[rng.gen_range(0..cats.len())])
                .collect();
            let valid: Vec<bool> = (0..size * size).map(|_| rng.gen_bool(0.8)).collect();
            let p = Patch { size, values, valid: valid.clone() };
            let ch = unstack_categorical(&p, &cats).unwrap();
            for px in 0..size * size {
                let s: f64 = ch.iter().map(|c| c[px]).sum();
                prop_assert_eq!(s, if valid[px] { 1.0 } else { 0.0 });
            }
        }
    }
}
