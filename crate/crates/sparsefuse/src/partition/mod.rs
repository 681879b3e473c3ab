//! Window quantization, the sort/shift scheme, and the three neighbor
//! grouping algorithms, plus the locality metric used to compare them.

pub mod curve;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use curve::Curve;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::token::TokenSet;

/// Slot marker for padded (invalid) entries in a [`PartitionPlan`].
pub const INVALID_SLOT: u32 = u32::MAX;

/// Below this size parallel sorting is not worth the fork overhead.
const PAR_SORT_MIN: usize = 1 << 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Pattern {
    #[default]
    #[serde(rename = "x")]
    X,
    #[serde(rename = "x-shift")]
    XShift,
    #[serde(rename = "y")]
    Y,
    #[serde(rename = "y-shift")]
    YShift,
}

impl Pattern {
    pub fn is_shift(self) -> bool {
        matches!(self, Pattern::XShift | Pattern::YShift)
    }

    pub fn is_y_major(self) -> bool {
        matches!(self, Pattern::Y | Pattern::YShift)
    }

    /// The four-layer rotation used by every transformer stage.
    pub const CYCLE: [Pattern; 4] = [Pattern::X, Pattern::XShift, Pattern::Y, Pattern::YShift];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Algorithm {
    #[default]
    FlattenWindow,
    DynamicSet,
    SpaceFillingCurve,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PartitionConfig {
    /// Window shape (w_x, w_y, w_z) in the units of the partitioned
    /// coordinates (meters in 3D, pixels in image space).
    pub window_shape: [f64; 3],
    /// Tokens per attention group.
    pub group_size: usize,
    #[serde(default)]
    pub pattern: Pattern,
    #[serde(default)]
    pub algorithm: Algorithm,
    #[serde(default)]
    pub curve: Curve,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        // 16 × 16 cells at the default 0.3 m grid; w_z spans the full z range.
        PartitionConfig {
            window_shape: [4.8, 4.8, 8.0],
            group_size: 80,
            pattern: Pattern::X,
            algorithm: Algorithm::FlattenWindow,
            curve: Curve::Morton,
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 1 {
            return Err(Error::InvalidConfig("group_size must be >= 1".into()));
        }
        if self.window_shape.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidConfig("window_shape must be positive".into()));
        }
        Ok(())
    }

    pub fn with_pattern(&self, pattern: Pattern) -> PartitionConfig {
        PartitionConfig { pattern, ..self.clone() }
    }
}

/// A point's window coordinates and its local coordinates within the window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowKey {
    pub wx: i64,
    pub wy: i64,
    pub wz: i64,
    pub lx: f64,
    pub ly: f64,
    pub lz: f64,
}

impl WindowKey {
    pub fn window(&self) -> (i64, i64, i64) {
        (self.wx, self.wy, self.wz)
    }
}

fn split_axis(coord: f64, w: f64) -> (i64, f64) {
    let mut q = (coord / w).floor() as i64;
    let mut l = coord - q as f64 * w;
    // Guard the float edges so locals stay in [0, w).
    if l < 0.0 {
        q -= 1;
        l += w;
    }
    if l >= w {
        q += 1;
        l = 0.0;
    }
    (q, l)
}

/// Quantizes a point into window + local coordinates. Shift patterns
/// translate the point by (w_x/2, w_y/2, 0) first.
pub fn window_key(p: Vec3, cfg: &PartitionConfig) -> WindowKey {
    let [wx_s, wy_s, wz_s] = cfg.window_shape;
    let (x, y) = if cfg.pattern.is_shift() {
        (p.x + wx_s / 2.0, p.y + wy_s / 2.0)
    } else {
        (p.x, p.y)
    };
    let (wx, lx) = split_axis(x, wx_s);
    let (wy, ly) = split_axis(y, wy_s);
    let (wz, lz) = split_axis(p.z, wz_s);
    WindowKey { wx, wy, wz, lx, ly, lz }
}

/// Composite sort key with components pre-swapped for the pattern, so the
/// comparison is always plain lexicographic.
#[derive(Clone, Copy)]
struct SortKey {
    w: [i64; 3],
    l: [f64; 3],
}

impl SortKey {
    fn of(key: &WindowKey, y_major: bool) -> SortKey {
        if y_major {
            SortKey { w: [key.wy, key.wx, key.wz], l: [key.ly, key.lx, key.lz] }
        } else {
            SortKey { w: [key.wx, key.wy, key.wz], l: [key.lx, key.ly, key.lz] }
        }
    }

    fn cmp(&self, other: &SortKey) -> std::cmp::Ordering {
        for a in 0..3 {
            let ord = self.w[a].cmp(&other.w[a]);
            if ord != std::cmp::Ordering::Equal {
                return ord;
            }
        }
        for a in 0..3 {
            let ord = self.l[a].total_cmp(&other.l[a]);
            if ord != std::cmp::Ordering::Equal {
                return ord;
            }
        }
        std::cmp::Ordering::Equal
    }
}

fn stable_sort_indices_by<F>(n: usize, cmp: F) -> Vec<u32>
where
    F: Fn(u32, u32) -> std::cmp::Ordering + Sync,
{
    let mut order: Vec<u32> = (0..n as u32).collect();
    if n >= PAR_SORT_MIN {
        order.par_sort_by(|&a, &b| cmp(a, b));
    } else {
        order.sort_by(|&a, &b| cmp(a, b));
    }
    order
}

fn window_sort(coords: &[Vec3], cfg: &PartitionConfig) -> (Vec<u32>, Vec<WindowKey>) {
    let keys: Vec<WindowKey> = if coords.len() >= PAR_SORT_MIN {
        coords.par_iter().map(|&p| window_key(p, cfg)).collect()
    } else {
        coords.iter().map(|&p| window_key(p, cfg)).collect()
    };
    let y_major = cfg.pattern.is_y_major();
    let sort_keys: Vec<SortKey> = keys.iter().map(|k| SortKey::of(k, y_major)).collect();
    let order = stable_sort_indices_by(coords.len(), |a, b| {
        sort_keys[a as usize].cmp(&sort_keys[b as usize])
    });
    (order, keys)
}

/// Stable window-major sort: by window coordinates, then by local
/// coordinates, with the axis order flipped for y-major patterns.
/// Returns the permutation of token indices.
pub fn sort_tokens(tokens: &TokenSet, cfg: &PartitionConfig) -> Vec<u32> {
    sort_coords(&tokens.coords(), cfg)
}

/// [`sort_tokens`] over bare coordinates (used for pixel-space partitions).
pub fn sort_coords(coords: &[Vec3], cfg: &PartitionConfig) -> Vec<u32> {
    window_sort(coords, cfg).0
}

/// Token ordering plus group boundaries and padding produced by one
/// partition algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    /// Token indices in attention order; padded slots hold [`INVALID_SLOT`].
    pub order: Vec<u32>,
    /// Start offset of each group within `order`.
    pub group_starts: Vec<usize>,
    /// Per-slot valid flags; `None` for maskless plans (FlattenWindow, curves).
    pub pad_mask: Option<Vec<bool>>,
    /// Dense window id per group; `DynamicSet` only.
    pub windows_of_groups: Option<Vec<u64>>,
}

impl PartitionPlan {
    pub fn num_groups(&self) -> usize {
        self.group_starts.len()
    }

    pub fn group_range(&self, g: usize) -> std::ops::Range<usize> {
        let end = self
            .group_starts
            .get(g + 1)
            .copied()
            .unwrap_or(self.order.len());
        self.group_starts[g]..end
    }

    /// Slot contents of a group, padding included.
    pub fn group_slots(&self, g: usize) -> &[u32] {
        &self.order[self.group_range(g)]
    }

    /// Valid token indices of a group.
    pub fn group_members(&self, g: usize) -> impl Iterator<Item = u32> + '_ {
        self.group_slots(g).iter().copied().filter(|&t| t != INVALID_SLOT)
    }

    pub fn valid_len(&self) -> usize {
        self.order.iter().filter(|&&t| t != INVALID_SLOT).count()
    }

    /// True when every token index in 0..n appears exactly once among
    /// valid slots.
    pub fn is_bijection(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        let mut count = 0usize;
        for &t in &self.order {
            if t == INVALID_SLOT {
                continue;
            }
            let t = t as usize;
            if t >= n || seen[t] {
                return false;
            }
            seen[t] = true;
            count += 1;
        }
        count == n
    }
}

fn chunk_into_groups(order: Vec<u32>, group_size: usize) -> PartitionPlan {
    let group_starts = (0..order.len()).step_by(group_size).collect();
    PartitionPlan { order, group_starts, pad_mask: None, windows_of_groups: None }
}

/// Flatten Window: the window-sorted order chunked into consecutive runs
/// of `group_size`; the last group may be smaller. No padding, no mask.
///
/// Grid tokens take a packed-integer fast path: token coordinates are
/// cell centers, so within a window the local-coordinate order equals the
/// cell-index order and the whole composite key fits two u64s (this is
/// the "simple indexing" that makes the algorithm cheap). The order is
/// identical to [`sort_tokens`].
pub fn flatten_window_groups(tokens: &TokenSet, cfg: &PartitionConfig) -> PartitionPlan {
    match flatten_grid_order(tokens, cfg) {
        Some(order) => chunk_into_groups(order, cfg.group_size),
        None => flatten_window_groups_coords(&tokens.coords(), cfg),
    }
}

pub fn flatten_window_groups_coords(coords: &[Vec3], cfg: &PartitionConfig) -> PartitionPlan {
    chunk_into_groups(sort_coords(coords, cfg), cfg.group_size)
}

/// Bias that maps signed window coordinates into the 21-bit pack range.
const PACK_BIAS: i64 = 1 << 20;

/// Packs three order-preserving fields, each required in [0, 2^21).
fn pack3(a: i64, b: i64, c: i64) -> Option<u64> {
    let range = 0..(1i64 << 21);
    if range.contains(&a) && range.contains(&b) && range.contains(&c) {
        Some((a as u64) << 42 | (b as u64) << 21 | c as u64)
    } else {
        None
    }
}

fn flatten_grid_order(tokens: &TokenSet, cfg: &PartitionConfig) -> Option<Vec<u32>> {
    let n = tokens.len();
    if n == 0 {
        return Some(Vec::new());
    }
    let y_major = cfg.pattern.is_y_major();
    let (origin, cell) = (tokens.origin, tokens.cell);
    let key_of = |t: &crate::token::Token| -> Option<([i32; 3], u64)> {
        // Engage only for true grid tokens: the cell-order shortcut needs
        // the coordinate to sit at the cell center.
        let center = Vec3::new(
            origin.x + (t.index[0] as f64 + 0.5) * cell[0],
            origin.y + (t.index[1] as f64 + 0.5) * cell[1],
            origin.z + (t.index[2] as f64 + 0.5) * cell[2],
        );
        if center != t.coord3d {
            return None;
        }
        let k = window_key(t.coord3d, cfg);
        if [k.wx, k.wy, k.wz].iter().any(|w| w.unsigned_abs() > PACK_BIAS as u64) {
            return None;
        }
        let [ix, iy, iz] = t.index.map(|v| v as i64);
        if y_major {
            Some(([k.wy as i32, k.wx as i32, k.wz as i32], pack3(iy, ix, iz)?))
        } else {
            Some(([k.wx as i32, k.wy as i32, k.wz as i32], pack3(ix, iy, iz)?))
        }
    };
    let keys: Vec<([i32; 3], u64)> = if n >= PAR_SORT_MIN {
        tokens.tokens.par_iter().map(key_of).collect::<Option<_>>()?
    } else {
        tokens.tokens.iter().map(key_of).collect::<Option<_>>()?
    };

    // Dense window ids over the occupied bounding box.
    let mut lo = [i32::MAX; 3];
    let mut hi = [i32::MIN; 3];
    for (w, _) in &keys {
        for a in 0..3 {
            lo[a] = lo[a].min(w[a]);
            hi[a] = hi[a].max(w[a]);
        }
    }
    let span: [usize; 3] = std::array::from_fn(|a| (hi[a] - lo[a]) as usize + 1);
    let window_count = span[0].checked_mul(span[1])?.checked_mul(span[2])?;
    if window_count > 4 * n + 1024 {
        return None; // windows too sparse for counting; generic sort wins
    }
    let id_of = |w: &[i32; 3]| -> usize {
        ((w[0] - lo[0]) as usize * span[1] + (w[1] - lo[1]) as usize) * span[2]
            + (w[2] - lo[2]) as usize
    };

    // Counting sort by window, then per-window sorts by cell key. The
    // token index breaks (impossible for distinct voxels) cell ties in
    // input order, matching the stable composite sort exactly.
    let mut counts = vec![0u32; window_count];
    for (w, _) in &keys {
        counts[id_of(w)] += 1;
    }
    let mut offsets = vec![0usize; window_count];
    let mut acc = 0usize;
    for (o, &c) in offsets.iter_mut().zip(&counts) {
        *o = acc;
        acc += c as usize;
    }
    let mut scattered: Vec<(u64, u32)> = vec![(0, 0); n];
    let mut cursors = offsets;
    for (i, (w, cell_key)) in keys.iter().enumerate() {
        let slot = &mut cursors[id_of(w)];
        scattered[*slot] = (*cell_key, i as u32);
        *slot += 1;
    }

    let mut slices = Vec::with_capacity(window_count);
    let mut rest = &mut scattered[..];
    for &c in &counts {
        let (head, tail) = rest.split_at_mut(c as usize);
        slices.push(head);
        rest = tail;
    }
    slices.into_par_iter().for_each(|s| s.sort_unstable());

    Some(scattered.into_iter().map(|(_, i)| i).collect())
}

/// Dynamic Set: tokens bucketed by full window coordinate; each window's
/// n tokens are split into ceil(n/G) groups of exactly G slots with the
/// trailing slots padded invalid. Groups never cross a window.
pub fn dynamic_set_groups(tokens: &TokenSet, cfg: &PartitionConfig) -> PartitionPlan {
    dynamic_set_groups_coords(&tokens.coords(), cfg)
}

pub fn dynamic_set_groups_coords(coords: &[Vec3], cfg: &PartitionConfig) -> PartitionPlan {
    let (perm, keys) = window_sort(coords, cfg);
    let g = cfg.group_size;

    let mut order = Vec::new();
    let mut group_starts = Vec::new();
    let mut pad_mask = Vec::new();
    let mut windows_of_groups = Vec::new();

    let mut window_id = 0u64;
    let mut run_start = 0usize;
    while run_start < perm.len() {
        let window = keys[perm[run_start] as usize].window();
        let mut run_end = run_start + 1;
        while run_end < perm.len() && keys[perm[run_end] as usize].window() == window {
            run_end += 1;
        }

        for chunk in perm[run_start..run_end].chunks(g) {
            group_starts.push(order.len());
            windows_of_groups.push(window_id);
            order.extend_from_slice(chunk);
            pad_mask.extend(std::iter::repeat(true).take(chunk.len()));
            let pad = g - chunk.len();
            order.extend(std::iter::repeat(INVALID_SLOT).take(pad));
            pad_mask.extend(std::iter::repeat(false).take(pad));
        }

        window_id += 1;
        run_start = run_end;
    }

    PartitionPlan {
        order,
        group_starts,
        pad_mask: Some(pad_mask),
        windows_of_groups: Some(windows_of_groups),
    }
}

/// Space-filling curve grouping over the tokens' grid indices.
///
/// Shift patterns translate the indices by half the window shape in cells
/// before encoding. Chunking matches [`flatten_window_groups`].
pub fn curve_groups(tokens: &TokenSet, cfg: &PartitionConfig) -> Result<PartitionPlan> {
    let indices: Vec<[i64; 3]> = tokens
        .tokens
        .iter()
        .map(|t| [t.index[0] as i64, t.index[1] as i64, t.index[2] as i64])
        .collect();
    let half_window_cells = [
        (cfg.window_shape[0] / tokens.cell[0] / 2.0).round() as i64,
        (cfg.window_shape[1] / tokens.cell[1] / 2.0).round() as i64,
        0,
    ];
    curve_groups_indices(&indices, cfg, half_window_cells)
}

/// [`curve_groups`] over bare grid indices with an explicit shift.
pub fn curve_groups_indices(
    indices: &[[i64; 3]],
    cfg: &PartitionConfig,
    half_window_cells: [i64; 3],
) -> Result<PartitionPlan> {
    let shift = if cfg.pattern.is_shift() {
        half_window_cells
    } else {
        [0, 0, 0]
    };
    let encode_one = |idx: &[i64; 3]| -> Result<u64> {
        let shifted = [idx[0] + shift[0], idx[1] + shift[1], idx[2] + shift[2]];
        for (a, &v) in shifted.iter().enumerate() {
            if v < 0 {
                return Err(Error::IndexOverflow {
                    axis: ['x', 'y', 'z'][a],
                    index: v as u64,
                    bits: curve::CURVE_BITS,
                });
            }
        }
        curve::encode(cfg.curve, shifted[0] as u64, shifted[1] as u64, shifted[2] as u64)
    };

    let codes: Vec<u64> = if indices.len() >= PAR_SORT_MIN {
        indices.par_iter().map(encode_one).collect::<Result<_>>()?
    } else {
        indices.iter().map(encode_one).collect::<Result<_>>()?
    };
    let order = stable_sort_indices_by(indices.len(), |a, b| {
        codes[a as usize].cmp(&codes[b as usize])
    });
    Ok(chunk_into_groups(order, cfg.group_size))
}

/// Builds the plan selected by `cfg.algorithm`.
pub fn build_plan(tokens: &TokenSet, cfg: &PartitionConfig) -> Result<PartitionPlan> {
    match cfg.algorithm {
        Algorithm::FlattenWindow => Ok(flatten_window_groups(tokens, cfg)),
        Algorithm::DynamicSet => Ok(dynamic_set_groups(tokens, cfg)),
        Algorithm::SpaceFillingCurve => curve_groups(tokens, cfg),
    }
}

/// Mean over groups of the mean pairwise Euclidean distance among valid
/// members; singleton groups contribute 0. The locality score: lower
/// means spatially tighter groups.
pub fn mean_intra_group_distance(tokens: &TokenSet, plan: &PartitionPlan) -> f64 {
    mean_intra_group_distance_coords(&tokens.coords(), plan)
}

pub fn mean_intra_group_distance_coords(coords: &[Vec3], plan: &PartitionPlan) -> f64 {
    if plan.num_groups() == 0 {
        return 0.0;
    }
    let per_group: Vec<f64> = (0..plan.num_groups())
        .into_par_iter()
        .map(|g| {
            let members: Vec<Vec3> = plan
                .group_members(g)
                .map(|t| coords[t as usize])
                .collect();
            if members.len() < 2 {
                return 0.0;
            }
            let mut sum = 0.0;
            for i in 0..members.len() {
                for j in i + 1..members.len() {
                    sum += members[i].distance(members[j]);
                }
            }
            let pairs = members.len() * (members.len() - 1) / 2;
            sum / pairs as f64
        })
        .collect();
    per_group.iter().sum::<f64>() / per_group.len() as f64
}

// --- plan CSV ------------------------------------------------------------

/// Serializes a plan with token coordinates:
/// `token_index,group_id,valid,x,y,z`; padded slots carry token_index -1.
pub fn write_plan_csv(path: &Path, plan: &PartitionPlan, coords: &[Vec3]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["token_index", "group_id", "valid", "x", "y", "z"])?;
    for g in 0..plan.num_groups() {
        for &slot in plan.group_slots(g) {
            if slot == INVALID_SLOT {
                w.write_record(["-1", &g.to_string(), "0", "0", "0", "0"])?;
            } else {
                let c = coords[slot as usize];
                w.write_record([
                    slot.to_string(),
                    g.to_string(),
                    "1".to_string(),
                    c.x.to_string(),
                    c.y.to_string(),
                    c.z.to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(Error::Io)?;
    Ok(())
}

/// One row of a serialized plan CSV.
#[derive(Debug, Clone, Deserialize)]
pub struct PlanCsvRow {
    pub token_index: i64,
    pub group_id: u64,
    pub valid: u8,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

pub fn read_plan_csv(path: &Path) -> Result<Vec<PlanCsvRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token::{Modality, Token};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(pattern: Pattern) -> PartitionConfig {
        PartitionConfig {
            window_shape: [2.0, 2.0, 2.0],
            group_size: 4,
            pattern,
            ..Default::default()
        }
    }

    fn token_set_from_coords(coords: &[Vec3], cell: f64) -> TokenSet {
        let tokens = coords
            .iter()
            .map(|&c| Token {
                index: [
                    (c.x / cell).floor() as i32,
                    (c.y / cell).floor() as i32,
                    (c.z / cell).floor() as i32,
                ],
                coord3d: c,
                pixel: None,
                modality: Modality::Lidar,
                camera_id: None,
            })
            .collect::<Vec<_>>();
        let n = tokens.len();
        TokenSet {
            tokens,
            features: vec![0.0; n],
            dim: 1,
            level_z: 1,
            origin: Vec3::ZERO,
            cell: [cell; 3],
            dims: [1024, 1024, 1024],
        }
    }

    fn random_coords(n: usize, seed: u64, extent: f64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.gen::<f64>() * extent,
                    rng.gen::<f64>() * extent,
                    rng.gen::<f64>() * 4.0,
                )
            })
            .collect()
    }

    #[test]
    fn window_key_direct_arithmetic() {
        let k = window_key(Vec3::new(3.5, 0.0, 0.0), &cfg(Pattern::X));
        assert_eq!(k.wx, 1);
        assert!((k.lx - 1.5).abs() < 1e-12);
    }

    #[test]
    fn window_key_origin() {
        let k = window_key(Vec3::ZERO, &cfg(Pattern::X));
        assert_eq!((k.wx, k.wy, k.wz), (0, 0, 0));
        assert_eq!((k.lx, k.ly, k.lz), (0.0, 0.0, 0.0));
    }

    #[test]
    fn window_key_floor_semantics_on_negatives() {
        let k = window_key(Vec3::new(-0.5, 0.0, 0.0), &cfg(Pattern::X));
        assert_eq!(k.wx, -1);
        assert!((k.lx - 1.5).abs() < 1e-12);
    }

    #[test]
    fn shift_pattern_translates_by_half_window() {
        let p = Vec3::new(0.5, 0.5, 0.0);
        let plain = window_key(p, &cfg(Pattern::X));
        let shifted = window_key(p, &cfg(Pattern::XShift));
        assert_eq!(plain.wx, 0);
        assert_eq!(shifted.wx, 0);
        assert!((shifted.lx - 1.5).abs() < 1e-12, "local moved by w/2");
    }

    #[test]
    fn sort_preserves_ascending_windows() {
        let coords = vec![Vec3::new(0.1, 0.0, 0.0), Vec3::new(2.1, 0.0, 0.0)];
        assert_eq!(sort_coords(&coords, &cfg(Pattern::X)), vec![0, 1]);
    }

    #[test]
    fn sort_is_stable_on_identical_keys() {
        let coords = vec![Vec3::new(1.0, 1.0, 1.0); 5];
        assert_eq!(sort_coords(&coords, &cfg(Pattern::X)), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn sort_matches_comparison_oracle() {
        for pattern in Pattern::CYCLE {
            let c = cfg(pattern);
            let coords = random_coords(1_000, 3, 20.0);
            let got = sort_coords(&coords, &c);

            let keys: Vec<WindowKey> = coords.iter().map(|&p| window_key(p, &c)).collect();
            let mut want: Vec<u32> = (0..coords.len() as u32).collect();
            let composite = |i: u32| {
                let k = &keys[i as usize];
                if pattern.is_y_major() {
                    ((k.wy, k.wx, k.wz), [k.ly, k.lx, k.lz])
                } else {
                    ((k.wx, k.wy, k.wz), [k.lx, k.ly, k.lz])
                }
            };
            want.sort_by(|&a, &b| {
                let (wa, la) = composite(a);
                let (wb, lb) = composite(b);
                wa.cmp(&wb).then_with(|| {
                    la.iter()
                        .zip(&lb)
                        .map(|(x, y)| x.total_cmp(y))
                        .find(|o| !o.is_eq())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
            });
            assert_eq!(got, want, "pattern {pattern:?}");
        }
    }

    #[test]
    fn flatten_window_chunk_sizes() {
        let ts = token_set_from_coords(&random_coords(10, 5, 10.0), 0.5);
        let plan = flatten_window_groups(&ts, &cfg(Pattern::X));
        let sizes: Vec<usize> = (0..plan.num_groups()).map(|g| plan.group_slots(g).len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert!(plan.pad_mask.is_none());

        let ts8 = token_set_from_coords(&random_coords(8, 5, 10.0), 0.5);
        let plan8 = flatten_window_groups(&ts8, &cfg(Pattern::X));
        let sizes8: Vec<usize> =
            (0..plan8.num_groups()).map(|g| plan8.group_slots(g).len()).collect();
        assert_eq!(sizes8, vec![4, 4]);
    }

    #[test]
    fn flatten_fast_path_matches_the_generic_sort() {
        // Voxel tokens hit the packed-integer path; the order must equal
        // the stable composite sort on every pattern.
        let grid = crate::voxel::VoxelGridConfig {
            range_min: Vec3::new(-10.0, -10.0, 0.0),
            range_max: Vec3::new(10.0, 10.0, 4.0),
            voxel_size: [0.25, 0.25, 0.5],
            pillar_mode: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let points = (0..20_000)
            .map(|_| crate::voxel::Point {
                x: rng.gen_range(-10.0f32..10.0),
                y: rng.gen_range(-10.0f32..10.0),
                z: rng.gen_range(0.0f32..4.0),
                intensity: 0.5,
            })
            .collect();
        let tokens = crate::voxel::voxelize(&crate::voxel::PointCloud { points }, &grid)
            .unwrap()
            .tokens;
        for pattern in Pattern::CYCLE {
            let c = PartitionConfig {
                window_shape: [2.0, 2.0, 4.0],
                group_size: 32,
                pattern,
                ..Default::default()
            };
            let fast = flatten_grid_order(&tokens, &c).expect("grid tokens take the fast path");
            assert_eq!(fast, sort_tokens(&tokens, &c), "pattern {pattern:?}");
        }
    }

    #[test]
    fn flatten_falls_back_for_off_center_tokens() {
        // Tokens whose coordinates are not cell centers must use the
        // generic sort, transparently.
        let coords = random_coords(100, 13, 10.0);
        let ts = token_set_from_coords(&coords, 0.5);
        assert!(flatten_grid_order(&ts, &cfg(Pattern::X)).is_none());
        let plan = flatten_window_groups(&ts, &cfg(Pattern::X));
        assert_eq!(plan.order, sort_tokens(&ts, &cfg(Pattern::X)));
    }

    #[test]
    fn empty_input_gives_empty_plan() {
        let ts = token_set_from_coords(&[], 0.5);
        let plan = flatten_window_groups(&ts, &cfg(Pattern::X));
        assert_eq!(plan.num_groups(), 0);
        assert!(plan.order.is_empty());
    }

    #[test]
    fn dynamic_set_pads_the_ragged_tail() {
        // 5 tokens in a single window, G = 4 -> [4 valid], [1 valid + 3 pad].
        let coords: Vec<Vec3> =
            (0..5).map(|i| Vec3::new(0.1 + i as f64 * 0.3, 0.5, 0.5)).collect();
        let ts = token_set_from_coords(&coords, 0.3);
        let plan = dynamic_set_groups(&ts, &cfg(Pattern::X));
        assert_eq!(plan.num_groups(), 2);
        assert_eq!(plan.group_slots(0).len(), 4);
        assert_eq!(plan.group_members(0).count(), 4);
        assert_eq!(plan.group_members(1).count(), 1);
        let mask = plan.pad_mask.as_ref().unwrap();
        assert_eq!(mask.iter().filter(|&&m| !m).count(), 3);
    }

    #[test]
    fn dynamic_set_exact_fit_two_windows() {
        let mut coords = Vec::new();
        for i in 0..4 {
            coords.push(Vec3::new(0.2 + 0.3 * i as f64, 0.2, 0.2)); // window (0,0,0)
        }
        for i in 0..4 {
            coords.push(Vec3::new(2.2 + 0.3 * i as f64, 0.2, 0.2)); // window (1,0,0)
        }
        let ts = token_set_from_coords(&coords, 0.1);
        let plan = dynamic_set_groups(&ts, &cfg(Pattern::X));
        assert_eq!(plan.num_groups(), 2);
        assert!(plan.pad_mask.as_ref().unwrap().iter().all(|&m| m));
        assert_eq!(plan.windows_of_groups.as_ref().unwrap(), &vec![0, 1]);
    }

    #[test]
    fn dynamic_set_groups_never_cross_windows() {
        let c = cfg(Pattern::X);
        let coords = random_coords(2_000, 9, 30.0);
        let ts = token_set_from_coords(&coords, 0.25);
        let plan = dynamic_set_groups(&ts, &c);
        assert!(plan.is_bijection(coords.len()));
        for g in 0..plan.num_groups() {
            let windows: std::collections::HashSet<_> = plan
                .group_members(g)
                .map(|t| window_key(coords[t as usize], &c).window())
                .collect();
            assert_eq!(windows.len(), 1, "group {g} spans {} windows", windows.len());
        }
    }

    #[test]
    fn curve_sorted_input_is_identity() {
        // Tokens laid out along the Morton order of their cells.
        let cells = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]];
        let coords: Vec<Vec3> = cells
            .iter()
            .map(|c| Vec3::new(c[0] as f64 + 0.5, c[1] as f64 + 0.5, c[2] as f64 + 0.5))
            .collect();
        let ts = token_set_from_coords(&coords, 1.0);
        let plan = curve_groups(&ts, &cfg(Pattern::X)).unwrap();
        assert_eq!(plan.order, vec![0, 1, 2, 3]);
    }

    #[test]
    fn curve_orders_by_code() {
        // Codes 30 and 7 swap.
        let coords = vec![Vec3::new(2.5, 3.5, 1.5), Vec3::new(1.5, 1.5, 1.5)];
        let ts = token_set_from_coords(&coords, 1.0);
        let plan = curve_groups(&ts, &cfg(Pattern::X)).unwrap();
        assert_eq!(plan.order, vec![1, 0]);
    }

    #[test]
    fn curve_exact_group_fit() {
        let coords = random_coords(4, 21, 3.0);
        let ts = token_set_from_coords(&coords, 0.5);
        let plan = curve_groups(&ts, &cfg(Pattern::X)).unwrap();
        assert_eq!(plan.num_groups(), 1);
        assert_eq!(plan.group_members(0).count(), 4);
        assert!(plan.pad_mask.is_none());
    }

    #[test]
    fn locality_single_pair() {
        let coords = vec![Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0)];
        let plan = chunk_into_groups(vec![0, 1], 4);
        assert!((mean_intra_group_distance_coords(&coords, &plan) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn locality_coincident_tokens() {
        let coords = vec![Vec3::new(2.0, 2.0, 2.0); 6];
        let plan = chunk_into_groups((0..6).collect(), 3);
        assert_eq!(mean_intra_group_distance_coords(&coords, &plan), 0.0);
    }

    #[test]
    fn locality_matches_brute_force_oracle() {
        let coords = random_coords(200, 31, 12.0);
        let ts = token_set_from_coords(&coords, 0.25);
        let plan = flatten_window_groups(&ts, &cfg(Pattern::X));
        let got = mean_intra_group_distance(&ts, &plan);

        // Independent O(N^2) pass over the serialized groups.
        let mut group_of = vec![0usize; coords.len()];
        for g in 0..plan.num_groups() {
            for t in plan.group_members(g) {
                group_of[t as usize] = g;
            }
        }
        let mut sums = vec![(0.0f64, 0usize); plan.num_groups()];
        for i in 0..coords.len() {
            for j in i + 1..coords.len() {
                if group_of[i] == group_of[j] {
                    let d = ((coords[i].x - coords[j].x).powi(2)
                        + (coords[i].y - coords[j].y).powi(2)
                        + (coords[i].z - coords[j].z).powi(2))
                    .sqrt();
                    sums[group_of[i]].0 += d;
                    sums[group_of[i]].1 += 1;
                }
            }
        }
        let want = sums
            .iter()
            .map(|&(s, n)| if n == 0 { 0.0 } else { s / n as f64 })
            .sum::<f64>()
            / plan.num_groups() as f64;
        assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
    }

    #[test]
    fn shift_changes_group_membership() {
        let coords = random_coords(500, 41, 20.0);
        let ts = token_set_from_coords(&coords, 0.25);
        let plain = flatten_window_groups(&ts, &cfg(Pattern::X));
        let shifted = flatten_window_groups(&ts, &cfg(Pattern::XShift));

        let comembers = |plan: &PartitionPlan, t: u32| -> std::collections::HashSet<u32> {
            (0..plan.num_groups())
                .find(|&g| plan.group_members(g).any(|m| m == t))
                .map(|g| plan.group_members(g).collect())
                .unwrap()
        };
        let moved = (0..coords.len() as u32)
            .filter(|&t| comembers(&plain, t) != comembers(&shifted, t))
            .count();
        assert!(moved > 0, "shift pattern must change neighbor structure");
    }

    #[test]
    fn plan_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let coords = random_coords(37, 43, 8.0);
        let ts = token_set_from_coords(&coords, 0.25);
        let plan = dynamic_set_groups(&ts, &cfg(Pattern::X));
        let path = dir.path().join("plan.csv");
        write_plan_csv(&path, &plan, &coords).unwrap();

        let rows = read_plan_csv(&path).unwrap();
        assert_eq!(rows.len(), plan.order.len());
        let valid: Vec<_> = rows.iter().filter(|r| r.valid == 1).collect();
        assert_eq!(valid.len(), coords.len());
        for r in valid {
            let c = coords[r.token_index as usize];
            assert_eq!((r.x, r.y, r.z), (c.x, c.y, c.z));
        }
    }

    proptest::proptest! {
        #[test]
        fn every_plan_is_a_bijection(seed in 0u64..500, n in 0usize..300) {
            let coords = random_coords(n, seed, 15.0);
            let ts = token_set_from_coords(&coords, 0.25);
            let c = cfg(Pattern::CYCLE[(seed % 4) as usize]);
            for plan in [
                flatten_window_groups(&ts, &c),
                dynamic_set_groups(&ts, &c),
                curve_groups(&ts, &c).unwrap(),
            ] {
                proptest::prop_assert!(plan.is_bijection(n));
            }
        }

        #[test]
        fn window_key_reconstructs_the_coordinate(
            x in -100.0..100.0f64, y in -100.0..100.0f64, z in -8.0..8.0f64,
            wx in 0.1..10.0f64, wy in 0.1..10.0f64, wz in 0.1..10.0f64,
        ) {
            let c = PartitionConfig {
                window_shape: [wx, wy, wz],
                ..Default::default()
            };
            let p = Vec3::new(x, y, z);
            let k = window_key(p, &c);
            proptest::prop_assert!((k.wx as f64 * wx + k.lx - x).abs() < 1e-9);
            proptest::prop_assert!((k.wy as f64 * wy + k.ly - y).abs() < 1e-9);
            proptest::prop_assert!((k.wz as f64 * wz + k.lz - z).abs() < 1e-9);
            proptest::prop_assert!(k.lx >= 0.0 && k.lx < wx);
            proptest::prop_assert!(k.ly >= 0.0 && k.ly < wy);
            proptest::prop_assert!(k.lz >= 0.0 && k.lz < wz);
        }
    }
}
