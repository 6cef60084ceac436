//! City gridding, trip ingestion, demand aggregation, and KL utilities.
//!
//! A city is a lat/lon bounding box divided into `rows × cols` uniform,
//! half-open cells. Trip records are counted into per-cell, per-day demand
//! vectors of `k` time slots, which normalize into strictly positive
//! probability vectors compared by KL divergence.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Longitude/latitude pair in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64) -> Result<GeoPoint> {
        if !lon.is_finite() || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::invalid(format!("longitude {lon} outside [-180, 180]")));
        }
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(Error::invalid(format!("latitude {lat} outside [-90, 90]")));
        }
        Ok(GeoPoint { lon, lat })
    }
}

/// Axis-aligned lat/lon rectangle with strictly positive extent on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: GeoPoint,
    pub max: GeoPoint,
}

impl BoundingBox {
    pub fn new(min: GeoPoint, max: GeoPoint) -> Result<BoundingBox> {
        if min.lon >= max.lon || min.lat >= max.lat {
            return Err(Error::invalid(format!(
                "degenerate bbox: min ({}, {}) must be strictly below max ({}, {}) on both axes",
                min.lon, min.lat, max.lon, max.lat
            )));
        }
        Ok(BoundingBox { min, max })
    }

    pub fn lon_span(&self) -> f64 {
        self.max.lon - self.min.lon
    }

    pub fn lat_span(&self) -> f64 {
        self.max.lat - self.min.lat
    }
}

/// 1-based cell index: `i` is the row (latitude band, counted from the south
/// edge), `j` the column (longitude band, counted from the west edge).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellIndex {
    pub i: usize,
    pub j: usize,
}

impl CellIndex {
    pub fn new(i: usize, j: usize) -> CellIndex {
        CellIndex { i, j }
    }
}

impl fmt::Display for CellIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.i, self.j)
    }
}

impl FromStr for CellIndex {
    type Err = Error;

    fn from_str(s: &str) -> Result<CellIndex> {
        let (a, b) = s
            .split_once(',')
            .ok_or_else(|| Error::invalid(format!("cell index {s:?} is not of the form \"i,j\"")))?;
        let i = a.trim().parse::<usize>().map_err(|_| Error::invalid(format!("bad cell row in {s:?}")))?;
        let j = b.trim().parse::<usize>().map_err(|_| Error::invalid(format!("bad cell column in {s:?}")))?;
        if i == 0 || j == 0 {
            return Err(Error::invalid(format!("cell index {s:?} must be 1-based")));
        }
        Ok(CellIndex { i, j })
    }
}

// Cells key JSON maps as "i,j", so serialize through the string form.
impl Serialize for CellIndex {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CellIndex {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Result of locating a point against a grid. Outside is a value, not an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Cell(CellIndex),
    Outside,
}

/// Uniform `rows × cols` partition of a bounding box into half-open cells.
///
/// Cell `(i, j)` covers `[lat_edge(i-1), lat_edge(i)) × [lon_edge(j-1), lon_edge(j))`,
/// so every interior point belongs to exactly one cell and a point on an
/// interior boundary belongs to the higher-index cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMap {
    bbox: BoundingBox,
    rows: usize,
    cols: usize,
}

/// Divide a bounding box into `n` rows by `m` columns of uniform cells.
pub fn build_grid(bbox: BoundingBox, n: usize, m: usize) -> Result<GridMap> {
    if n == 0 || m == 0 {
        return Err(Error::invalid(format!("grid dimensions must be at least 1×1, got {n}×{m}")));
    }
    Ok(GridMap { bbox, rows: n, cols: m })
}

impl GridMap {
    pub fn bbox(&self) -> BoundingBox {
        self.bbox
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn lat_step(&self) -> f64 {
        self.bbox.lat_span() / self.rows as f64
    }

    pub fn lon_step(&self) -> f64 {
        self.bbox.lon_span() / self.cols as f64
    }

    pub fn contains_cell(&self, c: CellIndex) -> bool {
        (1..=self.rows).contains(&c.i) && (1..=self.cols).contains(&c.j)
    }

    fn check_cell(&self, c: CellIndex) -> Result<()> {
        if self.contains_cell(c) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "cell ({c}) outside grid of {} rows × {} cols",
                self.rows, self.cols
            )))
        }
    }

    /// Lower/upper corners of a cell's half-open rectangle.
    pub fn cell_rect(&self, c: CellIndex) -> Result<(GeoPoint, GeoPoint)> {
        self.check_cell(c)?;
        let lo = GeoPoint {
            lon: axis_edge(self.bbox.min.lon, self.lon_step(), c.j - 1),
            lat: axis_edge(self.bbox.min.lat, self.lat_step(), c.i - 1),
        };
        let hi = GeoPoint {
            lon: axis_edge(self.bbox.min.lon, self.lon_step(), c.j),
            lat: axis_edge(self.bbox.min.lat, self.lat_step(), c.i),
        };
        Ok((lo, hi))
    }

    pub fn cell_center(&self, c: CellIndex) -> Result<GeoPoint> {
        let (lo, hi) = self.cell_rect(c)?;
        Ok(GeoPoint { lon: 0.5 * (lo.lon + hi.lon), lat: 0.5 * (lo.lat + hi.lat) })
    }

    /// Map a point to its containing cell, or `Outside` beyond the bbox.
    pub fn locate(&self, p: GeoPoint) -> Location {
        let i = match axis_locate(self.bbox.min.lat, self.bbox.max.lat, self.rows, p.lat) {
            Some(i) => i,
            None => return Location::Outside,
        };
        let j = match axis_locate(self.bbox.min.lon, self.bbox.max.lon, self.cols, p.lon) {
            Some(j) => j,
            None => return Location::Outside,
        };
        Location::Cell(CellIndex { i: i + 1, j: j + 1 })
    }

    /// All cells in row-major order (rows outer, columns inner), 1-based.
    pub fn cells(&self) -> impl Iterator<Item = CellIndex> + '_ {
        (1..=self.rows).flat_map(move |i| (1..=self.cols).map(move |j| CellIndex { i, j }))
    }
}

fn axis_edge(lo: f64, step: f64, t: usize) -> f64 {
    lo + step * t as f64
}

/// Half-open bin index on one axis, or None outside `[lo, hi)`.
///
/// The scaled floor is corrected against the canonical edge values so that a
/// point computed as `lo + step*t` always lands in bin `t` despite rounding.
fn axis_locate(lo: f64, hi: f64, n: usize, x: f64) -> Option<usize> {
    if !(x >= lo) || x >= hi {
        return None;
    }
    let step = (hi - lo) / n as f64;
    let mut idx = (((x - lo) / step).floor() as i64).clamp(0, n as i64 - 1);
    while idx > 0 && x < axis_edge(lo, step, idx as usize) {
        idx -= 1;
    }
    while idx + 1 < n as i64 && x >= axis_edge(lo, step, idx as usize + 1) {
        idx += 1;
    }
    Some(idx as usize)
}

/// One dockless bike trip. Only the start location and time drive demand
/// counting; the end is carried through ingestion but otherwise unused.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub start: GeoPoint,
    pub start_time: i64,
    pub end: GeoPoint,
    pub end_time: i64,
}

impl TripRecord {
    pub fn new(start: GeoPoint, start_time: i64, end: GeoPoint, end_time: i64) -> Result<TripRecord> {
        if end_time < start_time {
            return Err(Error::invalid(format!(
                "trip ends at {end_time} before it starts at {start_time}"
            )));
        }
        Ok(TripRecord { start, start_time, end, end_time })
    }
}

/// Demand counts of one cell on one day, one entry per time slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemandVector {
    pub cell: CellIndex,
    pub day: i64,
    pub counts: Vec<u32>,
}

/// All demand vectors of a city keyed by cell, plus the number of records
/// that started outside the bbox.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandSet {
    pub k: usize,
    pub outside: u64,
    pub cells: BTreeMap<CellIndex, Vec<DemandVector>>,
}

impl DemandSet {
    /// Total of all in-grid slot counts, for conservation checks.
    pub fn total_count(&self) -> u64 {
        self.cells
            .values()
            .flat_map(|days| days.iter())
            .flat_map(|d| d.counts.iter())
            .map(|&c| c as u64)
            .sum()
    }
}

/// Count each record into (cell of start, day of start, slot of start).
///
/// `k` must divide 86 400 evenly. Days are calendar days at a fixed UTC
/// offset in seconds. Per-cell day lists come out sorted by day.
pub fn aggregate_demands(
    records: &[TripRecord],
    g: &GridMap,
    k: usize,
    utc_offset_secs: i64,
) -> Result<DemandSet> {
    if k == 0 || 86_400 % k != 0 {
        return Err(Error::invalid(format!("k = {k} does not divide 86400 seconds evenly")));
    }
    let slot_len = (86_400 / k) as i64;
    let mut cells: BTreeMap<CellIndex, BTreeMap<i64, Vec<u32>>> = BTreeMap::new();
    let mut outside = 0u64;
    for r in records {
        let cell = match g.locate(r.start) {
            Location::Cell(c) => c,
            Location::Outside => {
                outside += 1;
                continue;
            }
        };
        let local = r.start_time + utc_offset_secs;
        let day = local.div_euclid(86_400);
        let slot = (local.rem_euclid(86_400) / slot_len) as usize;
        let counts = cells
            .entry(cell)
            .or_default()
            .entry(day)
            .or_insert_with(|| vec![0u32; k]);
        counts[slot] += 1;
    }
    let cells = cells
        .into_iter()
        .map(|(cell, days)| {
            let vecs = days
                .into_iter()
                .map(|(day, counts)| DemandVector { cell, day, counts })
                .collect();
            (cell, vecs)
        })
        .collect();
    Ok(DemandSet { k, outside, cells })
}

/// Strictly positive vector summing to 1 (within 1e-9); the normalized form
/// of a demand vector or a mined/predicted pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Smooth-and-normalize nonnegative reals: `(v + ε) / Σ(v + ε)`, ε > 0.
    pub fn from_nonneg(values: &[f64], eps: f64) -> Result<ProbVector> {
        if values.is_empty() {
            return Err(Error::invalid("cannot normalize an empty vector"));
        }
        if !(eps > 0.0) {
            return Err(Error::invalid(format!("smoothing epsilon must be positive, got {eps}")));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!("cannot normalize negative or non-finite value {v}")));
        }
        let total: f64 = values.iter().map(|v| v + eps).sum();
        Ok(ProbVector(values.iter().map(|v| (v + eps) / total).collect()))
    }

    /// Smooth-and-normalize integer demand counts.
    pub fn from_counts(counts: &[u32], eps: f64) -> Result<ProbVector> {
        let values: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        ProbVector::from_nonneg(&values, eps)
    }

    /// Wrap values that are already a strictly positive distribution
    /// (sum within 1e-9 of 1). Used when reading serialized patterns back.
    pub fn from_positive(values: Vec<f64>) -> Result<ProbVector> {
        if values.is_empty() {
            return Err(Error::invalid("probability vector cannot be empty"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v <= 0.0) {
            return Err(Error::invalid(format!("probability entries must be positive, got {v}")));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("probability vector sums to {sum}, not 1")));
        }
        Ok(ProbVector(values))
    }

    pub fn uniform(k: usize) -> Result<ProbVector> {
        if k == 0 {
            return Err(Error::invalid("probability vector cannot be empty"));
        }
        Ok(ProbVector(vec![1.0 / k as f64; k]))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Serialize for ProbVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ProbVector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(deserializer)?;
        ProbVector::from_positive(values).map_err(serde::de::Error::custom)
    }
}

/// Smooth-and-normalize a demand vector into a probability vector.
pub fn normalize(d: &DemandVector, eps: f64) -> Result<ProbVector> {
    ProbVector::from_counts(&d.counts, eps)
}

/// KL divergence Σ pₜ·ln(pₜ/qₜ) in nats, clamped at 0 against rounding.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "KL divergence needs equal lengths, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    let sum: f64 = p
        .values()
        .iter()
        .zip(q.values())
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum();
    Ok(sum.max(0.0))
}

/// Max of KL(x ‖ y) over all ordered pairs x ≠ y.
pub fn max_pairwise_divergence(vectors: &[ProbVector]) -> Result<f64> {
    if vectors.len() < 2 {
        return Err(Error::invalid(format!(
            "pairwise divergence needs at least 2 vectors, got {}",
            vectors.len()
        )));
    }
    let mut max = 0.0f64;
    for (idx, x) in vectors.iter().enumerate() {
        for y in &vectors[idx + 1..] {
            max = max.max(kl_divergence(x, y)?);
            max = max.max(kl_divergence(y, x)?);
        }
    }
    Ok(max)
}

/// Per-cell max day-to-day divergences, sorted ascending, with the fraction of
/// cells at or below each requested threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceHistogram {
    /// (cell, max pairwise KL over its normalized days), ascending by KL.
    pub per_cell: Vec<(CellIndex, f64)>,
    /// `fractions[t]` = fraction of included cells with divergence ≤ `thresholds[t]`.
    pub fractions: Vec<f64>,
    /// Cells skipped for having fewer than 2 days of demand.
    pub skipped: usize,
}

/// Distribution of day-to-day demand stability across cells.
pub fn divergence_histogram(
    demands: &DemandSet,
    eps: f64,
    thresholds: &[f64],
) -> Result<DivergenceHistogram> {
    let mut per_cell = Vec::new();
    let mut skipped = 0usize;
    for (&cell, days) in &demands.cells {
        if days.len() < 2 {
            skipped += 1;
            continue;
        }
        let normalized: Vec<ProbVector> =
            days.iter().map(|d| normalize(d, eps)).collect::<Result<_>>()?;
        per_cell.push((cell, max_pairwise_divergence(&normalized)?));
    }
    per_cell.sort_by(|a, b| a.1.total_cmp(&b.1));
    let n = per_cell.len();
    let fractions = thresholds
        .iter()
        .map(|&t| {
            if n == 0 {
                0.0
            } else {
                per_cell.iter().filter(|(_, d)| *d <= t).count() as f64 / n as f64
            }
        })
        .collect();
    Ok(DivergenceHistogram { per_cell, fractions, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_grid(n: usize, m: usize) -> GridMap {
        let bbox = BoundingBox::new(
            GeoPoint::new(0.0, 0.0).unwrap(),
            GeoPoint::new(1.0, 1.0).unwrap(),
        )
        .unwrap();
        build_grid(bbox, n, m).unwrap()
    }

    #[test]
    fn two_by_two_cells_are_half_degree() {
        let g = unit_grid(2, 2);
        assert_eq!(g.n_cells(), 4);
        for c in g.cells() {
            let (lo, hi) = g.cell_rect(c).unwrap();
            assert!((hi.lon - lo.lon - 0.5).abs() < 1e-12);
            assert!((hi.lat - lo.lat - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_bbox_rejected() {
        let p = GeoPoint::new(3.0, 4.0).unwrap();
        assert!(BoundingBox::new(p, p).is_err());
        let q = GeoPoint::new(4.0, 4.0).unwrap();
        assert!(BoundingBox::new(p, q).is_err()); // zero height
    }

    #[test]
    fn zero_dimension_grid_rejected() {
        let bbox = unit_grid(1, 1).bbox();
        assert!(build_grid(bbox, 0, 3).is_err());
        assert!(build_grid(bbox, 3, 0).is_err());
    }

    #[test]
    fn min_corner_is_cell_1_1_and_max_corner_outside() {
        let g = unit_grid(10, 10);
        assert_eq!(g.locate(g.bbox().min), Location::Cell(CellIndex::new(1, 1)));
        assert_eq!(g.locate(g.bbox().max), Location::Outside);
    }

    #[test]
    fn interior_boundary_point_goes_to_higher_cell() {
        let g = unit_grid(4, 4);
        // The shared edge between rows 2 and 3 belongs to row 3.
        let (lo, _) = g.cell_rect(CellIndex::new(3, 2)).unwrap();
        assert_eq!(g.locate(lo), Location::Cell(CellIndex::new(3, 2)));
        let p = GeoPoint::new(0.3, lo.lat).unwrap();
        assert_eq!(g.locate(p), Location::Cell(CellIndex::new(3, 2)));
    }

    #[test]
    fn cell_center_round_trips() {
        let g = unit_grid(10, 10);
        let c = CellIndex::new(3, 4);
        assert_eq!(g.locate(g.cell_center(c).unwrap()), Location::Cell(c));
    }

    #[test]
    fn random_points_partition_exactly() {
        let g = unit_grid(10, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts: BTreeMap<CellIndex, u32> = BTreeMap::new();
        for _ in 0..1000 {
            let p = GeoPoint::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)).unwrap();
            match g.locate(p) {
                Location::Cell(c) => *counts.entry(c).or_default() += 1,
                Location::Outside => panic!("in-bbox point located outside"),
            }
        }
        assert_eq!(counts.values().map(|&c| c as u64).sum::<u64>(), 1000);
    }

    #[test]
    fn cell_index_string_round_trip() {
        let c = CellIndex::new(3, 17);
        assert_eq!(c.to_string(), "3,17");
        assert_eq!("3,17".parse::<CellIndex>().unwrap(), c);
        assert!("0,4".parse::<CellIndex>().is_err());
        assert!("3".parse::<CellIndex>().is_err());
    }

    #[test]
    fn aggregate_empty_records() {
        let g = unit_grid(2, 2);
        let set = aggregate_demands(&[], &g, 48, 0).unwrap();
        assert!(set.cells.is_empty());
        assert_eq!(set.outside, 0);
        assert_eq!(set.total_count(), 0);
    }

    #[test]
    fn record_at_0815_lands_in_slot_16() {
        let g = unit_grid(2, 2);
        let start = GeoPoint::new(0.1, 0.1).unwrap();
        let t = 1000 * 86_400 + 8 * 3600 + 15 * 60;
        let r = TripRecord::new(start, t, start, t + 600).unwrap();
        let set = aggregate_demands(&[r], &g, 48, 0).unwrap();
        let days = &set.cells[&CellIndex::new(1, 1)];
        assert_eq!(days.len(), 1);
        assert_eq!(days[0].day, 1000);
        assert_eq!(days[0].counts[16], 1);
        assert_eq!(days[0].counts.iter().sum::<u32>(), 1);
    }

    #[test]
    fn aggregation_conserves_record_count() {
        let g = unit_grid(5, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut records = Vec::new();
        for _ in 0..10_000 {
            // ~1/4 of points fall outside the bbox on purpose.
            let p = GeoPoint::new(rng.random_range(-0.2..1.1), rng.random_range(-0.2..1.1)).unwrap();
            let t = rng.random_range(0..7 * 86_400);
            records.push(TripRecord::new(p, t, p, t + 60).unwrap());
        }
        let set = aggregate_demands(&records, &g, 24, 0).unwrap();
        assert!(set.outside > 0);
        assert_eq!(set.total_count() + set.outside, 10_000);
    }

    #[test]
    fn aggregate_rejects_k_not_dividing_day() {
        let g = unit_grid(2, 2);
        assert!(aggregate_demands(&[], &g, 7, 0).is_err());
        assert!(aggregate_demands(&[], &g, 0, 0).is_err());
    }

    #[test]
    fn utc_offset_shifts_the_day_boundary() {
        let g = unit_grid(2, 2);
        let p = GeoPoint::new(0.5, 0.5).unwrap();
        let t = 10 * 86_400 - 1800; // 23:30 UTC on day 9
        let r = TripRecord::new(p, t, p, t).unwrap();
        let utc = aggregate_demands(&[r], &g, 48, 0).unwrap();
        let east = aggregate_demands(&[r], &g, 48, 8 * 3600).unwrap();
        let day_of = |s: &DemandSet| s.cells.values().next().unwrap()[0].day;
        assert_eq!(day_of(&utc), 9);
        assert_eq!(day_of(&east), 10); // 07:30 local next day
    }

    #[test]
    fn normalize_zero_vector_is_uniform() {
        let d = DemandVector { cell: CellIndex::new(1, 1), day: 0, counts: vec![0; 4] };
        let p = normalize(&d, 1e-6).unwrap();
        for &v in p.values() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_smooths_and_sums_to_one() {
        let d = DemandVector { cell: CellIndex::new(1, 1), day: 0, counts: vec![1, 1, 2, 0] };
        assert!(normalize(&d, 0.0).is_err());
        let p = normalize(&d, 1e-6).unwrap();
        let total = 4.0 + 4e-6;
        let expect = [1.000001 / total, 1.000001 / total, 2.000001 / total, 1e-6 / total];
        for (got, want) in p.values().iter().zip(expect) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!((p.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p.values()[3] - 2.5e-7).abs() < 1e-9);
    }

    #[test]
    fn normalize_is_near_fixed_point_on_normalized_input() {
        let original = [0.1, 0.2, 0.3, 0.4];
        let p = ProbVector::from_nonneg(&original, 1e-13).unwrap();
        for (got, want) in p.values().iter().zip(original) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let p = ProbVector::from_nonneg(&[1.0, 2.0, 3.0], 1e-6).unwrap();
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_hand_computed_value() {
        let p = ProbVector::from_positive(vec![0.5, 0.5]).unwrap();
        let q = ProbVector::from_positive(vec![0.9, 0.1]).unwrap();
        // 0.5·ln(0.5/0.9) + 0.5·ln(0.5/0.1) = ln 5 − ln 9 / 2
        assert!((kl_divergence(&p, &q).unwrap() - 0.510_825_623_765_990_5).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_length_mismatch() {
        let p = ProbVector::uniform(3).unwrap();
        let q = ProbVector::uniform(4).unwrap();
        assert!(kl_divergence(&p, &q).is_err());
    }

    #[test]
    fn max_pairwise_matches_brute_force() {
        let vs = vec![
            ProbVector::from_nonneg(&[1.0, 2.0, 3.0], 1e-6).unwrap(),
            ProbVector::from_nonneg(&[3.0, 1.0, 1.0], 1e-6).unwrap(),
            ProbVector::from_nonneg(&[0.0, 0.0, 9.0], 1e-6).unwrap(),
        ];
        let mut brute = 0.0f64;
        for x in &vs {
            for y in &vs {
                brute = brute.max(kl_divergence(x, y).unwrap());
            }
        }
        assert!(brute > 0.0);
        assert_eq!(max_pairwise_divergence(&vs).unwrap(), brute);

        let single = vec![vs[0].clone()];
        assert!(max_pairwise_divergence(&single).is_err());

        let identical = vec![vs[0].clone(), vs[0].clone(), vs[0].clone()];
        assert_eq!(max_pairwise_divergence(&identical).unwrap(), 0.0);

        let mut with_dup = vs.clone();
        with_dup.push(vs[1].clone());
        assert_eq!(max_pairwise_divergence(&with_dup).unwrap(), brute);
    }

    #[test]
    fn histogram_identical_days_all_zero() {
        let mut cells = BTreeMap::new();
        for i in 1..=3usize {
            let cell = CellIndex::new(i, 1);
            let days = (0..4)
                .map(|day| DemandVector { cell, day, counts: vec![5, 3, 2, 5] })
                .collect();
            cells.insert(cell, days);
        }
        // One single-day cell must be skipped, not scored.
        let lone = CellIndex::new(9, 9);
        cells.insert(lone, vec![DemandVector { cell: lone, day: 0, counts: vec![1, 0, 0, 0] }]);
        let set = DemandSet { k: 4, outside: 0, cells };
        let h = divergence_histogram(&set, 1e-6, &[0.0, 0.03, 0.11]).unwrap();
        assert_eq!(h.per_cell.len(), 3);
        assert_eq!(h.skipped, 1);
        for (_, d) in &h.per_cell {
            assert_eq!(*d, 0.0);
        }
        assert_eq!(h.fractions, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn histogram_fractions_match_direct_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut cells = BTreeMap::new();
        for i in 1..=20usize {
            let cell = CellIndex::new(i, 2);
            let days = (0..5)
                .map(|day| {
                    let counts = (0..6).map(|_| rng.random_range(0..30u32)).collect();
                    DemandVector { cell, day, counts }
                })
                .collect();
            cells.insert(cell, days);
        }
        let set = DemandSet { k: 6, outside: 0, cells };
        let thresholds = [0.03, 0.11, 0.5];
        let h = divergence_histogram(&set, 1e-6, &thresholds).unwrap();
        assert_eq!(h.per_cell.len(), 20);
        for (t, &frac) in thresholds.iter().zip(&h.fractions) {
            let direct = h.per_cell.iter().filter(|(_, d)| d <= t).count() as f64 / 20.0;
            assert_eq!(frac, direct);
        }
        // CDF is monotone in the threshold.
        assert!(h.fractions[0] <= h.fractions[1] && h.fractions[1] <= h.fractions[2]);
        // Sorted ascending.
        for w in h.per_cell.windows(2) {
            assert!(w[0].1 <= w[1].1);
        }
    }

    proptest! {
        #[test]
        fn locate_partitions_in_bbox_points(lon in 0.0f64..1.0, lat in 0.0f64..1.0) {
            let g = unit_grid(7, 9);
            let p = GeoPoint::new(lon, lat).unwrap();
            prop_assert!(matches!(g.locate(p), Location::Cell(_)));
        }

        #[test]
        fn kl_nonnegative_on_random_pairs(
            a in proptest::collection::vec(1e-3f64..1e3, 8),
            b in proptest::collection::vec(1e-3f64..1e3, 8),
        ) {
            let p = ProbVector::from_nonneg(&a, 1e-6).unwrap();
            let q = ProbVector::from_nonneg(&b, 1e-6).unwrap();
            let kl = kl_divergence(&p, &q).unwrap();
            prop_assert!(kl >= 0.0);
            prop_assert!(kl.is_finite());
        }

        #[test]
        fn normalize_output_is_distribution(
            counts in proptest::collection::vec(0u32..1000, 1..64),
            eps in 1e-9f64..1e-3,
        ) {
            let d = DemandVector { cell: CellIndex::new(1, 1), day: 0, counts };
            let p = normalize(&d, eps).unwrap();
            prop_assert!(p.values().iter().all(|&v| v > 0.0));
            prop_assert!((p.values().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn max_divergence_permutation_invariant(
            vecs in proptest::collection::vec(proptest::collection::vec(0u32..50, 4), 2..6),
            rotate in 0usize..5,
        ) {
            let ps: Vec<ProbVector> = vecs
                .iter()
                .map(|v| ProbVector::from_counts(v, 1e-6).unwrap())
                .collect();
            let base = max_pairwise_divergence(&ps).unwrap();
            let mut rotated = ps.clone();
            let mid = rotate % rotated.len();
            rotated.rotate_left(mid);
            prop_assert!((max_pairwise_divergence(&rotated).unwrap() - base).abs() < 1e-12);
            let mut dup = ps.clone();
            dup.push(ps[0].clone());
            prop_assert!((max_pairwise_divergence(&dup).unwrap() - base).abs() < 1e-12);
        }
    }
}
