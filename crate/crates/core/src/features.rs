//! Per-cell geographic features: POIs, roads, night light, transportation
//! hubs, and business centers, assembled into the city feature matrix.
//!
//! Column order is fixed: `P_1..P_C, P_num, P_en, R_1..R_L, R_num, S_a,
//! S_dis, T_num, T_dis, B_dis, B_level` — d = C + L + 9 columns.

use crate::error::{Error, Result};
use crate::grid::{CellIndex, GeoPoint, GridMap, Location};

/// Mean earth radius in meters for haversine distances.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// A point of interest with a 1-based category.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoiRecord {
    pub location: GeoPoint,
    pub category: usize,
}

impl PoiRecord {
    pub fn new(location: GeoPoint, category: usize) -> Result<PoiRecord> {
        if category == 0 {
            return Err(Error::invalid("POI category must be 1-based"));
        }
        Ok(PoiRecord { location, category })
    }
}

/// A straight road segment with a 1-based level (type).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoadSegment {
    pub start: GeoPoint,
    pub end: GeoPoint,
    pub level: usize,
}

impl RoadSegment {
    pub fn new(start: GeoPoint, end: GeoPoint, level: usize) -> Result<RoadSegment> {
        if start == end {
            return Err(Error::invalid(format!(
                "road segment degenerates to the point ({}, {})",
                start.lon, start.lat
            )));
        }
        if level == 0 {
            return Err(Error::invalid("road level must be 1-based"));
        }
        Ok(RoadSegment { start, end, level })
    }
}

/// A night-light intensity sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LightSample {
    pub location: GeoPoint,
    pub intensity: f64,
}

impl LightSample {
    pub fn new(location: GeoPoint, intensity: f64) -> Result<LightSample> {
        if !intensity.is_finite() || intensity < 0.0 {
            return Err(Error::invalid(format!("light intensity must be ≥ 0, got {intensity}")));
        }
        Ok(LightSample { location, intensity })
    }
}

/// A business center with an importance level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BusinessCenter {
    pub location: GeoPoint,
    pub level: usize,
}

impl BusinessCenter {
    pub fn new(location: GeoPoint, level: usize) -> Result<BusinessCenter> {
        if level == 0 {
            return Err(Error::invalid("business center level must be 1-based"));
        }
        Ok(BusinessCenter { location, level })
    }
}

/// Everything the feature extractor reads for one city.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CitySources {
    pub pois: Vec<PoiRecord>,
    pub roads: Vec<RoadSegment>,
    pub light_samples: Vec<LightSample>,
    pub light_centers: Vec<GeoPoint>,
    pub transport: Vec<GeoPoint>,
    pub business: Vec<BusinessCenter>,
}

/// Feature extraction knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    /// Number of POI categories C.
    pub poi_categories: usize,
    /// Number of road levels L.
    pub road_levels: usize,
    /// Distance reported when a point set is empty, in meters.
    pub sentinel_distance_m: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { poi_categories: 17, road_levels: 29, sentinel_distance_m: 50_000.0 }
    }
}

/// Great-circle distance in meters between two lon/lat points.
pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    let lat1 = a.lat.to_radians();
    let lat2 = b.lat.to_radians();
    let dlat = (b.lat - a.lat).to_radians();
    let dlon = (b.lon - a.lon).to_radians();
    let s = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * s.sqrt().min(1.0).asin()
}

fn in_cell(g: &GridMap, p: GeoPoint, cell: CellIndex) -> bool {
    g.locate(p) == Location::Cell(cell)
}

/// Sum that does not depend on input order: sort first, then add.
fn stable_sum(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    values.iter().sum()
}

/// POI category counts, total count, and category entropy of one cell.
pub fn poi_features(
    pois: &[PoiRecord],
    g: &GridMap,
    cell: CellIndex,
    categories: usize,
) -> Result<(Vec<f64>, f64, f64)> {
    let mut counts = vec![0u64; categories];
    for p in pois {
        if p.category == 0 || p.category > categories {
            return Err(Error::invalid(format!(
                "POI category {} outside configured range [1, {categories}]",
                p.category
            )));
        }
        if in_cell(g, p.location, cell) {
            counts[p.category - 1] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let entropy = poi_entropy(&counts, total);
    Ok((counts.iter().map(|&c| c as f64).collect(), total as f64, entropy))
}

fn poi_entropy(counts: &[u64], total: u64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Liang–Barsky clip of segment pq against the closed rectangle, as a
/// parameter interval `[t0, t1] ⊆ [0, 1]`, or None when disjoint.
fn clip_segment(p: GeoPoint, q: GeoPoint, lo: GeoPoint, hi: GeoPoint) -> Option<(f64, f64)> {
    let dx = q.lon - p.lon;
    let dy = q.lat - p.lat;
    let checks = [
        (-dx, p.lon - lo.lon),
        (dx, hi.lon - p.lon),
        (-dy, p.lat - lo.lat),
        (dy, hi.lat - p.lat),
    ];
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for (pk, qk) in checks {
        if pk == 0.0 {
            if qk < 0.0 {
                return None; // parallel and fully outside this boundary
            }
        } else {
            let r = qk / pk;
            if pk < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Does any part of the segment lie in the cell's half-open rectangle?
pub fn segment_intersects_cell(seg: &RoadSegment, g: &GridMap, cell: CellIndex) -> Result<bool> {
    let (lo, hi) = g.cell_rect(cell)?;
    let Some((t0, t1)) = clip_segment(seg.start, seg.end, lo, hi) else {
        return Ok(false);
    };
    // The clip is against the closed rect; a representative clipped point
    // decides half-open ownership so shared edges count exactly once.
    let tm = 0.5 * (t0 + t1);
    let px = seg.start.lon + tm * (seg.end.lon - seg.start.lon);
    let py = seg.start.lat + tm * (seg.end.lat - seg.start.lat);
    Ok(px >= lo.lon && px < hi.lon && py >= lo.lat && py < hi.lat)
}

/// Road counts per level and their total for one cell.
pub fn road_features(
    roads: &[RoadSegment],
    g: &GridMap,
    cell: CellIndex,
    levels: usize,
) -> Result<(Vec<f64>, f64)> {
    let mut counts = vec![0u64; levels];
    for r in roads {
        if r.level == 0 || r.level > levels {
            return Err(Error::invalid(format!(
                "road level {} outside configured range [1, {levels}]",
                r.level
            )));
        }
        if segment_intersects_cell(r, g, cell)? {
            counts[r.level - 1] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    Ok((counts.iter().map(|&c| c as f64).collect(), total as f64))
}

fn nearest_distance(from: GeoPoint, points: &[GeoPoint], sentinel: f64) -> f64 {
    let mut best = f64::INFINITY;
    for &p in points {
        let d = haversine_m(from, p);
        if d < best {
            best = d;
        }
    }
    if best.is_finite() {
        best
    } else {
        sentinel
    }
}

/// Mean in-cell light intensity and distance to the nearest light center.
pub fn light_features(
    samples: &[LightSample],
    centers: &[GeoPoint],
    g: &GridMap,
    cell: CellIndex,
    sentinel: f64,
) -> Result<(f64, f64)> {
    let mut inside: Vec<f64> =
        samples.iter().filter(|s| in_cell(g, s.location, cell)).map(|s| s.intensity).collect();
    let s_a = if inside.is_empty() { 0.0 } else { stable_sum(&mut inside) / inside.len() as f64 };
    let s_dis = nearest_distance(g.cell_center(cell)?, centers, sentinel);
    Ok((s_a, s_dis))
}

/// In-cell transportation center count and distance to the nearest one.
pub fn transport_features(
    centers: &[GeoPoint],
    g: &GridMap,
    cell: CellIndex,
    sentinel: f64,
) -> Result<(f64, f64)> {
    let t_num = centers.iter().filter(|&&p| in_cell(g, p, cell)).count() as f64;
    let t_dis = nearest_distance(g.cell_center(cell)?, centers, sentinel);
    Ok((t_num, t_dis))
}

/// Distance to, and level of, the nearest business center. Ties on distance
/// go to the lowest point index; an empty set yields (sentinel, 0).
pub fn business_features(
    centers: &[BusinessCenter],
    g: &GridMap,
    cell: CellIndex,
    sentinel: f64,
) -> Result<(f64, f64)> {
    let from = g.cell_center(cell)?;
    let mut best: Option<(f64, usize)> = None;
    for c in centers {
        let d = haversine_m(from, c.location);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, c.level));
        }
    }
    Ok(match best {
        Some((d, level)) => (d, level as f64),
        None => (sentinel, 0.0),
    })
}

/// City feature matrix: one row per cell in row-major (i, j) order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub cells: Vec<CellIndex>,
    pub columns: Vec<String>,
    /// `cells.len() × columns.len()` values, row-major.
    pub values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.cells.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.n_cols()..(r + 1) * self.n_cols()]
    }

    /// Row of a cell; the row-major cell list is sorted, so binary search.
    pub fn row_of(&self, cell: CellIndex) -> Option<&[f64]> {
        self.cells.binary_search(&cell).ok().map(|r| self.row(r))
    }
}

/// The fixed column schema for a configuration.
pub fn feature_columns(cfg: &FeatureConfig) -> Vec<String> {
    let mut cols = Vec::with_capacity(cfg.poi_categories + cfg.road_levels + 9);
    for c in 1..=cfg.poi_categories {
        cols.push(format!("P_{c}"));
    }
    cols.push("P_num".into());
    cols.push("P_en".into());
    for l in 1..=cfg.road_levels {
        cols.push(format!("R_{l}"));
    }
    cols.push("R_num".into());
    cols.push("S_a".into());
    cols.push("S_dis".into());
    cols.push("T_num".into());
    cols.push("T_dis".into());
    cols.push("B_dis".into());
    cols.push("B_level".into());
    cols
}

/// Assemble the full feature matrix of a city.
///
/// Equivalent to calling the per-cell operations on every cell, but shares
/// one pass over each record source across cells.
pub fn build_feature_matrix(
    sources: &CitySources,
    g: &GridMap,
    cfg: &FeatureConfig,
) -> Result<FeatureMatrix> {
    let cells: Vec<CellIndex> = g.cells().collect();
    let n = cells.len();
    let c_cat = cfg.poi_categories;
    let l_lev = cfg.road_levels;

    // One locate per POI / light sample; roads only test cells their
    // bounding box can reach.
    let mut poi_counts = vec![0u64; n * c_cat];
    for p in &sources.pois {
        if p.category == 0 || p.category > c_cat {
            return Err(Error::invalid(format!(
                "POI category {} outside configured range [1, {c_cat}]",
                p.category
            )));
        }
        if let Location::Cell(c) = g.locate(p.location) {
            poi_counts[cell_pos(g, c) * c_cat + p.category - 1] += 1;
        }
    }

    let mut road_counts = vec![0u64; n * l_lev];
    for r in &sources.roads {
        if r.level == 0 || r.level > l_lev {
            return Err(Error::invalid(format!(
                "road level {} outside configured range [1, {l_lev}]",
                r.level
            )));
        }
        for cell in candidate_cells(g, r) {
            if segment_intersects_cell(r, g, cell)? {
                road_counts[cell_pos(g, cell) * l_lev + r.level - 1] += 1;
            }
        }
    }

    let mut light_in_cell: Vec<Vec<f64>> = vec![Vec::new(); n];
    for s in &sources.light_samples {
        if let Location::Cell(c) = g.locate(s.location) {
            light_in_cell[cell_pos(g, c)].push(s.intensity);
        }
    }

    let mut transport_num = vec![0u64; n];
    for &p in &sources.transport {
        if let Location::Cell(c) = g.locate(p) {
            transport_num[cell_pos(g, c)] += 1;
        }
    }

    let columns = feature_columns(cfg);
    let d = columns.len();
    let mut values = Vec::with_capacity(n * d);
    for (pos, &cell) in cells.iter().enumerate() {
        let center = g.cell_center(cell)?;
        let pc = &poi_counts[pos * c_cat..(pos + 1) * c_cat];
        let p_num: u64 = pc.iter().sum();
        values.extend(pc.iter().map(|&c| c as f64));
        values.push(p_num as f64);
        values.push(poi_entropy(pc, p_num));

        let rc = &road_counts[pos * l_lev..(pos + 1) * l_lev];
        values.extend(rc.iter().map(|&c| c as f64));
        values.push(rc.iter().sum::<u64>() as f64);

        let lights = &mut light_in_cell[pos];
        let s_a =
            if lights.is_empty() { 0.0 } else { stable_sum(lights) / lights.len() as f64 };
        values.push(s_a);
        values.push(nearest_distance(center, &sources.light_centers, cfg.sentinel_distance_m));

        values.push(transport_num[pos] as f64);
        values.push(nearest_distance(center, &sources.transport, cfg.sentinel_distance_m));

        let (b_dis, b_level) =
            business_features(&sources.business, g, cell, cfg.sentinel_distance_m)?;
        values.push(b_dis);
        values.push(b_level);
    }

    debug_assert_eq!(values.len(), n * d);
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("non-finite feature value {bad}")));
    }
    Ok(FeatureMatrix { cells, columns, values })
}

fn cell_pos(g: &GridMap, c: CellIndex) -> usize {
    (c.i - 1) * g.cols() + (c.j - 1)
}

/// Cells a segment's bounding box can touch, padded by one for edge ownership.
fn candidate_cells(g: &GridMap, r: &RoadSegment) -> Vec<CellIndex> {
    let bbox = g.bbox();
    let axis = |lo: f64, span: f64, n: usize, x: f64| -> i64 {
        (((x - lo) / span * n as f64).floor() as i64).clamp(0, n as i64 - 1)
    };
    let (i_a, i_b) = (
        axis(bbox.min.lat, bbox.lat_span(), g.rows(), r.start.lat.min(r.end.lat)) - 1,
        axis(bbox.min.lat, bbox.lat_span(), g.rows(), r.start.lat.max(r.end.lat)) + 1,
    );
    let (j_a, j_b) = (
        axis(bbox.min.lon, bbox.lon_span(), g.cols(), r.start.lon.min(r.end.lon)) - 1,
        axis(bbox.min.lon, bbox.lon_span(), g.cols(), r.start.lon.max(r.end.lon)) + 1,
    );
    let mut out = Vec::new();
    for i in i_a.max(0)..=i_b.min(g.rows() as i64 - 1) {
        for j in j_a.max(0)..=j_b.min(g.cols() as i64 - 1) {
            out.push(CellIndex::new(i as usize + 1, j as usize + 1));
        }
    }
    out
}

/// Derive light centers as local maxima of the cell-averaged intensity grid
/// at or above the given percentile (nearest-rank over all cells).
pub fn derive_light_centers(
    samples: &[LightSample],
    g: &GridMap,
    percentile: f64,
) -> Result<Vec<GeoPoint>> {
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::invalid(format!("percentile {percentile} outside [0, 100]")));
    }
    let n = g.n_cells();
    let mut per_cell: Vec<Vec<f64>> = vec![Vec::new(); n];
    for s in samples {
        if let Location::Cell(c) = g.locate(s.location) {
            per_cell[cell_pos(g, c)].push(s.intensity);
        }
    }
    let means: Vec<f64> = per_cell
        .iter_mut()
        .map(|v| if v.is_empty() { 0.0 } else { stable_sum(v) / v.len() as f64 })
        .collect();
    let mut sorted = means.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((percentile / 100.0 * n as f64).ceil() as usize).clamp(1, n) - 1;
    let threshold = sorted[rank];

    let at = |i: i64, j: i64| -> f64 {
        if i < 0 || j < 0 || i >= g.rows() as i64 || j >= g.cols() as i64 {
            f64::NEG_INFINITY
        } else {
            means[i as usize * g.cols() + j as usize]
        }
    };
    let mut centers = Vec::new();
    for i in 0..g.rows() as i64 {
        for j in 0..g.cols() as i64 {
            let v = at(i, j);
            if v < threshold || v <= 0.0 {
                continue;
            }
            let is_peak = (-1..=1).all(|di| {
                (-1..=1).all(|dj| (di == 0 && dj == 0) || v > at(i + di, j + dj))
            });
            if is_peak {
                centers.push(g.cell_center(CellIndex::new(i as usize + 1, j as usize + 1))?);
            }
        }
    }
    Ok(centers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, BoundingBox};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn unit_grid(n: usize, m: usize) -> GridMap {
        let bbox = BoundingBox::new(
            GeoPoint::new(0.0, 0.0).unwrap(),
            GeoPoint::new(1.0, 1.0).unwrap(),
        )
        .unwrap();
        build_grid(bbox, n, m).unwrap()
    }

    fn pt(lon: f64, lat: f64) -> GeoPoint {
        GeoPoint::new(lon, lat).unwrap()
    }

    #[test]
    fn poi_entropy_cases() {
        let g = unit_grid(2, 2);
        let cell = CellIndex::new(1, 1);
        // Empty cell.
        let (vec0, num0, en0) = poi_features(&[], &g, cell, 17).unwrap();
        assert_eq!(vec0, vec![0.0; 17]);
        assert_eq!((num0, en0), (0.0, 0.0));
        // One category only → zero entropy.
        let one: Vec<PoiRecord> =
            (0..5).map(|_| PoiRecord::new(pt(0.1, 0.1), 3).unwrap()).collect();
        let (_, num1, en1) = poi_features(&one, &g, cell, 17).unwrap();
        assert_eq!(num1, 5.0);
        assert_eq!(en1, 0.0);
        // Equal counts across all 17 categories → ln 17.
        let uniform: Vec<PoiRecord> = (1..=17)
            .flat_map(|c| (0..3).map(move |_| PoiRecord::new(pt(0.2, 0.3), c).unwrap()))
            .collect();
        let (v, num, en) = poi_features(&uniform, &g, cell, 17).unwrap();
        assert_eq!(v.iter().sum::<f64>(), num);
        assert_eq!(num, 51.0);
        assert!((en - 17.0f64.ln()).abs() < 1e-12);
        assert!((en - 2.833_213_344_056_216).abs() < 1e-12);
    }

    #[test]
    fn poi_category_out_of_range_rejected() {
        let g = unit_grid(2, 2);
        let bad = [PoiRecord { location: pt(0.1, 0.1), category: 18 }];
        assert!(poi_features(&bad, &g, CellIndex::new(1, 1), 17).is_err());
    }

    #[test]
    fn segment_inside_counts_once() {
        let g = unit_grid(2, 2);
        let seg = RoadSegment::new(pt(0.1, 0.1), pt(0.3, 0.2), 1).unwrap();
        let mut hits = 0;
        for cell in g.cells() {
            if segment_intersects_cell(&seg, &g, cell).unwrap() {
                hits += 1;
                assert_eq!(cell, CellIndex::new(1, 1));
            }
        }
        assert_eq!(hits, 1);
    }

    #[test]
    fn segment_crossing_two_cells_counts_in_each() {
        let g = unit_grid(2, 2);
        let seg = RoadSegment::new(pt(0.2, 0.2), pt(0.8, 0.3), 2).unwrap();
        let hit: Vec<CellIndex> = g
            .cells()
            .filter(|&c| segment_intersects_cell(&seg, &g, c).unwrap())
            .collect();
        assert_eq!(hit, vec![CellIndex::new(1, 1), CellIndex::new(1, 2)]);
        let (counts, num) = road_features(&[seg], &g, CellIndex::new(1, 2), 5).unwrap();
        assert_eq!(counts[1], 1.0);
        assert_eq!(num, 1.0);
    }

    #[test]
    fn road_overlap_matches_sampling_oracle() {
        let g = unit_grid(5, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let seg = RoadSegment::new(
                pt(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
                pt(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
                1,
            )
            .unwrap();
            let mut sampled = BTreeSet::new();
            for s in 0..1000 {
                let t = (s as f64 + 0.5) / 1000.0;
                let p = pt(
                    seg.start.lon + t * (seg.end.lon - seg.start.lon),
                    seg.start.lat + t * (seg.end.lat - seg.start.lat),
                );
                if let Location::Cell(c) = g.locate(p) {
                    sampled.insert(c);
                }
            }
            let clipped: BTreeSet<CellIndex> = g
                .cells()
                .filter(|&c| segment_intersects_cell(&seg, &g, c).unwrap())
                .collect();
            assert_eq!(clipped, sampled, "segment {seg:?}");
        }
    }

    #[test]
    fn light_mean_and_empty_cell() {
        let g = unit_grid(2, 2);
        let cell = CellIndex::new(1, 1);
        let samples = [
            LightSample::new(pt(0.1, 0.1), 3.0).unwrap(),
            LightSample::new(pt(0.2, 0.3), 5.0).unwrap(),
            LightSample::new(pt(0.9, 0.9), 100.0).unwrap(),
        ];
        let (s_a, _) = light_features(&samples, &[], &g, cell, 50_000.0).unwrap();
        assert_eq!(s_a, 4.0);
        let (s_a2, s_dis2) = light_features(&[], &[], &g, cell, 50_000.0).unwrap();
        assert_eq!(s_a2, 0.0);
        assert_eq!(s_dis2, 50_000.0);
    }

    #[test]
    fn nearest_distances_match_linear_scan() {
        let g = unit_grid(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let centers: Vec<GeoPoint> = (0..20)
            .map(|_| pt(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)))
            .collect();
        for cell in g.cells() {
            let from = g.cell_center(cell).unwrap();
            let brute = centers
                .iter()
                .map(|&c| haversine_m(from, c))
                .min_by(|a, b| a.total_cmp(b))
                .unwrap();
            let (_, s_dis) = light_features(&[], &centers, &g, cell, 50_000.0).unwrap();
            let (_, t_dis) = transport_features(&centers, &g, cell, 50_000.0).unwrap();
            assert_eq!(s_dis, brute);
            assert_eq!(t_dis, brute);
        }
    }

    #[test]
    fn transport_count_and_center_distance() {
        let g = unit_grid(4, 4);
        let cell = CellIndex::new(2, 3);
        let center = g.cell_center(cell).unwrap();
        let (t_num, t_dis) = transport_features(&[center], &g, cell, 50_000.0).unwrap();
        assert_eq!(t_num, 1.0);
        assert_eq!(t_dis, 0.0);
        // All centers outside the bbox → zero counts everywhere.
        let outside = [pt(5.0, 5.0), pt(-1.0, 0.5)];
        for c in g.cells() {
            let (n, _) = transport_features(&outside, &g, c, 50_000.0).unwrap();
            assert_eq!(n, 0.0);
        }
    }

    #[test]
    fn business_level_and_ties() {
        let g = unit_grid(2, 2);
        let one = [BusinessCenter::new(pt(0.6, 0.6), 3).unwrap()];
        for cell in g.cells() {
            let (_, level) = business_features(&one, &g, cell, 50_000.0).unwrap();
            assert_eq!(level, 3.0);
        }
        // Equidistant pair → the lower-index one wins.
        let cell = CellIndex::new(1, 1);
        let center = g.cell_center(cell).unwrap();
        // Offsets exactly representable in binary so the distances tie exactly.
        let two = [
            BusinessCenter::new(pt(center.lon + 0.125, center.lat), 4).unwrap(),
            BusinessCenter::new(pt(center.lon - 0.125, center.lat), 2).unwrap(),
        ];
        let d1 = haversine_m(center, two[0].location);
        let d2 = haversine_m(center, two[1].location);
        assert_eq!(d1, d2);
        let (_, level) = business_features(&two, &g, cell, 50_000.0).unwrap();
        assert_eq!(level, 4.0);
        // Empty set → sentinel and level 0.
        let (d, l) = business_features(&[], &g, cell, 50_000.0).unwrap();
        assert_eq!((d, l), (50_000.0, 0.0));
    }

    fn random_city(rng: &mut ChaCha8Rng, n_poi: usize) -> CitySources {
        let p = |rng: &mut ChaCha8Rng| {
            pt(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0))
        };
        CitySources {
            pois: (0..n_poi)
                .map(|_| {
                    let loc = p(rng);
                    PoiRecord::new(loc, rng.random_range(1..=17)).unwrap()
                })
                .collect(),
            roads: (0..40)
                .map(|_| {
                    let a = p(rng);
                    let b = p(rng);
                    RoadSegment::new(a, b, rng.random_range(1..=29)).unwrap()
                })
                .collect(),
            light_samples: (0..60)
                .map(|_| {
                    let loc = p(rng);
                    LightSample::new(loc, rng.random_range(0.0..63.0)).unwrap()
                })
                .collect(),
            light_centers: (0..3).map(|_| p(rng)).collect(),
            transport: (0..5).map(|_| p(rng)).collect(),
            business: (0..4)
                .map(|_| {
                    let loc = p(rng);
                    BusinessCenter::new(loc, rng.random_range(1..=4)).unwrap()
                })
                .collect(),
        }
    }

    #[test]
    fn matrix_has_55_columns_by_default() {
        let g = unit_grid(2, 2);
        let cfg = FeatureConfig::default();
        let m = build_feature_matrix(&CitySources::default(), &g, &cfg).unwrap();
        assert_eq!(m.n_rows(), 4);
        assert_eq!(m.n_cols(), 55);
        assert_eq!(m.columns[0], "P_1");
        assert_eq!(m.columns[17], "P_num");
        assert_eq!(m.columns[54], "B_level");
        // Empty city: zeros and sentinels, nothing non-finite.
        for r in 0..m.n_rows() {
            let row = m.row(r);
            assert!(row.iter().all(|v| v.is_finite()));
            assert_eq!(row[17], 0.0); // P_num
            assert_eq!(row[50], 50_000.0); // S_dis
            assert_eq!(row[52], 50_000.0); // T_dis
        }
    }

    #[test]
    fn matrix_matches_per_cell_operations() {
        let g = unit_grid(3, 3);
        let cfg = FeatureConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let city = random_city(&mut rng, 120);
        let m = build_feature_matrix(&city, &g, &cfg).unwrap();
        for (r, &cell) in m.cells.iter().enumerate() {
            let row = m.row(r);
            let (pv, p_num, p_en) = poi_features(&city.pois, &g, cell, 17).unwrap();
            let (rv, r_num) = road_features(&city.roads, &g, cell, 29).unwrap();
            let (s_a, s_dis) =
                light_features(&city.light_samples, &city.light_centers, &g, cell, 50_000.0)
                    .unwrap();
            let (t_num, t_dis) = transport_features(&city.transport, &g, cell, 50_000.0).unwrap();
            let (b_dis, b_level) = business_features(&city.business, &g, cell, 50_000.0).unwrap();
            let mut expect = pv;
            expect.extend([p_num, p_en]);
            expect.extend(rv);
            expect.extend([r_num, s_a, s_dis, t_num, t_dis, b_dis, b_level]);
            assert_eq!(row, &expect[..], "cell {cell}");
        }
    }

    #[test]
    fn matrix_invariant_under_input_permutation() {
        let g = unit_grid(3, 3);
        let cfg = FeatureConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let city = random_city(&mut rng, 100);
        let base = build_feature_matrix(&city, &g, &cfg).unwrap();
        let mut shuffled = city.clone();
        shuffled.pois.reverse();
        shuffled.roads.rotate_left(13);
        shuffled.light_samples.reverse();
        shuffled.light_samples.rotate_left(7);
        let again = build_feature_matrix(&shuffled, &g, &cfg).unwrap();
        assert_eq!(base, again);
    }

    #[test]
    fn derive_centers_finds_bright_peaks() {
        let g = unit_grid(5, 5);
        let mut samples = Vec::new();
        for cell in g.cells() {
            let c = g.cell_center(cell).unwrap();
            let bright = if cell == CellIndex::new(2, 2) || cell == CellIndex::new(4, 5) {
                60.0
            } else {
                5.0
            };
            samples.push(LightSample::new(c, bright).unwrap());
        }
        let centers = derive_light_centers(&samples, &g, 90.0).unwrap();
        assert_eq!(centers.len(), 2);
        assert_eq!(g.locate(centers[0]), Location::Cell(CellIndex::new(2, 2)));
        assert_eq!(g.locate(centers[1]), Location::Cell(CellIndex::new(4, 5)));
        assert!(derive_light_centers(&samples, &g, 101.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn entropy_within_bounds(cats in proptest::collection::vec(0u64..40, 17)) {
            let total: u64 = cats.iter().sum();
            let en = poi_entropy(&cats, total);
            prop_assert!(en >= 0.0);
            prop_assert!(en <= 17.0f64.ln() + 1e-12);
        }

        #[test]
        fn feature_matrix_always_finite(seed in 0u64..500) {
            let g = unit_grid(3, 4);
            let cfg = FeatureConfig::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let city = random_city(&mut rng, 40);
            let m = build_feature_matrix(&city, &g, &cfg).unwrap();
            prop_assert!(m.values.iter().all(|v| v.is_finite()));
            // P_num and R_num are the sums of their count blocks.
            for r in 0..m.n_rows() {
                let row = m.row(r);
                let p_sum: f64 = row[..17].iter().sum();
                prop_assert_eq!(p_sum, row[17]);
                let r_sum: f64 = row[19..48].iter().sum();
                prop_assert_eq!(r_sum, row[48]);
            }
        }
    }
}
