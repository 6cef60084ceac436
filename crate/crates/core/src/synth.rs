//! Seeded synthetic-city generator: the ground-truth oracle for the pipeline.
//!
//! Cells get planted demand patterns as mixtures of four archetypes — triple
//! peak near transit, double peak near business centers, a broader
//! morning/evening double peak for residential background, flat for parks —
//! with mixture weights driven by proximity to placed entities. Trip records
//! are then Poisson-sampled from the planted patterns, and the geographic
//! side (POIs, roads, light, transport, business) is laid out so that the
//! same entities explain both the features and the demand.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::features::{BusinessCenter, CitySources, LightSample, PoiRecord, RoadSegment};
use crate::grid::{
    build_grid, BoundingBox, CellIndex, GeoPoint, GridMap, Location, ProbVector, TripRecord,
};

/// Trip timestamps start at this epoch (an exact midnight, so day indices
/// are whole).
pub const SYNTH_EPOCH: i64 = 1_496_793_600;

/// Layout and scale of a synthetic city.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticCitySpec {
    pub rows: usize,
    pub cols: usize,
    /// Time slots per day; must divide 86 400.
    pub slots: usize,
    pub days: usize,
    pub bbox: BoundingBox,
    /// Nominal records per cell per day at full activity.
    pub base_intensity: f64,
    pub transit_count: usize,
    pub business_count: usize,
    pub park_count: usize,
    /// Entity influence cutoff in cell units.
    pub influence_radius: f64,
    pub poi_categories: usize,
    pub road_levels: usize,
    pub seed: u64,
}

impl Default for SyntheticCitySpec {
    fn default() -> Self {
        SyntheticCitySpec {
            rows: 20,
            cols: 20,
            slots: 48,
            days: 28,
            bbox: BoundingBox::new(
                GeoPoint { lon: 121.0, lat: 31.0 },
                GeoPoint { lon: 121.2, lat: 31.2 },
            )
            .expect("static bbox"),
            base_intensity: 200.0,
            transit_count: 12,
            business_count: 6,
            park_count: 8,
            influence_radius: 4.0,
            poi_categories: 17,
            road_levels: 29,
            seed: 42,
        }
    }
}

impl SyntheticCitySpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::invalid("city grid must be at least 1×1"));
        }
        if self.slots == 0 || 86_400 % self.slots != 0 {
            return Err(Error::invalid(format!("{} slots do not divide 86400 evenly", self.slots)));
        }
        if self.days == 0 {
            return Err(Error::invalid("city needs at least 1 day"));
        }
        if !(self.base_intensity > 0.0) {
            return Err(Error::invalid(format!(
                "base intensity must be positive, got {}",
                self.base_intensity
            )));
        }
        if !(self.influence_radius > 0.0) {
            return Err(Error::invalid("influence radius must be positive"));
        }
        if self.poi_categories < 6 {
            return Err(Error::invalid("need at least 6 POI categories for the layout rules"));
        }
        if self.road_levels == 0 {
            return Err(Error::invalid("need at least 1 road level"));
        }
        Ok(())
    }
}

/// The four demand archetypes over k slots, in mixture-weight order:
/// transit triple peak, business double peak, residential double peak,
/// park flat.
pub fn archetypes(k: usize) -> Result<Vec<(String, ProbVector)>> {
    let curve = |peaks: &[(f64, f64, f64)], base: f64| -> Result<ProbVector> {
        let values: Vec<f64> = (0..k)
            .map(|s| {
                let h = (s as f64 + 0.5) * 24.0 / k as f64;
                base + peaks
                    .iter()
                    .map(|&(c, w, a)| a * (-(h - c) * (h - c) / (2.0 * w * w)).exp())
                    .sum::<f64>()
            })
            .collect();
        ProbVector::from_nonneg(&values, 1e-12)
    };
    Ok(vec![
        (
            "triple_peak_transit".into(),
            curve(&[(8.25, 0.55, 1.0), (12.25, 0.55, 0.8), (18.25, 0.55, 1.0)], 0.15)?,
        ),
        (
            "double_peak_business".into(),
            curve(&[(9.25, 0.55, 1.0), (18.75, 0.55, 1.0)], 0.10)?,
        ),
        (
            "double_peak_residential".into(),
            curve(&[(7.75, 1.1, 1.0), (17.75, 1.2, 1.0)], 0.25)?,
        ),
        ("flat_park".into(), curve(&[(14.0, 4.5, 0.6)], 0.5)?),
    ])
}

/// A generated city: geography, planted truth, and per-cell intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCity {
    pub spec: SyntheticCitySpec,
    pub grid: GridMap,
    pub sources: CitySources,
    /// Park locations; they shape demand but deliberately have no column of
    /// their own in the feature set — only the POIs they scatter reveal them.
    pub parks: Vec<GeoPoint>,
    pub planted: BTreeMap<CellIndex, ProbVector>,
    /// Expected records per day for each cell.
    pub intensities: BTreeMap<CellIndex, f64>,
    /// Archetype mixture weights per cell (sum to 1), in `archetypes` order.
    pub mixtures: BTreeMap<CellIndex, Vec<f64>>,
}

struct Entity {
    location: GeoPoint,
    archetype: usize,
}

/// Deterministically generate a city's geography and planted patterns.
pub fn generate_city(spec: &SyntheticCitySpec, seed: u64) -> Result<GeneratedCity> {
    spec.validate()?;
    let grid = build_grid(spec.bbox, spec.rows, spec.cols)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = archetypes(spec.slots)?;

    let uniform_point = |rng: &mut ChaCha8Rng| -> GeoPoint {
        GeoPoint {
            lon: rng.random_range(spec.bbox.min.lon..spec.bbox.max.lon),
            lat: rng.random_range(spec.bbox.min.lat..spec.bbox.max.lat),
        }
    };

    // Entity placement: transit, then business (with levels), then parks.
    let transit: Vec<GeoPoint> = (0..spec.transit_count).map(|_| uniform_point(&mut rng)).collect();
    let business: Vec<BusinessCenter> = (0..spec.business_count)
        .map(|_| {
            let location = uniform_point(&mut rng);
            BusinessCenter::new(location, rng.random_range(1..=4))
        })
        .collect::<Result<_>>()?;
    let parks: Vec<GeoPoint> = (0..spec.park_count).map(|_| uniform_point(&mut rng)).collect();

    let mut entities: Vec<Entity> = Vec::new();
    entities.extend(transit.iter().map(|&p| Entity { location: p, archetype: 0 }));
    entities.extend(business.iter().map(|b| Entity { location: b.location, archetype: 1 }));
    entities.extend(parks.iter().map(|&p| Entity { location: p, archetype: 3 }));

    // Distance from a cell center in cell units.
    let lon_step = grid.lon_step();
    let lat_step = grid.lat_step();
    let cell_dist = |center: GeoPoint, p: GeoPoint| -> f64 {
        let dx = (p.lon - center.lon) / lon_step;
        let dy = (p.lat - center.lat) / lat_step;
        (dx * dx + dy * dy).sqrt()
    };
    let kernel = |d: f64| -> f64 {
        if d <= spec.influence_radius {
            let inv = 1.0 / (0.2 + d);
            inv * inv
        } else {
            0.0
        }
    };

    let mut planted = BTreeMap::new();
    let mut intensities = BTreeMap::new();
    let mut mixtures = BTreeMap::new();
    for cell in grid.cells() {
        let center = grid.cell_center(cell)?;
        // Kernel weights per archetype; residential is a constant background.
        let mut w = [0.0f64, 0.0, 0.4, 0.0];
        let mut inside = [0.0f64; 4];
        for e in &entities {
            w[e.archetype] += kernel(cell_dist(center, e.location));
            if grid.locate(e.location) == Location::Cell(cell) {
                inside[e.archetype] += 1.0;
            }
        }
        let kernel_total: f64 = w.iter().sum();
        let mut mix: Vec<f64> = w.iter().map(|x| x / kernel_total).collect();
        let inside_total: f64 = inside.iter().sum();
        if inside_total > 0.0 {
            // A cell that contains entities takes its identity from them;
            // neighbors only tint the remainder.
            for (m, &cnt) in mix.iter_mut().zip(&inside) {
                *m = 0.95 * cnt / inside_total + 0.05 * *m;
            }
        }
        let pattern: Vec<f64> = (0..spec.slots)
            .map(|s| mix.iter().zip(&arch).map(|(&m, (_, p))| m * p.values()[s]).sum())
            .collect();
        planted.insert(cell, ProbVector::from_nonneg(&pattern, 1e-12)?);

        let activity = w[0] + w[1] + w[3];
        intensities.insert(cell, spec.base_intensity * (0.4 + 0.6 * (activity / 2.0).min(1.0)));
        mixtures.insert(cell, mix);
    }

    // Geography. POIs cluster around the entities that drive demand: parks
    // carry the last category, business centers categories 1–5, transit
    // category 6, plus a uniform background over all categories.
    let c_cat = spec.poi_categories;
    let mut pois = Vec::new();
    let scatter = |rng: &mut ChaCha8Rng, p: GeoPoint, sigma_cells: f64| -> Result<GeoPoint> {
        let n = Normal::new(0.0, sigma_cells).map_err(|e| Error::numeric(e.to_string()))?;
        GeoPoint::new(
            (p.lon + n.sample(rng) * lon_step).clamp(-180.0, 180.0),
            (p.lat + n.sample(rng) * lat_step).clamp(-90.0, 90.0),
        )
    };
    for &p in &parks {
        for _ in 0..8 {
            pois.push(PoiRecord::new(scatter(&mut rng, p, 0.3)?, c_cat)?);
        }
    }
    for b in &business {
        for _ in 0..12 {
            let cat = rng.random_range(1..=5);
            pois.push(PoiRecord::new(scatter(&mut rng, b.location, 0.4)?, cat)?);
        }
    }
    for &t in &transit {
        for _ in 0..4 {
            pois.push(PoiRecord::new(scatter(&mut rng, t, 0.3)?, 6)?);
        }
    }
    for _ in 0..spec.rows * spec.cols * 2 {
        let cat = rng.random_range(1..=c_cat);
        pois.push(PoiRecord::new(uniform_point(&mut rng), cat)?);
    }

    // Roads: denser in active cells, levels biased low.
    let mut roads = Vec::new();
    for cell in grid.cells() {
        let center = grid.cell_center(cell)?;
        let urbanity: f64 = {
            let activity: f64 =
                entities.iter().map(|e| kernel(cell_dist(center, e.location))).sum();
            (activity / 2.0).min(1.0)
        };
        let n_seg = Poisson::new(0.4 + 1.6 * urbanity)
            .map_err(|e| Error::numeric(e.to_string()))?
            .sample(&mut rng) as usize;
        for _ in 0..n_seg {
            let mid = GeoPoint {
                lon: rng.random_range(-0.5..0.5f64).mul_add(lon_step, center.lon),
                lat: rng.random_range(-0.5..0.5f64).mul_add(lat_step, center.lat),
            };
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let half_len = rng.random_range(0.25..0.75f64);
            let (dlon, dlat) = (angle.cos() * half_len * lon_step, angle.sin() * half_len * lat_step);
            let u: f64 = rng.random_range(0.0..1.0);
            let level = 1 + ((u * u) * spec.road_levels as f64) as usize;
            let a = GeoPoint::new(mid.lon - dlon, mid.lat - dlat)?;
            let b = GeoPoint::new(mid.lon + dlon, mid.lat + dlat)?;
            roads.push(RoadSegment::new(a, b, level.min(spec.road_levels))?);
        }
    }

    // Night light: a 2×2 jittered sample pattern per cell, glowing near
    // business and transit; light centers are the business locations.
    let mut light_samples = Vec::new();
    let glow_sigma = 1.5f64;
    for cell in grid.cells() {
        let (lo, hi) = grid.cell_rect(cell)?;
        for qi in 0..2 {
            for qj in 0..2 {
                let p = GeoPoint {
                    lon: lo.lon
                        + (qj as f64 + 0.5) / 2.0 * (hi.lon - lo.lon)
                        + rng.random_range(-0.1..0.1f64) * lon_step,
                    lat: lo.lat
                        + (qi as f64 + 0.5) / 2.0 * (hi.lat - lo.lat)
                        + rng.random_range(-0.1..0.1f64) * lat_step,
                };
                let mut glow = 0.0;
                for b in &business {
                    let d = cell_dist(p, b.location);
                    glow += (-d * d / (2.0 * glow_sigma * glow_sigma)).exp();
                }
                for &t in &transit {
                    let d = cell_dist(p, t);
                    glow += 0.5 * (-d * d / (2.0 * glow_sigma * glow_sigma)).exp();
                }
                let noise: f64 = rng.random_range(-0.8..0.8);
                let intensity = (5.0 + 55.0 * glow.min(1.0) + noise).max(0.0);
                light_samples.push(LightSample::new(GeoPoint::new(p.lon, p.lat)?, intensity)?);
            }
        }
    }

    let sources = CitySources {
        pois,
        roads,
        light_samples,
        light_centers: business.iter().map(|b| b.location).collect(),
        transport: transit,
        business,
    };
    Ok(GeneratedCity { spec: spec.clone(), grid, sources, parks, planted, intensities, mixtures })
}

/// Poisson-sample trip records from planted patterns.
///
/// Per cell, day, and slot the count is Poisson(intensity·pattern[slot]);
/// each record starts uniformly inside its cell and slot. Ends are
/// synthesized nearby and unused downstream.
pub fn sample_records(
    planted: &BTreeMap<CellIndex, ProbVector>,
    intensities: &BTreeMap<CellIndex, f64>,
    grid: &GridMap,
    days: usize,
    seed: u64,
) -> Result<Vec<TripRecord>> {
    let Some(first) = planted.values().next() else {
        return Ok(Vec::new());
    };
    let k = first.len();
    if k == 0 || 86_400 % k != 0 {
        return Err(Error::invalid(format!("{k} slots do not divide 86400 evenly")));
    }
    let slot_len = (86_400 / k) as i64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for (cell, pattern) in planted {
        if pattern.len() != k {
            return Err(Error::shape(format!(
                "planted pattern of cell {cell} has length {}, expected {k}",
                pattern.len()
            )));
        }
        let intensity = *intensities.get(cell).ok_or_else(|| {
            Error::invalid(format!("no intensity given for planted cell {cell}"))
        })?;
        if !intensity.is_finite() || intensity < 0.0 {
            return Err(Error::invalid(format!(
                "intensity of cell {cell} must be ≥ 0, got {intensity}"
            )));
        }
        let (lo, hi) = grid.cell_rect(*cell)?;
        for day in 0..days as i64 {
            for (slot, &p) in pattern.values().iter().enumerate() {
                let lambda = intensity * p;
                if lambda <= 0.0 {
                    continue;
                }
                let n = Poisson::new(lambda)
                    .map_err(|e| Error::numeric(e.to_string()))?
                    .sample(&mut rng) as u64;
                for _ in 0..n {
                    let start = GeoPoint {
                        lon: rng.random_range(lo.lon..hi.lon),
                        lat: rng.random_range(lo.lat..hi.lat),
                    };
                    let start_time = SYNTH_EPOCH
                        + day * 86_400
                        + slot as i64 * slot_len
                        + rng.random_range(0..slot_len);
                    let end = GeoPoint::new(
                        (start.lon + rng.random_range(-3.0..3.0f64) * grid.lon_step())
                            .clamp(-180.0, 180.0),
                        (start.lat + rng.random_range(-3.0..3.0f64) * grid.lat_step())
                            .clamp(-90.0, 90.0),
                    )?;
                    let end_time = start_time + rng.random_range(300..2700);
                    records.push(TripRecord::new(start, start_time, end, end_time)?);
                }
            }
        }
    }
    Ok(records)
}
