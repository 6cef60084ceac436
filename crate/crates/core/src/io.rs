//! Every on-disk artifact of the pipeline: CSV ingestion and emission plus
//! the JSON documents that carry state between stages.
//!
//! All writers funnel through [`write_atomic`]: bytes land in a temporary
//! file next to the destination and are renamed into place only once
//! complete, so a failed run never leaves a half-written artifact behind.
//! Floating-point values round-trip exactly — both the CSV writers and JSON
//! use shortest-representation formatting that parses back to the same bits —
//! which is what makes repeated runs byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::copca::{CoPcaTransform, LatentMatrix};
use crate::dwt::{DemandPattern, MinedCity, WaveletFilters};
use crate::error::{Error, Result};
use crate::features::{
    BusinessCenter, CitySources, FeatureMatrix, LightSample, PoiRecord, RoadSegment,
};
use crate::grid::{
    build_grid, BoundingBox, CellIndex, DemandSet, DemandVector, GeoPoint, GridMap, ProbVector,
    TripRecord,
};
use crate::model::{ModelParams, TrainConfig, TrainLogRow};

/// Fixed artifact names, shared by the CLI and the readers below.
pub const TRIPS_CSV: &str = "trips.csv";
pub const POI_CSV: &str = "poi.csv";
pub const ROADS_CSV: &str = "roads.csv";
pub const LIGHT_CSV: &str = "light.csv";
pub const LIGHT_CENTERS_CSV: &str = "light_centers.csv";
pub const TRANSPORT_CSV: &str = "transport.csv";
pub const BUSINESS_CSV: &str = "business.csv";
pub const CITY_META_JSON: &str = "city.json";
pub const PLANTED_PATTERNS_JSON: &str = "planted_patterns.json";
pub const DEMAND_JSON: &str = "demand.json";
pub const FEATURES_CSV: &str = "features.csv";
pub const PATTERNS_JSON: &str = "patterns.json";
pub const DIVERGENCE_CSV: &str = "divergence.csv";
pub const DIVERGENCE_HISTOGRAM_CSV: &str = "divergence_histogram.csv";
pub const COPCA_JSON: &str = "copca.json";
pub const CHECKPOINT_JSON: &str = "checkpoint.json";
pub const TRAINING_LOG_CSV: &str = "training_log.csv";
pub const ATTENTION_JSON: &str = "attention.json";
pub const EVAL_JSON: &str = "eval.json";
pub const EVAL_TABLE_CSV: &str = "eval_table.csv";

/// Write `bytes` to `path` through a temp file in the same directory,
/// renaming into place only when the write is complete.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    fs::write(tmp.path(), bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

// ---------------------------------------------------------------- CSV core

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Read a headed CSV file and check the header matches `want` exactly
/// (case-insensitive, surrounding whitespace ignored).
fn csv_rows(path: &Path, want: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let bytes = read_bytes(path)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes.as_slice());
    let header = reader.headers().map_err(|e| Error::parse(path, e.to_string()))?;
    let got: Vec<String> = header.iter().map(|f| f.trim().to_ascii_lowercase()).collect();
    if got != want {
        return Err(Error::parse(
            path,
            format!("header is {:?}, expected {:?}", got.join(","), want.join(",")),
        ));
    }
    reader
        .records()
        .map(|r| r.map_err(|e| Error::parse(path, e.to_string())))
        .collect()
}

fn row_line(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

fn field<'r>(path: &Path, rec: &'r csv::StringRecord, idx: usize) -> Result<&'r str> {
    rec.get(idx).map(str::trim).ok_or_else(|| {
        Error::parse(path, format!("line {}: missing column {}", row_line(rec), idx + 1))
    })
}

/// Parse one field as a number, naming the column in the error.
fn num<T: FromStr>(path: &Path, rec: &csv::StringRecord, idx: usize, what: &str) -> Result<T> {
    let raw = field(path, rec, idx)?;
    raw.parse().map_err(|_| {
        Error::parse(path, format!("line {}: bad {what} {raw:?}", row_line(rec)))
    })
}

fn geo(path: &Path, rec: &csv::StringRecord, lon_idx: usize, lat_idx: usize) -> Result<GeoPoint> {
    let lon: f64 = num(path, rec, lon_idx, "longitude")?;
    let lat: f64 = num(path, rec, lat_idx, "latitude")?;
    GeoPoint::new(lon, lat)
        .map_err(|e| Error::parse(path, format!("line {}: {e}", row_line(rec))))
}

/// Serialize header + rows to CSV bytes and write them atomically.
fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::parse(path, e.to_string()))?;
    for row in rows {
        w.write_record(&row).map_err(|e| Error::parse(path, e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::parse(path, e.to_string()))?;
    write_atomic(path, &bytes)
}

// -------------------------------------------------------------- trip records

/// Orientation of one timestamp column, fixed by its first data row.
#[derive(Clone, Copy, PartialEq)]
enum TimeFormat {
    EpochSeconds,
    Iso8601,
}

fn detect_time_format(raw: &str) -> TimeFormat {
    if raw.parse::<i64>().is_ok() {
        TimeFormat::EpochSeconds
    } else {
        TimeFormat::Iso8601
    }
}

fn parse_iso(raw: &str) -> Option<i64> {
    if let Ok(t) = DateTime::parse_from_rfc3339(raw) {
        return Some(t.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Some(t.and_utc().timestamp());
        }
    }
    None
}

fn parse_time(path: &Path, rec: &csv::StringRecord, idx: usize, fmt: TimeFormat) -> Result<i64> {
    let raw = field(path, rec, idx)?;
    let parsed = match fmt {
        TimeFormat::EpochSeconds => raw.parse::<i64>().ok(),
        TimeFormat::Iso8601 => parse_iso(raw),
    };
    parsed.ok_or_else(|| {
        Error::parse(
            path,
            format!(
                "line {}: timestamp {raw:?} does not match the format of the column's first row",
                row_line(rec)
            ),
        )
    })
}

const TRIPS_HEADER: [&str; 6] =
    ["start_lon", "start_lat", "start_time", "end_lon", "end_lat", "end_time"];

/// Read trip records; each timestamp column independently holds either epoch
/// seconds or ISO-8601, detected from its first data row.
pub fn read_trips_csv(path: impl AsRef<Path>) -> Result<Vec<TripRecord>> {
    let path = path.as_ref();
    let rows = csv_rows(path, &TRIPS_HEADER)?;
    let Some(first) = rows.first() else { return Ok(Vec::new()) };
    let start_fmt = detect_time_format(field(path, first, 2)?);
    let end_fmt = detect_time_format(field(path, first, 5)?);
    rows.iter()
        .map(|rec| {
            let start = geo(path, rec, 0, 1)?;
            let start_time = parse_time(path, rec, 2, start_fmt)?;
            let end = geo(path, rec, 3, 4)?;
            let end_time = parse_time(path, rec, 5, end_fmt)?;
            TripRecord::new(start, start_time, end, end_time)
                .map_err(|e| Error::parse(path, format!("line {}: {e}", row_line(rec))))
        })
        .collect()
}

/// Write trip records with epoch-second timestamps.
pub fn write_trips_csv(path: impl AsRef<Path>, records: &[TripRecord]) -> Result<()> {
    write_csv(
        path.as_ref(),
        &TRIPS_HEADER,
        records.iter().map(|r| {
            vec![
                r.start.lon.to_string(),
                r.start.lat.to_string(),
                r.start_time.to_string(),
                r.end.lon.to_string(),
                r.end.lat.to_string(),
                r.end_time.to_string(),
            ]
        }),
    )
}

// ---------------------------------------------------------- geographic CSVs

pub fn read_poi_csv(path: impl AsRef<Path>) -> Result<Vec<PoiRecord>> {
    let path = path.as_ref();
    csv_rows(path, &["lon", "lat", "category"])?
        .iter()
        .map(|rec| {
            let location = geo(path, rec, 0, 1)?;
            let category: usize = num(path, rec, 2, "category")?;
            PoiRecord::new(location, category)
                .map_err(|e| Error::parse(path, format!("line {}: {e}", row_line(rec))))
        })
        .collect()
}

pub fn write_poi_csv(path: impl AsRef<Path>, pois: &[PoiRecord]) -> Result<()> {
    write_csv(
        path.as_ref(),
        &["lon", "lat", "category"],
        pois.iter().map(|p| {
            vec![p.location.lon.to_string(), p.location.lat.to_string(), p.category.to_string()]
        }),
    )
}

pub fn read_roads_csv(path: impl AsRef<Path>) -> Result<Vec<RoadSegment>> {
    let path = path.as_ref();
    csv_rows(path, &["lon1", "lat1", "lon2", "lat2", "level"])?
        .iter()
        .map(|rec| {
            let start = geo(path, rec, 0, 1)?;
            let end = geo(path, rec, 2, 3)?;
            let level: usize = num(path, rec, 4, "level")?;
            RoadSegment::new(start, end, level)
                .map_err(|e| Error::parse(path, format!("line {}: {e}", row_line(rec))))
        })
        .collect()
}

pub fn write_roads_csv(path: impl AsRef<Path>, roads: &[RoadSegment]) -> Result<()> {
    write_csv(
        path.as_ref(),
        &["lon1", "lat1", "lon2", "lat2", "level"],
        roads.iter().map(|r| {
            vec![
                r.start.lon.to_string(),
                r.start.lat.to_string(),
                r.end.lon.to_string(),
                r.end.lat.to_string(),
                r.level.to_string(),
            ]
        }),
    )
}

pub fn read_light_csv(path: impl AsRef<Path>) -> Result<Vec<LightSample>> {
    let path = path.as_ref();
    csv_rows(path, &["lon", "lat", "intensity"])?
        .iter()
        .map(|rec| {
            let location = geo(path, rec, 0, 1)?;
            let intensity: f64 = num(path, rec, 2, "intensity")?;
            LightSample::new(location, intensity)
                .map_err(|e| Error::parse(path, format!("line {}: {e}", row_line(rec))))
        })
        .collect()
}

pub fn write_light_csv(path: impl AsRef<Path>, samples: &[LightSample]) -> Result<()> {
    write_csv(
        path.as_ref(),
        &["lon", "lat", "intensity"],
        samples.iter().map(|s| {
            vec![s.location.lon.to_string(), s.location.lat.to_string(), s.intensity.to_string()]
        }),
    )
}

fn read_point_csv(path: &Path) -> Result<Vec<GeoPoint>> {
    csv_rows(path, &["lon", "lat"])?.iter().map(|rec| geo(path, rec, 0, 1)).collect()
}

fn write_point_csv(path: &Path, points: &[GeoPoint]) -> Result<()> {
    write_csv(
        path,
        &["lon", "lat"],
        points.iter().map(|p| vec![p.lon.to_string(), p.lat.to_string()]),
    )
}

pub fn read_light_centers_csv(path: impl AsRef<Path>) -> Result<Vec<GeoPoint>> {
    read_point_csv(path.as_ref())
}

pub fn write_light_centers_csv(path: impl AsRef<Path>, points: &[GeoPoint]) -> Result<()> {
    write_point_csv(path.as_ref(), points)
}

pub fn read_transport_csv(path: impl AsRef<Path>) -> Result<Vec<GeoPoint>> {
    read_point_csv(path.as_ref())
}

pub fn write_transport_csv(path: impl AsRef<Path>, points: &[GeoPoint]) -> Result<()> {
    write_point_csv(path.as_ref(), points)
}

pub fn read_business_csv(path: impl AsRef<Path>) -> Result<Vec<BusinessCenter>> {
    let path = path.as_ref();
    csv_rows(path, &["lon", "lat", "level"])?
        .iter()
        .map(|rec| {
            let location = geo(path, rec, 0, 1)?;
            let level: usize = num(path, rec, 2, "level")?;
            BusinessCenter::new(location, level)
                .map_err(|e| Error::parse(path, format!("line {}: {e}", row_line(rec))))
        })
        .collect()
}

pub fn write_business_csv(path: impl AsRef<Path>, centers: &[BusinessCenter]) -> Result<()> {
    write_csv(
        path.as_ref(),
        &["lon", "lat", "level"],
        centers.iter().map(|c| {
            vec![c.location.lon.to_string(), c.location.lat.to_string(), c.level.to_string()]
        }),
    )
}

/// Read all six geographic source CSVs from a directory by their fixed names.
pub fn read_city_sources(dir: impl AsRef<Path>) -> Result<CitySources> {
    let dir = dir.as_ref();
    Ok(CitySources {
        pois: read_poi_csv(dir.join(POI_CSV))?,
        roads: read_roads_csv(dir.join(ROADS_CSV))?,
        light_samples: read_light_csv(dir.join(LIGHT_CSV))?,
        light_centers: read_light_centers_csv(dir.join(LIGHT_CENTERS_CSV))?,
        transport: read_transport_csv(dir.join(TRANSPORT_CSV))?,
        business: read_business_csv(dir.join(BUSINESS_CSV))?,
    })
}

/// Write all six geographic source CSVs under their fixed names.
pub fn write_city_sources(dir: impl AsRef<Path>, sources: &CitySources) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_poi_csv(dir.join(POI_CSV), &sources.pois)?;
    write_roads_csv(dir.join(ROADS_CSV), &sources.roads)?;
    write_light_csv(dir.join(LIGHT_CSV), &sources.light_samples)?;
    write_light_centers_csv(dir.join(LIGHT_CENTERS_CSV), &sources.light_centers)?;
    write_transport_csv(dir.join(TRANSPORT_CSV), &sources.transport)?;
    write_business_csv(dir.join(BUSINESS_CSV), &sources.business)?;
    Ok(())
}

// ------------------------------------------------------------ feature matrix

/// Write a feature matrix as CSV: columns `i,j` first, then the schema.
pub fn write_features_csv(path: impl AsRef<Path>, f: &FeatureMatrix) -> Result<()> {
    let path = path.as_ref();
    let mut header = vec!["i", "j"];
    header.extend(f.columns.iter().map(String::as_str));
    write_csv(
        path,
        &header,
        f.cells.iter().enumerate().map(|(r, cell)| {
            let mut row = vec![cell.i.to_string(), cell.j.to_string()];
            row.extend(f.row(r).iter().map(|v| v.to_string()));
            row
        }),
    )
}

/// Read a feature matrix CSV; rows must come sorted by cell with no repeats
/// (the in-memory layout relies on it for binary search).
pub fn read_features_csv(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes.as_slice());
    let header = reader.headers().map_err(|e| Error::parse(path, e.to_string()))?;
    let names: Vec<String> = header.iter().map(|f| f.trim().to_string()).collect();
    if names.len() < 3 || names[0] != "i" || names[1] != "j" {
        return Err(Error::parse(path, "header must start with i,j and name at least one feature"));
    }
    let columns: Vec<String> = names[2..].to_vec();
    let mut cells = Vec::new();
    let mut values = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::parse(path, e.to_string()))?;
        if rec.len() != names.len() {
            return Err(Error::parse(
                path,
                format!("line {}: {} fields, expected {}", row_line(&rec), rec.len(), names.len()),
            ));
        }
        let i: usize = num(path, &rec, 0, "cell row")?;
        let j: usize = num(path, &rec, 1, "cell column")?;
        let cell = CellIndex::new(i, j);
        if cells.last().is_some_and(|last| *last >= cell) {
            return Err(Error::parse(
                path,
                format!("line {}: cell {cell} out of sorted order", row_line(&rec)),
            ));
        }
        cells.push(cell);
        for c in 0..columns.len() {
            values.push(num::<f64>(path, &rec, 2 + c, &columns[c])?);
        }
    }
    if cells.is_empty() {
        return Err(Error::parse(path, "no data rows"));
    }
    Ok(FeatureMatrix { cells, columns, values })
}

// ------------------------------------------------------------- JSON plumbing

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes =
        serde_json::to_vec_pretty(value).map_err(|e| Error::parse(path, e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::parse(path, e.to_string()))
}

// --------------------------------------------------------------- demand JSON

/// One observed day of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayDemand {
    pub day: i64,
    pub counts: Vec<u32>,
}

/// Demand document: slot count, out-of-grid record count, and per-cell days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandDoc {
    pub k: usize,
    pub outside: u64,
    pub cells: BTreeMap<CellIndex, Vec<DayDemand>>,
}

impl DemandDoc {
    pub fn from_set(d: &DemandSet) -> DemandDoc {
        let cells = d
            .cells
            .iter()
            .map(|(cell, days)| {
                let days = days
                    .iter()
                    .map(|v| DayDemand { day: v.day, counts: v.counts.clone() })
                    .collect();
                (*cell, days)
            })
            .collect();
        DemandDoc { k: d.k, outside: d.outside, cells }
    }

    pub fn into_set(self) -> Result<DemandSet> {
        if self.k == 0 {
            return Err(Error::invalid("demand document has k = 0"));
        }
        let mut cells = BTreeMap::new();
        for (cell, days) in self.cells {
            let mut vectors = Vec::with_capacity(days.len());
            for d in days {
                if d.counts.len() != self.k {
                    return Err(Error::shape(format!(
                        "cell {cell} day {} has {} slots, document says k = {}",
                        d.day,
                        d.counts.len(),
                        self.k
                    )));
                }
                vectors.push(DemandVector { cell, day: d.day, counts: d.counts });
            }
            vectors.sort_by_key(|v| v.day);
            cells.insert(cell, vectors);
        }
        Ok(DemandSet { k: self.k, outside: self.outside, cells })
    }
}

pub fn write_demand_json(path: impl AsRef<Path>, d: &DemandSet) -> Result<()> {
    write_json(path.as_ref(), &DemandDoc::from_set(d))
}

pub fn read_demand_json(path: impl AsRef<Path>) -> Result<DemandSet> {
    read_json::<DemandDoc>(path.as_ref())?
        .into_set()
        .map_err(|e| Error::parse(path.as_ref(), e.to_string()))
}

// -------------------------------------------------------------- pattern JSON

/// One cell's entry in a pattern map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternEntry {
    pub pattern: Vec<f64>,
    pub support_days: usize,
    pub accepted: bool,
    /// Worst per-day divergence seen while mining; absent for planted or
    /// inferred maps, which no observed days back.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_kl: Option<f64>,
}

/// Pattern map document: mined, planted, and inferred maps all share it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternMapDoc {
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wavelet: Option<String>,
    pub cells: BTreeMap<CellIndex, PatternEntry>,
}

impl PatternMapDoc {
    /// Mining output, rejected candidates included (flagged `accepted: false`).
    /// Cells with too few observed days to mine are not listed at all.
    pub fn from_mined(m: &MinedCity, beta: f64, wavelet: &str) -> PatternMapDoc {
        let cells = m
            .results
            .iter()
            .map(|(cell, r)| {
                let entry = PatternEntry {
                    pattern: r.pattern.pattern.values().to_vec(),
                    support_days: r.pattern.support_days,
                    accepted: r.accepted,
                    max_kl: Some(r.max_kl),
                };
                (*cell, entry)
            })
            .collect();
        PatternMapDoc { k: m.k, beta: Some(beta), wavelet: Some(wavelet.to_string()), cells }
    }

    /// A plain cell → pattern map (planted truth, baseline predictions).
    pub fn from_patterns(
        k: usize,
        patterns: &BTreeMap<CellIndex, ProbVector>,
        support_days: usize,
    ) -> PatternMapDoc {
        let cells = patterns
            .iter()
            .map(|(cell, p)| {
                let entry = PatternEntry {
                    pattern: p.values().to_vec(),
                    support_days,
                    accepted: true,
                    max_kl: None,
                };
                (*cell, entry)
            })
            .collect();
        PatternMapDoc { k, beta: None, wavelet: None, cells }
    }

    /// Model inference output; keeps each pattern's own support count.
    pub fn from_demand_patterns(
        k: usize,
        patterns: &BTreeMap<CellIndex, DemandPattern>,
    ) -> PatternMapDoc {
        let cells = patterns
            .iter()
            .map(|(cell, p)| {
                let entry = PatternEntry {
                    pattern: p.pattern.values().to_vec(),
                    support_days: p.support_days,
                    accepted: true,
                    max_kl: None,
                };
                (*cell, entry)
            })
            .collect();
        PatternMapDoc { k, beta: None, wavelet: None, cells }
    }

    /// The accepted cells as validated probability vectors.
    pub fn accepted_patterns(&self) -> Result<BTreeMap<CellIndex, ProbVector>> {
        let mut out = BTreeMap::new();
        for (cell, entry) in &self.cells {
            if !entry.accepted {
                continue;
            }
            if entry.pattern.len() != self.k {
                return Err(Error::shape(format!(
                    "cell {cell} has a length-{} pattern, document says k = {}",
                    entry.pattern.len(),
                    self.k
                )));
            }
            let p = ProbVector::from_positive(entry.pattern.clone())
                .map_err(|e| Error::invalid(format!("cell {cell}: {e}")))?;
            out.insert(*cell, p);
        }
        Ok(out)
    }
}

pub fn write_patterns_json(path: impl AsRef<Path>, doc: &PatternMapDoc) -> Result<()> {
    write_json(path.as_ref(), doc)
}

pub fn read_patterns_json(path: impl AsRef<Path>) -> Result<PatternMapDoc> {
    read_json(path.as_ref())
}

// ---------------------------------------------------------------- coPCA JSON

pub fn write_copca_json(path: impl AsRef<Path>, t: &CoPcaTransform) -> Result<()> {
    write_json(path.as_ref(), t)
}

pub fn read_copca_json(path: impl AsRef<Path>) -> Result<CoPcaTransform> {
    let path = path.as_ref();
    let t: CoPcaTransform = read_json(path)?;
    let d = t.input_dim();
    let d_prime = t.latent_dim();
    if t.column_means.len() != d
        || t.column_scales.len() != d
        || t.projection.len() != d * d_prime
        || d_prime == 0
        || d_prime > d
    {
        return Err(Error::parse(path, "transform dimensions are inconsistent"));
    }
    if t.projection.iter().any(|v| !v.is_finite()) || t.column_scales.iter().any(|s| *s <= 0.0) {
        return Err(Error::parse(path, "transform contains non-finite or non-positive entries"));
    }
    Ok(t)
}

// ------------------------------------------------------------ city meta JSON

/// Grid geometry and slot count of one city, written by `synth`/`ingest`
/// and read back by every later stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CityMeta {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
    pub rows: usize,
    pub cols: usize,
    /// Time slots per day (k).
    pub slots: usize,
}

impl CityMeta {
    pub fn from_grid(g: &GridMap, slots: usize) -> CityMeta {
        let b = g.bbox();
        CityMeta {
            min_lon: b.min.lon,
            min_lat: b.min.lat,
            max_lon: b.max.lon,
            max_lat: b.max.lat,
            rows: g.rows(),
            cols: g.cols(),
            slots,
        }
    }

    pub fn grid(&self) -> Result<GridMap> {
        let bbox = BoundingBox::new(
            GeoPoint::new(self.min_lon, self.min_lat)?,
            GeoPoint::new(self.max_lon, self.max_lat)?,
        )?;
        build_grid(bbox, self.rows, self.cols)
    }
}

pub fn write_city_meta_json(path: impl AsRef<Path>, meta: &CityMeta) -> Result<()> {
    write_json(path.as_ref(), meta)
}

pub fn read_city_meta_json(path: impl AsRef<Path>) -> Result<CityMeta> {
    let path = path.as_ref();
    let meta: CityMeta = read_json(path)?;
    meta.grid().map_err(|e| Error::parse(path, e.to_string()))?;
    if meta.slots == 0 || 86_400 % meta.slots != 0 {
        return Err(Error::parse(path, format!("slots = {} does not divide 86 400", meta.slots)));
    }
    Ok(meta)
}

// ------------------------------------------------------------ checkpoint JSON

/// A trained predictor of any method, ready for `infer`.
///
/// The attention-CNN variant echoes its full training configuration
/// (including the rng seed) next to the learned tensors and batch-norm
/// running statistics; the baselines carry what their methods need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method")]
pub enum Checkpoint {
    #[serde(rename = "alcnn")]
    Alcnn {
        config: TrainConfig,
        params: ModelParams,
        best_epoch: usize,
        best_val_klmse: f64,
    },
    #[serde(rename = "lr")]
    Lr { model: crate::baselines::RidgeModel, k: usize, norm_eps: f64 },
    #[serde(rename = "knn")]
    Knn {
        neighbors: usize,
        k: usize,
        latents: LatentMatrix,
        patterns: BTreeMap<CellIndex, Vec<f64>>,
    },
}

impl Checkpoint {
    /// The method tag as it appears on disk and in reports.
    pub fn method(&self) -> &'static str {
        match self {
            Checkpoint::Alcnn { .. } => "alcnn",
            Checkpoint::Lr { .. } => "lr",
            Checkpoint::Knn { .. } => "knn",
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Checkpoint::Alcnn { config, params, .. } => {
                config.validate()?;
                if params.branches.len() != config.scales.len() {
                    return Err(Error::shape(format!(
                        "checkpoint has {} branches for {} scales",
                        params.branches.len(),
                        config.scales.len()
                    )));
                }
                for (name, block) in params.block_names().iter().zip(params.learnable_blocks()) {
                    if block.iter().any(|v| !v.is_finite()) {
                        return Err(Error::numeric(format!("non-finite values in {name}")));
                    }
                }
                Ok(())
            }
            Checkpoint::Lr { model, k, norm_eps } => {
                WaveletFilters::by_name(&model.wavelet)?;
                if *k == 0 || model.bias.len() != k / 2 {
                    return Err(Error::shape(format!(
                        "ridge bias has {} coefficients for k = {k}",
                        model.bias.len()
                    )));
                }
                if model.weights.len() != model.input_dim * model.bias.len() {
                    return Err(Error::shape("ridge weight matrix does not match its dimensions"));
                }
                if !(model.lambda >= 0.0) || !(*norm_eps > 0.0) {
                    return Err(Error::invalid("ridge lambda must be ≥ 0 and ε positive"));
                }
                Ok(())
            }
            Checkpoint::Knn { neighbors, k, latents, patterns } => {
                if *neighbors == 0 || *neighbors > patterns.len() {
                    return Err(Error::invalid(format!(
                        "k = {neighbors} neighbors with {} training cells",
                        patterns.len()
                    )));
                }
                if latents.values.len() != latents.cells.len() * latents.dim {
                    return Err(Error::shape("latent matrix does not match its dimensions"));
                }
                for (cell, p) in patterns {
                    if p.len() != *k {
                        return Err(Error::shape(format!(
                            "cell {cell} has a length-{} pattern, checkpoint says k = {k}",
                            p.len()
                        )));
                    }
                    if latents.row_of(*cell).is_none() {
                        return Err(Error::invalid(format!("no latent row for training cell {cell}")));
                    }
                }
                Ok(())
            }
        }
    }
}

pub fn write_checkpoint_json(path: impl AsRef<Path>, c: &Checkpoint) -> Result<()> {
    c.validate()?;
    write_json(path.as_ref(), c)
}

pub fn read_checkpoint_json(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let c: Checkpoint = read_json(path)?;
    c.validate().map_err(|e| Error::parse(path, e.to_string()))?;
    Ok(c)
}

// ------------------------------------------------------------ attention JSON

/// Per-cell attention weights over the model's receptive-field scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDoc {
    pub scales: Vec<usize>,
    pub cells: BTreeMap<CellIndex, Vec<f64>>,
}

pub fn write_attention_json(path: impl AsRef<Path>, doc: &AttentionDoc) -> Result<()> {
    write_json(path.as_ref(), doc)
}

pub fn read_attention_json(path: impl AsRef<Path>) -> Result<AttentionDoc> {
    let path = path.as_ref();
    let doc: AttentionDoc = read_json(path)?;
    for (cell, weights) in &doc.cells {
        if weights.len() != doc.scales.len() {
            return Err(Error::parse(
                path,
                format!("cell {cell} has {} weights for {} scales", weights.len(), doc.scales.len()),
            ));
        }
    }
    Ok(doc)
}

// ----------------------------------------------------------------- eval JSON

/// One method's score against the shared truth map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEval {
    pub method: String,
    pub klmse: f64,
    /// Cells scored (present in both maps).
    pub cells: usize,
    /// Cells present in only one of the two maps.
    pub skipped: usize,
    /// Per-cell KL divergence (not squared).
    pub per_cell_kl: BTreeMap<CellIndex, f64>,
}

impl MethodEval {
    pub fn from_report(method: impl Into<String>, r: &crate::model::EvalReport) -> MethodEval {
        MethodEval {
            method: method.into(),
            klmse: r.klmse,
            cells: r.per_cell.len(),
            skipped: r.skipped,
            per_cell_kl: r.per_cell.iter().copied().collect(),
        }
    }
}

/// Evaluation report: one row per method, same truth map for all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDoc {
    pub k: usize,
    pub methods: Vec<MethodEval>,
}

pub fn write_eval_json(path: impl AsRef<Path>, doc: &EvalDoc) -> Result<()> {
    write_json(path.as_ref(), doc)
}

pub fn read_eval_json(path: impl AsRef<Path>) -> Result<EvalDoc> {
    read_json(path.as_ref())
}

/// The method table as CSV, one row per method.
pub fn write_eval_table_csv(path: impl AsRef<Path>, doc: &EvalDoc) -> Result<()> {
    write_csv(
        path.as_ref(),
        &["method", "klmse", "cells", "skipped"],
        doc.methods.iter().map(|m| {
            vec![m.method.clone(), m.klmse.to_string(), m.cells.to_string(), m.skipped.to_string()]
        }),
    )
}

// ----------------------------------------------------------- training log CSV

const TRAINING_LOG_HEADER: [&str; 5] = ["epoch", "train_klmse", "val_klmse", "lr", "elapsed_ms"];

pub fn write_training_log_csv(path: impl AsRef<Path>, rows: &[TrainLogRow]) -> Result<()> {
    write_csv(
        path.as_ref(),
        &TRAINING_LOG_HEADER,
        rows.iter().map(|r| {
            vec![
                r.epoch.to_string(),
                r.train_klmse.to_string(),
                r.val_klmse.to_string(),
                r.lr.to_string(),
                r.elapsed_ms.to_string(),
            ]
        }),
    )
}

pub fn read_training_log_csv(path: impl AsRef<Path>) -> Result<Vec<TrainLogRow>> {
    let path = path.as_ref();
    csv_rows(path, &TRAINING_LOG_HEADER)?
        .iter()
        .map(|rec| {
            Ok(TrainLogRow {
                epoch: num(path, rec, 0, "epoch")?,
                train_klmse: num(path, rec, 1, "train_klmse")?,
                val_klmse: num(path, rec, 2, "val_klmse")?,
                lr: num(path, rec, 3, "lr")?,
                elapsed_ms: num(path, rec, 4, "elapsed_ms")?,
            })
        })
        .collect()
}

// ----------------------------------------------------------- divergence CSVs

/// Per-cell mining outcome: worst day divergence and the accept decision.
pub fn write_divergence_csv(path: impl AsRef<Path>, m: &MinedCity) -> Result<()> {
    write_csv(
        path.as_ref(),
        &["i", "j", "support_days", "max_kl", "accepted"],
        m.results.iter().map(|(cell, r)| {
            vec![
                cell.i.to_string(),
                cell.j.to_string(),
                r.pattern.support_days.to_string(),
                r.max_kl.to_string(),
                r.accepted.to_string(),
            ]
        }),
    )
}

/// Selected pattern curves in long form (`i,j,slot,share`), for plotting.
pub fn write_pattern_curves_csv(
    path: impl AsRef<Path>,
    doc: &PatternMapDoc,
    cells: &[CellIndex],
) -> Result<()> {
    let path = path.as_ref();
    let mut rows = Vec::new();
    for cell in cells {
        let entry = doc
            .cells
            .get(cell)
            .ok_or_else(|| Error::invalid(format!("cell {cell} is not in the pattern map")))?;
        for (slot, share) in entry.pattern.iter().enumerate() {
            rows.push(vec![
                cell.i.to_string(),
                cell.j.to_string(),
                slot.to_string(),
                share.to_string(),
            ]);
        }
    }
    write_csv(path, &["i", "j", "slot", "share"], rows)
}

/// Mean attention weight per scale (`scale,mean_weight`), for bar plots.
pub fn write_attention_means_csv(
    path: impl AsRef<Path>,
    scales: &[usize],
    means: &[f64],
) -> Result<()> {
    if scales.len() != means.len() {
        return Err(Error::shape(format!("{} scales but {} means", scales.len(), means.len())));
    }
    write_csv(
        path.as_ref(),
        &["scale", "mean_weight"],
        scales.iter().zip(means).map(|(s, m)| vec![s.to_string(), m.to_string()]),
    )
}

/// One row of the divergence histogram CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
    pub fraction: f64,
    pub cumulative_fraction: f64,
}

pub fn read_divergence_histogram_csv(path: impl AsRef<Path>) -> Result<Vec<HistogramRow>> {
    let path = path.as_ref();
    csv_rows(path, &["bin_lo", "bin_hi", "count", "fraction", "cumulative_fraction"])?
        .iter()
        .map(|rec| {
            Ok(HistogramRow {
                bin_lo: num(path, rec, 0, "bin_lo")?,
                bin_hi: num(path, rec, 1, "bin_hi")?,
                count: num(path, rec, 2, "count")?,
                fraction: num(path, rec, 3, "fraction")?,
                cumulative_fraction: num(path, rec, 4, "cumulative_fraction")?,
            })
        })
        .collect()
}

/// Histogram of divergences over equal-width bins spanning [0, max]:
/// per-bin count, share, and the cumulative share of cells at or below the
/// bin's upper edge.
pub fn write_divergence_histogram_csv(
    path: impl AsRef<Path>,
    divergences: &[f64],
    bins: usize,
) -> Result<()> {
    let path = path.as_ref();
    if divergences.is_empty() {
        return Err(Error::InsufficientData("no divergences to bin".into()));
    }
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    if divergences.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::invalid("divergences must be finite and non-negative"));
    }
    let max = divergences.iter().cloned().fold(0.0, f64::max).max(1e-12);
    let width = max / bins as f64;
    // Values exactly at the top edge land in the last bin.
    let mut counts = vec![0usize; bins];
    for d in divergences {
        let b = ((d / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let total = divergences.len() as f64;
    let mut cumulative = 0usize;
    write_csv(
        path,
        &["bin_lo", "bin_hi", "count", "fraction", "cumulative_fraction"],
        counts.iter().enumerate().map(|(b, &count)| {
            cumulative += count;
            vec![
                (b as f64 * width).to_string(),
                ((b + 1) as f64 * width).to_string(),
                count.to_string(),
                (count as f64 / total).to_string(),
                (cumulative as f64 / total).to_string(),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dwt::MiningResult;
    use crate::synth::{generate_city, SyntheticCitySpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn cell(i: usize, j: usize) -> CellIndex {
        CellIndex::new(i, j)
    }

    #[test]
    fn write_atomic_replaces_content_and_leaves_no_temp_files() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("f.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        let entries: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(entries.len(), 1);
    }

    #[test]
    fn trips_roundtrip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join(TRIPS_CSV);
        let records = vec![
            TripRecord::new(
                GeoPoint::new(-122.41, 37.77).unwrap(),
                1_499_385_600,
                GeoPoint::new(-122.39, 37.79).unwrap(),
                1_499_387_000,
            )
            .unwrap(),
            TripRecord::new(
                GeoPoint::new(121.47001, 31.23002).unwrap(),
                -10,
                GeoPoint::new(121.48, 31.24).unwrap(),
                5,
            )
            .unwrap(),
        ];
        write_trips_csv(&path, &records).unwrap();
        assert_eq!(read_trips_csv(&path).unwrap(), records);
    }

    #[test]
    fn iso_and_epoch_time_columns_are_detected_independently() {
        let dir = tempdir().unwrap();
        let path = dir.path().join(TRIPS_CSV);
        let text = "start_lon,start_lat,start_time,end_lon,end_lat,end_time\n\
                    121.01,31.01,2017-07-07T00:30:00Z,121.02,31.02,1499388300\n\
                    121.03,31.03,2017-07-07T01:30:00+00:00,121.04,31.04,1499392800\n\
                    121.05,31.05,2017-07-07 02:30:00,121.06,31.06,1499396400\n";
        fs::write(&path, text).unwrap();
        let records = read_trips_csv(&path).unwrap();
        let starts: Vec<i64> = records.iter().map(|r| r.start_time).collect();
        let ends: Vec<i64> = records.iter().map(|r| r.end_time).collect();
        assert_eq!(starts, vec![1_499_387_400, 1_499_391_000, 1_499_394_600]);
        assert_eq!(ends, vec![1_499_388_300, 1_499_392_800, 1_499_396_400]);
    }

    #[test]
    fn mixed_formats_within_one_time_column_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join(TRIPS_CSV);
        let text = "start_lon,start_lat,start_time,end_lon,end_lat,end_time\n\
                    121.01,31.01,1499387400,121.02,31.02,1499388300\n\
                    121.03,31.03,2017-07-07T01:30:00Z,121.04,31.04,1499392800\n";
        fs::write(&path, text).unwrap();
        let err = read_trips_csv(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "got {err:?}");
        assert!(err.to_string().contains("first row"));
    }

    #[test]
    fn trips_header_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join(TRIPS_CSV);
        fs::write(&path, "lon,lat,when\n1,2,3\n").unwrap();
        let err = read_trips_csv(&path).unwrap_err();
        assert!(err.to_string().contains("header"), "got {err}");
    }

    #[test]
    fn city_sources_roundtrip() {
        let dir = tempdir().unwrap();
        let spec = SyntheticCitySpec { rows: 4, cols: 4, slots: 24, days: 2, ..Default::default() };
        let city = generate_city(&spec, 5).unwrap();
        write_city_sources(dir.path(), &city.sources).unwrap();
        assert_eq!(read_city_sources(dir.path()).unwrap(), city.sources);
    }

    #[test]
    fn features_csv_roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join(FEATURES_CSV);
        let f = FeatureMatrix {
            cells: vec![cell(1, 1), cell(2, 3)],
            columns: vec!["a".into(), "b".into(), "c".into()],
            values: vec![0.1 + 0.2, 1e-9, 12_345.678_9, -7.25, 1.0 / 3.0, 50_000.0],
        };
        write_features_csv(&path, &f).unwrap();
        assert_eq!(read_features_csv(&path).unwrap(), f);
    }

    #[test]
    fn features_csv_rejects_unsorted_rows() {
        let dir = tempdir().unwrap();
        let path = dir.path().join(FEATURES_CSV);
        fs::write(&path, "i,j,a\n2,1,0.5\n1,1,0.5\n").unwrap();
        let err = read_features_csv(&path).unwrap_err();
        assert!(err.to_string().contains("sorted"), "got {err}");
    }

    #[test]
    fn demand_json_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join(DEMAND_JSON);
        let mut cells = BTreeMap::new();
        cells.insert(
            cell(1, 1),
            vec![
                DemandVector { cell: cell(1, 1), day: 0, counts: vec![1, 0, 4] },
                DemandVector { cell: cell(1, 1), day: 1, counts: vec![2, 2, 2] },
            ],
        );
        cells.insert(cell(2, 3), vec![DemandVector { cell: cell(2, 3), day: 4, counts: vec![0, 9, 1] }]);
        let demand = DemandSet { k: 3, outside: 7, cells };
        write_demand_json(&path, &demand).unwrap();
        assert_eq!(read_demand_json(&path).unwrap(), demand);
    }

    #[test]
    fn demand_json_rejects_wrong_slot_count() {
        let dir = tempdir().unwrap();
        let path = dir.path().join(DEMAND_JSON);
        let text = r#"{"k": 4, "outside": 0, "cells": {"1,1": [{"day": 0, "counts": [1, 2]}]}}"#;
        fs::write(&path, text).unwrap();
        let err = read_demand_json(&path).unwrap_err();
        assert!(err.to_string().contains("k = 4"), "got {err}");
    }

    #[test]
    fn patterns_json_roundtrip_and_accepted_filter() {
        let dir = tempdir().unwrap();
        let path = dir.path().join(PATTERNS_JSON);
        let good = ProbVector::from_counts(&[5, 1, 1, 5], 0.01).unwrap();
        let bad = ProbVector::from_counts(&[9, 0, 0, 1], 0.01).unwrap();
        let mut results = BTreeMap::new();
        results.insert(
            cell(1, 2),
            MiningResult {
                pattern: DemandPattern { cell: cell(1, 2), pattern: good.clone(), support_days: 6 },
                accepted: true,
                max_kl: 0.04,
            },
        );
        results.insert(
            cell(3, 1),
            MiningResult {
                pattern: DemandPattern { cell: cell(3, 1), pattern: bad, support_days: 6 },
                accepted: false,
                max_kl: 0.93,
            },
        );
        let mined = MinedCity { k: 4, results, insufficient: vec![] };
        let doc = PatternMapDoc::from_mined(&mined, 0.11, "db2");
        write_patterns_json(&path, &doc).unwrap();
        let back = read_patterns_json(&path).unwrap();
        assert_eq!(back, doc);
        let accepted = back.accepted_patterns().unwrap();
        assert_eq!(accepted.len(), 1);
        assert_eq!(accepted[&cell(1, 2)].values(), good.values());
    }

    #[test]
    fn copca_json_roundtrip_and_dimension_check() {
        let dir = tempdir().unwrap();
        let path = dir.path().join(COPCA_JSON);
        let t = CoPcaTransform {
            columns: vec!["a".into(), "b".into(), "c".into()],
            column_means: vec![0.5, -1.0, 3.0],
            column_scales: vec![1.0, 2.0, 0.5],
            projection: vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            explained_variance: vec![2.0, 1.0],
        };
        write_copca_json(&path, &t).unwrap();
        assert_eq!(read_copca_json(&path).unwrap(), t);

        let mut broken = t.clone();
        broken.projection.truncate(5);
        write_copca_json(&path, &broken).unwrap();
        let err = read_copca_json(&path).unwrap_err();
        assert!(err.to_string().contains("inconsistent"), "got {err}");
    }

    #[test]
    fn city_meta_roundtrip_rebuilds_the_grid() {
        let dir = tempdir().unwrap();
        let path = dir.path().join(CITY_META_JSON);
        let bbox = BoundingBox::new(
            GeoPoint::new(121.0, 31.0).unwrap(),
            GeoPoint::new(121.2, 31.15).unwrap(),
        )
        .unwrap();
        let g = build_grid(bbox, 3, 4).unwrap();
        let meta = CityMeta::from_grid(&g, 48);
        write_city_meta_json(&path, &meta).unwrap();
        let back = read_city_meta_json(&path).unwrap();
        assert_eq!(back, meta);
        assert_eq!(back.grid().unwrap(), g);

        let invalid = CityMeta { slots: 7, ..meta };
        write_city_meta_json(&path, &invalid).unwrap();
        assert!(read_city_meta_json(&path).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_for_every_method() {
        let dir = tempdir().unwrap();
        let path = dir.path().join(CHECKPOINT_JSON);
        let cfg = TrainConfig {
            scales: vec![1, 3],
            filters: 2,
            hidden: 4,
            wavelet: "haar".into(),
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ModelParams::init(&cfg, 3, 8, &mut rng).unwrap();
        let alcnn = Checkpoint::Alcnn {
            config: cfg,
            params,
            best_epoch: 12,
            best_val_klmse: 0.034,
        };
        let lr = Checkpoint::Lr {
            model: crate::baselines::RidgeModel {
                weights: vec![0.25; 12],
                bias: vec![0.1; 4],
                lambda: 0.1,
                input_dim: 3,
                wavelet: "db2".into(),
            },
            k: 8,
            norm_eps: 1e-6,
        };
        let latents = LatentMatrix {
            cells: vec![cell(1, 1), cell(1, 2)],
            dim: 2,
            values: vec![1.0, 0.0, 0.0, 1.0],
        };
        let mut patterns = BTreeMap::new();
        patterns.insert(cell(1, 1), vec![0.25; 4]);
        patterns.insert(cell(1, 2), vec![0.1, 0.2, 0.3, 0.4]);
        let knn = Checkpoint::Knn { neighbors: 2, k: 4, latents, patterns };

        for c in [alcnn, lr, knn] {
            write_checkpoint_json(&path, &c).unwrap();
            assert_eq!(read_checkpoint_json(&path).unwrap(), c);
        }
    }

    #[test]
    fn checkpoint_writes_are_byte_identical() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        let cfg = TrainConfig {
            scales: vec![1, 3],
            filters: 2,
            hidden: 4,
            wavelet: "haar".into(),
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = ModelParams::init(&cfg, 3, 8, &mut rng).unwrap();
        let c = Checkpoint::Alcnn { config: cfg, params, best_epoch: 1, best_val_klmse: 0.5 };
        write_checkpoint_json(&a, &c).unwrap();
        write_checkpoint_json(&b, &c).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn invalid_checkpoints_are_refused() {
        let dir = tempdir().unwrap();
        let path = dir.path().join(CHECKPOINT_JSON);
        let lr = Checkpoint::Lr {
            model: crate::baselines::RidgeModel {
                weights: vec![0.25; 12],
                bias: vec![0.1; 3],
                lambda: 0.1,
                input_dim: 3,
                wavelet: "db2".into(),
            },
            k: 8,
            norm_eps: 1e-6,
        };
        assert!(write_checkpoint_json(&path, &lr).is_err());
        fs::write(&path, r#"{"method": "boosted-trees"}"#).unwrap();
        assert!(read_checkpoint_json(&path).is_err());
    }

    #[test]
    fn attention_doc_rejects_mismatched_weight_lengths() {
        let dir = tempdir().unwrap();
        let path = dir.path().join(ATTENTION_JSON);
        let mut cells = BTreeMap::new();
        cells.insert(cell(1, 1), vec![0.5, 0.5]);
        cells.insert(cell(1, 2), vec![1.0]);
        let doc = AttentionDoc { scales: vec![1, 3], cells };
        write_attention_json(&path, &doc).unwrap();
        let err = read_attention_json(&path).unwrap_err();
        assert!(err.to_string().contains("weights"), "got {err}");
    }

    #[test]
    fn eval_doc_roundtrip_and_table_csv() {
        let dir = tempdir().unwrap();
        let json = dir.path().join(EVAL_JSON);
        let table = dir.path().join(EVAL_TABLE_CSV);
        let mut per_cell = BTreeMap::new();
        per_cell.insert(cell(1, 1), 0.2);
        per_cell.insert(cell(2, 2), 0.4);
        let doc = EvalDoc {
            k: 4,
            methods: vec![
                MethodEval {
                    method: "alcnn".into(),
                    klmse: 0.1,
                    cells: 2,
                    skipped: 0,
                    per_cell_kl: per_cell.clone(),
                },
                MethodEval { method: "lr".into(), klmse: 0.3, cells: 2, skipped: 1, per_cell_kl: per_cell },
            ],
        };
        write_eval_json(&json, &doc).unwrap();
        assert_eq!(read_eval_json(&json).unwrap(), doc);
        write_eval_table_csv(&table, &doc).unwrap();
        let text = fs::read_to_string(&table).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "method,klmse,cells,skipped");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("alcnn,0.1,2,0"));
    }

    #[test]
    fn training_log_roundtrip_and_exact_header() {
        let dir = tempdir().unwrap();
        let path = dir.path().join(TRAINING_LOG_CSV);
        let rows = vec![
            TrainLogRow { epoch: 1, train_klmse: 0.5, val_klmse: 0.625, lr: 0.001, elapsed_ms: 12 },
            TrainLogRow { epoch: 2, train_klmse: 0.25, val_klmse: 0.5, lr: 0.001, elapsed_ms: 11 },
        ];
        write_training_log_csv(&path, &rows).unwrap();
        assert_eq!(read_training_log_csv(&path).unwrap(), rows);
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "epoch,train_klmse,val_klmse,lr,elapsed_ms");
    }

    #[test]
    fn divergence_histogram_fractions_sum_to_one() {
        let dir = tempdir().unwrap();
        let path = dir.path().join(DIVERGENCE_HISTOGRAM_CSV);
        write_divergence_histogram_csv(&path, &[0.0, 0.05, 0.1, 0.2], 4).unwrap();
        let rows = csv_rows(&path, &["bin_lo", "bin_hi", "count", "fraction", "cumulative_fraction"]).unwrap();
        assert_eq!(rows.len(), 4);
        let counts: usize = rows.iter().map(|r| r.get(2).unwrap().parse::<usize>().unwrap()).sum();
        assert_eq!(counts, 4);
        let fractions: f64 = rows.iter().map(|r| r.get(3).unwrap().parse::<f64>().unwrap()).sum();
        assert!((fractions - 1.0).abs() < 1e-12);
        let last: f64 = rows.last().unwrap().get(4).unwrap().parse().unwrap();
        assert_eq!(last, 1.0);
        let parsed = read_divergence_histogram_csv(&path).unwrap();
        assert_eq!(parsed.len(), 4);
        assert_eq!(parsed[3].cumulative_fraction, 1.0);
        assert!(write_divergence_histogram_csv(&path, &[], 4).is_err());
    }

    #[test]
    fn pattern_curves_and_attention_means_csvs() {
        let dir = tempdir().unwrap();
        let curves = dir.path().join("curves.csv");
        let means = dir.path().join("means.csv");
        let mut patterns = BTreeMap::new();
        patterns.insert(cell(1, 1), ProbVector::uniform(3).unwrap());
        patterns.insert(cell(2, 2), ProbVector::from_counts(&[3, 1, 0], 0.01).unwrap());
        let doc = PatternMapDoc::from_patterns(3, &patterns, 5);
        write_pattern_curves_csv(&curves, &doc, &[cell(2, 2)]).unwrap();
        let text = fs::read_to_string(&curves).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("i,j,slot,share\n2,2,0,"));
        assert!(write_pattern_curves_csv(&curves, &doc, &[cell(9, 9)]).is_err());

        write_attention_means_csv(&means, &[1, 3, 5], &[0.2, 0.3, 0.5]).unwrap();
        let text = fs::read_to_string(&means).unwrap();
        assert_eq!(text, "scale,mean_weight\n1,0.2\n3,0.3\n5,0.5\n");
        assert!(write_attention_means_csv(&means, &[1], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn divergence_csv_lists_every_mined_cell() {
        let dir = tempdir().unwrap();
        let path = dir.path().join(DIVERGENCE_CSV);
        let p = ProbVector::uniform(4).unwrap();
        let mut results = BTreeMap::new();
        for (i, accepted) in [(1, true), (2, false)] {
            results.insert(
                cell(i, 1),
                MiningResult {
                    pattern: DemandPattern { cell: cell(i, 1), pattern: p.clone(), support_days: 3 },
                    accepted,
                    max_kl: 0.1 * i as f64,
                },
            );
        }
        let mined = MinedCity { k: 4, results, insufficient: vec![] };
        write_divergence_csv(&path, &mined).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("2,1,3,0.2,false"));
    }
}
