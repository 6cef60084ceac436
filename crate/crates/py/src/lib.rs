//! Python bindings for the cross-city demand pattern pipeline.
//!
//! Everything crosses the boundary as plain Python values: cells are 1-based
//! `(i, j)` tuples, distributions and feature rows are lists of floats, city
//! tensors are `rows × cols × d′` nested lists. The heavy lifting stays in
//! `alcnn_core`; this layer only converts and reports errors as `ValueError`
//! (or `IOError` for file trouble).

use std::collections::BTreeMap;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use alcnn_core::baselines::{knn_infer_city, ridge_infer_city};
use alcnn_core::copca::{self, CoPcaTransform, LatentMatrix};
use alcnn_core::dwt::{
    dwt_level1, idwt as idwt_core, idwt_lowpass as idwt_lowpass_core,
    mine_pattern as mine_pattern_core, WaveletFilters,
};
use alcnn_core::features::{build_feature_matrix, FeatureConfig, FeatureMatrix};
use alcnn_core::grid::{
    build_grid, kl_divergence as kl_core, BoundingBox, CellIndex, DemandVector, GeoPoint, GridMap,
    Location, ProbVector,
};
use alcnn_core::io::{read_checkpoint_json, write_checkpoint_json, Checkpoint};
use alcnn_core::model::{
    build_training_instances, evaluate as evaluate_core, infer_city, train as train_core,
    LatentFeatureTensor, ModelParams, TrainConfig,
};
use alcnn_core::synth::{generate_city, GeneratedCity, SyntheticCitySpec};

fn err(e: alcnn_core::Error) -> PyErr {
    match e {
        alcnn_core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

type CellKey = (usize, usize);

fn to_key(c: CellIndex) -> CellKey {
    (c.i, c.j)
}

fn prob(values: Vec<f64>) -> PyResult<ProbVector> {
    ProbVector::from_positive(values).map_err(err)
}

fn pattern_map(py: BTreeMap<CellKey, Vec<f64>>) -> PyResult<BTreeMap<CellIndex, ProbVector>> {
    py.into_iter().map(|((i, j), v)| Ok((CellIndex::new(i, j), prob(v)?))).collect()
}

/// Feature rows as a matrix with a synthetic schema (`c0`, `c1`, ...); the
/// Python side never names columns, it just keeps row layouts consistent.
fn rows_to_matrix(rows: &[Vec<f64>], columns: Option<&[String]>) -> PyResult<FeatureMatrix> {
    let d = match rows.first() {
        Some(r) if !r.is_empty() => r.len(),
        _ => return Err(PyValueError::new_err("need at least one non-empty feature row")),
    };
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("feature rows have differing lengths"));
    }
    let columns = match columns {
        Some(c) if c.len() != d => {
            return Err(PyValueError::new_err(format!(
                "transform was fitted on {} columns, rows have {d}",
                c.len()
            )))
        }
        Some(c) => c.to_vec(),
        None => (0..d).map(|c| format!("c{c}")).collect(),
    };
    Ok(FeatureMatrix {
        cells: (1..=rows.len()).map(|r| CellIndex::new(1, r)).collect(),
        columns,
        values: rows.concat(),
    })
}

fn latent_rows(l: &LatentMatrix) -> Vec<Vec<f64>> {
    (0..l.n_rows()).map(|r| l.row(r).to_vec()).collect()
}

/// Flatten a `rows × cols × d′` nested list, checking it is rectangular.
fn flatten_nested(t: &[Vec<Vec<f64>>]) -> PyResult<(usize, usize, usize, Vec<f64>)> {
    let rows = t.len();
    let cols = t.first().map(|r| r.len()).unwrap_or(0);
    let dim = t.first().and_then(|r| r.first()).map(|c| c.len()).unwrap_or(0);
    if rows == 0 || cols == 0 || dim == 0 {
        return Err(PyValueError::new_err("tensor must be a non-empty rows × cols × d′ nesting"));
    }
    let mut values = Vec::with_capacity(rows * cols * dim);
    for row in t {
        if row.len() != cols {
            return Err(PyValueError::new_err("tensor rows have differing lengths"));
        }
        for cell in row {
            if cell.len() != dim {
                return Err(PyValueError::new_err("tensor cells have differing feature lengths"));
            }
            values.extend_from_slice(cell);
        }
    }
    Ok((rows, cols, dim, values))
}

/// A `rows × cols × d′` nested list as a latent tensor.
fn tensor_from_nested(t: &[Vec<Vec<f64>>]) -> PyResult<LatentFeatureTensor> {
    let (rows, cols, dim, values) = flatten_nested(t)?;
    LatentFeatureTensor::new(rows, cols, dim, values).map_err(err)
}

/// The same nested tensor as a latent matrix with 1-based row-major cells.
fn latents_from_nested(t: &[Vec<Vec<f64>>]) -> PyResult<LatentMatrix> {
    let (rows, cols, dim, values) = flatten_nested(t)?;
    let mut cells = Vec::with_capacity(rows * cols);
    for i in 1..=rows {
        for j in 1..=cols {
            cells.push(CellIndex::new(i, j));
        }
    }
    Ok(LatentMatrix { cells, dim, values })
}

/// Normalize slot counts into a strictly positive distribution.
#[pyfunction]
#[pyo3(signature = (counts, eps = 1e-6))]
fn normalize(counts: Vec<u32>, eps: f64) -> PyResult<Vec<f64>> {
    Ok(ProbVector::from_counts(&counts, eps).map_err(err)?.into_vec())
}

/// KL divergence of `p` from `q`, in nats.
#[pyfunction]
fn kl_divergence(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    kl_core(&prob(p)?, &prob(q)?).map_err(err)
}

/// One level of the discrete wavelet transform: `(approximation, detail)`.
#[pyfunction]
#[pyo3(signature = (x, wavelet = "db2"))]
fn dwt(x: Vec<f64>, wavelet: &str) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let f = WaveletFilters::by_name(wavelet).map_err(err)?;
    dwt_level1(&x, &f).map_err(err)
}

/// Inverse of [`dwt`].
#[pyfunction]
#[pyo3(signature = (approx, detail, wavelet = "db2"))]
fn idwt(approx: Vec<f64>, detail: Vec<f64>, wavelet: &str) -> PyResult<Vec<f64>> {
    let f = WaveletFilters::by_name(wavelet).map_err(err)?;
    idwt_core(&approx, &detail, &f).map_err(err)
}

/// Reconstruction from approximation coefficients alone (low-pass smoothing).
#[pyfunction]
#[pyo3(signature = (approx, wavelet = "db2"))]
fn idwt_lowpass(approx: Vec<f64>, wavelet: &str) -> PyResult<Vec<f64>> {
    let f = WaveletFilters::by_name(wavelet).map_err(err)?;
    Ok(idwt_lowpass_core(&approx, &f))
}

/// Mine one cell's stable daily pattern from per-day slot counts.
///
/// Returns `(pattern, accepted, max_kl)`: the smoothed candidate, whether
/// every day stayed within `beta` of it, and the worst day's divergence.
#[pyfunction]
#[pyo3(signature = (days, beta = 0.11, eps = 1e-6, wavelet = "db2"))]
fn mine_pattern(
    days: Vec<Vec<u32>>,
    beta: f64,
    eps: f64,
    wavelet: &str,
) -> PyResult<(Vec<f64>, bool, f64)> {
    let f = WaveletFilters::by_name(wavelet).map_err(err)?;
    let demands: Vec<DemandVector> = days
        .into_iter()
        .enumerate()
        .map(|(d, counts)| DemandVector { cell: CellIndex::new(1, 1), day: d as i64, counts })
        .collect();
    let r = mine_pattern_core(&demands, &f, beta, eps).map_err(err)?;
    Ok((r.pattern.pattern.into_vec(), r.accepted, r.max_kl))
}

/// The four demand archetypes over `k` slots as `(name, pattern)` pairs.
#[pyfunction]
fn archetypes(k: usize) -> PyResult<Vec<(String, Vec<f64>)>> {
    Ok(alcnn_core::synth::archetypes(k)
        .map_err(err)?
        .into_iter()
        .map(|(name, p)| (name, p.into_vec()))
        .collect())
}

/// Mean squared KL of predictions against truth over the shared cells.
///
/// Returns `(klmse, skipped)` where `skipped` counts cells present on only
/// one side.
#[pyfunction]
fn evaluate(
    predicted: BTreeMap<CellKey, Vec<f64>>,
    truth: BTreeMap<CellKey, Vec<f64>>,
) -> PyResult<(f64, usize)> {
    let rep = evaluate_core(&pattern_map(predicted)?, &pattern_map(truth)?).map_err(err)?;
    Ok((rep.klmse, rep.skipped))
}

/// Ridge-regression transfer: fit latent→pattern on the source city, predict
/// every target cell. Tensors are `rows × cols × d′` nested lists.
#[pyfunction]
#[pyo3(signature = (source_tensor, source_patterns, target_tensor, l2 = 0.1, wavelet = "db2"))]
fn ridge_infer(
    source_tensor: Vec<Vec<Vec<f64>>>,
    source_patterns: BTreeMap<CellKey, Vec<f64>>,
    target_tensor: Vec<Vec<Vec<f64>>>,
    l2: f64,
    wavelet: &str,
) -> PyResult<BTreeMap<CellKey, Vec<f64>>> {
    let ls = latents_from_nested(&source_tensor)?;
    let lt = latents_from_nested(&target_tensor)?;
    let patterns = pattern_map(source_patterns)?;
    let (_, preds) = ridge_infer_city(&ls, &patterns, &lt, l2, wavelet, 1e-6).map_err(err)?;
    Ok(preds.into_iter().map(|(c, p)| (to_key(c), p.into_vec())).collect())
}

/// K-nearest-neighbour transfer in latent space.
#[pyfunction]
#[pyo3(signature = (source_tensor, source_patterns, target_tensor, k = 10))]
fn knn_infer(
    source_tensor: Vec<Vec<Vec<f64>>>,
    source_patterns: BTreeMap<CellKey, Vec<f64>>,
    target_tensor: Vec<Vec<Vec<f64>>>,
    k: usize,
) -> PyResult<BTreeMap<CellKey, Vec<f64>>> {
    let ls = latents_from_nested(&source_tensor)?;
    let lt = latents_from_nested(&target_tensor)?;
    let patterns = pattern_map(source_patterns)?;
    let (preds, _) = knn_infer_city(&ls, &patterns, &lt, k).map_err(err)?;
    Ok(preds.into_iter().map(|(c, p)| (to_key(c), p.into_vec())).collect())
}

/// Uniform lon/lat grid over a bounding box.
#[pyclass]
struct Grid {
    inner: GridMap,
}

#[pymethods]
impl Grid {
    #[new]
    fn new(
        min_lon: f64,
        min_lat: f64,
        max_lon: f64,
        max_lat: f64,
        rows: usize,
        cols: usize,
    ) -> PyResult<Self> {
        let bbox = BoundingBox::new(
            GeoPoint::new(min_lon, min_lat).map_err(err)?,
            GeoPoint::new(max_lon, max_lat).map_err(err)?,
        )
        .map_err(err)?;
        Ok(Grid { inner: build_grid(bbox, rows, cols).map_err(err)? })
    }

    #[getter]
    fn rows(&self) -> usize {
        self.inner.rows()
    }

    #[getter]
    fn cols(&self) -> usize {
        self.inner.cols()
    }

    /// 1-based `(i, j)` of the cell containing a point, or `None`.
    fn locate(&self, lon: f64, lat: f64) -> PyResult<Option<CellKey>> {
        let p = GeoPoint::new(lon, lat).map_err(err)?;
        Ok(match self.inner.locate(p) {
            Location::Cell(c) => Some(to_key(c)),
            Location::Outside => None,
        })
    }

    /// Center of a cell as `(lon, lat)`.
    fn cell_center(&self, i: usize, j: usize) -> PyResult<(f64, f64)> {
        let c = self.inner.cell_center(CellIndex::new(i, j)).map_err(err)?;
        Ok((c.lon, c.lat))
    }

    fn __repr__(&self) -> String {
        format!("Grid(rows={}, cols={})", self.inner.rows(), self.inner.cols())
    }
}

/// A seeded synthetic city with known planted demand patterns.
#[pyclass]
struct SyntheticCity {
    inner: GeneratedCity,
}

#[pymethods]
impl SyntheticCity {
    #[staticmethod]
    #[pyo3(signature = (seed, *, rows = 20, cols = 20, slots = 48, days = 28, base_intensity = 200.0, transit = 12, business = 6, parks = 8))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        seed: u64,
        rows: usize,
        cols: usize,
        slots: usize,
        days: usize,
        base_intensity: f64,
        transit: usize,
        business: usize,
        parks: usize,
    ) -> PyResult<Self> {
        let spec = SyntheticCitySpec {
            rows,
            cols,
            slots,
            days,
            seed,
            base_intensity,
            transit_count: transit,
            business_count: business,
            park_count: parks,
            ..Default::default()
        };
        Ok(SyntheticCity { inner: generate_city(&spec, seed).map_err(err)? })
    }

    #[getter]
    fn rows(&self) -> usize {
        self.inner.spec.rows
    }

    #[getter]
    fn cols(&self) -> usize {
        self.inner.spec.cols
    }

    #[getter]
    fn slots(&self) -> usize {
        self.inner.spec.slots
    }

    /// Planted per-cell patterns keyed by `(i, j)`.
    fn planted(&self) -> BTreeMap<CellKey, Vec<f64>> {
        self.inner.planted.iter().map(|(c, p)| (to_key(*c), p.values().to_vec())).collect()
    }

    /// Expected trip records per day for each cell.
    fn intensities(&self) -> BTreeMap<CellKey, f64> {
        self.inner.intensities.iter().map(|(c, v)| (to_key(*c), *v)).collect()
    }

    /// Geographic feature rows, one per cell in row-major order.
    fn features(&self) -> PyResult<Vec<Vec<f64>>> {
        let cfg = FeatureConfig::default();
        let m = build_feature_matrix(&self.inner.sources, &self.inner.grid, &cfg).map_err(err)?;
        Ok((0..m.n_rows()).map(|r| m.row(r).to_vec()).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "SyntheticCity(seed={}, rows={}, cols={}, slots={})",
            self.inner.spec.seed, self.inner.spec.rows, self.inner.spec.cols, self.inner.spec.slots
        )
    }
}

/// A joint PCA fitted on two cities' stacked feature rows.
#[pyclass]
struct CoPca {
    inner: CoPcaTransform,
}

#[pymethods]
impl CoPca {
    /// Fit on both cities at once; returns
    /// `(transform, source_latents, target_latents)`.
    #[staticmethod]
    fn fit(
        source: Vec<Vec<f64>>,
        target: Vec<Vec<f64>>,
        d_prime: usize,
    ) -> PyResult<(CoPca, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let fs = rows_to_matrix(&source, None)?;
        let ft = rows_to_matrix(&target, None)?;
        let (t, ls, lt) = copca::fit_joint(&fs, &ft, d_prime).map_err(err)?;
        Ok((CoPca { inner: t }, latent_rows(&ls), latent_rows(&lt)))
    }

    /// Project new rows with the fitted transform.
    fn transform(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let f = rows_to_matrix(&rows, Some(&self.inner.columns))?;
        Ok(latent_rows(&copca::transform(&self.inner, &f).map_err(err)?))
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    /// Eigenvalues of the kept components, largest first.
    #[getter]
    fn explained_variance(&self) -> Vec<f64> {
        self.inner.explained_variance.clone()
    }

    fn __repr__(&self) -> String {
        format!("CoPca(input_dim={}, latent_dim={})", self.input_dim(), self.latent_dim())
    }
}

/// A trained multi-scale attention network, ready for inference.
#[pyclass]
struct Model {
    params: ModelParams,
    config: TrainConfig,
    best_epoch: usize,
    best_val_klmse: f64,
}

#[pymethods]
impl Model {
    /// Train on a `rows × cols × d′` latent tensor and per-cell target
    /// patterns keyed by `(i, j)`. Cells missing a target are skipped.
    #[staticmethod]
    #[pyo3(signature = (tensor, targets, *, scales = vec![1, 3, 5, 7, 9], filters = 32, hidden = 64, batch_size = 128, learning_rate = 0.001, dropout = 0.1, max_epochs = 2000, patience = 50, validation_fraction = 0.2, wavelet = String::from("db2"), seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        tensor: Vec<Vec<Vec<f64>>>,
        targets: BTreeMap<CellKey, Vec<f64>>,
        scales: Vec<usize>,
        filters: usize,
        hidden: usize,
        batch_size: usize,
        learning_rate: f64,
        dropout: f64,
        max_epochs: usize,
        patience: usize,
        validation_fraction: f64,
        wavelet: String,
        seed: u64,
    ) -> PyResult<Model> {
        let t = tensor_from_nested(&tensor)?;
        let cfg = TrainConfig {
            scales,
            filters,
            hidden,
            batch_size,
            learning_rate,
            dropout,
            max_epochs,
            patience,
            validation_fraction,
            wavelet,
            rng_seed: seed,
            ..Default::default()
        };
        let targets = pattern_map(targets)?;
        let instances = build_training_instances(&t, &targets, &cfg.scales).map_err(err)?;
        let out = train_core(&instances, &cfg).map_err(err)?;
        Ok(Model {
            params: out.params,
            config: cfg,
            best_epoch: out.best_epoch,
            best_val_klmse: out.best_val_klmse,
        })
    }

    /// Predicted pattern for every cell of a latent tensor.
    fn infer(&self, tensor: Vec<Vec<Vec<f64>>>) -> PyResult<BTreeMap<CellKey, Vec<f64>>> {
        let t = tensor_from_nested(&tensor)?;
        let inferred = infer_city(&self.params, &t, self.config.norm_eps).map_err(err)?;
        Ok(inferred
            .patterns
            .into_iter()
            .map(|(c, p)| (to_key(c), p.pattern.into_vec()))
            .collect())
    }

    /// Attention weights per cell, one per scale branch.
    fn attention(&self, tensor: Vec<Vec<Vec<f64>>>) -> PyResult<BTreeMap<CellKey, Vec<f64>>> {
        let t = tensor_from_nested(&tensor)?;
        let inferred = infer_city(&self.params, &t, self.config.norm_eps).map_err(err)?;
        Ok(inferred.attention.into_iter().map(|(c, a)| (to_key(c), a)).collect())
    }

    #[getter]
    fn scales(&self) -> Vec<usize> {
        self.params.scales()
    }

    #[getter]
    fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    #[getter]
    fn best_val_klmse(&self) -> f64 {
        self.best_val_klmse
    }

    /// Write the model as a checkpoint JSON file.
    fn save(&self, path: &str) -> PyResult<()> {
        let c = Checkpoint::Alcnn {
            config: self.config.clone(),
            params: self.params.clone(),
            best_epoch: self.best_epoch,
            best_val_klmse: self.best_val_klmse,
        };
        write_checkpoint_json(path, &c).map_err(err)
    }

    /// Load a checkpoint written by [`save`].
    #[staticmethod]
    fn load(path: &str) -> PyResult<Model> {
        match read_checkpoint_json(path).map_err(err)? {
            Checkpoint::Alcnn { config, params, best_epoch, best_val_klmse } => {
                Ok(Model { params, config, best_epoch, best_val_klmse })
            }
            other => Err(PyValueError::new_err(format!(
                "checkpoint holds a {} model, not an attention network",
                other.method()
            ))),
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(scales={:?}, best_epoch={}, best_val_klmse={:.6})",
            self.params.scales(),
            self.best_epoch,
            self.best_val_klmse
        )
    }
}

/// Cross-city dockless bike demand pattern inference.
#[pymodule]
fn alcnn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(dwt, m)?)?;
    m.add_function(wrap_pyfunction!(idwt, m)?)?;
    m.add_function(wrap_pyfunction!(idwt_lowpass, m)?)?;
    m.add_function(wrap_pyfunction!(mine_pattern, m)?)?;
    m.add_function(wrap_pyfunction!(archetypes, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(ridge_infer, m)?)?;
    m.add_function(wrap_pyfunction!(knn_infer, m)?)?;
    m.add_class::<Grid>()?;
    m.add_class::<SyntheticCity>()?;
    m.add_class::<CoPca>()?;
    m.add_class::<Model>()?;
    Ok(())
}
