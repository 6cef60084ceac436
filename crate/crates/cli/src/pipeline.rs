//! Subcommand implementations.
//!
//! Every subcommand resolves its inputs as flag → config value → documented
//! default, creates its output directory, and writes each artifact
//! atomically, so rerunning with the same inputs and seed reproduces the
//! same files byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use alcnn_core::baselines::{encode_target, knn_infer_city, ridge_fit};
use alcnn_core::copca::{fit_joint, transform};
use alcnn_core::dwt::{mine_city, WaveletFilters};
use alcnn_core::features::{build_feature_matrix, FeatureConfig};
use alcnn_core::grid::{aggregate_demands, CellIndex, GridMap, ProbVector};
use alcnn_core::io::{self, AttentionDoc, Checkpoint, CityMeta, EvalDoc, MethodEval, PatternMapDoc};
use alcnn_core::model::{build_training_instances, evaluate, infer_city, train, LatentFeatureTensor};
use alcnn_core::synth::{generate_city, sample_records, SyntheticCitySpec};
use alcnn_core::{Error, Result};

use crate::config::{pick, require, PipelineConfig};
use crate::{svg, Command, Method};
use crate::{EvalArgs, FeaturesArgs, IngestArgs, InferArgs, MineArgs, PlotArgs, SynthArgs, TrainArgs};

/// Seed salt separating the target city's layout from the source's.
const TARGET_SALT: u64 = 0x9E37_79B9_7F4A_7C15;
/// Seed salt separating trip sampling from city generation.
const TRIPS_SALT: u64 = 0x517C_C1B7_2722_0A95;

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(args) => synth(args),
        Command::Ingest(args) => ingest(args),
        Command::Features(args) => features(args),
        Command::Mine(args) => mine(args),
        Command::Train(args) => train_cmd(args),
        Command::Infer(args) => infer(args),
        Command::Eval(args) => eval_cmd(args),
        Command::Plot(args) => plot(args),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Read a city directory's metadata and rebuild its grid.
fn load_city(dir: &Path) -> Result<(CityMeta, GridMap)> {
    let meta = io::read_city_meta_json(dir.join(io::CITY_META_JSON))?;
    let grid = meta.grid()?;
    Ok((meta, grid))
}

fn synth(args: SynthArgs) -> Result<()> {
    let cfg = PipelineConfig::load(args.config.as_deref())?;
    let out = require(args.out, cfg.out, "out")?;
    let seed = pick(args.seed, cfg.seed, 7);
    let spec = SyntheticCitySpec {
        rows: pick(args.rows, cfg.rows, 20),
        cols: pick(args.cols, cfg.cols, 20),
        slots: pick(args.slots, cfg.slots, 48),
        days: pick(args.days, cfg.days, 28),
        seed,
        ..SyntheticCitySpec::default()
    };
    for (name, city_seed) in [("source", seed), ("target", seed ^ TARGET_SALT)] {
        let spec = SyntheticCitySpec { seed: city_seed, ..spec.clone() };
        let city = generate_city(&spec, city_seed)?;
        let dir = out.join(name);
        ensure_dir(&dir)?;
        let meta = CityMeta::from_grid(&city.grid, spec.slots);
        io::write_city_meta_json(dir.join(io::CITY_META_JSON), &meta)?;
        io::write_city_sources(&dir, &city.sources)?;
        let truth = PatternMapDoc::from_patterns(spec.slots, &city.planted, spec.days);
        io::write_patterns_json(dir.join(io::PLANTED_PATTERNS_JSON), &truth)?;
        if name == "source" {
            let records = sample_records(
                &city.planted,
                &city.intensities,
                &city.grid,
                spec.days,
                city_seed ^ TRIPS_SALT,
            )?;
            io::write_trips_csv(dir.join(io::TRIPS_CSV), &records)?;
            println!(
                "{name}: {}x{} grid, {} slots, {} days, {} trip records",
                spec.rows,
                spec.cols,
                spec.slots,
                spec.days,
                records.len()
            );
        } else {
            println!("{name}: {}x{} grid, {} slots, no trip records", spec.rows, spec.cols, spec.slots);
        }
    }
    Ok(())
}

fn ingest(args: IngestArgs) -> Result<()> {
    let cfg = PipelineConfig::load(args.config.as_deref())?;
    let city_dir = require(args.city_dir, cfg.city_dir, "city-dir")?;
    let trips = args.trips.unwrap_or_else(|| city_dir.join(io::TRIPS_CSV));
    let out = pick(args.out, cfg.out, city_dir.clone());
    let (meta, grid) = load_city(&city_dir)?;
    let k = pick(args.k, cfg.slots, meta.slots);
    let utc_offset = pick(args.utc_offset, cfg.utc_offset, 0);
    let records = io::read_trips_csv(&trips)?;
    let demands = aggregate_demands(&records, &grid, k, utc_offset)?;
    ensure_dir(&out)?;
    io::write_demand_json(out.join(io::DEMAND_JSON), &demands)?;
    println!(
        "{} records into {} cells ({} slots, {} starts outside the grid)",
        records.len(),
        demands.cells.len(),
        k,
        demands.outside
    );
    Ok(())
}

fn features(args: FeaturesArgs) -> Result<()> {
    let cfg = PipelineConfig::load(args.config.as_deref())?;
    let city_dir = require(args.city_dir, cfg.city_dir, "city-dir")?;
    let out = pick(args.out, cfg.out, city_dir.clone());
    let fcfg = FeatureConfig {
        poi_categories: pick(args.poi_categories, cfg.poi_categories, 17),
        road_levels: pick(args.road_levels, cfg.road_levels, 29),
        sentinel_distance_m: pick(args.sentinel_distance_m, cfg.sentinel_distance_m, 50_000.0),
    };
    let (_, grid) = load_city(&city_dir)?;
    let sources = io::read_city_sources(&city_dir)?;
    let matrix = build_feature_matrix(&sources, &grid, &fcfg)?;
    ensure_dir(&out)?;
    io::write_features_csv(out.join(io::FEATURES_CSV), &matrix)?;
    println!("{} cells x {} feature columns", matrix.n_rows(), matrix.n_cols());
    Ok(())
}

fn mine(args: MineArgs) -> Result<()> {
    let cfg = PipelineConfig::load(args.config.as_deref())?;
    let demand = require(
        args.demand,
        cfg.source_dir.as_ref().map(|d| d.join(io::DEMAND_JSON)),
        "demand",
    )?;
    let default_out = demand.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let out = pick(args.out, cfg.out, default_out);
    let beta = pick(args.beta, cfg.beta, 0.11);
    let eps = pick(args.eps, cfg.eps, 1e-6);
    let wavelet = pick(args.wavelet, cfg.wavelet.clone(), "db2".into());
    let bins = pick(args.bins, cfg.bins, 20);
    let filters = WaveletFilters::by_name(&wavelet)?;
    let demands = io::read_demand_json(&demand)?;
    let mined = mine_city(&demands, &filters, beta, eps)?;
    ensure_dir(&out)?;
    io::write_patterns_json(out.join(io::PATTERNS_JSON), &PatternMapDoc::from_mined(&mined, beta, &wavelet))?;
    io::write_divergence_csv(out.join(io::DIVERGENCE_CSV), &mined)?;
    let divergences: Vec<f64> = mined.results.values().map(|r| r.max_kl).collect();
    io::write_divergence_histogram_csv(out.join(io::DIVERGENCE_HISTOGRAM_CSV), &divergences, bins)?;
    let accepted = mined.results.values().filter(|r| r.accepted).count();
    println!(
        "accepted {accepted} of {} cells at beta = {beta} ({} with too few days)",
        mined.results.len(),
        mined.insufficient.len()
    );
    Ok(())
}

/// Parse "1,3,5" into a scale list.
fn parse_scales(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad scale {part:?} in {s:?}")))
        })
        .collect()
}

fn parse_method(s: &str) -> Result<Method> {
    match s {
        "alcnn" => Ok(Method::Alcnn),
        "lr" => Ok(Method::Lr),
        "knn" => Ok(Method::Knn),
        other => Err(Error::invalid(format!("unknown method {other:?} (alcnn, lr, knn)"))),
    }
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let cfg = PipelineConfig::load(args.config.as_deref())?;
    let source_dir = require(args.source_dir, cfg.source_dir.clone(), "source-dir")?;
    let target_dir = require(args.target_dir, cfg.target_dir.clone(), "target-dir")?;
    let out = require(args.out, cfg.out.clone(), "out")?;
    let method = match args.method {
        Some(m) => m,
        None => cfg.method.as_deref().map(parse_method).transpose()?.unwrap_or(Method::Alcnn),
    };

    let f_src = io::read_features_csv(source_dir.join(io::FEATURES_CSV))?;
    let f_tgt = io::read_features_csv(target_dir.join(io::FEATURES_CSV))?;
    let d_prime = pick(args.d_prime, cfg.d_prime, 16);
    let (t, ls, _lt) = fit_joint(&f_src, &f_tgt, d_prime)?;
    ensure_dir(&out)?;
    io::write_copca_json(out.join(io::COPCA_JSON), &t)?;

    let doc = io::read_patterns_json(source_dir.join(io::PATTERNS_JSON))?;
    let targets = doc.accepted_patterns()?;
    if targets.is_empty() {
        return Err(Error::InsufficientData("the source pattern map has no accepted cells".into()));
    }

    let checkpoint = match method {
        Method::Alcnn => {
            let mut tc = cfg.train.clone().unwrap_or_default();
            if let Some(seed) = args.seed {
                tc.rng_seed = seed;
            } else if let Some(seed) = cfg.seed {
                tc.rng_seed = seed;
            }
            if let Some(s) = &args.scales {
                tc.scales = parse_scales(s)?;
            }
            set(&mut tc.learning_rate, args.learning_rate);
            set(&mut tc.batch_size, args.batch_size);
            set(&mut tc.dropout, args.dropout);
            set(&mut tc.patience, args.patience);
            set(&mut tc.max_epochs, args.max_epochs);
            set(&mut tc.validation_fraction, args.validation_fraction);
            set(&mut tc.filters, args.filters);
            set(&mut tc.hidden, args.hidden);
            set(&mut tc.wavelet, args.wavelet.clone());
            set(&mut tc.norm_eps, args.eps);
            let (meta, _) = load_city(&source_dir)?;
            let tensor = LatentFeatureTensor::from_latents(meta.rows, meta.cols, &ls)?;
            let instances = build_training_instances(&tensor, &targets, &tc.scales)?;
            let outcome = train(&instances, &tc)?;
            io::write_training_log_csv(out.join(io::TRAINING_LOG_CSV), &outcome.log)?;
            println!(
                "alcnn: {} cells, best epoch {} of {}, validation KLMSE {:.6}",
                instances.len(),
                outcome.best_epoch,
                outcome.log.len(),
                outcome.best_val_klmse
            );
            Checkpoint::Alcnn {
                config: tc,
                params: outcome.params,
                best_epoch: outcome.best_epoch,
                best_val_klmse: outcome.best_val_klmse,
            }
        }
        Method::Lr => {
            let lambda = pick(args.lambda, cfg.lambda, 0.1);
            let wavelet = pick(args.wavelet, cfg.wavelet.clone(), "db2".into());
            let norm_eps = pick(args.eps, cfg.eps, 1e-6);
            let filters = WaveletFilters::by_name(&wavelet)?;
            let mut x = Vec::new();
            let mut y = Vec::new();
            for (cell, pattern) in &targets {
                let row = ls.row_of(*cell).ok_or_else(|| {
                    Error::invalid(format!("no latent features for training cell {cell}"))
                })?;
                x.push(row.to_vec());
                y.push(encode_target(pattern, &filters)?);
            }
            let model = ridge_fit(&x, &y, lambda, &wavelet)?;
            println!("lr: {} cells, lambda = {lambda}, wavelet = {wavelet}", x.len());
            Checkpoint::Lr { model, k: doc.k, norm_eps }
        }
        Method::Knn => {
            let neighbors = pick(args.neighbors, cfg.neighbors, 10);
            let patterns: BTreeMap<CellIndex, Vec<f64>> =
                targets.iter().map(|(c, p)| (*c, p.values().to_vec())).collect();
            println!("knn: memorized {} cells, {neighbors} neighbors", patterns.len());
            Checkpoint::Knn { neighbors, k: doc.k, latents: ls, patterns }
        }
    };
    io::write_checkpoint_json(out.join(io::CHECKPOINT_JSON), &checkpoint)?;
    Ok(())
}

/// Overwrite a config field when the flag was given.
fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn infer(args: InferArgs) -> Result<()> {
    let cfg = PipelineConfig::load(args.config.as_deref())?;
    let model_dir = pick(args.model_dir, cfg.model_dir.clone(), PathBuf::new());
    let join = |file: &str| -> PathBuf { model_dir.join(file) };
    let checkpoint_path = match args.checkpoint {
        Some(p) => p,
        None if model_dir.as_os_str().is_empty() => {
            return Err(Error::invalid("missing required value --checkpoint (or --model-dir)"))
        }
        None => join(io::CHECKPOINT_JSON),
    };
    let copca_path = match args.copca {
        Some(p) => p,
        None if model_dir.as_os_str().is_empty() => {
            return Err(Error::invalid("missing required value --copca (or --model-dir)"))
        }
        None => join(io::COPCA_JSON),
    };
    let target_dir = require(args.target_dir, cfg.target_dir.clone(), "target-dir")?;
    let out = require(args.out, cfg.out, "out")?;

    let checkpoint = io::read_checkpoint_json(&checkpoint_path)?;
    let t = io::read_copca_json(&copca_path)?;
    let f_tgt = io::read_features_csv(target_dir.join(io::FEATURES_CSV))?;
    let lt = transform(&t, &f_tgt)?;
    ensure_dir(&out)?;

    match checkpoint {
        Checkpoint::Alcnn { config, params, .. } => {
            let (meta, _) = load_city(&target_dir)?;
            let tensor = LatentFeatureTensor::from_latents(meta.rows, meta.cols, &lt)?;
            let inferred = infer_city(&params, &tensor, config.norm_eps)?;
            let doc = PatternMapDoc::from_demand_patterns(params.k, &inferred.patterns);
            io::write_patterns_json(out.join(io::PATTERNS_JSON), &doc)?;
            let att = AttentionDoc { scales: params.scales(), cells: inferred.attention };
            io::write_attention_json(out.join(io::ATTENTION_JSON), &att)?;
            println!("alcnn: predicted {} cells (attention map written)", doc.cells.len());
        }
        Checkpoint::Lr { model, k, norm_eps } => {
            let mut map = BTreeMap::new();
            for (r, cell) in lt.cells.iter().enumerate() {
                map.insert(*cell, model.predict_pattern(lt.row(r), norm_eps)?);
            }
            let doc = PatternMapDoc::from_patterns(k, &map, 0);
            io::write_patterns_json(out.join(io::PATTERNS_JSON), &doc)?;
            println!("lr: predicted {} cells", doc.cells.len());
        }
        Checkpoint::Knn { neighbors, k, latents, patterns } => {
            let mut train_patterns = BTreeMap::new();
            for (cell, values) in patterns {
                train_patterns.insert(cell, ProbVector::from_positive(values)?);
            }
            let (preds, fallbacks) = knn_infer_city(&latents, &train_patterns, &lt, neighbors)?;
            let doc = PatternMapDoc::from_patterns(k, &preds, 0);
            io::write_patterns_json(out.join(io::PATTERNS_JSON), &doc)?;
            if fallbacks > 0 {
                println!("knn: predicted {} cells ({fallbacks} uniform fallbacks)", doc.cells.len());
            } else {
                println!("knn: predicted {} cells", doc.cells.len());
            }
        }
    }
    Ok(())
}

/// Split a `--pred` value into a method name and a path.
fn parse_pred(spec: &str) -> (String, PathBuf) {
    if let Some((name, path)) = spec.split_once('=') {
        return (name.to_string(), PathBuf::from(path));
    }
    let path = PathBuf::from(spec);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| spec.to_string());
    (name, path)
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let cfg = PipelineConfig::load(args.config.as_deref())?;
    let truth_path = require(args.truth, None, "truth")?;
    let out = require(args.out, cfg.out, "out")?;
    if args.preds.is_empty() {
        return Err(Error::invalid("missing required value --pred"));
    }
    let truth_doc = io::read_patterns_json(&truth_path)?;
    let truth = truth_doc.accepted_patterns()?;
    let mut methods = Vec::new();
    for spec in &args.preds {
        let (name, path) = parse_pred(spec);
        let pred_doc = io::read_patterns_json(&path)?;
        if pred_doc.k != truth_doc.k {
            return Err(Error::shape(format!(
                "{} has k = {}, the truth map has k = {}",
                path.display(),
                pred_doc.k,
                truth_doc.k
            )));
        }
        let pred = pred_doc.accepted_patterns()?;
        let report = evaluate(&pred, &truth)?;
        methods.push(MethodEval::from_report(name, &report));
    }
    ensure_dir(&out)?;
    let doc = EvalDoc { k: truth_doc.k, methods };
    io::write_eval_json(out.join(io::EVAL_JSON), &doc)?;
    io::write_eval_table_csv(out.join(io::EVAL_TABLE_CSV), &doc)?;
    println!("{:<12} {:>12} {:>8} {:>8}", "method", "klmse", "cells", "skipped");
    for m in &doc.methods {
        println!("{:<12} {:>12.6} {:>8} {:>8}", m.method, m.klmse, m.cells, m.skipped);
    }
    Ok(())
}

/// Cells to draw: the requested ones, or a small spread of the map's own.
fn plot_cells(doc: &PatternMapDoc, requested: Option<&str>) -> Result<Vec<CellIndex>> {
    if let Some(spec) = requested {
        return spec.split(';').map(|part| part.trim().parse()).collect();
    }
    let all: Vec<CellIndex> = doc.cells.keys().copied().collect();
    if all.is_empty() {
        return Err(Error::InsufficientData("the pattern map has no cells".into()));
    }
    let n = all.len().min(6);
    // Evenly spaced picks so the defaults are not six corner neighbors.
    Ok((0..n).map(|i| all[i * all.len() / n]).collect())
}

fn plot(args: PlotArgs) -> Result<()> {
    let cfg = PipelineConfig::load(args.config.as_deref())?;
    let out = require(args.out, cfg.out, "out")?;
    if args.patterns.is_none()
        && args.histogram.is_none()
        && args.eval.is_none()
        && args.attention.is_none()
        && args.training_log.is_none()
    {
        return Err(Error::invalid(
            "nothing to plot: pass --patterns, --histogram, --eval, --attention, or --training-log",
        ));
    }
    ensure_dir(&out)?;
    let mut written = Vec::new();

    if let Some(path) = &args.patterns {
        let doc = io::read_patterns_json(path)?;
        let cells = plot_cells(&doc, args.cells.as_deref())?;
        io::write_pattern_curves_csv(out.join("pattern_curves.csv"), &doc, &cells)?;
        let hours_per_slot = 24.0 / doc.k as f64;
        let series: Vec<svg::Series> = cells
            .iter()
            .map(|cell| svg::Series {
                name: format!("cell {cell}"),
                points: doc.cells[cell]
                    .pattern
                    .iter()
                    .enumerate()
                    .map(|(slot, &share)| ((slot as f64 + 0.5) * hours_per_slot, share))
                    .collect(),
            })
            .collect();
        let chart = svg::line_chart("Daily demand patterns", "hour of day", "share of daily demand", &series);
        io::write_atomic(out.join("patterns.svg"), chart.as_bytes())?;
        written.push("pattern_curves.csv");
        written.push("patterns.svg");
    }

    if let Some(path) = &args.histogram {
        let rows = io::read_divergence_histogram_csv(path)?;
        let bars: Vec<(String, f64)> =
            rows.iter().map(|r| (format!("{:.3}", r.bin_hi), r.count as f64)).collect();
        let chart = svg::bar_chart("Mining divergence by upper bin edge", "cells", &bars);
        io::write_atomic(out.join("divergence_histogram.svg"), chart.as_bytes())?;
        written.push("divergence_histogram.svg");
    }

    if let Some(path) = &args.eval {
        let doc = io::read_eval_json(path)?;
        io::write_eval_table_csv(out.join("eval_bars.csv"), &doc)?;
        let bars: Vec<(String, f64)> =
            doc.methods.iter().map(|m| (m.method.clone(), m.klmse)).collect();
        let chart = svg::bar_chart("KLMSE by method (lower is better)", "KLMSE", &bars);
        io::write_atomic(out.join("eval_bars.svg"), chart.as_bytes())?;
        written.push("eval_bars.csv");
        written.push("eval_bars.svg");
    }

    if let Some(path) = &args.attention {
        let doc = io::read_attention_json(path)?;
        if doc.cells.is_empty() {
            return Err(Error::InsufficientData("the attention map has no cells".into()));
        }
        let n = doc.cells.len() as f64;
        let means: Vec<f64> = (0..doc.scales.len())
            .map(|s| doc.cells.values().map(|w| w[s]).sum::<f64>() / n)
            .collect();
        io::write_attention_means_csv(out.join("attention_means.csv"), &doc.scales, &means)?;
        let bars: Vec<(String, f64)> = doc
            .scales
            .iter()
            .zip(&means)
            .map(|(scale, &m)| (format!("w = {scale}"), m))
            .collect();
        let chart = svg::bar_chart("Mean attention weight by scale", "mean weight", &bars);
        io::write_atomic(out.join("attention_means.svg"), chart.as_bytes())?;
        written.push("attention_means.csv");
        written.push("attention_means.svg");
    }

    if let Some(path) = &args.training_log {
        let rows = io::read_training_log_csv(path)?;
        if rows.is_empty() {
            return Err(Error::InsufficientData("the training log has no rows".into()));
        }
        let series = [
            svg::Series {
                name: "train".into(),
                points: rows.iter().map(|r| (r.epoch as f64, r.train_klmse)).collect(),
            },
            svg::Series {
                name: "validation".into(),
                points: rows.iter().map(|r| (r.epoch as f64, r.val_klmse)).collect(),
            },
        ];
        let chart = svg::line_chart("Training loss", "epoch", "KLMSE", &series);
        io::write_atomic(out.join("training_curve.svg"), chart.as_bytes())?;
        written.push("training_curve.svg");
    }

    println!("wrote {}", written.join(", "));
    Ok(())
}
