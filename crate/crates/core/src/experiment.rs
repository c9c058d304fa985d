//! The removal-rate experiment grid.
//!
//! Every cell corrupts the gold training split, trains one model variant and
//! scores it on the untouched test split. Finished cells are cached under
//! `cells/<key>.json`, where the key is a SHA-256 over everything that
//! determines the result, so an interrupted grid resumes where it stopped
//! and a finished grid reruns without training.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{write_conll, Dataset, DEFAULT_UNKNOWN_MARKER};
use crate::corruption::{corrupt, CorruptionConfig, CorruptionScheme};
use crate::emission::FEATURE_TEMPLATE_VERSION;
use crate::error::{Error, Result};
use crate::eval::{aggregate, entity_prf, AggregateRow, Grouping, RunResult};
use crate::losses::{fit, LatentMode, LossConfig};
use crate::model::Model;
use crate::selftrain::{self_train_loop, RoundLog, SelfTrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Standard CRF likelihood; every `O` in the corrupted file is trusted.
    FullCrf,
    /// Marginal likelihood with `O` latent, plus the entity-ratio terms.
    PartialCrf,
    /// Marginal likelihood with `O` latent and no ratio terms.
    PartialCrfPlain,
    /// `PartialCrf` with teacher–student re-annotation rounds.
    TsPartialCrf,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::FullCrf => "full_crf",
            ModelKind::PartialCrf => "partial_crf",
            ModelKind::PartialCrfPlain => "partial_crf_plain",
            ModelKind::TsPartialCrf => "ts_partial_crf",
        }
    }

    pub fn loss_config(self, base: &LossConfig) -> LossConfig {
        match self {
            ModelKind::FullCrf => base.clone().full_annotation(),
            ModelKind::PartialCrf | ModelKind::TsPartialCrf => LossConfig {
                latent_mode: LatentMode::DistantO,
                ..base.clone()
            },
            ModelKind::PartialCrfPlain => LossConfig {
                latent_mode: LatentMode::DistantO,
                lambda_batch: 0.0,
                lambda_overall: 0.0,
                lambda_st: 0.0,
                ..base.clone()
            },
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Model name used for the rows trained on the uncorrupted training split.
pub const UPPER_BOUND: &str = "upper_bound";
/// Scheme column value of upper-bound rows.
pub const FULL_DATA: &str = "full";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub rates: Vec<f64>,
    pub schemes: Vec<CorruptionScheme>,
    pub seeds: Vec<u64>,
    pub models: Vec<ModelKind>,
    pub loss: LossConfig,
    pub self_train: SelfTrainConfig,
    /// Also train a standard CRF on the gold training split for each seed.
    pub include_upper_bound: bool,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            rates: (1..=9).map(|k| k as f64 / 10.0).collect(),
            schemes: vec![CorruptionScheme::Rar, CorruptionScheme::Rsfr],
            seeds: (0..5).collect(),
            models: vec![ModelKind::FullCrf, ModelKind::PartialCrf],
            loss: LossConfig::default(),
            self_train: SelfTrainConfig::default(),
            include_upper_bound: true,
            threads: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        for &r in &self.rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("removal rate {r} outside [0, 1]")));
            }
        }
        self.loss.validate()?;
        self.self_train.validate()
    }
}

/// One unit of work in the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    /// `None` for an upper-bound cell.
    pub scheme: Option<CorruptionScheme>,
    pub rate: f64,
    pub seed: u64,
    /// `None` for an upper-bound cell.
    pub model: Option<ModelKind>,
}

impl Cell {
    fn scheme_name(&self) -> String {
        self.scheme.map_or(FULL_DATA.to_string(), |s| s.to_string())
    }

    fn model_name(&self) -> &'static str {
        self.model.map_or(UPPER_BOUND, ModelKind::name)
    }
}

/// Grid cells in output order: upper bounds first, then scheme, rate, seed
/// and model.
pub fn grid(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    if cfg.include_upper_bound {
        cells.extend(cfg.seeds.iter().map(|&seed| Cell {
            scheme: None,
            rate: 0.0,
            seed,
            model: None,
        }));
    }
    for &scheme in &cfg.schemes {
        for &rate in &cfg.rates {
            for &seed in &cfg.seeds {
                for &model in &cfg.models {
                    cells.push(Cell {
                        scheme: Some(scheme),
                        rate,
                        seed,
                        model: Some(model),
                    });
                }
            }
        }
    }
    cells
}

/// Gold train, dev and test splits.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

impl Splits {
    fn entity_type(&self) -> String {
        self.train.tagset.entity_types().join("+")
    }
}

pub fn dataset_hash(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update(ds.tagset.scheme().to_string());
    h.update([0]);
    h.update(ds.tagset.labels().join("\u{1f}"));
    h.update([0]);
    h.update(write_conll(ds, DEFAULT_UNKNOWN_MARKER));
    hex::encode(h.finalize())
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    cell: &'a Cell,
    loss: &'a LossConfig,
    self_train: Option<&'a SelfTrainConfig>,
    train: &'a str,
    dev: &'a str,
    test: &'a str,
    feature_templates: &'a str,
    crate_version: &'a str,
}

/// Stored result of one finished cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub key: String,
    pub cell: Cell,
    pub result: RunResult,
    pub removed_spans: usize,
    pub total_spans: usize,
    pub test_hash: String,
    #[serde(default)]
    pub best_epoch: Option<usize>,
    #[serde(default)]
    pub rounds: Vec<RoundLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub key: String,
    pub cell: Cell,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub entity_type: String,
    pub train_hash: String,
    pub dev_hash: String,
    pub test_hash: String,
    pub feature_templates: String,
    pub cells: Vec<String>,
    pub failures: Vec<CellFailure>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub results: Vec<RunResult>,
    pub failures: Vec<CellFailure>,
    /// Cells trained in this run (the rest came from the cache).
    pub trained: usize,
    pub results_csv: PathBuf,
}

struct Hashes {
    train: String,
    dev: String,
    test: String,
}

fn cell_key(cell: &Cell, cfg: &ExperimentConfig, hashes: &Hashes) -> Result<String> {
    let loss = match cell.model {
        Some(m) => m.loss_config(&cfg.loss),
        None => cfg.loss.clone().full_annotation(),
    };
    let material = KeyMaterial {
        cell,
        loss: &LossConfig { seed: cell.seed, ..loss },
        self_train: (cell.model == Some(ModelKind::TsPartialCrf)).then_some(&cfg.self_train),
        train: &hashes.train,
        dev: &hashes.dev,
        test: &hashes.test,
        feature_templates: FEATURE_TEMPLATE_VERSION,
        crate_version: env!("CARGO_PKG_VERSION"),
    };
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&material)?)))
}

fn run_cell(cell: &Cell, key: &str, splits: &Splits, cfg: &ExperimentConfig, test_hash: &str) -> Result<CellRecord> {
    let (train, removed, total) = match cell.scheme {
        Some(scheme) => {
            let c = corrupt(
                &splits.train,
                &CorruptionConfig {
                    scheme,
                    rate: cell.rate,
                    seed: cell.seed,
                },
            )?;
            (c.dataset, c.removed.len(), c.total_spans)
        }
        None => (splits.train.clone(), 0, splits.train.spans()?.len()),
    };
    let base = match cell.model {
        Some(m) => m.loss_config(&cfg.loss),
        None => cfg.loss.clone().full_annotation(),
    };
    let loss = LossConfig { seed: cell.seed, ..base };
    let (model, best_epoch, rounds): (Model, Option<usize>, Vec<RoundLog>) = match cell.model {
        Some(ModelKind::TsPartialCrf) => {
            let out = self_train_loop(&train, &splits.dev, &loss, &cfg.self_train, Some(&splits.train))?;
            (out.model, None, out.rounds)
        }
        _ => {
            let out = fit(&train, &splits.dev, &loss, None)?;
            (out.model, out.best_epoch, Vec::new())
        }
    };
    if dataset_hash(&splits.test) != test_hash {
        return Err(Error::Config("test split changed during the grid".into()));
    }
    let preds = splits
        .test
        .sentences
        .iter()
        .map(|s| model.predict(s))
        .collect::<Result<Vec<_>>>()?;
    let prf = entity_prf(&splits.test, &preds)?;
    Ok(CellRecord {
        key: key.to_string(),
        cell: cell.clone(),
        result: RunResult::new(
            &splits.entity_type(),
            &cell.scheme_name(),
            cell.rate,
            cell.seed,
            cell.model_name(),
            prf,
        ),
        removed_spans: removed,
        total_spans: total,
        test_hash: test_hash.to_string(),
        best_epoch,
        rounds,
    })
}

fn load_cell(path: &Path, key: &str) -> Option<CellRecord> {
    let text = fs::read_to_string(path).ok()?;
    let rec: CellRecord = serde_json::from_str(&text).ok()?;
    (rec.key == key).then_some(rec)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

#[derive(Serialize)]
struct AggregateCsvRow<'a> {
    group: &'a str,
    scheme: &'a str,
    model: &'a str,
    n: usize,
    precision_mean: f64,
    precision_ci95: f64,
    precision_sd: f64,
    recall_mean: f64,
    recall_ci95: f64,
    recall_sd: f64,
    f1_mean: f64,
    f1_ci95: f64,
    f1_sd: f64,
}

impl<'a> From<&'a AggregateRow> for AggregateCsvRow<'a> {
    fn from(r: &'a AggregateRow) -> Self {
        Self {
            group: &r.group,
            scheme: &r.scheme,
            model: &r.model,
            n: r.n,
            precision_mean: r.precision.mean,
            precision_ci95: r.precision.ci95,
            precision_sd: r.precision.sd,
            recall_mean: r.recall.mean,
            recall_ci95: r.recall.ci95,
            recall_sd: r.recall.sd,
            f1_mean: r.f1.mean,
            f1_ci95: r.f1.ci95,
            f1_sd: r.f1.sd,
        }
    }
}

#[derive(Serialize)]
struct FigureRow<'a> {
    scheme: &'a str,
    model: &'a str,
    rate: &'a str,
    mean: f64,
    ci95: f64,
    sd: f64,
}

fn write_reports(out_dir: &Path, results: &[RunResult]) -> Result<()> {
    if results.is_empty() {
        return Ok(());
    }
    let per_rate = aggregate(results, Grouping::PerRate)?;
    write_csv(&out_dir.join("aggregate_per_rate.csv"), per_rate.iter().map(AggregateCsvRow::from))?;
    let band = aggregate(results, Grouping::Band)?;
    write_csv(&out_dir.join("aggregate_band.csv"), band.iter().map(AggregateCsvRow::from))?;
    type Pick = fn(&AggregateRow) -> crate::eval::MeanCi;
    let views: [(&str, Pick); 3] = [
        ("fig_f1.csv", |r| r.f1),
        ("fig_precision.csv", |r| r.precision),
        ("fig_recall.csv", |r| r.recall),
    ];
    for (name, pick) in views {
        write_csv(
            &out_dir.join(name),
            per_rate.iter().map(|r| {
                let m = pick(r);
                FigureRow {
                    scheme: &r.scheme,
                    model: &r.model,
                    rate: &r.group,
                    mean: m.mean,
                    ci95: m.ci95,
                    sd: m.sd,
                }
            }),
        )?;
    }
    Ok(())
}

/// Runs (or resumes) the grid and writes `results.csv`, the aggregate and
/// figure tables and `manifest.json` into `out_dir`.
pub fn run_experiment(splits: &Splits, cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    for (name, ds) in [("dev", &splits.dev), ("test", &splits.test)] {
        if !ds.is_gold() {
            return Err(Error::Config(format!("{name} split must be fully annotated")));
        }
    }
    if !splits.train.is_gold() {
        return Err(Error::NotGold);
    }
    let cells_dir = out_dir.join("cells");
    fs::create_dir_all(&cells_dir)?;
    let hashes = Hashes {
        train: dataset_hash(&splits.train),
        dev: dataset_hash(&splits.dev),
        test: dataset_hash(&splits.test),
    };
    let cells = grid(cfg);
    let keys = cells
        .iter()
        .map(|c| cell_key(c, cfg, &hashes))
        .collect::<Result<Vec<_>>>()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let outcomes: Vec<(std::result::Result<CellRecord, String>, bool)> = pool.install(|| {
        cells
            .par_iter()
            .zip(keys.par_iter())
            .map(|(cell, key)| {
                let path = cells_dir.join(format!("{key}.json"));
                if let Some(rec) = load_cell(&path, key) {
                    return (Ok(rec), false);
                }
                let rec = run_cell(cell, key, splits, cfg, &hashes.test).and_then(|rec| {
                    write_atomic(&path, &serde_json::to_vec_pretty(&rec)?)?;
                    Ok(rec)
                });
                (rec.map_err(|e| e.to_string()), true)
            })
            .collect()
    });

    let mut results = Vec::new();
    let mut failures = Vec::new();
    let mut trained = 0;
    for ((cell, key), (out, ran)) in cells.iter().zip(&keys).zip(outcomes) {
        trained += ran as usize;
        match out {
            Ok(rec) => {
                if rec.test_hash != hashes.test {
                    return Err(Error::Config(format!("cell {key} was scored on a different test split")));
                }
                results.push(rec.result);
            }
            Err(error) => failures.push(CellFailure {
                key: key.clone(),
                cell: cell.clone(),
                error,
            }),
        }
    }

    let results_csv = out_dir.join("results.csv");
    write_csv(&results_csv, &results)?;
    write_reports(out_dir, &results)?;
    let manifest = Manifest {
        config: cfg.clone(),
        entity_type: splits.entity_type(),
        train_hash: hashes.train,
        dev_hash: hashes.dev,
        test_hash: hashes.test,
        feature_templates: FEATURE_TEMPLATE_VERSION.to_string(),
        cells: keys,
        failures: failures.clone(),
    };
    write_atomic(&out_dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(ExperimentOutcome {
        results,
        failures,
        trained,
        results_csv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_order_and_size() {
        let cfg = ExperimentConfig {
            rates: vec![0.5],
            schemes: vec![CorruptionScheme::Rar],
            seeds: vec![1],
            models: vec![ModelKind::PartialCrf],
            ..Default::default()
        };
        let g = grid(&cfg);
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].model, None);
        assert_eq!(g[1].model, Some(ModelKind::PartialCrf));
        let full = grid(&ExperimentConfig::default());
        assert_eq!(full.len(), 5 + 9 * 2 * 5 * 2);
    }

    #[test]
    fn model_variants() {
        let base = LossConfig::default();
        assert_eq!(ModelKind::FullCrf.loss_config(&base).latent_mode, LatentMode::ExplicitUnknown);
        assert_eq!(ModelKind::FullCrf.loss_config(&base).lambda_batch, 0.0);
        assert_eq!(ModelKind::PartialCrfPlain.loss_config(&base).lambda_batch, 0.0);
        assert_eq!(ModelKind::PartialCrf.loss_config(&base).lambda_batch, base.lambda_batch);
        let json = serde_json::to_string(&ModelKind::TsPartialCrf).unwrap();
        assert_eq!(json, "\"ts_partial_crf\"");
    }

    #[test]
    fn cached_scores_round_trip_exactly() {
        let prf = crate::eval::Prf::from_counts(150, 11, 13);
        let r = RunResult::new("Gene", "rar", 0.3, 1, "partial_crf", prf);
        let back: RunResult = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back.f1.to_bits(), r.f1.to_bits());
        assert_eq!(back, r);
    }

    #[test]
    fn config_rejects_unknown_fields() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"ratez": [0.1]}"#).is_err());
        let c: ExperimentConfig = serde_json::from_str(r#"{"rates": [0.2], "seeds": [3]}"#).unwrap();
        assert_eq!(c.rates, vec![0.2]);
        assert!(c.validate().is_ok());
    }
}
