use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{content_hash, output_root, CliError, GridArgs, RunManifest};
use crate::data::{kfold_split, load_csv, Dataset, SplitPlan};
use crate::elbo::TrainingMode;
use crate::training::{evaluate, metrics_csv, TrainConfig, TrainError, Trainer};

/// One point of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub index: usize,
    /// Grid values as `key=value` pairs, in key order.
    pub label: String,
    pub config: TrainConfig,
    pub hash: String,
}

/// Outcome of one cell, as stored in its `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub index: usize,
    pub cell: String,
    pub label: String,
    pub dev_error: f64,
    pub test_error: f64,
}

/// Cartesian product of `grid` (key → array of values) over `template`.
/// Every cell is checked as a full config, so misspelled keys fail here.
pub fn expand_grid(template: &toml::Table, grid: &toml::Table, seed: u64) -> Result<Vec<GridCell>, CliError> {
    if grid.is_empty() {
        return Err(CliError::Usage("grid file is empty".into()));
    }
    let mut points: Vec<Vec<(String, toml::Value)>> = vec![vec![]];
    for (key, values) in grid {
        let values = match values {
            toml::Value::Array(v) if !v.is_empty() => v,
            _ => return Err(CliError::Usage(format!("grid key {key:?} needs a nonempty array"))),
        };
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
        .into_iter()
        .enumerate()
        .map(|(index, point)| {
            let mut table = template.clone();
            for (k, v) in &point {
                table.insert(k.clone(), v.clone());
            }
            let text = toml::to_string(&table).map_err(|e| CliError::Usage(e.to_string()))?;
            let mut config = TrainConfig::from_toml_str(&text)?;
            config.seed = seed;
            let hash = content_hash(config.to_toml_string().as_bytes());
            let label = point.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ");
            Ok(GridCell { index, label, config, hash })
        })
        .collect()
}

fn read_table(path: &Path) -> Result<toml::Table, CliError> {
    fs::read_to_string(path)?
        .parse()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("{}: {e}", path.display())))
}

fn run_cell(cell: &GridCell, ds: &Dataset, plan: &SplitPlan, dir: &Path, data: &Path) -> Result<GridRow, CliError> {
    let cell_dir = dir.join(format!("cell-{}", &cell.hash[..12]));
    let result_path = cell_dir.join("result.json");
    if let Ok(m) = RunManifest::load(&cell_dir) {
        if m.config_hash == cell.hash && result_path.exists() {
            let mut row: GridRow = serde_json::from_str(&fs::read_to_string(&result_path)?)?;
            row.index = cell.index;
            log::info!("cell {} already done", row.cell);
            return Ok(row);
        }
    }
    fs::create_dir_all(&cell_dir)?;
    RunManifest {
        command: "gridsearch-cell".into(),
        config_path: None,
        seed: cell.config.seed,
        inputs: vec![data.to_path_buf()],
        outputs: ["config.toml", "metrics.csv", "checkpoint.json", "result.json"].iter().map(PathBuf::from).collect(),
        config_hash: cell.hash.clone(),
    }
    .save(&cell_dir)?;
    fs::write(cell_dir.join("config.toml"), cell.config.to_toml_string())?;

    let pool = plan.train_pool();
    let train_ds = ds.subset(&pool);
    let mut trainer = Trainer::new(&train_ds, cell.config.clone())?;
    if plan.label_fraction < 1.0 {
        trainer.set_labeled_rows(plan.labeled_positions(&pool));
    }
    let mut metrics = Vec::with_capacity(cell.config.epochs);
    while trainer.epoch < cell.config.epochs {
        metrics.push(trainer.run_epoch(&train_ds)?);
    }
    let matched = cell.config.mode == TrainingMode::Unsupervised;
    let dev_error = evaluate(&trainer.model, &ds.subset(&plan.dev), matched)?.error_rate;
    let test_error = evaluate(&trainer.model, &ds.subset(&plan.test), matched)?.error_rate;
    fs::write(cell_dir.join("metrics.csv"), metrics_csv(&metrics))?;
    trainer.checkpoint().save(cell_dir.join("checkpoint.json"))?;
    let row = GridRow {
        index: cell.index,
        cell: cell.hash[..12].to_string(),
        label: cell.label.clone(),
        dev_error,
        test_error,
    };
    fs::write(&result_path, serde_json::to_string_pretty(&row)?)?;
    Ok(row)
}

/// Ascending dev error; ties keep grid order.
pub fn rank(rows: &mut [GridRow]) {
    rows.sort_by(|a, b| a.dev_error.total_cmp(&b.dev_error).then(a.index.cmp(&b.index)));
}

/// Runs every cell (skipping finished ones) and writes `results.csv`.
/// Returns the rows ranked by dev error.
pub fn cmd_gridsearch(a: &GridArgs) -> Result<Vec<GridRow>, CliError> {
    if a.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let template = match &a.template {
        Some(p) => read_table(p)?,
        None => toml::Table::new(),
    };
    let grid = read_table(&a.grid)?;
    let cells = expand_grid(&template, &grid, a.seed)?;
    let ds = load_csv(&a.data)?;
    if ds.labels.is_none() {
        return Err(TrainError::MissingLabels.into());
    }
    let plan = kfold_split(&ds, 1, a.label_fraction, &mut ChaCha8Rng::seed_from_u64(a.seed))?;

    let key = format!("{}\n{}\nseed={} label_fraction={}", toml::to_string(&template).unwrap_or_default(), toml::to_string(&grid).unwrap_or_default(), a.seed, a.label_fraction);
    let hash = content_hash(key.as_bytes());
    let dir = a.out_dir.clone().unwrap_or_else(|| output_root().join(format!("grid-{}", &hash[..12])));
    fs::create_dir_all(&dir)?;
    RunManifest {
        command: "gridsearch".into(),
        config_path: a.template.clone(),
        seed: a.seed,
        inputs: vec![a.data.clone(), a.grid.clone()],
        outputs: vec![PathBuf::from("results.csv")],
        config_hash: hash,
    }
    .save(&dir)?;

    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs)
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let results: Vec<Result<GridRow, CliError>> =
        threads.install(|| cells.par_iter().map(|c| run_cell(c, &ds, &plan, &dir, &a.data)).collect());
    let mut rows = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    rank(&mut rows);

    let mut csv = String::from("rank,cell,dev_error,test_error,params\n");
    for (i, r) in rows.iter().enumerate() {
        csv.push_str(&format!("{},{},{:.16e},{:.16e},\"{}\"\n", i + 1, r.cell, r.dev_error, r.test_error, r.label.replace('"', "\"\"")));
    }
    fs::write(dir.join("results.csv"), csv)?;
    for (i, r) in rows.iter().enumerate() {
        println!("{:>3}  dev {:.4}  test {:.4}  {}", i + 1, r.dev_error, r.test_error, r.label);
    }
    if let Some(best) = rows.first() {
        println!("best: {} (dev {:.4}, test {:.4})", best.label, best.dev_error, best.test_error);
    }
    Ok(rows)
}
