//! Experiment configuration, multi-seed runs, and report writers.
//!
//! Configs are flat text files with one `dotted.key=value` per line; `#`
//! starts a comment. Each `(seed, strategy)` run writes
//! `<strategy>_seed<seed>.csv`, and the whole experiment writes
//! `summary.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::Serialize;

use crate::cost::{comm_bytes, pair_reduction_factor, similarity_flops};
use crate::data::{make_class_mixture, make_synthetic_clusters, partition, DeviceShard, PartitionMode, PartitionSpec};
use crate::error::{Error, Result};
use crate::idx::load_idx_dataset;
use crate::model::ModelArch;
use crate::par;
use crate::server::{run_simulation, RoundMetrics, StrategyConfig};
use crate::strategy::StrategyKind;
use crate::trainer::TrainHyper;

pub const CSV_HEADER: &str = "round,strategy,seed,mean_acc,std_acc,ari,sim_flops,bytes_up,bytes_down,cluster_sizes";

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Devices dealt round-robin to `k_true` random linear teachers.
    Synthetic {
        k_true: usize,
        input_dim: usize,
        classes: usize,
        samples_per_device: usize,
    },
    /// A pooled Gaussian class mixture, then partitioned.
    Mixture {
        total: usize,
        input_dim: usize,
        classes: usize,
        partition: PartitionMode,
    },
    /// IDX image/label files, then partitioned.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        classes: usize,
        limit: Option<usize>,
        partition: PartitionMode,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub strategies: Vec<StrategyKind>,
    pub seeds: Vec<u64>,
    pub rounds: usize,
    pub devices: usize,
    pub data: DataSource,
    pub hidden: Vec<usize>,
    /// `None` splits before the output layer.
    pub split_layer: Option<usize>,
    pub hyper: TrainHyper,
    pub clusters: usize,
    pub low_rank_dim: usize,
    pub projector_devices: Option<usize>,
    pub offline_round: usize,
    pub sample_fraction: f64,
    pub bytes_per_scalar: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            strategies: vec![StrategyKind::LcFed],
            seeds: vec![1],
            rounds: 30,
            devices: 100,
            data: DataSource::Synthetic {
                k_true: 4,
                input_dim: 10,
                classes: 4,
                samples_per_device: 200,
            },
            hidden: vec![64],
            split_layer: None,
            hyper: TrainHyper::default(),
            clusters: 10,
            low_rank_dim: 50,
            projector_devices: None,
            offline_round: 1,
            sample_fraction: 1.0,
            bytes_per_scalar: 4,
            out_dir: None,
        }
    }
}

/// Raw key/value pairs with tracking of which keys were consumed.
struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {}", lineno + 1),
                    format!("expected key=value, got `{line}`"),
                )
            })?;
            let key = key.trim().to_string();
            if map
                .insert(key.clone(), (lineno + 1, value.trim().to_string()))
                .is_some()
            {
                return Err(Error::config(key, "set more than once"));
            }
        }
        Ok(Self { map })
    }

    fn take_raw(&mut self, key: &str) -> Option<String> {
        self.map.remove(key).map(|(_, v)| v)
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.take_raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::config(key, format!("cannot parse `{v}`: {e}")))
            })
            .transpose()
    }

    fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(raw) = self.take_raw(key) else {
            return Ok(None);
        };
        if raw.is_empty() {
            return Ok(Some(Vec::new()));
        }
        raw.split(',')
            .map(|v| {
                v.trim()
                    .parse::<T>()
                    .map_err(|e| Error::config(key, format!("cannot parse `{}`: {e}", v.trim())))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    fn has(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    fn finish(self) -> Result<()> {
        match self.map.into_iter().next() {
            Some((key, (line, _))) => Err(Error::config(key, format!("unknown key (line {line})"))),
            None => Ok(()),
        }
    }
}

fn parse_partition(e: &mut Entries) -> Result<PartitionMode> {
    let mode: String = e
        .take("partition.mode")?
        .ok_or_else(|| Error::config("partition.mode", "required for partitioned data sources"))?;
    match mode.as_str() {
        "dirichlet" => {
            if e.has("partition.n") {
                return Err(Error::config(
                    "partition.n",
                    "only valid with partition.mode=pathological",
                ));
            }
            let alpha = e.take("partition.alpha")?.unwrap_or(0.1);
            Ok(PartitionMode::Dirichlet { alpha })
        }
        "pathological" => {
            if e.has("partition.alpha") {
                return Err(Error::config(
                    "partition.alpha",
                    "only valid with partition.mode=dirichlet",
                ));
            }
            let labels_per_device = e
                .take("partition.n")?
                .ok_or_else(|| Error::config("partition.n", "required with partition.mode=pathological"))?;
            Ok(PartitionMode::Pathological { labels_per_device })
        }
        other => Err(Error::config("partition.mode", format!("unknown mode `{other}`"))),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut e = Entries::parse(text)?;
        let d = ExperimentConfig::default();

        let strategies = match e.take_raw("strategies") {
            Some(raw) => raw
                .split(',')
                .map(|s| {
                    s.parse::<StrategyKind>()
                        .map_err(|err| Error::config("strategies", err.to_string()))
                })
                .collect::<Result<Vec<_>>>()?,
            None => return Err(Error::config("strategies", "required")),
        };

        let source: String = e.take("data.source")?.unwrap_or_else(|| "synthetic".into());
        let input_dim = e.take("data.input_dim")?;
        let classes = e.take("data.classes")?;
        let data = match source.as_str() {
            "synthetic" => DataSource::Synthetic {
                k_true: e.take("data.k_true")?.unwrap_or(4),
                input_dim: input_dim.unwrap_or(10),
                classes: classes.unwrap_or(4),
                samples_per_device: e.take("data.samples_per_device")?.unwrap_or(200),
            },
            "mixture" => DataSource::Mixture {
                total: e.take("data.total")?.unwrap_or(5000),
                input_dim: input_dim.unwrap_or(10),
                classes: classes.unwrap_or(10),
                partition: parse_partition(&mut e)?,
            },
            "idx" => {
                if input_dim.is_some() {
                    return Err(Error::config(
                        "data.input_dim",
                        "taken from the IDX header for data.source=idx",
                    ));
                }
                DataSource::Idx {
                    images: e
                        .take_raw("data.idx_images")
                        .ok_or_else(|| Error::config("data.idx_images", "required for data.source=idx"))?
                        .into(),
                    labels: e
                        .take_raw("data.idx_labels")
                        .ok_or_else(|| Error::config("data.idx_labels", "required for data.source=idx"))?
                        .into(),
                    classes: classes.unwrap_or(10),
                    limit: e.take("data.limit")?,
                    partition: parse_partition(&mut e)?,
                }
            }
            other => return Err(Error::config("data.source", format!("unknown source `{other}`"))),
        };

        let hyper = TrainHyper {
            eta: e.take("train.eta")?.unwrap_or(d.hyper.eta),
            mu: e.take("train.mu")?.unwrap_or(d.hyper.mu),
            lambda: e.take("train.lambda")?.unwrap_or(d.hyper.lambda),
            batch_size: e.take("train.batch_size")?.unwrap_or(d.hyper.batch_size),
            local_steps: e.take("train.local_steps")?.unwrap_or(d.hyper.local_steps),
        };

        let cfg = ExperimentConfig {
            strategies,
            seeds: e.take_list("seeds")?.unwrap_or(d.seeds),
            rounds: e.take("rounds")?.unwrap_or(d.rounds),
            devices: e.take("m")?.unwrap_or(d.devices),
            data,
            hidden: e.take_list("model.hidden")?.unwrap_or(d.hidden),
            split_layer: e.take("model.split_layer")?,
            hyper,
            clusters: e.take("cluster.k")?.unwrap_or(d.clusters),
            low_rank_dim: e.take("cluster.d")?.unwrap_or(d.low_rank_dim),
            projector_devices: e.take("cluster.projector_devices")?,
            offline_round: e.take("fedgroup.offline_round")?.unwrap_or(d.offline_round),
            sample_fraction: e.take("sample_fraction")?.unwrap_or(d.sample_fraction),
            bytes_per_scalar: e.take("bytes_per_scalar")?.unwrap_or(d.bytes_per_scalar),
            out_dir: e.take_raw("out").map(PathBuf::from),
        };
        e.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::config("strategies", "must list at least one strategy"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be at least 1"));
        }
        if self.devices == 0 {
            return Err(Error::config("m", "must be at least 1"));
        }
        if let DataSource::Synthetic { k_true, .. } = self.data {
            if k_true == 0 || k_true > self.devices {
                return Err(Error::config("data.k_true", "must lie in [1, m]"));
            }
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "widths must be positive"));
        }
        self.strategy_config(self.strategies[0], self.seeds[0]).validate()
    }

    pub fn strategy_config(&self, kind: StrategyKind, seed: u64) -> StrategyConfig {
        StrategyConfig {
            kind,
            clusters: self.clusters,
            hyper: self.hyper,
            low_rank_dim: self.low_rank_dim,
            projector_devices: self.projector_devices,
            offline_round: self.offline_round,
            sample_fraction: self.sample_fraction,
            bytes_per_scalar: self.bytes_per_scalar,
            seed,
        }
    }

    /// Builds the device shards for one seed.
    pub fn build_shards(&self, seed: u64) -> Result<Vec<DeviceShard>> {
        let spec = |mode| PartitionSpec {
            mode,
            devices: self.devices,
            seed,
        };
        match &self.data {
            DataSource::Synthetic {
                k_true,
                input_dim,
                classes,
                samples_per_device,
            } => make_synthetic_clusters(*k_true, self.devices, *input_dim, *classes, *samples_per_device, seed),
            DataSource::Mixture {
                total,
                input_dim,
                classes,
                partition: mode,
            } => partition(&make_class_mixture(*total, *input_dim, *classes, seed)?, &spec(*mode)),
            DataSource::Idx {
                images,
                labels,
                classes,
                limit,
                partition: mode,
            } => partition(&load_idx_dataset(images, labels, *classes, *limit)?, &spec(*mode)),
        }
    }

    pub fn arch_for(&self, input_dim: usize, classes: usize) -> Result<Arc<ModelArch>> {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.hidden);
        sizes.push(classes);
        let split = self.split_layer.unwrap_or(sizes.len().saturating_sub(2));
        ModelArch::new(sizes, split)
            .map(Arc::new)
            .map_err(|e| Error::config("model.hidden", e.to_string()))
    }
}

/// One finished `(seed, strategy)` run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub metrics: Vec<RoundMetrics>,
}

pub fn csv_row(strategy: StrategyKind, seed: u64, m: &RoundMetrics) -> String {
    let ari = m.ari.map(|a| format!("{a:.6}")).unwrap_or_default();
    let sizes = m
        .cluster_sizes
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(";");
    format!(
        "{},{},{},{:.6},{:.6},{},{},{},{},\"{}\"",
        m.round, strategy, seed, m.mean_acc, m.std_acc, ari, m.sim_flops, m.bytes_up, m.bytes_down, sizes
    )
}

pub fn render_csv(record: &RunRecord) -> String {
    let mut out = String::with_capacity(64 * (record.metrics.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for m in &record.metrics {
        out.push_str(&csv_row(record.strategy, record.seed, m));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SeedSummary {
    pub seed: u64,
    pub final_mean_acc: f64,
    pub final_ari: Option<f64>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct StrategySummary {
    pub strategy: String,
    /// Mean over seeds of the final-round mean device accuracy.
    pub mean_acc: f64,
    /// Population standard deviation of that quantity over seeds.
    pub std_acc: f64,
    pub mean_ari: Option<f64>,
    pub runs: Vec<SeedSummary>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ExperimentSummary {
    pub rounds: usize,
    pub seeds: Vec<u64>,
    pub strategies: Vec<StrategySummary>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn summarize(config: &ExperimentConfig, records: &[RunRecord]) -> ExperimentSummary {
    let strategies = config
        .strategies
        .iter()
        .map(|&kind| {
            let runs: Vec<SeedSummary> = records
                .iter()
                .filter(|r| r.strategy == kind)
                .map(|r| {
                    let last = r.metrics.last().expect("rounds >= 1");
                    SeedSummary {
                        seed: r.seed,
                        final_mean_acc: last.mean_acc,
                        final_ari: last.ari,
                    }
                })
                .collect();
            let accs: Vec<f64> = runs.iter().map(|r| r.final_mean_acc).collect();
            let (mean_acc, std_acc) = mean_std(&accs);
            let aris: Option<Vec<f64>> = runs.iter().map(|r| r.final_ari).collect();
            StrategySummary {
                strategy: kind.to_string(),
                mean_acc,
                std_acc,
                mean_ari: aris.map(|a| mean_std(&a).0),
                runs,
            }
        })
        .collect();
    ExperimentSummary {
        rounds: config.rounds,
        seeds: config.seeds.clone(),
        strategies,
    }
}

/// Runs every `(seed, strategy)` pair. Independent runs execute in
/// parallel; the output order follows the config.
pub fn run_all(config: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let jobs: Vec<(u64, StrategyKind)> = config
        .seeds
        .iter()
        .flat_map(|&s| config.strategies.iter().map(move |&k| (s, k)))
        .collect();
    par::map(&jobs, |&(seed, kind)| -> Result<RunRecord> {
        let shards = config.build_shards(seed)?;
        let first = &shards[0].train;
        let arch = config.arch_for(first.input_dim(), first.num_classes())?;
        let (metrics, _) = run_simulation(config.strategy_config(kind, seed), arch, shards, config.rounds)?;
        Ok(RunRecord {
            strategy: kind,
            seed,
            metrics,
        })
    })
    .into_iter()
    .collect()
}

/// Runs the experiment and writes per-run CSVs plus `summary.json` into
/// `out_dir`. Returns the summary.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentSummary> {
    let records = run_all(config)?;
    fs::create_dir_all(out_dir)?;
    for r in &records {
        fs::write(
            out_dir.join(format!("{}_seed{}.csv", r.strategy, r.seed)),
            render_csv(r),
        )?;
    }
    let summary = summarize(config, &records);
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    fs::write(out_dir.join("summary.json"), json)?;
    Ok(summary)
}

/// One line of the cost report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostRow {
    pub m: u64,
    pub k: u64,
    pub strategy: StrategyKind,
    pub sim_flops: u64,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub dim: u64,
    pub phi_dim: u64,
    pub d: u64,
    pub bytes_per_scalar: u64,
    pub rows: Vec<CostRow>,
}

/// The two reference scales, `(m, K)`.
pub const REFERENCE_SCALES: [(u64, u64); 2] = [(100, 10), (1000, 100)];

/// Per-strategy costs for one round with every device participating, at
/// the reference scales plus any extra `(m, K)` scales.
pub fn cost_report(dim: u64, phi_dim: u64, d: u64, bytes_per_scalar: u64, extra: &[(u64, u64)]) -> CostReport {
    let mut scales = REFERENCE_SCALES.to_vec();
    for s in extra {
        if !scales.contains(s) {
            scales.push(*s);
        }
    }
    let rows = scales
        .iter()
        .flat_map(|&(m, k)| {
            StrategyKind::ALL.into_iter().map(move |strategy| {
                let k_eff = if strategy.is_clustered() { k } else { 1 };
                let (bytes_up, bytes_down) = comm_bytes(strategy, m, k_eff, dim, phi_dim, d, bytes_per_scalar);
                CostRow {
                    m,
                    k,
                    strategy,
                    sim_flops: similarity_flops(strategy, m, k_eff, dim, d),
                    bytes_up,
                    bytes_down,
                }
            })
        })
        .collect();
    CostReport {
        dim,
        phi_dim,
        d,
        bytes_per_scalar,
        rows,
    }
}

impl CostReport {
    pub fn pair_reduction(&self) -> f64 {
        pair_reduction_factor(self.dim, self.d)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "# dim={} phi_dim={} d={} bytes_per_scalar={}",
            self.dim, self.phi_dim, self.d, self.bytes_per_scalar
        )
        .unwrap();
        writeln!(out, "m,k,strategy,sim_flops,bytes_up,bytes_down").unwrap();
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.m, r.k, r.strategy, r.sim_flops, r.bytes_up, r.bytes_down
            )
            .unwrap();
        }
        writeln!(
            out,
            "# per-pair similarity reduction (full / low-rank): {}",
            self.pair_reduction()
        )
        .unwrap();
        out
    }
}
