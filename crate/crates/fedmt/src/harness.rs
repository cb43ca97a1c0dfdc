//! Experiment runner: declarative JSON configs wired through data
//! generation, federated training, and the kernel checks, with traces and
//! summaries persisted per run.
//!
//! Every run writes to `<output_dir>/<run_id>/` where the run id is a
//! content hash of the resolved config, so reruns of the same config land
//! in the same place with byte-identical artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{gen_gaussian_clusters, gen_semg_like, split_servers, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::federation::{
    run_strategy, trace_to_csv, trace_to_jsonl, FederationConfig, ModelArch, RoundTrace,
};
use crate::model::AnyNet;
use crate::ntk::{corollary_checks, CorollaryReport};
use crate::projection::LabelSpaceSpec;

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable that overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "FEDMT_OUT_DIR";

/// Loss fraction used for the rounds-to-fraction summary statistic.
pub const LOSS_FRACTION: f64 = 0.1;

/// Which generator produces the federated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    GaussianClusters(SyntheticTaskSpec),
    SemgLike(SyntheticTaskSpec),
}

impl TaskKind {
    pub fn spec(&self) -> &SyntheticTaskSpec {
        match self {
            TaskKind::GaussianClusters(s) | TaskKind::SemgLike(s) => s,
        }
    }

    fn spec_mut(&mut self) -> &mut SyntheticTaskSpec {
        match self {
            TaskKind::GaussianClusters(s) | TaskKind::SemgLike(s) => s,
        }
    }
}

/// Optional kernel sweep attached to an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NtkCheckSpec {
    pub partitions: Vec<Vec<usize>>,
    pub xis: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub task: TaskKind,
    pub federation: FederationConfig,
    pub model: ModelArch,
    #[serde(default)]
    pub ntk_checks: Option<NtkCheckSpec>,
    #[serde(default)]
    pub output_dir: Option<String>,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::ConfigInvalid(format!("parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::ConfigInvalid(format!(
                "schema_version: expected {SCHEMA_VERSION}, got {}",
                self.schema_version
            )));
        }
        self.task
            .spec()
            .validate()
            .map_err(|e| Error::ConfigInvalid(format!("task: {e}")))?;
        self.federation
            .validate()
            .map_err(|e| Error::ConfigInvalid(format!("federation: {e}")))?;
        match &self.model {
            ModelArch::Ntk { width } if *width == 0 => {
                return Err(Error::ConfigInvalid("model: width must be positive".into()));
            }
            ModelArch::Mlp { hidden } if hidden.iter().any(|&h| h == 0) => {
                return Err(Error::ConfigInvalid("model: hidden sizes must be positive".into()));
            }
            _ => {}
        }
        if let Some(checks) = &self.ntk_checks {
            if !matches!(self.model, ModelArch::Ntk { .. }) {
                return Err(Error::ConfigInvalid(
                    "ntk_checks: kernel checks need the ntk model".into(),
                ));
            }
            let k = self.task.spec().k;
            for p in &checks.partitions {
                let sum: usize = p.iter().sum();
                if sum != k {
                    return Err(Error::ConfigInvalid(format!(
                        "ntk_checks: partition {p:?} sums to {sum}, task has {k} classes"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Final summary statistics, all derived from the round trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub final_test_acc: f64,
    pub best_test_acc: f64,
    /// First round at which overall loss fell to LOSS_FRACTION of round 0.
    pub rounds_to_loss_fraction: Option<usize>,
}

/// Everything a finished run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsStore {
    pub run_id: String,
    pub trace: Vec<RoundTrace>,
    pub summary: Summary,
}

/// Content hash of the resolved config (which includes the seed), first
/// twelve hex digits.
pub fn run_id(config: &ExperimentConfig) -> String {
    let canonical = serde_json::to_string(config).expect("config serialization cannot fail");
    let digest = Sha256::digest(canonical.as_bytes());
    let mut id = String::with_capacity(12);
    for byte in digest.iter().take(6) {
        id.push_str(&format!("{byte:02x}"));
    }
    id
}

/// Derives the summary from a trace; the stored summary must always equal
/// this recomputation.
pub fn summarize(trace: &[RoundTrace]) -> Result<Summary> {
    if trace.is_empty() {
        return Err(Error::ConfigInvalid("summary needs a non-empty trace".into()));
    }
    let final_test_acc = trace.last().unwrap().test_accuracy;
    let best_test_acc = trace.iter().map(|r| r.test_accuracy).fold(f64::NEG_INFINITY, f64::max);
    let threshold = trace[0].overall_loss * LOSS_FRACTION;
    let rounds_to_loss_fraction =
        trace.iter().find(|r| r.overall_loss <= threshold).map(|r| r.round);
    Ok(Summary { final_test_acc, best_test_acc, rounds_to_loss_fraction })
}

/// Output directory precedence: explicit CLI flag, then the environment
/// override, then the config, then `runs`.
pub fn resolve_output_dir(
    cli: Option<&str>,
    env: Option<&str>,
    config: &ExperimentConfig,
) -> PathBuf {
    if let Some(dir) = cli {
        return PathBuf::from(dir);
    }
    if let Some(dir) = env {
        return PathBuf::from(dir);
    }
    if let Some(dir) = &config.output_dir {
        return PathBuf::from(dir);
    }
    PathBuf::from("runs")
}

fn build_dataset(config: &ExperimentConfig) -> Result<crate::datagen::FederatedDataset> {
    let ds = match &config.task {
        TaskKind::GaussianClusters(spec) => gen_gaussian_clusters(spec)?,
        TaskKind::SemgLike(spec) => gen_semg_like(spec)?,
    };
    if config.federation.servers > 1 {
        split_servers(&ds, config.federation.servers)
    } else {
        Ok(ds)
    }
}

fn wrap_run<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::ConfigInvalid(msg) => Error::ConfigInvalid(format!("{stage}: {msg}")),
        other => other,
    })
}

/// Runs one experiment to completion and persists its artifacts under
/// `<out>/<run_id>/`: config.json, trace.csv, trace.jsonl, summary.json,
/// and ntk_report.json when kernel checks are configured.
pub fn run_experiment(config: &ExperimentConfig, out_root: &Path) -> Result<MetricsStore> {
    config.validate()?;
    let id = run_id(config);
    let dataset = wrap_run("dataset", build_dataset(config))?;
    let state = wrap_run(
        "training",
        run_strategy(&dataset, &config.federation, &config.model, config.seed),
    )?;
    let summary = summarize(&state.trace)?;
    let store = MetricsStore { run_id: id.clone(), trace: state.trace.clone(), summary };

    let dir = out_root.join(&id);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.json"), config.to_json())?;
    fs::write(dir.join("trace.csv"), trace_to_csv(&store.trace))?;
    fs::write(dir.join("trace.jsonl"), trace_to_jsonl(&store.trace))?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&store.summary).expect("summary serialization cannot fail"),
    )?;
    if config.ntk_checks.is_some() {
        let report = run_ntk_checks(config, &dataset)?;
        fs::write(
            dir.join("ntk_report.json"),
            serde_json::to_string_pretty(&report).expect("report serialization cannot fail"),
        )?;
    }
    Ok(store)
}

/// Runs the configured kernel sweeps on the freshly initialized model.
pub fn run_ntk_checks(
    config: &ExperimentConfig,
    dataset: &crate::datagen::FederatedDataset,
) -> Result<CorollaryReport> {
    let checks = config
        .ntk_checks
        .as_ref()
        .ok_or_else(|| Error::ConfigInvalid("ntk_checks: none configured".into()))?;
    let d = dataset.test_set.dim();
    let k = dataset.q.cols();
    let net = crate::federation::build_net(
        &config.model,
        d,
        k,
        crate::rng::derive_seed(config.seed, "model-init", 0),
    )?;
    let ntk = match net {
        AnyNet::Ntk(n) => n,
        AnyNet::Mlp(_) => {
            return Err(Error::ConfigInvalid("ntk_checks: kernel checks need the ntk model".into()))
        }
    };
    corollary_checks(&ntk, dataset, &checks.partitions, &checks.xis)
}

/// Sweepable experiment axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Server samples per class.
    N,
    /// Server label-noise level.
    Xi,
    /// Number of clients.
    C,
    /// Number of coarse classes (balanced hierarchical partition).
    J,
    /// Local SGD steps per round.
    LocalSteps,
    /// Minibatch size.
    Batch,
}

impl SweepAxis {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "n" => Ok(SweepAxis::N),
            "xi" => Ok(SweepAxis::Xi),
            "c" => Ok(SweepAxis::C),
            "j" => Ok(SweepAxis::J),
            "local_steps" => Ok(SweepAxis::LocalSteps),
            "batch" => Ok(SweepAxis::Batch),
            other => Err(Error::ConfigInvalid(format!(
                "axis: unknown \"{other}\" (expected n, xi, c, j, local_steps, batch)"
            ))),
        }
    }
}

/// Splits k classes into j groups as evenly as possible, larger groups
/// first.
pub fn balanced_partition(k: usize, j: usize) -> Result<Vec<usize>> {
    if j == 0 || j > k {
        return Err(Error::ConfigInvalid(format!(
            "j: cannot split {k} classes into {j} groups"
        )));
    }
    let base = k / j;
    let rem = k % j;
    Ok((0..j).map(|i| base + usize::from(i < rem)).collect())
}

fn as_count(v: f64, field: &str) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 && v <= usize::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(Error::ConfigInvalid(format!("{field}: {v} is not a positive integer")))
    }
}

fn apply_axis(config: &mut ExperimentConfig, axis: SweepAxis, value: f64) -> Result<()> {
    match axis {
        SweepAxis::N => config.task.spec_mut().n_server_per_class = as_count(value, "n")?,
        SweepAxis::Xi => config.task.spec_mut().xi = value,
        SweepAxis::C => config.task.spec_mut().clients = as_count(value, "c")?,
        SweepAxis::J => {
            let j = as_count(value, "j")?;
            let k = config.task.spec().k;
            let partition = balanced_partition(k, j)?;
            match &mut config.task {
                TaskKind::GaussianClusters(spec) => {
                    spec.space = LabelSpaceSpec::hierarchical(&partition);
                }
                TaskKind::SemgLike(_) => {
                    return Err(Error::ConfigInvalid(
                        "j: the semg-like task has a fixed interval label map".into(),
                    ));
                }
            }
        }
        SweepAxis::LocalSteps => {
            config.federation.sgd.local_steps = as_count(value, "local_steps")?
        }
        SweepAxis::Batch => config.federation.sgd.batch_size = as_count(value, "batch")?,
    }
    Ok(())
}

/// One sweep point: the axis value, the config it resolved to, and either
/// metrics or the error text.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepEntry {
    pub value: f64,
    pub run_id: String,
    pub outcome: std::result::Result<MetricsStore, String>,
}

/// Runs one experiment per axis value, sharing the base seed with per-run
/// derived streams. Failures are recorded and the sweep continues. With an
/// empty value list nothing runs and nothing is written.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    out_root: &Path,
) -> Result<Vec<SweepEntry>> {
    base.validate()?;
    if values.is_empty() {
        return Ok(Vec::new());
    }
    let mut entries = Vec::with_capacity(values.len());
    for (index, &value) in values.iter().enumerate() {
        let mut config = base.clone();
        config.seed = crate::rng::derive_seed(base.seed, "sweep", index as u64);
        let outcome = apply_axis(&mut config, axis, value)
            .and_then(|()| run_experiment(&config, out_root))
            .map_err(|e| e.to_string());
        entries.push(SweepEntry { value, run_id: run_id(&config), outcome });
    }
    let table = sweep_table(axis, &entries);
    fs::create_dir_all(out_root)?;
    fs::write(out_root.join("sweep.csv"), table)?;
    fs::write(
        out_root.join("sweep.json"),
        serde_json::to_string_pretty(&entries).expect("sweep serialization cannot fail"),
    )?;
    Ok(entries)
}

/// Combined summary table: axis, value, run id, summary fields, status.
pub fn sweep_table(axis: SweepAxis, entries: &[SweepEntry]) -> String {
    let axis_name = serde_json::to_value(axis)
        .expect("axis serialization cannot fail")
        .as_str()
        .expect("axis serializes to a string")
        .to_string();
    let mut out = String::from(
        "axis,value,run_id,final_test_acc,best_test_acc,rounds_to_loss_fraction,status\n",
    );
    for e in entries {
        match &e.outcome {
            Ok(store) => out.push_str(&format!(
                "{axis_name},{},{},{:.17e},{:.17e},{},ok\n",
                e.value,
                e.run_id,
                store.summary.final_test_acc,
                store.summary.best_test_acc,
                store
                    .summary
                    .rounds_to_loss_fraction
                    .map_or(String::from(""), |r| r.to_string()),
            )),
            Err(msg) => {
                let safe = msg.replace(['\n', ','], ";");
                out.push_str(&format!("{axis_name},{},{},,,,error: {safe}\n", e.value, e.run_id))
            }
        }
    }
    out
}

/// Convenience for tests and tooling: per-value final accuracies of the
/// successful sweep entries.
pub fn sweep_accuracies(entries: &[SweepEntry]) -> BTreeMap<String, f64> {
    entries
        .iter()
        .filter_map(|e| {
            e.outcome
                .as_ref()
                .ok()
                .map(|s| (format!("{}", e.value), s.summary.final_test_acc))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::{DeltaSign, Strategy, Weighting};
    use crate::model::SgdConfig;

    fn minimal_config() -> ExperimentConfig {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            task: TaskKind::GaussianClusters(SyntheticTaskSpec {
                d: 2,
                k: 3,
                space: LabelSpaceSpec::hierarchical(&[2, 1]),
                n_server_per_class: 5,
                clients: 2,
                per_client: 20,
                xi: 0.1,
                seed: 3,
                separation: 3.0,
            }),
            federation: FederationConfig {
                rounds: 3,
                eta_agg: 1.0,
                sgd: SgdConfig { eta_sgd: 0.1, batch_size: 10, local_steps: 2 },
                strategy: Strategy::FedMtP,
                weighting: Weighting::Equal,
                servers: 1,
                delta_sign: DeltaSign::Add,
            },
            model: ModelArch::Ntk { width: 64 },
            ntk_checks: None,
            output_dir: None,
            seed: 17,
        }
    }

    #[test]
    fn minimal_run_persists_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = minimal_config();
        let store = run_experiment(&cfg, dir.path()).unwrap();
        assert_eq!(store.trace.len(), 4);
        let run_dir = dir.path().join(&store.run_id);
        for file in ["config.json", "trace.csv", "trace.jsonl", "summary.json"] {
            assert!(run_dir.join(file).exists(), "{file} missing");
        }
        let csv = fs::read_to_string(run_dir.join("trace.csv")).unwrap();
        assert!(csv.starts_with("round,overall_loss,loss_p0,loss_p1,loss_p2,test_acc"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn reruns_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = minimal_config();
        let a = run_experiment(&cfg, dir.path()).unwrap();
        let csv_a = fs::read(dir.path().join(&a.run_id).join("trace.csv")).unwrap();
        let jsonl_a = fs::read(dir.path().join(&a.run_id).join("trace.jsonl")).unwrap();
        let b = run_experiment(&cfg, dir.path()).unwrap();
        let csv_b = fs::read(dir.path().join(&b.run_id).join("trace.csv")).unwrap();
        let jsonl_b = fs::read(dir.path().join(&b.run_id).join("trace.jsonl")).unwrap();
        assert_eq!(a.run_id, b.run_id);
        assert_eq!(csv_a, csv_b);
        assert_eq!(jsonl_a, jsonl_b);
    }

    #[test]
    fn csv_and_jsonl_hold_identical_values() {
        let dir = tempfile::tempdir().unwrap();
        let store = run_experiment(&minimal_config(), dir.path()).unwrap();
        let dirp = dir.path().join(&store.run_id);
        let csv = fs::read_to_string(dirp.join("trace.csv")).unwrap();
        let jsonl = fs::read_to_string(dirp.join("trace.jsonl")).unwrap();
        for (line, row) in jsonl.lines().zip(&store.trace) {
            let back: RoundTrace = serde_json::from_str(line).unwrap();
            assert_eq!(&back, row);
        }
        for (line, row) in csv.lines().skip(1).zip(&store.trace) {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells[0].parse::<usize>().unwrap(), row.round);
            assert_eq!(cells[1].parse::<f64>().unwrap(), row.overall_loss);
            let n = row.per_participant_losses.len();
            for (i, l) in row.per_participant_losses.iter().enumerate() {
                assert_eq!(cells[2 + i].parse::<f64>().unwrap(), *l);
            }
            assert_eq!(cells[2 + n].parse::<f64>().unwrap(), row.test_accuracy);
        }
    }

    #[test]
    fn summary_is_recomputable_from_the_trace() {
        let dir = tempfile::tempdir().unwrap();
        let store = run_experiment(&minimal_config(), dir.path()).unwrap();
        assert_eq!(summarize(&store.trace).unwrap(), store.summary);
        assert!(store.summary.best_test_acc >= store.summary.final_test_acc);
    }

    #[test]
    fn config_validation_reports_field_context() {
        let mut cfg = minimal_config();
        cfg.schema_version = 9;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("schema_version"), "{msg}");

        let mut cfg = minimal_config();
        cfg.federation.rounds = 0;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("federation"), "{msg}");

        let mut cfg = minimal_config();
        cfg.ntk_checks = Some(NtkCheckSpec { partitions: vec![vec![2, 2]], xis: vec![] });
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("ntk_checks"), "{msg}");

        let mut cfg = minimal_config();
        cfg.model = ModelArch::Mlp { hidden: vec![16] };
        cfg.ntk_checks = Some(NtkCheckSpec { partitions: vec![vec![2, 1]], xis: vec![] });
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("ntk"), "{msg}");
    }

    #[test]
    fn run_ids_track_config_content() {
        let cfg = minimal_config();
        assert_eq!(run_id(&cfg), run_id(&cfg));
        assert_eq!(run_id(&cfg).len(), 12);
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(run_id(&cfg), run_id(&other));
    }

    #[test]
    fn config_json_round_trips() {
        let mut cfg = minimal_config();
        cfg.ntk_checks = Some(NtkCheckSpec { partitions: vec![vec![2, 1]], xis: vec![0.0, 0.2] });
        cfg.output_dir = Some("somewhere".into());
        let text = cfg.to_json();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn output_dir_precedence_is_cli_env_config() {
        let mut cfg = minimal_config();
        cfg.output_dir = Some("from-config".into());
        assert_eq!(
            resolve_output_dir(Some("from-cli"), Some("from-env"), &cfg),
            PathBuf::from("from-cli")
        );
        assert_eq!(
            resolve_output_dir(None, Some("from-env"), &cfg),
            PathBuf::from("from-env")
        );
        assert_eq!(resolve_output_dir(None, None, &cfg), PathBuf::from("from-config"));
        cfg.output_dir = None;
        assert_eq!(resolve_output_dir(None, None, &cfg), PathBuf::from("runs"));
    }

    #[test]
    fn sweep_applies_axis_values_and_survives_failures() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = minimal_config();
        cfg.federation.rounds = 1;
        // Middle value is invalid (negative noise): the sweep must record
        // the failure and keep going.
        let entries =
            run_sweep(&cfg, SweepAxis::Xi, &[0.0, -0.5, 0.2], dir.path()).unwrap();
        assert_eq!(entries.len(), 3);
        assert!(entries[0].outcome.is_ok());
        assert!(entries[1].outcome.is_err());
        assert!(entries[2].outcome.is_ok());
        // Each successful run persisted a config with the axis value applied.
        let cfg0: ExperimentConfig = serde_json::from_str(
            &fs::read_to_string(dir.path().join(&entries[0].run_id).join("config.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(cfg0.task.spec().xi, 0.0);
        let cfg2: ExperimentConfig = serde_json::from_str(
            &fs::read_to_string(dir.path().join(&entries[2].run_id).join("config.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(cfg2.task.spec().xi, 0.2);
        // Runs under one sweep share the base seed but use derived streams.
        assert_ne!(cfg0.seed, cfg2.seed);
        let table = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert_eq!(table.lines().count(), 4);
        assert!(table.contains("error"));
        assert_eq!(sweep_accuracies(&entries).len(), 2);
    }

    #[test]
    fn empty_sweep_has_no_side_effects() {
        let dir = tempfile::tempdir().unwrap();
        let entries = run_sweep(&minimal_config(), SweepAxis::N, &[], dir.path()).unwrap();
        assert!(entries.is_empty());
        assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
    }

    #[test]
    fn j_axis_rebuilds_balanced_partitions() {
        let mut cfg = minimal_config();
        cfg.task.spec_mut().k = 6;
        cfg.task.spec_mut().space = LabelSpaceSpec::hierarchical(&[3, 3]);
        apply_axis(&mut cfg, SweepAxis::J, 3.0).unwrap();
        match &cfg.task.spec().space.kind {
            crate::projection::SpaceKind::Hierarchical(sizes) => {
                assert_eq!(sizes, &vec![2, 2, 2]);
            }
            other => panic!("unexpected kind {other:?}"),
        }
        assert!(apply_axis(&mut cfg, SweepAxis::J, 2.5).is_err());
        assert!(apply_axis(&mut cfg, SweepAxis::J, 9.0).is_err());
        assert_eq!(balanced_partition(7, 3).unwrap(), vec![3, 2, 2]);
    }

    #[test]
    fn axis_names_parse() {
        for (name, axis) in [
            ("n", SweepAxis::N),
            ("xi", SweepAxis::Xi),
            ("c", SweepAxis::C),
            ("j", SweepAxis::J),
            ("local_steps", SweepAxis::LocalSteps),
            ("batch", SweepAxis::Batch),
        ] {
            assert_eq!(SweepAxis::parse(name).unwrap(), axis);
        }
        assert!(SweepAxis::parse("rounds").is_err());
    }

    #[test]
    fn ntk_checks_emit_report() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = minimal_config();
        cfg.task.spec_mut().per_client = 8;
        cfg.task.spec_mut().n_server_per_class = 2;
        cfg.federation.rounds = 1;
        cfg.model = ModelArch::Ntk { width: 16 };
        cfg.ntk_checks =
            Some(NtkCheckSpec { partitions: vec![vec![3], vec![2, 1]], xis: vec![0.0, 0.2] });
        let store = run_experiment(&cfg, dir.path()).unwrap();
        let report: CorollaryReport = serde_json::from_str(
            &fs::read_to_string(dir.path().join(&store.run_id).join("ntk_report.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(report.lambda_by_j.len(), 2);
        assert_eq!(report.lambda_by_xi.len(), 2);
    }

    fn semg_config() -> ExperimentConfig {
        let mut cfg = minimal_config();
        cfg.task = TaskKind::SemgLike(SyntheticTaskSpec {
            d: crate::datagen::SEMG_FEATURES,
            k: 5,
            space: LabelSpaceSpec::hierarchical(&[2, 2, 1]),
            n_server_per_class: 2,
            clients: 2,
            per_client: 10,
            xi: 0.0,
            seed: 5,
            separation: 1.0,
        });
        cfg.model = ModelArch::Mlp { hidden: vec![16] };
        cfg.federation.rounds = 1;
        cfg.federation.sgd.eta_sgd = 1e-6;
        cfg.federation.sgd.batch_size = 5;
        cfg
    }

    // The raw signal statistics span several orders of magnitude, so a
    // freshly initialized network is softmax-saturated on this task. The
    // label-projection loss clamps its logs and trains through it.
    #[test]
    fn semg_task_smoke() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = semg_config();
        cfg.federation.strategy = Strategy::FedMtL;
        let store = run_experiment(&cfg, dir.path()).unwrap();
        assert_eq!(store.trace.len(), 2);
        for row in &store.trace {
            assert!(row.overall_loss.is_finite());
            assert!((0.0..=1.0).contains(&row.test_accuracy));
        }
    }

    // The probability-projection loss refuses to take a log of underflowed
    // mass; on the saturated task that must surface as a clean error, not
    // a panic or a poisoned artifact directory.
    #[test]
    fn semg_saturation_surfaces_as_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = semg_config();
        cfg.federation.strategy = Strategy::FedMtP;
        let err = run_experiment(&cfg, dir.path()).unwrap_err();
        assert!(matches!(err, Error::NonfiniteLoss(_)), "{err}");
        assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
    }
}
