//! Experiment configuration and the runner behind the CLI.
//!
//! Every run writes `resolved_config.json` with all defaults filled in;
//! feeding that file back reproduces the same outputs byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::{GeneratorSpec, JumpBins, ModelClass};
use crate::loss::{saturation_count, Bregman};
use crate::marginal::{Combinators, MarginalModel};
use crate::paths::{CondPath, Dataset, State};
use crate::schedule::Schedule;
use crate::sim::{simulate, Field, Samples, SimConfig};
use crate::train::{train_model, velocity_field_error, Checkpoint, CheckpointMeta, TrainConfig, TrainedField};
use crate::verify::{energy_distance, run_kfe_suite, KfeSuite, PairReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    VerifyKfe,
    Simulate,
    Train,
    BenchToy,
}

/// Named toy data or a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// `{-1, +1}` with equal weights.
    TwoPoint {},
    /// Cell centres of the black squares of a `resolution x resolution`
    /// board on `[lo, hi]^2`.
    Checkerboard { resolution: usize, lo: f64, hi: f64 },
    Csv { file: PathBuf },
    Points {
        points: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
    },
    Tokens {
        tokens: Vec<Vec<usize>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::TwoPoint {}
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::TwoPoint {} => Ok(Dataset::two_point()),
            DatasetSpec::Checkerboard { resolution, lo, hi } => Dataset::checkerboard_2d(*resolution, *lo, *hi),
            DatasetSpec::Csv { file } => Dataset::from_csv(file),
            DatasetSpec::Points { points, weights } => Dataset::euclid(points.clone(), weights.clone()),
            DatasetSpec::Tokens { tokens, weights } => {
                Dataset::new(tokens.iter().map(|t| State::discrete(t.clone())).collect(), weights.clone())
            }
        }
    }
}

/// Path family of a benchmark cell; the dimension follows the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchPath {
    Condot,
    Mixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub datasets: Vec<DatasetSpec>,
    pub cells: Vec<(BenchPath, ModelClass)>,
    /// Mixture paths use the data bounding box widened by this margin.
    pub mixture_margin: f64,
    /// Samples per cell; steps and seed come from `sim`.
    pub n_samples: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            datasets: vec![DatasetSpec::TwoPoint {}, DatasetSpec::Checkerboard { resolution: 8, lo: -1.0, hi: 1.0 }],
            cells: vec![
                (BenchPath::Condot, ModelClass::Flow),
                (BenchPath::Condot, ModelClass::Jump),
                (BenchPath::Mixture, ModelClass::Flow),
                (BenchPath::Mixture, ModelClass::Diffusion),
                (BenchPath::Mixture, ModelClass::Jump),
            ],
            mixture_margin: 0.5,
            n_samples: 2000,
        }
    }
}

fn default_path() -> CondPath {
    CondPath::condot(1).expect("static path")
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Command,
    #[serde(default = "default_path")]
    pub path: CondPath,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub generator: GeneratorSpec,
    #[serde(default)]
    pub combinators: Combinators,
    #[serde(default)]
    pub bins: JumpBins,
    /// `sim.seed` is overwritten by `seed`.
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: Bregman,
    #[serde(default)]
    pub verify: KfeSuite,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

impl ExperimentConfig {
    pub fn new(command: Command) -> Self {
        serde_json::from_value(serde_json::json!({ "command": command })).expect("defaults deserialize")
    }

    /// Parses JSON; errors carry the line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
    }

    /// Fills defaults that depend on other fields.
    pub fn resolve(&mut self) -> Result<()> {
        self.sim.seed = self.seed;
        if self.sim.reflection_bounds.is_none() && self.command != Command::BenchToy {
            self.sim.reflection_bounds = self.path.reflection_bounds();
        }
        self.sim.validate()?;
        self.train.validate()?;
        self.combinators.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    /// False when a verification oracle failed.
    pub passed: bool,
    pub files: Vec<PathBuf>,
}

struct Out {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Out {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Out { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn json(&mut self, name: &str, v: &impl Serialize) -> Result<()> {
        let p = self.dir.join(name);
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        fs::write(&p, s)?;
        self.files.push(p);
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
        let p = self.dir.join(name);
        let mut w = csv::Writer::from_path(&p)?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
        self.files.push(p);
        Ok(())
    }
}

fn state_header(s: &State) -> Vec<String> {
    (0..s.x.len()).map(|i| format!("x{i}")).chain((0..s.tokens.len()).map(|k| format!("tok{k}"))).collect()
}

fn state_row(s: &State) -> Vec<String> {
    s.x.iter().map(|v| v.to_string()).chain(s.tokens.iter().map(|v| v.to_string())).collect()
}

/// Distance to the closest data point carrying the same tokens.
fn nearest_atom(data: &Dataset, s: &State) -> Option<(usize, f64)> {
    data.points()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.tokens == s.tokens)
        .map(|(i, p)| (i, p.x.iter().zip(&s.x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()))
        .fold(None, |best: Option<(usize, f64)>, c| match best {
            Some(b) if b.1 <= c.1 => Some(b),
            _ => Some(c),
        })
}

/// Sample quality against the finite target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    /// Total variation between nearest-atom frequencies and the data
    /// weights; samples whose tokens match no atom count as their own cell.
    pub tv_nearest_atom: f64,
    pub mean_nearest_distance: f64,
    /// Over the Euclidean coordinates; absent for token-only states.
    pub energy_distance: Option<f64>,
}

pub fn target_metrics(data: &Dataset, samples: &[State], seed: u64) -> Result<TargetMetrics> {
    let mut freq = vec![0.0; data.len() + 1];
    let mut dist = 0.0;
    for s in samples {
        match nearest_atom(data, s) {
            Some((i, d)) => {
                freq[i] += 1.0;
                dist += d;
            }
            None => freq[data.len()] += 1.0,
        }
    }
    let n = samples.len() as f64;
    let tv = 0.5
        * (freq.iter().zip(data.weights().iter().chain([&0.0])).map(|(f, w)| (f / n - w).abs()).sum::<f64>());
    let matched = n - freq[data.len()];
    let energy = if data.signature().euclid > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = samples.len().min(crate::verify::ENERGY_MAX);
        let target: Vec<Vec<f64>> = (0..m).map(|_| data.points()[data.sample_index(&mut rng)].x.clone()).collect();
        let got: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
        Some(energy_distance(&got, &target)?)
    } else {
        None
    };
    Ok(TargetMetrics {
        tv_nearest_atom: tv,
        mean_nearest_distance: if matched > 0.0 { dist / matched } else { f64::NAN },
        energy_distance: energy,
    })
}

#[derive(Debug, Clone, Serialize)]
struct SimMetrics {
    n_samples: usize,
    n_steps: usize,
    jump_schedule: crate::sim::JumpSchedule,
    clamped: u64,
    jumps: u64,
    target: TargetMetrics,
}

fn write_samples(out: &mut Out, s: &Samples) -> Result<()> {
    let header = state_header(&s.finals[0]);
    out.csv("samples.csv", &header, s.finals.iter().map(state_row))?;
    if !s.snapshots.is_empty() {
        let h: Vec<String> = std::iter::once("t".to_string()).chain(header.iter().cloned()).collect();
        let rows = s
            .snapshots
            .iter()
            .flat_map(|(t, ens)| ens.iter().map(move |x| std::iter::once(t.to_string()).chain(state_row(x)).collect()));
        out.csv("snapshots.csv", &h, rows)?;
    }
    if !s.trajectories.is_empty() {
        let h: Vec<String> = ["sample", "step", "t"].iter().map(|v| v.to_string()).chain(header.iter().cloned()).collect();
        let rows = s.trajectories.iter().map(|p| {
            [p.sample.to_string(), p.step.to_string(), p.t.to_string()].into_iter().chain(state_row(&p.state)).collect()
        });
        out.csv("trajectories.csv", &h, rows)?;
    }
    Ok(())
}

fn sim_metrics(cfg: &SimConfig, data: &Dataset, s: &Samples) -> Result<SimMetrics> {
    Ok(SimMetrics {
        n_samples: cfg.n_samples,
        n_steps: cfg.n_steps,
        jump_schedule: s.schedule,
        clamped: s.clamped,
        jumps: s.jumps,
        target: target_metrics(data, &s.finals, cfg.seed)?,
    })
}

/// Runs one experiment and writes its artifacts under `cfg.out`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let mut cfg = cfg.clone();
    cfg.resolve()?;
    let mut out = Out::new(&cfg.out)?;
    let passed = match cfg.command {
        Command::VerifyKfe => run_verify(&cfg, &mut out)?,
        Command::Simulate => run_simulate(&mut cfg, &mut out)?,
        Command::Train => run_train(&mut cfg, &mut out)?,
        Command::BenchToy => run_bench(&cfg, &mut out)?,
    };
    out.json("resolved_config.json", &cfg)?;
    Ok(RunOutcome { passed, files: out.files })
}

#[derive(Debug, Clone, Serialize)]
struct KfeSuiteReport<'a> {
    suite: &'a KfeSuite,
    pairs: Vec<PairReport>,
    all_pass: bool,
}

fn run_verify(cfg: &ExperimentConfig, out: &mut Out) -> Result<bool> {
    let pairs = run_kfe_suite(&cfg.verify)?;
    let all_pass = pairs.iter().all(PairReport::ok);
    out.json("kfe_report.json", &KfeSuiteReport { suite: &cfg.verify, pairs, all_pass })?;
    Ok(all_pass)
}

fn run_simulate(cfg: &mut ExperimentConfig, out: &mut Out) -> Result<bool> {
    let data = cfg.dataset.load()?;
    let model = MarginalModel::with(cfg.path.clone(), data.clone(), cfg.generator.clone(), cfg.bins, cfg.combinators)?;
    cfg.sim.jump_schedule.get_or_insert(model.preferred_schedule());
    let s = simulate(&model, &cfg.sim)?;
    write_samples(out, &s)?;
    out.json("metrics.json", &sim_metrics(&cfg.sim, &data, &s)?)?;
    Ok(true)
}

#[derive(Debug, Clone, Serialize)]
struct TrainReport {
    final_loss: f64,
    /// Relative L2 error of the velocity head against the exact marginal
    /// field on `t in {0.1, ..., 0.9}`, `x in [-3, 3]` (61 points); only for
    /// one-coordinate flow models.
    field_error: Option<f64>,
    loss_saturations: u64,
    sample_metrics: SimMetrics,
}

fn run_train(cfg: &mut ExperimentConfig, out: &mut Out) -> Result<bool> {
    let data = cfg.dataset.load()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sat0 = saturation_count();
    let res = train_model(&cfg.train, &cfg.path, &data, &cfg.generator, &cfg.loss, cfg.bins, &mut rng)?;
    let ckpt = Checkpoint {
        meta: CheckpointMeta { config_hash: cfg.train.hash(), seed: cfg.seed, steps: cfg.train.steps },
        net: res.net.clone(),
    };
    out.json("checkpoint.json", &ckpt)?;
    out.csv(
        "loss.csv",
        &["step".into(), "loss".into()],
        res.loss_curve.iter().map(|(s, l)| vec![s.to_string(), l.to_string()]),
    )?;
    let sig = cfg.path.signature();
    let field_error = if sig.euclid == 1 && sig.discrete == 0 && cfg.generator == GeneratorSpec::flow() {
        let exact = MarginalModel::new(cfg.path.clone(), data.clone(), GeneratorSpec::flow())?;
        let ts: Vec<f64> = (1..=9).map(|i| i as f64 * 0.1).collect();
        let xs: Vec<f64> = (0..=60).map(|i| -3.0 + 0.1 * i as f64).collect();
        Some(velocity_field_error(&res.net, &exact, &ts, &xs)?)
    } else {
        None
    };
    let field = TrainedField { net: res.net, path: cfg.path.clone() };
    cfg.sim.jump_schedule.get_or_insert(field.preferred_schedule());
    let s = simulate(&field, &cfg.sim)?;
    write_samples(out, &s)?;
    let report = TrainReport {
        final_loss: res.loss_curve.last().map_or(f64::NAN, |l| l.1),
        field_error,
        loss_saturations: saturation_count() - sat0,
        sample_metrics: sim_metrics(&cfg.sim, &data, &s)?,
    };
    out.json("train_report.json", &report)?;
    Ok(true)
}

#[derive(Debug, Clone, Serialize)]
struct BenchRow {
    dataset: DatasetSpec,
    path: BenchPath,
    model: ModelClass,
    jump_schedule: crate::sim::JumpSchedule,
    clamped: u64,
    jumps: u64,
    metrics: TargetMetrics,
}

fn bench_path(kind: BenchPath, data: &Dataset, margin: f64) -> Result<CondPath> {
    let sig = data.signature();
    if sig.discrete > 0 {
        return Err(Error::Config("bench-toy datasets must be Euclidean".into()));
    }
    match kind {
        BenchPath::Condot => CondPath::condot(sig.euclid),
        BenchPath::Mixture => {
            let all = data.points().iter().flat_map(|p| p.x.iter().copied());
            let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
            CondPath::mixture_uniform(lo - margin, hi + margin, Schedule::Linear, sig.euclid)
        }
    }
}

fn run_bench(cfg: &ExperimentConfig, out: &mut Out) -> Result<bool> {
    let mut rows = Vec::new();
    for ds in &cfg.bench.datasets {
        let data = ds.load()?;
        for (kind, class) in &cfg.bench.cells {
            let path = bench_path(*kind, &data, cfg.bench.mixture_margin)?;
            let model = MarginalModel::with(path.clone(), data.clone(), GeneratorSpec::single(*class), cfg.bins, Combinators::default())?;
            let mut sim = cfg.sim.clone();
            sim.reflection_bounds = path.reflection_bounds();
            sim.n_samples = cfg.bench.n_samples;
            let s = simulate(&model, &sim)?;
            rows.push(BenchRow {
                dataset: ds.clone(),
                path: *kind,
                model: *class,
                jump_schedule: s.schedule,
                clamped: s.clamped,
                jumps: s.jumps,
                metrics: target_metrics(&data, &s.finals, sim.seed)?,
            });
        }
    }
    out.json("bench.json", &serde_json::json!({ "rows": rows }))?;
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected_with_a_line() {
        let e = ExperimentConfig::from_json("{\n  \"command\": \"simulate\",\n  \"sedd\": 3\n}").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("sedd") && msg.contains("line 3"), "{msg}");
        let e = ExperimentConfig::from_json("{\"command\": \"simulate\", \"sim\": {\"n_step\": 3}}").unwrap_err();
        assert!(e.to_string().contains("n_step"));
        let e = ExperimentConfig::from_json("{\"command\": \"simulate\", \"dataset\": {\"kind\": \"two_point\", \"x\": 1}}");
        assert!(e.is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = ExperimentConfig::new(Command::Simulate);
        c.path = CondPath::mixture_uniform(-2.0, 2.0, Schedule::Cosine, 1).unwrap();
        c.dataset = DatasetSpec::Points { points: vec![vec![0.5], vec![-1.0]], weights: Some(vec![0.3, 0.7]) };
        c.generator = "superposition:flow=0.25,jump=0.75".parse().unwrap();
        c.loss = Bregman::mse_cosh(1.0);
        c.resolve().unwrap();
        assert_eq!(c.sim.reflection_bounds, Some((-2.0, 2.0)));
        let back = ExperimentConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn dataset_specs_load() {
        assert_eq!(DatasetSpec::TwoPoint {}.load().unwrap().len(), 2);
        assert_eq!(DatasetSpec::Checkerboard { resolution: 4, lo: -1.0, hi: 1.0 }.load().unwrap().len(), 8);
        let t = DatasetSpec::Tokens { tokens: vec![vec![0], vec![3]], weights: None }.load().unwrap();
        assert_eq!(t.signature().discrete, 1);
    }

    #[test]
    fn target_metrics_on_exact_samples() {
        let data = Dataset::two_point();
        let s: Vec<State> = (0..2000).map(|i| State::euclid(vec![if i % 2 == 0 { 1.0 } else { -1.0 }])).collect();
        let m = target_metrics(&data, &s, 0).unwrap();
        assert_eq!(m.tv_nearest_atom, 0.0);
        assert_eq!(m.mean_nearest_distance, 0.0);
        assert!(m.energy_distance.unwrap().abs() < 1e-2);
    }
}
