//! Run configuration and the train / eval / baseline / gradcheck commands.
//!
//! A run is described by one TOML file:
//!
//! ```toml
//! env = "rmc"            # or "imm"
//! seed = 0               # required
//! out_dir = "runs/rmc"   # optional, relative to the working directory
//!
//! [rmc]                  # RmcConfig fields
//! target_wp1 = 20
//! target_wp2 = 20
//!
//! [imm]
//! instance = "data/imm_30x4.txt"   # relative to this file; omitted = built-in instance
//!
//! [encoder]              # rounds, message_width, hidden, activation
//! [heads]                # hidden, activation
//! [ppo]                  # PpoConfig fields
//! [schedule]             # episodes, eval_every, eval_episodes, episodes_per_update, target_success
//! ```
//!
//! Every section and key is optional except `env` and `seed`. Unknown keys are
//! rejected. `cmd_train` writes the resolved configuration to
//! `run-manifest.toml`; training from that manifest reproduces the run.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    self, build_bindings, derive_seed, streams, ActionMode, AgentBinding, EncoderConfig, HeadConfig, Schedule,
    TrainError, TrainReport,
};
use crate::dispatch::{self, DispatchError, DispatchRule, RunSummary};
use crate::encoder::{check_encoder_gradients, EncoderParams, Readout};
use crate::env::MultiAgentEnv;
use crate::graph::{Graph, Matrix};
use crate::imm::instance::{parse_instance, shipped_instance, InstanceError};
use crate::imm::{ImmConfig, ImmEnv, ImmInstance};
use crate::nn::{check_gradients, load_checkpoint, save_checkpoint, Activation, DenseNet, NetError};
use crate::ppo::PpoConfig;
use crate::rmc::{RmcConfig, RmcEnv};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("instance {path}: {source}")]
    Instance { path: PathBuf, source: InstanceError },
    #[error("checkpoint {net}: expected layers {expected:?}, found {found:?}")]
    CheckpointShape {
        net: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint {net}: {source}")]
    Checkpoint { net: String, source: NetError },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] toml::ser::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Rmc,
    Imm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImmSection {
    /// Instance file; the built-in 30-job instance when absent.
    pub instance: Option<PathBuf>,
    pub max_steps: u32,
    pub completion_bonus: f64,
    pub step_penalty: f64,
    pub terminal_scale: f64,
}

impl Default for ImmSection {
    fn default() -> Self {
        let c = ImmConfig::default();
        Self {
            instance: None,
            max_steps: c.max_steps,
            completion_bonus: c.completion_bonus,
            step_penalty: c.step_penalty,
            terminal_scale: c.terminal_scale,
        }
    }
}

impl ImmSection {
    pub fn env_config(&self) -> ImmConfig {
        ImmConfig {
            max_steps: self.max_steps,
            completion_bonus: self.completion_bonus,
            step_penalty: self.step_penalty,
            terminal_scale: self.terminal_scale,
        }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/latest")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvKind,
    /// Root of every random stream in the run.
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub rmc: RmcConfig,
    #[serde(default)]
    pub imm: ImmSection,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub heads: HeadConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub schedule: Schedule,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub episodes: Option<u64>,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|source| HarnessError::Parse {
            path: origin.to_path_buf(),
            source,
        })
    }

    /// Reads, resolves the instance path against the file's directory and
    /// validates.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::parse(&text, path)?;
        if let Some(inst) = cfg.imm.instance.as_mut() {
            if inst.is_relative() {
                *inst = path.parent().unwrap_or(Path::new(".")).join(&*inst);
            }
            if let Ok(abs) = fs::canonicalize(&*inst) {
                *inst = abs;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(out) = &o.out {
            self.out_dir = out.clone();
        }
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(episodes) = o.episodes {
            self.schedule.episodes = episodes;
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.rmc.max_steps == 0 || self.imm.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if self.rmc.processing_ticks.contains(&0) {
            return bad("rmc.processing_ticks must be positive");
        }
        if self.encoder.rounds == 0 || self.encoder.message_width == 0 {
            return bad("encoder.rounds and encoder.message_width must be positive");
        }
        if self.encoder.hidden.contains(&0) || self.heads.hidden.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        if self.ppo.epochs == 0 || self.ppo.minibatch_size == 0 {
            return bad("ppo.epochs and ppo.minibatch_size must be positive");
        }
        if let Some(p) = &self.imm.instance {
            if self.env == EnvKind::Imm && !p.exists() {
                return Err(HarnessError::Config(format!("instance file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// The schedule with the run's seed.
    pub fn resolved_schedule(&self) -> Schedule {
        Schedule {
            seed: self.seed,
            ..self.schedule.clone()
        }
    }

    pub fn instance(&self) -> Result<ImmInstance, HarnessError> {
        match &self.imm.instance {
            None => Ok(shipped_instance()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(io_err(p))?;
                parse_instance(&text).map_err(|source| HarnessError::Instance {
                    path: p.clone(),
                    source,
                })
            }
        }
    }

    pub fn make_env(&self) -> Result<Box<dyn MultiAgentEnv + Send>, HarnessError> {
        Ok(match self.env {
            EnvKind::Rmc => Box::new(RmcEnv::new(self.rmc.clone())),
            EnvKind::Imm => Box::new(ImmEnv::new(self.instance()?, self.imm.env_config())),
        })
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        Ok(toml::to_string(self)?)
    }
}

pub fn load_with_overrides(path: &Path, o: &Overrides) -> Result<RunConfig, HarnessError> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply(o);
    Ok(cfg)
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>, HarnessError> {
    Ok(BufWriter::new(fs::File::create(path).map_err(io_err(path))?))
}

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// `episode,agent_id,return,episode_steps,success_flag,makespan`.
pub fn write_curves_csv(report: &TrainReport, w: impl Write) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["episode", "agent_id", "return", "episode_steps", "success_flag", "makespan"])?;
    for r in &report.curves {
        out.write_record([
            r.episode.to_string(),
            r.agent_id.to_string(),
            r.episode_return.to_string(),
            r.episode_steps.to_string(),
            u8::from(r.success).to_string(),
            opt(r.makespan),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// `episode,agent_id,policy_loss,value_loss,entropy,clip_fraction,mean_return`.
pub fn write_training_log_csv(report: &TrainReport, w: impl Write) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "episode",
        "agent_id",
        "policy_loss",
        "value_loss",
        "entropy",
        "clip_fraction",
        "mean_return",
    ])?;
    for r in &report.log {
        out.write_record([
            r.episode.to_string(),
            r.agent_id.to_string(),
            r.stats.policy_loss.to_string(),
            r.stats.value_loss.to_string(),
            r.stats.entropy.to_string(),
            r.stats.clip_fraction.to_string(),
            r.mean_return.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// `episode,eval_episodes,success_rate,mean_makespan,mean_steps`.
pub fn write_evaluations_csv(report: &TrainReport, w: impl Write) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["episode", "eval_episodes", "success_rate", "mean_makespan", "mean_steps"])?;
    for r in &report.evals {
        out.write_record([
            r.episode.to_string(),
            r.episodes.to_string(),
            r.success_rate.to_string(),
            opt(r.mean_makespan),
            r.mean_steps.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

const NET_PARTS: [&str; 4] = ["policy", "value", "message", "update"];

fn checkpoint_name(agent: usize, part: &str) -> String {
    format!("agent{agent}_{part}.net")
}

fn parts(b: &AgentBinding) -> [&DenseNet; 4] {
    let f = b.nets.frontend.as_ref().expect("harness agents have a graph frontend");
    [
        &b.nets.policy_net,
        &b.nets.value_net,
        &f.encoder.message_net,
        &f.encoder.update_net,
    ]
}

/// Writes one file per agent and network.
pub fn save_agents(dir: &Path, bindings: &[AgentBinding]) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for b in bindings {
        for (part, net) in NET_PARTS.iter().zip(parts(b)) {
            let name = checkpoint_name(b.agent_id, part);
            save_checkpoint(net, &dir.join(&name)).map_err(|source| HarnessError::Checkpoint { net: name, source })?;
        }
    }
    Ok(())
}

/// Replaces the networks of `bindings` with the checkpoints in `dir`. Layer
/// sizes must match the configuration.
pub fn load_agents(dir: &Path, bindings: &mut [AgentBinding]) -> Result<(), HarnessError> {
    for b in bindings.iter_mut() {
        let mut loaded = Vec::with_capacity(4);
        for (part, expected) in NET_PARTS.iter().zip(parts(b)) {
            let name = checkpoint_name(b.agent_id, part);
            let net = load_checkpoint(&dir.join(&name)).map_err(|source| HarnessError::Checkpoint {
                net: name.clone(),
                source,
            })?;
            if net.layer_sizes() != expected.layer_sizes() || net.activation() != expected.activation() {
                return Err(HarnessError::CheckpointShape {
                    net: name,
                    expected: expected.layer_sizes().to_vec(),
                    found: net.layer_sizes().to_vec(),
                });
            }
            loaded.push(net);
        }
        let mut it = loaded.into_iter();
        b.nets.policy_net = it.next().expect("four nets");
        b.nets.value_net = it.next().expect("four nets");
        let f = b.nets.frontend.as_mut().expect("harness agents have a graph frontend");
        f.encoder.message_net = it.next().expect("four nets");
        f.encoder.update_net = it.next().expect("four nets");
    }
    Ok(())
}

#[derive(Debug)]
pub struct TrainOutput {
    pub config: RunConfig,
    pub report: TrainReport,
    pub bindings: Vec<AgentBinding>,
}

/// Trains from a resolved configuration and writes `curves.csv`,
/// `training_log.csv`, `evaluations.csv`, `checkpoints/` and
/// `run-manifest.toml` into `config.out_dir`.
pub fn train_from_config(
    config: &RunConfig,
    on_eval: impl FnMut(&agents::EvalRow),
) -> Result<TrainOutput, HarnessError> {
    config.validate()?;
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    fs::write(out.join("run-manifest.toml"), config.to_toml()?).map_err(io_err(out))?;
    let mut env = config.make_env()?;
    let mut bindings = build_bindings(env.as_ref(), &config.encoder, &config.heads, config.seed)?;
    let report = agents::train(env.as_mut(), &mut bindings, &config.ppo, &config.resolved_schedule(), on_eval)?;
    write_curves_csv(&report, create_file(&out.join("curves.csv"))?)?;
    write_training_log_csv(&report, create_file(&out.join("training_log.csv"))?)?;
    write_evaluations_csv(&report, create_file(&out.join("evaluations.csv"))?)?;
    save_agents(&out.join("checkpoints"), &bindings)?;
    Ok(TrainOutput {
        config: config.clone(),
        report,
        bindings,
    })
}

pub fn cmd_train(config_path: &Path, overrides: &Overrides) -> Result<TrainOutput, HarnessError> {
    let cfg = load_with_overrides(config_path, overrides)?;
    train_from_config(&cfg, |e| {
        eprintln!(
            "episode {:>6}  greedy success {:.2}  makespan {}",
            e.episode + 1,
            e.success_rate,
            opt(e.mean_makespan.map(|m| format!("{m:.1}")))
        );
    })
}

/// Rolls out trained agents, one episode per seed `seed + i`, and writes
/// `report.csv` into the output directory. Greedy unless `sample` is set.
pub fn eval_bindings(
    config: &RunConfig,
    bindings: &[AgentBinding],
    episodes: u64,
    sample: bool,
) -> Result<Vec<RunSummary>, HarnessError> {
    let policy = if sample { "trained-sampled" } else { "trained" };
    let mode = if sample { ActionMode::SampleOnly } else { ActionMode::Greedy };
    (0..episodes)
        .into_par_iter()
        .map(|i| {
            let seed = config.seed + i;
            let mut env = config.make_env()?;
            let mut local: Vec<AgentBinding> = bindings.to_vec();
            for b in &mut local {
                b.reseed(derive_seed(seed, streams::EVAL));
            }
            let res = agents::collect_episode(env.as_mut(), &mut local, mode, i, seed)?;
            Ok(RunSummary {
                policy: policy.to_string(),
                seed,
                makespan: res.outcome.makespan,
                steps: res.outcome.steps,
                success: res.outcome.success,
            })
        })
        .collect()
}

pub fn cmd_eval(
    checkpoint_dir: &Path,
    config_path: &Path,
    episodes: u64,
    sample: bool,
    overrides: &Overrides,
) -> Result<Vec<RunSummary>, HarnessError> {
    let cfg = load_with_overrides(config_path, overrides)?;
    let env = cfg.make_env()?;
    let mut bindings = build_bindings(env.as_ref(), &cfg.encoder, &cfg.heads, cfg.seed)?;
    load_agents(checkpoint_dir, &mut bindings)?;
    let runs = eval_bindings(&cfg, &bindings, episodes, sample)?;
    write_reports(&cfg.out_dir, &runs)?;
    Ok(runs)
}

fn write_reports(out: &Path, runs: &[RunSummary]) -> Result<(), HarnessError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    dispatch::write_report_csv(runs, create_file(&out.join("report.csv"))?)?;
    dispatch::write_summary_csv(&dispatch::compare(runs), create_file(&out.join("summary.csv"))?)?;
    Ok(())
}

/// One dispatch run per configured environment and seed.
pub fn run_baseline(config: &RunConfig, rule: DispatchRule, seed: u64) -> Result<RunSummary, HarnessError> {
    Ok(match config.env {
        EnvKind::Rmc => dispatch::run_dispatch_rmc(&config.rmc, rule, seed)?,
        EnvKind::Imm => dispatch::run_dispatch_imm(&config.instance()?, &config.imm.env_config(), rule, seed)?.0,
    })
}

/// Runs `rule` for seeds `seed..seed + seeds` and writes `report.csv`.
pub fn cmd_baseline(
    config_path: &Path,
    rule: &str,
    seeds: u64,
    overrides: &Overrides,
) -> Result<Vec<RunSummary>, HarnessError> {
    let rule: DispatchRule = rule.parse()?;
    let cfg = load_with_overrides(config_path, overrides)?;
    let runs: Vec<RunSummary> = (0..seeds)
        .into_par_iter()
        .map(|i| run_baseline(&cfg, rule, cfg.seed + i))
        .collect::<Result<_, _>>()?;
    write_reports(&cfg.out_dir, &runs)?;
    Ok(runs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckSummary {
    pub configurations: usize,
    pub dense_max_rel_error: f64,
    pub encoder_max_rel_error: f64,
    pub passed: bool,
}

const ACTIVATIONS: [Activation; 3] = [Activation::Tanh, Activation::Relu, Activation::Identity];

fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Fresh biases away from zero, so that ReLU units are not evaluated at their kink.
fn randomize_biases(net: &mut DenseNet, rng: &mut impl Rng) {
    for l in 0..net.layer_count() {
        for b in net.biases_mut(l) {
            *b = rng.random_range(-0.5..0.5);
        }
    }
}

/// Random graph with up to `max_nodes` nodes, for checks and tests.
pub fn random_graph(rng: &mut impl Rng, max_nodes: usize, node_width: usize, edge_width: usize) -> Graph {
    let n = rng.random_range(1..=max_nodes);
    let e = rng.random_range(0..=2 * n);
    let senders: Vec<usize> = (0..e).map(|_| rng.random_range(0..n)).collect();
    let receivers: Vec<usize> = (0..e).map(|_| rng.random_range(0..n)).collect();
    let x = Matrix::new(n, node_width, random_vec(rng, n * node_width)).expect("sized");
    let a = Matrix::new(e, edge_width, random_vec(rng, e * edge_width)).expect("sized");
    Graph::new(x, [senders, receivers], a).expect("ids in range")
}

/// Finite-difference checks of dense networks and the encoder over
/// `configurations` random shapes each.
pub fn cmd_gradcheck(seed: u64, configurations: usize, tolerance: f64) -> Result<GradcheckSummary, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dense_max = 0.0f64;
    let mut enc_max = 0.0f64;
    let mut passed = true;
    let cfg_err = |e: &dyn std::fmt::Display| HarnessError::Config(e.to_string());
    for _ in 0..configurations {
        let depth = rng.random_range(1..=3);
        let sizes: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=6)).collect();
        let act = ACTIVATIONS[rng.random_range(0..3)];
        let mut net = DenseNet::init(&sizes, act, rng.random()).map_err(|e| cfg_err(&e))?;
        randomize_biases(&mut net, &mut rng);
        let x = random_vec(&mut rng, sizes[0]);
        let r = check_gradients(&net, &x, tolerance).map_err(|e| cfg_err(&e))?;
        dense_max = dense_max.max(r.max_rel_error);
        passed &= r.passed;
    }
    for _ in 0..configurations {
        let d_v = rng.random_range(1..=4);
        let d_e = rng.random_range(0..=3);
        let g = random_graph(&mut rng, 6, d_v, d_e);
        let hidden = vec![rng.random_range(1..=6)];
        let act = ACTIVATIONS[rng.random_range(0..3)];
        let mut params = EncoderParams::init(
            d_v,
            d_e,
            rng.random_range(1..=4),
            &hidden,
            act,
            rng.random_range(1..=3),
            rng.random(),
        )
        .map_err(|e| cfg_err(&e))?;
        randomize_biases(&mut params.message_net, &mut rng);
        randomize_biases(&mut params.update_net, &mut rng);
        let readout = if rng.random_bool(0.5) {
            Readout::Flatten
        } else {
            Readout::Nodes(vec![rng.random_range(0..g.node_count())])
        };
        let r = check_encoder_gradients(&g, &params, &readout, tolerance).map_err(|e| cfg_err(&e))?;
        enc_max = enc_max.max(r.max_rel_error);
        passed &= r.passed;
    }
    Ok(GradcheckSummary {
        configurations,
        dense_max_rel_error: dense_max,
        encoder_max_rel_error: enc_max,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "env = \"rmc\"\nseed = 3\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::parse(MINIMAL, Path::new("x.toml")).unwrap();
        assert_eq!(cfg.rmc, RmcConfig::default());
        assert_eq!(cfg.ppo, PpoConfig::default());
        assert_eq!(cfg.resolved_schedule().seed, 3);
    }

    #[test]
    fn seed_is_required_and_unknown_keys_rejected() {
        assert!(RunConfig::parse("env = \"rmc\"\n", Path::new("x")).is_err());
        assert!(RunConfig::parse("env = \"rmc\"\nseed = 1\nbogus = 2\n", Path::new("x")).is_err());
        assert!(RunConfig::parse("env = \"rmc\"\nseed = 1\n[ppo]\nlr2 = 1.0\n", Path::new("x")).is_err());
    }

    #[test]
    fn manifest_round_trips() {
        let text = "env = \"imm\"\nseed = 1\n[imm]\nmax_steps = 99\n[schedule]\nepisodes = 4\ntarget_success = 0.5\n[encoder]\nhidden = [3, 4]\nactivation = \"relu\"\n";
        let cfg = RunConfig::parse(text, Path::new("x")).unwrap();
        let again = RunConfig::parse(&cfg.to_toml().unwrap(), Path::new("y")).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg = RunConfig::parse(MINIMAL, Path::new("x")).unwrap();
        cfg.apply(&Overrides {
            out: Some("o".into()),
            seed: Some(8),
            episodes: Some(2),
        });
        assert_eq!((cfg.seed, cfg.schedule.episodes), (8, 2));
        assert_eq!(cfg.out_dir, PathBuf::from("o"));
    }

    #[test]
    fn missing_instance_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "env = \"imm\"\nseed = 0\n[imm]\ninstance = \"nope.txt\"\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(HarnessError::Config(_))));
    }

    #[test]
    fn gradcheck_small_run_passes() {
        let s = cmd_gradcheck(1, 5, 1e-4).unwrap();
        assert!(s.passed, "{s:?}");
    }
}
