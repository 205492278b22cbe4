//! Dispatching-rule baselines, an exhaustive oracle for tiny instances and
//! run aggregation.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::env::{EnvError, JointAction, MultiAgentEnv};
use crate::imm::{self, trace::Violation, ImmConfig, ImmEnv, ImmInstance, ImmState, Location, TraceRow};
use crate::rmc::{RmcConfig, RmcEnv};

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error("unknown rule `{0}`; valid rules are FIFO, SPT, RANDOM")]
    UnknownRule(String),
    #[error("rule {rule} is not defined for the {env} environment")]
    Unsupported { rule: DispatchRule, env: &'static str },
    #[error("environment produced an invalid schedule: {0:?}")]
    InvalidSchedule(Violation),
    #[error("invariant violated at step {step}: {what}")]
    Invariant { step: u64, what: String },
    #[error("search exceeded {0} nodes")]
    Budget(usize),
    #[error("no complete schedule within {0} steps")]
    StepCap(u32),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DispatchRule {
    /// Longest-waiting job first.
    Fifo,
    /// Shortest processing time on this machine first.
    Spt,
    /// Uniform over the legal jobs.
    Random,
}

impl DispatchRule {
    pub const ALL: [DispatchRule; 3] = [DispatchRule::Fifo, DispatchRule::Spt, DispatchRule::Random];
}

impl fmt::Display for DispatchRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DispatchRule::Fifo => "FIFO",
            DispatchRule::Spt => "SPT",
            DispatchRule::Random => "RANDOM",
        })
    }
}

impl FromStr for DispatchRule {
    type Err = DispatchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "FIFO" => Ok(DispatchRule::Fifo),
            "SPT" => Ok(DispatchRule::Spt),
            "RANDOM" => Ok(DispatchRule::Random),
            _ => Err(DispatchError::UnknownRule(s.to_string())),
        }
    }
}

fn legal_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|p| *p.1).map(|p| p.0).collect()
}

/// The rule's selection for `machine`. Ties go to the lowest job id.
pub fn select_job(
    rule: DispatchRule,
    state: &ImmState,
    instance: &ImmInstance,
    machine: usize,
    rng: &mut impl Rng,
) -> usize {
    let legal = legal_indices(&imm::legal_mask(state, instance, machine));
    if legal.len() == 1 {
        return legal[0];
    }
    match rule {
        DispatchRule::Fifo => *legal
            .iter()
            .min_by_key(|&&j| (state.jobs[j].arrival, j))
            .expect("non-empty"),
        DispatchRule::Spt => *legal
            .iter()
            .min_by_key(|&&j| (instance.jobs[j].times[state.jobs[j].stage], j))
            .expect("non-empty"),
        DispatchRule::Random => legal[rng.random_range(0..legal.len())],
    }
}

/// One evaluated episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSummary {
    pub policy: String,
    pub seed: u64,
    pub makespan: Option<u64>,
    pub steps: u64,
    pub success: bool,
}

/// Runs `rule` on every machine for one episode and validates the schedule.
pub fn run_dispatch_imm(
    instance: &ImmInstance,
    config: &ImmConfig,
    rule: DispatchRule,
    seed: u64,
) -> Result<(RunSummary, Vec<TraceRow>), DispatchError> {
    let mut env = ImmEnv::new(instance.clone(), config.clone());
    env.reset(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while !env.is_done() {
        let joint = (0..instance.machine_count)
            .map(|k| select_job(rule, env.state(), instance, k, &mut rng))
            .collect();
        env.step(&JointAction(joint))?;
    }
    let report = imm::validate_schedule(env.trace(), instance);
    if let Some(v) = report.violation {
        return Err(DispatchError::InvalidSchedule(v));
    }
    let out = env.outcome();
    Ok((
        RunSummary {
            policy: rule.to_string(),
            seed,
            makespan: out.makespan,
            steps: out.steps,
            success: out.success,
        },
        env.trace().to_vec(),
    ))
}

/// Uniformly random legal edge activations for both agents, checking piece
/// conservation every step. Only `RANDOM` applies here:
/// the cell has no job queues to order.
pub fn run_dispatch_rmc(config: &RmcConfig, rule: DispatchRule, seed: u64) -> Result<RunSummary, DispatchError> {
    if rule != DispatchRule::Random {
        return Err(DispatchError::Unsupported { rule, env: "rmc" });
    }
    let mut env = RmcEnv::new(config.clone());
    env.reset(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets = config.targets();
    while !env.is_done() {
        let joint = (0..2)
            .map(|a| {
                let legal = legal_indices(&env.legal_mask(a));
                legal[rng.random_range(0..legal.len())]
            })
            .collect();
        env.step(&JointAction(joint))?;
        let s = env.state();
        for piece in 0..2 {
            if s.total(piece) != targets[piece] {
                return Err(DispatchError::Invariant {
                    step: u64::from(s.step),
                    what: format!("work-piece {} count {} != {}", piece + 1, s.total(piece), targets[piece]),
                });
            }
        }
    }
    let out = env.outcome();
    Ok(RunSummary {
        policy: rule.to_string(),
        seed,
        makespan: out.makespan,
        steps: out.steps,
        success: out.success,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OptimalSchedule {
    pub makespan: u32,
    pub trace: Vec<TraceRow>,
    /// Search nodes expanded.
    pub nodes: usize,
}

/// Time still needed by the unfinished work, from either a job's or a
/// machine's point of view.
fn remaining_bound(state: &ImmState, instance: &ImmInstance) -> u32 {
    let mut machine_load = vec![0u32; instance.machine_count];
    let mut job_max = 0;
    for (j, js) in state.jobs.iter().enumerate() {
        let spec = &instance.jobs[j];
        let mut job_rest = 0;
        let first_unstarted = match js.location {
            Location::Output => continue,
            Location::Machine(k) => {
                let rem = state.machines[k].map_or(0, |b| b.remaining);
                job_rest += rem;
                machine_load[k] += rem;
                js.stage + 1
            }
            _ => js.stage,
        };
        for s in first_unstarted..spec.machines.len() {
            job_rest += spec.times[s];
            machine_load[spec.machines[s]] += spec.times[s];
        }
        job_max = job_max.max(job_rest);
    }
    machine_load.into_iter().max().unwrap_or(0).max(job_max)
}

/// Exact minimum makespan over every schedule the environment can produce,
/// by depth-first enumeration of the machines' joint selections with
/// bound pruning. The environment never idles a machine that has a legal job,
/// so this is the optimum over non-delay schedules.
pub fn brute_force_optimal(
    instance: &ImmInstance,
    step_cap: u32,
    node_budget: usize,
) -> Result<OptimalSchedule, DispatchError> {
    let config = ImmConfig {
        max_steps: step_cap,
        ..ImmConfig::default()
    };
    let mut search = Search {
        instance,
        config: &config,
        best: None,
        seen: HashSet::new(),
        nodes: 0,
        budget: node_budget,
        path: Vec::new(),
    };
    let start = ImmState::reset(instance);
    if instance.job_count() == 0 {
        return Ok(OptimalSchedule {
            makespan: 0,
            trace: Vec::new(),
            nodes: 0,
        });
    }
    search.dfs(&start)?;
    let (makespan, trace) = search.best.ok_or(DispatchError::StepCap(step_cap))?;
    Ok(OptimalSchedule {
        makespan,
        trace,
        nodes: search.nodes,
    })
}

struct Search<'a> {
    instance: &'a ImmInstance,
    config: &'a ImmConfig,
    best: Option<(u32, Vec<TraceRow>)>,
    seen: HashSet<ImmState>,
    nodes: usize,
    budget: usize,
    path: Vec<TraceRow>,
}

impl Search<'_> {
    fn dfs(&mut self, state: &ImmState) -> Result<(), DispatchError> {
        self.nodes += 1;
        if self.nodes > self.budget {
            return Err(DispatchError::Budget(self.budget));
        }
        let bound = state.step + remaining_bound(state, self.instance);
        if self.best.as_ref().is_some_and(|(b, _)| bound >= *b) || !self.seen.insert(state.clone()) {
            return Ok(());
        }
        let options: Vec<Vec<usize>> = (0..self.instance.machine_count)
            .map(|k| legal_indices(&imm::legal_mask(state, self.instance, k)))
            .collect();
        let mut choice = vec![0usize; options.len()];
        loop {
            let joint: Vec<usize> = choice.iter().zip(&options).map(|(&c, o)| o[c]).collect();
            let out = imm::step(state, &joint, self.instance, self.config)?;
            let rows = out.rows.len();
            self.path.extend(out.rows);
            if out.state.all_finished() {
                let t = out.state.step;
                if self.best.as_ref().is_none_or(|(b, _)| t < *b) {
                    self.best = Some((t, self.path.clone()));
                }
            } else if !out.done {
                self.dfs(&out.state)?;
            }
            self.path.truncate(self.path.len() - rows);
            // Odometer over the per-machine option lists.
            let mut k = 0;
            while k < choice.len() {
                choice[k] += 1;
                if choice[k] < options[k].len() {
                    break;
                }
                choice[k] = 0;
                k += 1;
            }
            if k == choice.len() {
                return Ok(());
            }
        }
    }
}

/// Aggregate of the runs of one policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyReport {
    pub policy: String,
    pub runs: usize,
    pub successes: usize,
    /// Over successful runs only; `None` when none succeeded.
    pub mean_makespan: Option<f64>,
    pub min_makespan: Option<u64>,
    pub max_makespan: Option<u64>,
}

impl PolicyReport {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.runs.max(1) as f64
    }
}

/// Per-policy statistics, sorted by policy name. The result does not depend
/// on the order of `runs`.
pub fn compare(runs: &[RunSummary]) -> Vec<PolicyReport> {
    #[derive(Default)]
    struct Acc {
        runs: usize,
        successes: usize,
        sum: u64,
        done: usize,
        min: Option<u64>,
        max: Option<u64>,
    }
    let mut by: BTreeMap<&str, Acc> = BTreeMap::new();
    for r in runs {
        let a = by.entry(r.policy.as_str()).or_default();
        a.runs += 1;
        a.successes += usize::from(r.success);
        if let Some(m) = r.makespan {
            a.sum += m;
            a.done += 1;
            a.min = Some(a.min.map_or(m, |x| x.min(m)));
            a.max = Some(a.max.map_or(m, |x| x.max(m)));
        }
    }
    by.into_iter()
        .map(|(policy, a)| PolicyReport {
            policy: policy.to_string(),
            runs: a.runs,
            successes: a.successes,
            mean_makespan: (a.done > 0).then(|| a.sum as f64 / a.done as f64),
            min_makespan: a.min,
            max_makespan: a.max,
        })
        .collect()
}

/// Writes `policy,seed,makespan,steps,success`, one row per run.
pub fn write_report_csv(runs: &[RunSummary], w: impl Write) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["policy", "seed", "makespan", "steps", "success"])?;
    for r in runs {
        out.write_record([
            r.policy.clone(),
            r.seed.to_string(),
            r.makespan.map(|m| m.to_string()).unwrap_or_default(),
            r.steps.to_string(),
            u8::from(r.success).to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `policy,runs,success_rate,mean_makespan,min_makespan,max_makespan`.
pub fn write_summary_csv(reports: &[PolicyReport], w: impl Write) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["policy", "runs", "success_rate", "mean_makespan", "min_makespan", "max_makespan"])?;
    let opt = |x: Option<u64>| x.map(|m| m.to_string()).unwrap_or_default();
    for r in reports {
        out.write_record([
            r.policy.clone(),
            r.runs.to_string(),
            r.success_rate().to_string(),
            r.mean_makespan.map(|m| m.to_string()).unwrap_or_default(),
            opt(r.min_makespan),
            opt(r.max_makespan),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imm::instance::{shipped_instance, JobSpec};

    fn run(policy: &str, seed: u64, makespan: u64) -> RunSummary {
        RunSummary {
            policy: policy.into(),
            seed,
            makespan: Some(makespan),
            steps: makespan,
            success: true,
        }
    }

    #[test]
    fn rule_tags_parse() {
        assert_eq!("fifo".parse::<DispatchRule>().unwrap(), DispatchRule::Fifo);
        assert_eq!("SPT".parse::<DispatchRule>().unwrap(), DispatchRule::Spt);
        let e = "LPT".parse::<DispatchRule>().unwrap_err().to_string();
        assert!(e.contains("FIFO, SPT, RANDOM"));
    }

    #[test]
    fn single_job_every_rule_gives_its_length() {
        let one = shipped_instance().subset(&[1]).unwrap();
        for rule in DispatchRule::ALL {
            let (s, _) = run_dispatch_imm(&one, &ImmConfig::default(), rule, 3).unwrap();
            assert_eq!(s.makespan, Some(56));
        }
        let opt = brute_force_optimal(&one, 200, 10_000).unwrap();
        assert_eq!(opt.makespan, 56);
    }

    #[test]
    fn random_rule_is_reproducible() {
        let inst = shipped_instance();
        let a = run_dispatch_imm(&inst, &ImmConfig::default(), DispatchRule::Random, 11).unwrap();
        let b = run_dispatch_imm(&inst, &ImmConfig::default(), DispatchRule::Random, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rules_only_pick_legal_jobs() {
        let inst = shipped_instance();
        for rule in DispatchRule::ALL {
            let (s, trace) = run_dispatch_imm(&inst, &ImmConfig::default(), rule, 0).unwrap();
            assert!(s.success);
            assert!(imm::validate_schedule(&trace, &inst).is_valid());
        }
    }

    #[test]
    fn rmc_accepts_only_random() {
        let cfg = RmcConfig::with_targets(2, 2);
        assert!(matches!(
            run_dispatch_rmc(&cfg, DispatchRule::Fifo, 0),
            Err(DispatchError::Unsupported { .. })
        ));
        let s = run_dispatch_rmc(&cfg, DispatchRule::Random, 0).unwrap();
        assert_eq!(s.policy, "RANDOM");
    }

    #[test]
    fn oracle_matches_parallel_composition() {
        // Two jobs whose sequences never collide: each machine is used by
        // one job at a time when both start immediately.
        let inst = ImmInstance::new(
            vec![
                JobSpec { id: 0, machines: vec![0, 1], times: vec![3, 3] },
                JobSpec { id: 1, machines: vec![1, 0], times: vec![3, 3] },
            ],
            2,
            0,
        )
        .unwrap();
        let opt = brute_force_optimal(&inst, 100, 10_000).unwrap();
        assert_eq!(opt.makespan, 6);
        assert!(imm::validate_schedule(&opt.trace, &inst).is_valid());
        assert_eq!(imm::makespan(&opt.trace, &inst), Some(6));
    }

    #[test]
    fn oracle_respects_budget_and_cap() {
        let inst = shipped_instance().subset(&[0, 1, 2]).unwrap();
        assert!(matches!(brute_force_optimal(&inst, 500, 3), Err(DispatchError::Budget(3))));
        assert!(matches!(brute_force_optimal(&inst, 10, 100_000), Err(DispatchError::StepCap(10))));
    }

    #[test]
    fn compare_examples() {
        let one = compare(&[run("A", 0, 12)]);
        assert_eq!(one[0].mean_makespan, Some(12.0));
        assert_eq!((one[0].min_makespan, one[0].max_makespan), (Some(12), Some(12)));
        let two = compare(&[run("A", 0, 10), run("A", 1, 20)]);
        assert_eq!(two[0].mean_makespan, Some(15.0));
        let mixed = compare(&[run("B", 0, 5), run("A", 0, 7), run("B", 1, 9)]);
        let names: Vec<_> = mixed.iter().map(|r| r.policy.as_str()).collect();
        assert_eq!(names, ["A", "B"]);
        assert_eq!(mixed, compare(&[run("B", 1, 9), run("B", 0, 5), run("A", 0, 7)]));
    }

    #[test]
    fn report_csv_header() {
        let mut buf = Vec::new();
        write_report_csv(&[run("FIFO", 2, 40)], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "policy,seed,makespan,steps,success\nFIFO,2,40,40,1\n"
        );
    }
}
