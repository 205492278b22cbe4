//! Job shop instances and their text format.
//!
//! ```text
//! jobs=30 machines=4 seed=7
//! 0; 3,1,4,2; 11,7,19,5
//! 1; 2,3,1,4; 14,12,20,10
//! ...
//! ```
//!
//! Machine ids in the file are 1-based; in memory they are 0-based.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const STANDARD_JOBS: usize = 30;
pub const STANDARD_MACHINES: usize = 4;

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("expected {expected_jobs} jobs on {expected_machines} machines, found {jobs} on {machines}")]
    Shape {
        expected_jobs: usize,
        expected_machines: usize,
        jobs: usize,
        machines: usize,
    },
    #[error("job {job}: {reason}")]
    Job { job: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn parse_err(line: usize, reason: impl Into<String>) -> InstanceError {
    InstanceError::Parse {
        line,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobSpec {
    pub id: usize,
    /// Machines in visiting order, 0-based.
    pub machines: Vec<usize>,
    /// Processing time of each operation, aligned with `machines`.
    pub times: Vec<u32>,
}

impl JobSpec {
    pub fn total_time(&self) -> u32 {
        self.times.iter().sum()
    }

    /// Processing time of this job on `machine`, if it visits it.
    pub fn time_on(&self, machine: usize) -> Option<u32> {
        self.machines
            .iter()
            .position(|&m| m == machine)
            .map(|k| self.times[k])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImmInstance {
    pub jobs: Vec<JobSpec>,
    pub machine_count: usize,
    /// Generator seed recorded in the header.
    pub seed: u64,
}

impl ImmInstance {
    /// Checks job ids, sequences and times. Every job visits every machine
    /// exactly once.
    pub fn new(jobs: Vec<JobSpec>, machine_count: usize, seed: u64) -> Result<Self, InstanceError> {
        for (k, job) in jobs.iter().enumerate() {
            if job.id != k {
                return Err(InstanceError::Job {
                    job: job.id,
                    reason: format!("listed at position {k}; ids must be 0..n in order"),
                });
            }
            if job.machines.len() != machine_count || job.times.len() != machine_count {
                return Err(InstanceError::Job {
                    job: job.id,
                    reason: format!("needs {machine_count} machines and times"),
                });
            }
            let mut seen = vec![false; machine_count];
            for &m in &job.machines {
                if m >= machine_count || seen[m] {
                    return Err(InstanceError::Job {
                        job: job.id,
                        reason: "machine sequence is not a permutation".into(),
                    });
                }
                seen[m] = true;
            }
            if job.times.contains(&0) {
                return Err(InstanceError::Job {
                    job: job.id,
                    reason: "processing times must be positive".into(),
                });
            }
        }
        Ok(Self {
            jobs,
            machine_count,
            seed,
        })
    }

    pub fn job_count(&self) -> usize {
        self.jobs.len()
    }

    /// Keeps only the listed jobs, renumbered in the given order.
    pub fn subset(&self, ids: &[usize]) -> Result<Self, InstanceError> {
        let jobs = ids
            .iter()
            .enumerate()
            .map(|(k, &id)| JobSpec {
                id: k,
                ..self.jobs[id].clone()
            })
            .collect();
        Self::new(jobs, self.machine_count, self.seed)
    }

    /// `max(max machine load, max job length)`.
    pub fn lower_bound(&self) -> u32 {
        let mut load = vec![0u32; self.machine_count];
        for job in &self.jobs {
            for (&m, &t) in job.machines.iter().zip(&job.times) {
                load[m] += t;
            }
        }
        let machine = load.into_iter().max().unwrap_or(0);
        let job = self.jobs.iter().map(JobSpec::total_time).max().unwrap_or(0);
        machine.max(job)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "jobs={} machines={} seed={}\n",
            self.jobs.len(),
            self.machine_count,
            self.seed
        );
        for job in &self.jobs {
            let ms: Vec<String> = job.machines.iter().map(|m| (m + 1).to_string()).collect();
            let ts: Vec<String> = job.times.iter().map(ToString::to_string).collect();
            let _ = writeln!(out, "{}; {}; {}", job.id, ms.join(","), ts.join(","));
        }
        out
    }
}

fn header_field(tok: &str, key: &str, line: usize) -> Result<u64, InstanceError> {
    let value = tok
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or_else(|| parse_err(line, format!("expected `{key}=<n>`, got `{tok}`")))?;
    value
        .parse()
        .map_err(|_| parse_err(line, format!("`{key}` is not a non-negative integer")))
}

fn parse_list<T: std::str::FromStr>(field: &str, what: &str, line: usize) -> Result<Vec<T>, InstanceError> {
    field
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| parse_err(line, format!("bad {what} entry `{}`", s.trim())))
        })
        .collect()
}

/// Parses an instance of any size. Blank lines and `#` comments are skipped.
pub fn parse_instance(text: &str) -> Result<ImmInstance, InstanceError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (hline, header) = lines.next().ok_or_else(|| parse_err(1, "missing header"))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 3 {
        return Err(parse_err(hline, "header must be `jobs=<n> machines=<m> seed=<s>`"));
    }
    let n = header_field(toks[0], "jobs", hline)? as usize;
    let m = header_field(toks[1], "machines", hline)? as usize;
    let seed = header_field(toks[2], "seed", hline)?;

    let mut jobs: Vec<Option<JobSpec>> = vec![None; n];
    let mut last_line = hline;
    for (line, row) in lines {
        last_line = line;
        let fields: Vec<&str> = row.split(';').collect();
        if fields.len() != 3 {
            return Err(parse_err(line, "expected `job_id; machines; times`"));
        }
        let id: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad job id `{}`", fields[0].trim())))?;
        if id >= n {
            return Err(parse_err(line, format!("job id {id} out of range for {n} jobs")));
        }
        if jobs[id].is_some() {
            return Err(parse_err(line, format!("duplicate job id {id}")));
        }
        let machines1: Vec<usize> = parse_list(fields[1], "machine", line)?;
        let times: Vec<u32> = parse_list(fields[2], "time", line)?;
        if machines1.len() != m || times.len() != m {
            return Err(parse_err(line, format!("expected {m} machines and {m} times")));
        }
        let mut seen = vec![false; m];
        for &mm in &machines1 {
            if mm == 0 || mm > m || seen[mm - 1] {
                return Err(parse_err(line, "machine sequence is not a permutation of 1..m"));
            }
            seen[mm - 1] = true;
        }
        if times.contains(&0) {
            return Err(parse_err(line, "processing times must be positive"));
        }
        jobs[id] = Some(JobSpec {
            id,
            machines: machines1.iter().map(|x| x - 1).collect(),
            times,
        });
    }
    let found = jobs.iter().filter(|j| j.is_some()).count();
    if found != n {
        return Err(parse_err(last_line + 1, format!("header declares {n} jobs, found {found}")));
    }
    ImmInstance::new(jobs.into_iter().flatten().collect(), m, seed)
}

/// Loads a 30-job, 4-machine instance file.
pub fn load_instance(path: impl AsRef<Path>) -> Result<ImmInstance, InstanceError> {
    let inst = parse_instance(&std::fs::read_to_string(path)?)?;
    if inst.job_count() != STANDARD_JOBS || inst.machine_count != STANDARD_MACHINES {
        return Err(InstanceError::Shape {
            expected_jobs: STANDARD_JOBS,
            expected_machines: STANDARD_MACHINES,
            jobs: inst.job_count(),
            machines: inst.machine_count,
        });
    }
    Ok(inst)
}

/// Random instance: each sequence is a uniform permutation of the machines and
/// each time is uniform in `[5, 25]`. On 4 machines with at least two jobs,
/// job 1 is fixed to machines 2,3,1,4 with times 14,12,20,10.
pub fn generate_instance(seed: u64, jobs: usize, machines: usize) -> ImmInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = Vec::with_capacity(jobs);
    for id in 0..jobs {
        let mut seq: Vec<usize> = (0..machines).collect();
        seq.shuffle(&mut rng);
        let times = (0..machines).map(|_| rng.random_range(5..=25)).collect();
        specs.push(JobSpec {
            id,
            machines: seq,
            times,
        });
    }
    if machines == 4 && jobs > 1 {
        specs[1].machines = vec![1, 2, 0, 3];
        specs[1].times = vec![14, 12, 20, 10];
    }
    ImmInstance::new(specs, machines, seed).expect("generated instance is valid")
}

/// Seed of the shipped `data/imm_30x4.txt`.
pub const SHIPPED_SEED: u64 = 2024;

pub fn shipped_instance() -> ImmInstance {
    generate_instance(SHIPPED_SEED, STANDARD_JOBS, STANDARD_MACHINES)
}

/// Small instance with times in `[1, max_time]`, for exhaustive search.
pub fn random_mini_instance(rng: &mut impl Rng, jobs: usize, machines: usize, max_time: u32) -> ImmInstance {
    let specs = (0..jobs)
        .map(|id| {
            let mut seq: Vec<usize> = (0..machines).collect();
            seq.shuffle(rng);
            JobSpec {
                id,
                machines: seq,
                times: (0..machines).map(|_| rng.random_range(1..=max_time)).collect(),
            }
        })
        .collect();
    ImmInstance::new(specs, machines, 0).expect("generated instance is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn job_one_is_pinned() {
        let inst = shipped_instance();
        assert_eq!(inst.jobs[1].machines, vec![1, 2, 0, 3]);
        assert_eq!(inst.jobs[1].times, vec![14, 12, 20, 10]);
        assert!(inst.to_text().lines().nth(2).unwrap() == "1; 2,3,1,4; 14,12,20,10");
    }

    #[test]
    fn text_round_trip() {
        let inst = generate_instance(5, 30, 4);
        assert_eq!(parse_instance(&inst.to_text()).unwrap(), inst);
    }

    #[test]
    fn shipped_file_matches_generator() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/imm_30x4.txt");
        assert_eq!(load_instance(path).unwrap(), shipped_instance());
    }

    #[test]
    fn repeated_machine_rejected_with_line() {
        let text = "jobs=2 machines=4 seed=0\n0; 1,2,3,4; 1,1,1,1\n1; 2,2,1,4; 14,12,20,10\n";
        match parse_instance(text).unwrap_err() {
            InstanceError::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn duplicate_job_rejected() {
        let text = "jobs=2 machines=2 seed=0\n0; 1,2; 1,1\n0; 2,1; 1,1\n";
        assert!(matches!(parse_instance(text), Err(InstanceError::Parse { line: 3, .. })));
    }

    #[test]
    fn short_file_rejected() {
        let mut text = shipped_instance().to_text();
        let last = text.trim_end().rfind('\n').unwrap();
        text.truncate(last + 1);
        assert!(matches!(parse_instance(&text), Err(InstanceError::Parse { .. })));

        let inst = generate_instance(1, 29, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.txt");
        std::fs::write(&path, inst.to_text()).unwrap();
        assert!(matches!(load_instance(&path), Err(InstanceError::Shape { jobs: 29, .. })));
    }

    #[test]
    fn lower_bound_examples() {
        let one = shipped_instance().subset(&[1]).unwrap();
        assert_eq!(one.lower_bound(), 56);
        let disjoint = ImmInstance::new(
            vec![
                JobSpec { id: 0, machines: vec![0, 1], times: vec![3, 4] },
                JobSpec { id: 1, machines: vec![1, 0], times: vec![2, 2] },
            ],
            2,
            0,
        )
        .unwrap();
        assert_eq!(disjoint.lower_bound(), 7);
    }
}
