//! Per-tick schedule traces, their validation and makespan.

use std::io::Write;

use super::instance::ImmInstance;

/// What one machine did during one tick.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRow {
    pub step: u32,
    pub machine: usize,
    /// Selected action index; the job count means no-op.
    pub action: usize,
    pub loaded: Option<usize>,
    pub completed: Option<usize>,
    /// Jobs waiting in the machine's buffer after the tick.
    pub buffer_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationCode {
    /// A machine was loaded while still processing another job.
    MachineOverlap,
    /// A job visited machines out of its sequence.
    StageOrder,
    /// An operation did not last exactly its processing time.
    Duration,
    /// An operation started before the job's previous operation completed.
    Precedence,
    /// A completion with no matching load on that machine.
    UnmatchedCompletion,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub code: ViolationCode,
    pub step: u32,
    pub machine: usize,
    pub job: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleReport {
    /// Operations that were loaded and completed.
    pub operations: usize,
    pub violation: Option<Violation>,
}

impl ScheduleReport {
    pub fn is_valid(&self) -> bool {
        self.violation.is_none()
    }
}

/// Replays a trace against the instance and reports the first violation.
/// Within a tick, loads are checked before completions.
pub fn validate_schedule(trace: &[TraceRow], instance: &ImmInstance) -> ScheduleReport {
    let n = instance.job_count();
    let mut active: Vec<Option<(usize, u32)>> = vec![None; instance.machine_count];
    let mut next_stage = vec![0usize; n];
    let mut ready_at = vec![0u32; n];
    let mut running = vec![false; n];
    let mut operations = 0;
    let mut rows: Vec<&TraceRow> = trace.iter().collect();
    rows.sort_by_key(|r| (r.step, r.machine));

    let fail = |code, r: &TraceRow, job, operations| ScheduleReport {
        operations,
        violation: Some(Violation {
            code,
            step: r.step,
            machine: r.machine,
            job,
        }),
    };

    let mut i = 0;
    while i < rows.len() {
        let step = rows[i].step;
        let mut j = i;
        while j < rows.len() && rows[j].step == step {
            j += 1;
        }
        let tick = &rows[i..j];
        for r in tick {
            let Some(job) = r.loaded else { continue };
            if r.machine >= instance.machine_count || job >= n {
                return fail(ViolationCode::StageOrder, r, job, operations);
            }
            if active[r.machine].is_some() {
                return fail(ViolationCode::MachineOverlap, r, job, operations);
            }
            let stage = next_stage[job];
            if running[job] || stage > 0 && step <= ready_at[job] {
                return fail(ViolationCode::Precedence, r, job, operations);
            }
            if stage >= instance.machine_count || instance.jobs[job].machines[stage] != r.machine {
                return fail(ViolationCode::StageOrder, r, job, operations);
            }
            active[r.machine] = Some((job, step));
            running[job] = true;
        }
        for r in tick {
            let Some(job) = r.completed else { continue };
            let Some((on, start)) = active.get(r.machine).copied().flatten() else {
                return fail(ViolationCode::UnmatchedCompletion, r, job, operations);
            };
            if on != job {
                return fail(ViolationCode::UnmatchedCompletion, r, job, operations);
            }
            let stage = next_stage[job];
            if step + 1 - start != instance.jobs[job].times[stage] {
                return fail(ViolationCode::Duration, r, job, operations);
            }
            active[r.machine] = None;
            running[job] = false;
            next_stage[job] += 1;
            ready_at[job] = step;
            operations += 1;
        }
        i = j;
    }
    ScheduleReport {
        operations,
        violation: None,
    }
}

/// Tick at which the last operation completed; `None` unless every job
/// finished every operation. An instance with no jobs has makespan 0.
pub fn makespan(trace: &[TraceRow], instance: &ImmInstance) -> Option<u32> {
    let mut done = vec![0usize; instance.job_count()];
    let mut last = 0;
    for r in trace {
        if let Some(job) = r.completed {
            done[job] += 1;
            last = last.max(r.step);
        }
    }
    done.iter().all(|&d| d == instance.machine_count).then_some(last)
}

/// Writes `step,machine_id,action,loaded,completed,buffer_len`; absent jobs
/// are empty fields. Machine ids are 1-based in the file.
pub fn write_trace_csv(trace: &[TraceRow], w: impl Write) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", "machine_id", "action", "loaded", "completed", "buffer_len"])?;
    let opt = |x: Option<usize>| x.map(|j| j.to_string()).unwrap_or_default();
    for r in trace {
        out.write_record([
            r.step.to_string(),
            (r.machine + 1).to_string(),
            r.action.to_string(),
            opt(r.loaded),
            opt(r.completed),
            r.buffer_len.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imm::instance::JobSpec;

    fn two_jobs() -> ImmInstance {
        ImmInstance::new(
            vec![
                JobSpec { id: 0, machines: vec![0, 1], times: vec![2, 1] },
                JobSpec { id: 1, machines: vec![0, 1], times: vec![1, 1] },
            ],
            2,
            0,
        )
        .unwrap()
    }

    fn row(step: u32, machine: usize, loaded: Option<usize>, completed: Option<usize>) -> TraceRow {
        TraceRow {
            step,
            machine,
            action: loaded.unwrap_or(2),
            loaded,
            completed,
            buffer_len: 0,
        }
    }

    fn good() -> Vec<TraceRow> {
        vec![
            row(1, 0, Some(0), None),
            row(2, 0, None, Some(0)),
            row(3, 0, Some(1), Some(1)),
            row(3, 1, Some(0), Some(0)),
            row(4, 1, Some(1), Some(1)),
        ]
    }

    #[test]
    fn valid_schedule_and_makespan() {
        let inst = two_jobs();
        let report = validate_schedule(&good(), &inst);
        assert!(report.is_valid(), "{report:?}");
        assert_eq!(report.operations, 4);
        assert_eq!(makespan(&good(), &inst), Some(4));
        assert_eq!(makespan(&good()[..4], &inst), None);
    }

    #[test]
    fn overlap_detected_at_step() {
        let mut t = good();
        t[1] = row(2, 0, Some(1), None);
        let v = validate_schedule(&t, &two_jobs()).violation.unwrap();
        assert_eq!((v.code, v.step, v.machine), (ViolationCode::MachineOverlap, 2, 0));
    }

    #[test]
    fn skipped_stage_detected() {
        let t = vec![row(1, 1, Some(1), Some(1))];
        let v = validate_schedule(&t, &two_jobs()).violation.unwrap();
        assert_eq!(v.code, ViolationCode::StageOrder);
    }

    #[test]
    fn short_operation_detected() {
        let t = vec![row(1, 0, Some(0), Some(0))];
        assert_eq!(
            validate_schedule(&t, &two_jobs()).violation.unwrap().code,
            ViolationCode::Duration
        );
    }

    #[test]
    fn early_start_detected() {
        let t = vec![
            row(1, 0, Some(0), None),
            row(2, 0, None, Some(0)),
            row(2, 1, Some(0), Some(0)),
        ];
        assert_eq!(
            validate_schedule(&t, &two_jobs()).violation.unwrap().code,
            ViolationCode::Precedence
        );
    }

    #[test]
    fn stray_completion_detected() {
        let t = vec![row(1, 1, None, Some(0))];
        assert_eq!(
            validate_schedule(&t, &two_jobs()).violation.unwrap().code,
            ViolationCode::UnmatchedCompletion
        );
    }

    #[test]
    fn csv_columns() {
        let mut buf = Vec::new();
        write_trace_csv(&good()[..1], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "step,machine_id,action,loaded,completed,buffer_len\n1,1,0,0,,0\n"
        );
    }
}
