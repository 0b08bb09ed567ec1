//! Line-delimited JSON protocol spoken with an external evaluator process.
//!
//! The engine writes `start_trial` and `stop`; the evaluator writes `hello`
//! once, then `report` per checkpoint and one `final` per trial. Unknown
//! fields are ignored, the `type` field is mandatory.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{
    CheckpointReport, EvalError, Evaluator, FinalReport, Report, TaskSize, TrialRecord, TrialStart,
    TrialStatus,
};
use crate::scheduler::{Decision, TrialId};
use crate::space::TrialConfig;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Max,
    Min,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello {
        task: String,
        orientation: Orientation,
    },
    StartTrial {
        trial_id: TrialId,
        config: TrialConfig,
        epochs: u32,
        checkpoints_per_epoch: u32,
        training_seed: u64,
    },
    Report {
        trial_id: TrialId,
        step: u32,
        val_metric: f64,
        val_loss: f64,
        cost_seconds: f64,
    },
    Stop {
        trial_id: TrialId,
    },
    Final {
        trial_id: TrialId,
        best_step: Option<u32>,
        test_metric_at_best: Option<f64>,
    },
    Error {
        message: String,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("line {line}: {message}")]
pub struct ProtocolError {
    pub line: usize,
    pub message: String,
}

impl Message {
    pub fn start(start: &TrialStart) -> Self {
        Message::StartTrial {
            trial_id: start.trial_id,
            config: start.config.clone(),
            epochs: start.plan.epochs,
            checkpoints_per_epoch: start.plan.checkpoints_per_epoch,
            training_seed: start.training_seed,
        }
    }

    /// Single-line encoding, without the trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("messages always serialize")
    }
}

/// Parses one protocol line; `line` is the 1-based line number used in errors.
pub fn parse_line(text: &str, line: usize) -> Result<Message, ProtocolError> {
    let err = |message: String| ProtocolError { line, message };
    let trimmed = text.trim_end_matches(['\r', '\n']);
    if trimmed.contains('\n') {
        return Err(err("record spans several lines".into()));
    }
    let value: serde_json::Value =
        serde_json::from_str(trimmed).map_err(|e| err(format!("malformed record: {e}")))?;
    let Some(obj) = value.as_object() else {
        return Err(err("record is not a map".into()));
    };
    match obj.get("type") {
        None => return Err(err("missing field `type`".into())),
        Some(t) if !t.is_string() => return Err(err("field `type` must be a string".into())),
        _ => {}
    }
    let msg: Message = serde_json::from_value(value).map_err(|e| err(e.to_string()))?;
    if let Message::Report {
        val_metric,
        val_loss,
        cost_seconds,
        step,
        ..
    } = &msg
    {
        if *step == 0 {
            return Err(err("report step must be positive".into()));
        }
        if *cost_seconds < 0.0 {
            return Err(err("cost_seconds must be >= 0".into()));
        }
        if !val_metric.is_finite() || !val_loss.is_finite() {
            return Err(err("metrics must be finite".into()));
        }
    }
    Ok(msg)
}

/// A bidirectional line stream with a receive timeout.
pub struct LineChannel {
    rx: Receiver<std::io::Result<String>>,
    writer: Box<dyn Write + Send>,
    line: usize,
    timeout: Duration,
}

impl LineChannel {
    pub fn new<R, W>(reader: R, writer: W, timeout: Duration) -> Self
    where
        R: BufRead + Send + 'static,
        W: Write + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in reader.lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Self {
            rx,
            writer: Box::new(writer),
            line: 0,
            timeout,
        }
    }

    pub fn send(&mut self, msg: &Message) -> Result<(), EvalError> {
        writeln!(self.writer, "{}", msg.to_line())
            .and_then(|_| self.writer.flush())
            .map_err(|e| EvalError::Transport(e.to_string()))
    }

    /// Next non-blank message. An `error` record becomes [`EvalError::Reported`].
    pub fn recv(&mut self) -> Result<Message, EvalError> {
        loop {
            let text = match self.rx.recv_timeout(self.timeout) {
                Ok(Ok(text)) => text,
                Ok(Err(e)) => return Err(EvalError::Transport(e.to_string())),
                Err(RecvTimeoutError::Timeout) => {
                    return Err(EvalError::Timeout(self.timeout.as_secs()))
                }
                Err(RecvTimeoutError::Disconnected) => return Err(EvalError::Exited),
            };
            self.line += 1;
            if text.trim().is_empty() {
                continue;
            }
            return match parse_line(&text, self.line) {
                Ok(Message::Error { message }) => Err(EvalError::Reported(message)),
                Ok(msg) => Ok(msg),
                Err(e) => Err(EvalError::Protocol(e.to_string())),
            };
        }
    }

    /// Waits for `hello` and returns the declared task name.
    pub fn handshake(&mut self) -> Result<String, EvalError> {
        match self.recv()? {
            Message::Hello {
                task,
                orientation: Orientation::Max,
            } => Ok(task),
            Message::Hello { .. } => Err(EvalError::Protocol(
                "evaluator declares a minimized metric; only maximization is supported".into(),
            )),
            other => Err(EvalError::Protocol(format!(
                "expected hello, got {}",
                other.to_line()
            ))),
        }
    }
}

fn unexpected(msg: &Message) -> EvalError {
    EvalError::Protocol(format!("unexpected message {}", msg.to_line()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriveOutcome {
    pub record: TrialRecord,
    pub error: Option<EvalError>,
}

/// Runs one trial over `channel`, consulting `pruner` after every report.
pub fn drive_trial<F>(channel: &mut LineChannel, start: &TrialStart, mut pruner: F) -> DriveOutcome
where
    F: FnMut(&CheckpointReport) -> Decision,
{
    let mut record = TrialRecord::new(start.trial_id, start.config.clone(), 0, 0.0);
    let result = (|| -> Result<TrialStatus, EvalError> {
        channel.send(&Message::start(start))?;
        let mut stopped = false;
        loop {
            match channel.recv()? {
                Message::Report {
                    trial_id,
                    step,
                    val_metric,
                    val_loss,
                    cost_seconds,
                } if trial_id == start.trial_id => {
                    if stopped {
                        continue;
                    }
                    if record.reports.last().is_some_and(|r| r.step >= step) {
                        return Err(EvalError::Protocol(format!(
                            "step {step} does not increase"
                        )));
                    }
                    let report = Report {
                        step,
                        val_metric,
                        val_loss,
                        cost_seconds,
                    };
                    record.push(&report);
                    let last = *record.reports.last().expect("just pushed");
                    if pruner(&last) == Decision::Stop {
                        channel.send(&Message::Stop { trial_id })?;
                        stopped = true;
                    }
                }
                Message::Final {
                    trial_id,
                    test_metric_at_best,
                    ..
                } if trial_id == start.trial_id => {
                    record.test_metric_at_best = test_metric_at_best;
                    return Ok(if stopped {
                        TrialStatus::Pruned
                    } else {
                        TrialStatus::Completed
                    });
                }
                other => return Err(unexpected(&other)),
            }
        }
    })();
    let error = match result {
        Ok(status) => {
            record.status = status;
            None
        }
        Err(e) => {
            record.status = TrialStatus::Failed;
            Some(e)
        }
    };
    DriveOutcome { record, error }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClockMode {
    /// Time advances by the evaluator's declared `cost_seconds`.
    Declared,
    /// Time advances by measured wall-clock time between reports.
    WallClock,
}

struct Worker {
    child: Child,
    channel: LineChannel,
    trial: Option<TrialId>,
    pending_final: Option<FinalReport>,
    last_event: Instant,
}

/// Evaluator backed by one child process per worker slot.
pub struct ProcessEvaluator {
    program: String,
    args: Vec<String>,
    size: TaskSize,
    clock: ClockMode,
    timeout: Duration,
    workers: Vec<Option<Worker>>,
    task: Option<String>,
}

impl ProcessEvaluator {
    pub fn new(program: impl Into<String>, args: Vec<String>, size: TaskSize) -> Self {
        Self {
            program: program.into(),
            args,
            size,
            clock: ClockMode::Declared,
            timeout: DEFAULT_TIMEOUT,
            workers: Vec::new(),
            task: None,
        }
    }

    pub fn with_clock(mut self, clock: ClockMode) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Task name declared in the first handshake, if any worker has started.
    pub fn task(&self) -> Option<&str> {
        self.task.as_deref()
    }

    fn spawn(&mut self, slot: usize) -> Result<(), EvalError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| EvalError::Transport(format!("cannot spawn `{}`: {e}", self.program)))?;
        let stdout = child.stdout.take().expect("piped stdout");
        let stdin: ChildStdin = child.stdin.take().expect("piped stdin");
        let mut channel = LineChannel::new(BufReader::new(stdout), stdin, self.timeout);
        let task = channel.handshake()?;
        if self.task.is_none() {
            self.task = Some(task);
        }
        if self.workers.len() <= slot {
            self.workers.resize_with(slot + 1, || None);
        }
        self.workers[slot] = Some(Worker {
            child,
            channel,
            trial: None,
            pending_final: None,
            last_event: Instant::now(),
        });
        Ok(())
    }

    fn worker(&mut self, slot: usize) -> Result<&mut Worker, EvalError> {
        self.workers
            .get_mut(slot)
            .and_then(Option::as_mut)
            .ok_or(EvalError::NoActiveTrial(slot))
    }

    fn drop_worker(&mut self, slot: usize) {
        if let Some(Some(mut w)) = self.workers.get_mut(slot).map(Option::take) {
            let _ = w.child.kill();
            let _ = w.child.wait();
        }
    }
}

impl Evaluator for ProcessEvaluator {
    fn task_size(&self) -> TaskSize {
        self.size
    }

    fn start(&mut self, slot: usize, start: &TrialStart) -> Result<(), EvalError> {
        if self.workers.get(slot).is_none_or(Option::is_none) {
            self.spawn(slot)?;
        }
        let w = self.worker(slot)?;
        w.trial = Some(start.trial_id);
        w.pending_final = None;
        w.last_event = Instant::now();
        let sent = w.channel.send(&Message::start(start));
        if sent.is_err() {
            self.drop_worker(slot);
        }
        sent
    }

    fn next_report(&mut self, slot: usize) -> Result<Option<Report>, EvalError> {
        let clock = self.clock;
        let w = self.worker(slot)?;
        let trial = w.trial.ok_or(EvalError::NoActiveTrial(slot))?;
        if w.pending_final.is_some() {
            return Ok(None);
        }
        let msg = w.channel.recv();
        let result = match msg {
            Ok(Message::Report {
                trial_id,
                step,
                val_metric,
                val_loss,
                cost_seconds,
            }) if trial_id == trial => {
                let now = Instant::now();
                let cost = match clock {
                    ClockMode::Declared => cost_seconds,
                    ClockMode::WallClock => (now - w.last_event).as_secs_f64(),
                };
                w.last_event = now;
                Ok(Some(Report {
                    step,
                    val_metric,
                    val_loss,
                    cost_seconds: cost,
                }))
            }
            Ok(Message::Final {
                trial_id,
                best_step,
                test_metric_at_best,
            }) if trial_id == trial => {
                w.pending_final = Some(FinalReport {
                    best_step,
                    test_metric_at_best,
                });
                Ok(None)
            }
            Ok(other) => Err(unexpected(&other)),
            Err(e) => Err(e),
        };
        if result.is_err() {
            self.drop_worker(slot);
        }
        result
    }

    fn stop(&mut self, slot: usize) -> Result<(), EvalError> {
        let w = self.worker(slot)?;
        let trial = w.trial.ok_or(EvalError::NoActiveTrial(slot))?;
        if w.pending_final.is_some() {
            return Ok(());
        }
        let sent = w.channel.send(&Message::Stop { trial_id: trial });
        if sent.is_err() {
            self.drop_worker(slot);
        }
        sent
    }

    fn finish(&mut self, slot: usize, best_step: Option<u32>) -> Result<FinalReport, EvalError> {
        let w = self.worker(slot)?;
        let trial = w.trial.take().ok_or(EvalError::NoActiveTrial(slot))?;
        if let Some(fin) = w.pending_final.take() {
            return Ok(fin);
        }
        let result = loop {
            match w.channel.recv() {
                // reports already in flight when stop was sent
                Ok(Message::Report { trial_id, .. }) if trial_id == trial => continue,
                Ok(Message::Final {
                    trial_id,
                    best_step: declared,
                    test_metric_at_best,
                }) if trial_id == trial => {
                    if declared != best_step {
                        log::warn!(
                            "trial {trial}: evaluator kept step {declared:?}, engine selected {best_step:?}"
                        );
                    }
                    break Ok(FinalReport {
                        best_step: declared,
                        test_metric_at_best,
                    });
                }
                Ok(other) => break Err(unexpected(&other)),
                Err(e) => break Err(e),
            }
        };
        if result.is_err() {
            self.drop_worker(slot);
        }
        result
    }
}

impl Drop for ProcessEvaluator {
    fn drop(&mut self) {
        for slot in 0..self.workers.len() {
            if let Some(w) = self.workers[slot].as_mut() {
                // closing stdin lets a well-behaved evaluator exit on its own
                w.channel.writer = Box::new(std::io::sink());
                let deadline = Instant::now() + Duration::from_millis(200);
                while Instant::now() < deadline {
                    if matches!(w.child.try_wait(), Ok(Some(_))) {
                        break;
                    }
                    thread::sleep(Duration::from_millis(5));
                }
            }
            self.drop_worker(slot);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::TrialPlan;
    use std::io::Cursor;

    #[test]
    fn missing_field_is_named() {
        let e = parse_line(
            r#"{"type":"report","trial_id":1,"step":1,"val_metric":80.0,"cost_seconds":1.0}"#,
            7,
        )
        .unwrap_err();
        assert_eq!(e.line, 7);
        assert!(e.message.contains("val_loss"), "{}", e.message);
    }

    #[test]
    fn unknown_fields_are_ignored() {
        let m = parse_line(r#"{"type":"stop","trial_id":3,"extra":[1,2]}"#, 1).unwrap();
        assert_eq!(m, Message::Stop { trial_id: 3 });
    }

    #[test]
    fn start_trial_carries_plan() {
        let start = TrialStart {
            trial_id: 0,
            config: TrialConfig::new().with("learning_rate", 1e-4),
            plan: TrialPlan::new(3, TaskSize::Large),
            training_seed: 42,
        };
        match Message::start(&start) {
            Message::StartTrial {
                checkpoints_per_epoch,
                epochs,
                ..
            } => assert_eq!((epochs, checkpoints_per_epoch), (3, 10)),
            _ => unreachable!(),
        }
    }

    fn scripted(lines: &[&str]) -> LineChannel {
        let input = lines.join("\n") + "\n";
        LineChannel::new(Cursor::new(input.into_bytes()), std::io::sink(), Duration::from_secs(5))
    }

    fn start() -> TrialStart {
        TrialStart {
            trial_id: 5,
            config: TrialConfig::new(),
            plan: TrialPlan::new(1, TaskSize::Small),
            training_seed: 42,
        }
    }

    #[test]
    fn stop_after_report_yields_pruned() {
        let mut ch = scripted(&[
            r#"{"type":"report","trial_id":5,"step":1,"val_metric":70.0,"val_loss":1.3,"cost_seconds":1.0}"#,
            r#"{"type":"report","trial_id":5,"step":2,"val_metric":71.0,"val_loss":1.29,"cost_seconds":1.0}"#,
            r#"{"type":"final","trial_id":5,"best_step":1,"test_metric_at_best":69.0}"#,
        ]);
        let out = drive_trial(&mut ch, &start(), |_| Decision::Stop);
        assert_eq!(out.error, None);
        assert_eq!(out.record.status, TrialStatus::Pruned);
        assert_eq!(out.record.reports.len(), 1);
        assert_eq!(out.record.test_metric_at_best, Some(69.0));
    }

    #[test]
    fn natural_completion() {
        let mut ch = scripted(&[
            r#"{"type":"report","trial_id":5,"step":1,"val_metric":70.0,"val_loss":1.3,"cost_seconds":1.0}"#,
            r#"{"type":"final","trial_id":5,"best_step":1,"test_metric_at_best":69.5}"#,
        ]);
        let out = drive_trial(&mut ch, &start(), |_| Decision::Continue);
        assert_eq!(out.record.status, TrialStatus::Completed);
    }

    #[test]
    fn exit_before_final_fails_trial() {
        let mut ch = scripted(&[
            r#"{"type":"report","trial_id":5,"step":1,"val_metric":70.0,"val_loss":1.3,"cost_seconds":1.0}"#,
        ]);
        let out = drive_trial(&mut ch, &start(), |_| Decision::Continue);
        assert_eq!(out.record.status, TrialStatus::Failed);
        assert_eq!(out.error, Some(EvalError::Exited));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let mut ch = scripted(&[
            r#"{"type":"report","trial_id":5,"step":1,"val_metric":70.0,"val_loss":1.3,"cost_seconds":1.0}"#,
            "{not json",
        ]);
        let out = drive_trial(&mut ch, &start(), |_| Decision::Continue);
        match out.error {
            Some(EvalError::Protocol(m)) => assert!(m.starts_with("line 2"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn silence_times_out() {
        let (_keep, rx_end) = std::os::unix::net::UnixStream::pair().unwrap();
        let mut ch = LineChannel::new(
            BufReader::new(rx_end),
            std::io::sink(),
            Duration::from_millis(50),
        );
        let out = drive_trial(&mut ch, &start(), |_| Decision::Continue);
        assert!(matches!(out.error, Some(EvalError::Timeout(_))));
        assert_eq!(out.record.status, TrialStatus::Failed);
    }
}
