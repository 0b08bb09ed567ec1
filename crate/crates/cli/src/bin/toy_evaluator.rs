//! Reference evaluator speaking the stdio protocol, backed by a surrogate preset.
//!
//! Usage: `hpotriage-toy-evaluator <preset> [seed]`. Each trial reports every
//! checkpoint, giving the engine a short window to send `stop` before the next.

use std::io::{self, BufRead, Write};
use std::process::ExitCode;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use hpotriage_core::protocol::{parse_line, Message, Orientation};
use hpotriage_core::surrogate::{evaluate, presets, test_at, SurrogateSpec};
use hpotriage_core::TrialConfig;

const STOP_WINDOW: Duration = Duration::from_millis(5);

enum Input {
    Msg(Message),
    Bad(String),
}

fn send(out: &mut impl Write, msg: &Message) -> io::Result<()> {
    writeln!(out, "{}", msg.to_line())?;
    out.flush()
}

fn spawn_reader() -> Receiver<Input> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (i, line) in io::stdin().lock().lines().enumerate() {
            let Ok(line) = line else { break };
            if line.trim().is_empty() {
                continue;
            }
            let item = match parse_line(&line, i + 1) {
                Ok(m) => Input::Msg(m),
                Err(e) => Input::Bad(e.to_string()),
            };
            if tx.send(item).is_err() {
                break;
            }
        }
    });
    rx
}

/// Runs one trial; returns `Err` with a message when the engine misbehaves.
fn run_trial(
    spec: &SurrogateSpec,
    rx: &Receiver<Input>,
    out: &mut impl Write,
    trial_id: u64,
    config: &TrialConfig,
    total: u32,
) -> Result<(), String> {
    let mut best: Option<(u32, f64)> = None;
    for step in 1..=total {
        let (val_metric, val_loss, cost_seconds) = evaluate(spec, config, step);
        send(
            out,
            &Message::Report {
                trial_id,
                step,
                val_metric,
                val_loss,
                cost_seconds,
            },
        )
        .map_err(|e| e.to_string())?;
        if best.is_none_or(|(_, v)| val_metric > v) {
            best = Some((step, val_metric));
        }
        let stopped = match rx.recv_timeout(STOP_WINDOW) {
            Ok(Input::Msg(Message::Stop { trial_id: id })) if id == trial_id => true,
            Ok(Input::Msg(other)) => return Err(format!("unexpected message during trial: {}", other.to_line())),
            Ok(Input::Bad(e)) => return Err(e),
            Err(RecvTimeoutError::Timeout) => false,
            Err(RecvTimeoutError::Disconnected) => return Err("input closed during trial".into()),
        };
        if stopped {
            break;
        }
    }
    let best_step = best.map(|(s, _)| s);
    send(
        out,
        &Message::Final {
            trial_id,
            best_step,
            test_metric_at_best: best_step.map(|s| test_at(spec, config, s)),
        },
    )
    .map_err(|e| e.to_string())
}

fn serve(spec: &SurrogateSpec, task: &str) -> Result<(), String> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    send(
        &mut out,
        &Message::Hello {
            task: task.to_string(),
            orientation: Orientation::Max,
        },
    )
    .map_err(|e| e.to_string())?;
    let rx = spawn_reader();
    for item in rx.iter() {
        let msg = match item {
            Input::Msg(m) => m,
            Input::Bad(e) => return Err(e),
        };
        match msg {
            Message::StartTrial {
                trial_id,
                config,
                epochs,
                checkpoints_per_epoch,
                ..
            } => run_trial(spec, &rx, &mut out, trial_id, &config, epochs * checkpoints_per_epoch)?,
            // a stop racing a natural finish
            Message::Stop { .. } => {}
            other => return Err(format!("unexpected message: {}", other.to_line())),
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (name, seed) = match args.as_slice() {
        [name] => (name.as_str(), Ok(0)),
        [name, seed] => (name.as_str(), seed.parse::<u64>()),
        _ => {
            eprintln!("usage: hpotriage-toy-evaluator <preset> [seed]");
            return ExitCode::from(1);
        }
    };
    let Ok(seed) = seed else {
        eprintln!("seed must be a non-negative integer");
        return ExitCode::from(1);
    };
    let spec = match presets::preset(name, seed) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    match serve(&spec, name) {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            let _ = send(&mut io::stdout().lock(), &Message::Error { message: message.clone() });
            eprintln!("{message}");
            ExitCode::from(2)
        }
    }
}
