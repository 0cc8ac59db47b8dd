//! Approval prompts on a terminal.

use std::io::{BufRead, Write};
use std::sync::Mutex;

use droidprobe::approval::{ApprovalGate, ApprovalTicket, Resolution};
use droidprobe::engine::Operator;
use droidprobe::script::GeneratedScript;

/// Shows each ticket and reads one answer line: `y` approves, `n [reason]`
/// rejects. End of input rejects. Prompts are serialized across device
/// workers.
pub struct TerminalOperator<R, W> {
    io: Mutex<(R, W)>,
    operator_id: String,
}

impl<R: BufRead + Send, W: Write + Send> TerminalOperator<R, W> {
    pub fn new(input: R, output: W, operator_id: impl Into<String>) -> Self {
        Self { io: Mutex::new((input, output)), operator_id: operator_id.into() }
    }

    fn ask(&self, ticket: &ApprovalTicket, script: &GeneratedScript) -> Resolution {
        let mut io = self.io.lock().unwrap();
        let (input, out) = &mut *io;
        let _ = writeln!(
            out,
            "\n--- ticket {} | step {} | {:?} | {}\n{}\n---",
            ticket.ticket_id,
            script.source.step_id,
            script.kind,
            script.risk.label(),
            script.body.trim_end()
        );
        loop {
            let _ = write!(out, "approve? [y/n reason] ");
            let _ = out.flush();
            let mut line = String::new();
            match input.read_line(&mut line) {
                Ok(0) | Err(_) => return Resolution::reject(&self.operator_id, "no operator input"),
                Ok(_) => {}
            }
            let line = line.trim();
            match line.split_once(char::is_whitespace).map_or((line, ""), |(a, b)| (a, b.trim())) {
                ("y" | "yes", _) => return Resolution::approve(&self.operator_id),
                ("n" | "no", reason) => {
                    let reason = if reason.is_empty() { "declined at terminal" } else { reason };
                    return Resolution::reject(&self.operator_id, reason);
                }
                _ => {
                    let _ = writeln!(out, "answer y or n");
                }
            }
        }
    }
}

impl<R: BufRead + Send, W: Write + Send> Operator for TerminalOperator<R, W> {
    fn on_ticket(&self, gate: &ApprovalGate, ticket: &ApprovalTicket, script: &GeneratedScript) {
        let resolution = self.ask(ticket, script);
        if let Err(e) = gate.resolve(&ticket.ticket_id, resolution) {
            tracing::warn!(ticket = %ticket.ticket_id, error = %e, "terminal decision not applied");
        }
    }
}
