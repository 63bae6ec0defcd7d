//! Thins the control-loop tick stream down to a client's frame rate.

use pickteach::teaching::TickReport;

use crate::protocol::{StateFrame, Telemetry};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("telemetry rate {rate} Hz outside (0, {control_rate}]")]
pub struct RateError {
    pub rate: f64,
    pub control_rate: f64,
}

/// Passes a state frame every `every` ticks and on the final tick. Ticks
/// with events always produce a message, so events are never dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Decimator {
    every: u64,
}

impl Decimator {
    pub fn new(control_rate: f64, rate_hz: f64) -> Result<Self, RateError> {
        if !(rate_hz > 0.0 && rate_hz <= control_rate) {
            return Err(RateError {
                rate: rate_hz,
                control_rate,
            });
        }
        Ok(Self {
            every: ((control_rate / rate_hz).round() as u64).max(1),
        })
    }

    pub fn every(&self) -> u64 {
        self.every
    }

    pub fn filter(&self, session: &str, report: &TickReport) -> Option<Telemetry> {
        let frame_due = report.tick.is_multiple_of(self.every) || report.outcome.is_some();
        if !frame_due && report.events.is_empty() {
            return None;
        }
        let state = frame_due.then(|| StateFrame {
            robot: report.robot.clone(),
            attractor: report.command.as_ref().map(|c| c.x_des),
            gamma: report.command.as_ref().map(|c| c.diagnostics.gamma),
            variance: report.command.as_ref().map(|c| c.diagnostics.variance),
            confidence_ok: report.command.as_ref().map(|c| c.confidence_ok),
            frame: report.command.as_ref().map(|c| c.frame),
        });
        Some(Telemetry {
            session: session.to_string(),
            tick: report.tick,
            t: report.t,
            state,
            events: report.events.clone(),
            outcome: report.outcome,
        })
    }
}
