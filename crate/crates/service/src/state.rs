//! Session lifecycle.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SessionState {
    Idle,
    Demonstrating,
    Training,
    Correcting,
    RollingOut,
    Done,
}

impl SessionState {
    pub const ALL: [SessionState; 6] = [
        SessionState::Idle,
        SessionState::Demonstrating,
        SessionState::Training,
        SessionState::Correcting,
        SessionState::RollingOut,
        SessionState::Done,
    ];

    /// The declared edges. A failed fit returns from `Training` to
    /// `Demonstrating` so that more demonstrations can be added, and a
    /// session may finish between rounds.
    pub fn can_transition(self, to: SessionState) -> bool {
        use SessionState::*;
        matches!(
            (self, to),
            (Idle, Demonstrating)
                | (Demonstrating, Training)
                | (Training, Correcting)
                | (Training, Demonstrating)
                | (Correcting, RollingOut)
                | (RollingOut, Correcting)
                | (RollingOut, Done)
                | (Correcting, Done)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("illegal transition {from:?} -> {to:?}")]
pub struct TransitionError {
    pub from: SessionState,
    pub to: SessionState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateMachine {
    state: SessionState,
}

impl Default for StateMachine {
    fn default() -> Self {
        Self {
            state: SessionState::Idle,
        }
    }
}

impl StateMachine {
    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn transition(&mut self, to: SessionState) -> Result<(), TransitionError> {
        if !self.state.can_transition(to) {
            return Err(TransitionError {
                from: self.state,
                to,
            });
        }
        self.state = to;
        Ok(())
    }

    /// Passes only if the machine is in `expected`.
    pub fn require(&self, expected: SessionState) -> Result<(), TransitionError> {
        if self.state == expected {
            Ok(())
        } else {
            Err(TransitionError {
                from: self.state,
                to: expected,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn teaching_path_is_legal() {
        use SessionState::*;
        let mut m = StateMachine::default();
        for s in [
            Demonstrating,
            Training,
            Correcting,
            RollingOut,
            Correcting,
            RollingOut,
            Done,
        ] {
            m.transition(s).unwrap();
        }
        assert_eq!(m.state(), Done);
    }

    #[test]
    fn rejection_names_both_states() {
        let mut m = StateMachine::default();
        let err = m.transition(SessionState::RollingOut).unwrap_err();
        assert_eq!(err.to_string(), "illegal transition Idle -> RollingOut");
        assert_eq!(m.state(), SessionState::Idle);
    }

    #[test]
    fn done_is_terminal() {
        for to in SessionState::ALL {
            assert!(!SessionState::Done.can_transition(to));
        }
    }
}
