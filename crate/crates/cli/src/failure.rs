use std::fmt;

/// Command failure, classified by exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    File(anyhow::Error),
    Runtime(anyhow::Error),
}

pub type Outcome<T> = Result<T, Failure>;

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::File(_) => 3,
            Failure::Runtime(_) => 4,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Failure {
        Failure::Usage(msg.into())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage: {m}"),
            Failure::File(e) | Failure::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<netsched_core::Error> for Failure {
    fn from(e: netsched_core::Error) -> Failure {
        use netsched_core::Error as E;
        match e {
            E::Io { .. } | E::Parse { .. } | E::CheckpointMismatch { .. } => {
                Failure::File(e.into())
            }
            _ => Failure::Runtime(e.into()),
        }
    }
}

/// Attaches context to a core result, keeping its classification.
pub trait Context<T> {
    fn context(self, what: impl fmt::Display) -> Outcome<T>;
}

impl<T> Context<T> for netsched_core::Result<T> {
    fn context(self, what: impl fmt::Display) -> Outcome<T> {
        self.map_err(|e| match Failure::from(e) {
            Failure::File(e) => Failure::File(e.context(what.to_string())),
            Failure::Runtime(e) => Failure::Runtime(e.context(what.to_string())),
            u => u,
        })
    }
}
