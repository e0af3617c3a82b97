use crowdloc::Error;

pub const USAGE: u8 = 1;
pub const DATA: u8 = 2;
pub const INTERNAL: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(msg: impl std::fmt::Display) -> Self {
        Self {
            code: USAGE,
            error: anyhow::anyhow!("{msg}"),
        }
    }

    pub fn data(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: DATA,
            error: error.into(),
        }
    }

    pub fn internal(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: INTERNAL,
            error: error.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidArgument { .. } => USAGE,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::OutOfBounds { .. }
            | Error::DimensionMismatch { .. }
            | Error::NonFinite { .. }
            | Error::TooFewPoints { .. }
            | Error::TooLarge { .. } => DATA,
            Error::Diverged { .. } => INTERNAL,
        };
        Self {
            code,
            error: e.into(),
        }
    }
}
