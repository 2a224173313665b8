use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A model, file or argument failed validation. `path` locates the
    /// offending field (JSON-pointer style for files, parameter name otherwise).
    #[error("configuration error at {path}: {msg}")]
    Config { path: String, msg: String },

    /// The Bayes normalizer vanished: the observation is impossible under the belief.
    #[error("filtering degeneracy{}: observation {obs} has zero probability under the current belief", step_suffix(*.step))]
    FilterDegenerate { step: Option<u64>, obs: usize },

    /// The joint Markov chain does not satisfy the ergodicity / positivity hypotheses.
    #[error("joint chain rejected: {0}")]
    ChainRejected(String),

    #[error("numerical conditioning failure: {0}")]
    Numerical(String),

    #[error("enumeration budget exceeded: {what} needs {required}, cap is {cap}")]
    Budget { what: &'static str, required: u128, cap: u128 },

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn step_suffix(step: Option<u64>) -> String {
    match step {
        Some(n) => format!(" at step {n}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

/// Prepends `prefix` to the path of a configuration error.
pub(crate) fn under(prefix: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Config { path, msg } => Error::Config {
            path: format!("{prefix}{path}"),
            msg,
        },
        other => other,
    }
}

pub type Result<T> = std::result::Result<T, Error>;
