use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("degenerate component {component}: {reason}")]
    DegenerateComponent { component: usize, reason: String },

    #[error("covariance of component {component} is not positive definite")]
    NotPositiveDefinite { component: usize },

    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("round {round}, client {client}: {source}")]
    Round {
        round: usize,
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{label}: {source}")]
    Run {
        label: String,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite gradient on client {client} at round {round}")]
    NonFiniteGradient { round: usize, client: usize },

    #[error("IDX parse error at byte {offset}: {reason}")]
    Idx { offset: usize, reason: String },

    #[error("container format error: {0}")]
    Container(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("k-means failed: {0}")]
    KMeans(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn in_client(self, client: usize) -> Self {
        Error::Client {
            client,
            source: Box::new(self),
        }
    }
}
