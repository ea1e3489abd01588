use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("quaternion norm {norm:e} is too small to normalize")]
    DegenerateQuaternion { norm: f64 },

    #[error("quaternion is not unit (norm² = {norm_sq})")]
    NotNormalized { norm_sq: f64 },

    #[error("point {index} lies on the image plane (w' = {w:e})")]
    BehindImagePlane { index: usize, w: f64 },

    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("parameter dimension mismatch: expected {expected}, got {got}")]
    ParamDimension { expected: usize, got: usize },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("requested {requested} components but data rank allows at most {max}")]
    RankDeficient { requested: usize, max: usize },

    #[error("model carries no left-right vertex pairing")]
    NotSymmetrizable,

    #[error("could not sample an in-frustum pose after {attempts} attempts")]
    PoseSampling { attempts: usize },

    #[error("landmark pairs are collinear or too few")]
    DegenerateLandmarks,

    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },

    #[error("loss term `{term}` has zero mean over the sample; scale is undefined")]
    ScaleUndefined { term: String },

    #[error("all {failures} search trials failed")]
    SearchFailed { failures: usize },

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("sample {sample}: {source}")]
    Sample {
        sample: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn in_sample(self, sample: impl Into<String>) -> Self {
        Error::Sample {
            sample: sample.into(),
            source: Box::new(self),
        }
    }

    /// Strips `Sample` context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Sample { source, .. } => source.root(),
            e => e,
        }
    }
}
