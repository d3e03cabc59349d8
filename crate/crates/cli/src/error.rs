//! Error-to-exit-code mapping: 0 success, 2 argument/config, 3 data,
//! 4 runtime/numeric.

use gmae_core::eval::EvalError;
use gmae_core::graph::GraphError;
use gmae_core::mem::MemError;
use gmae_core::model::ModelError;
use gmae_core::tensor::TensorError;
use gmae_core::train::TrainError;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: String) -> CliError {
        CliError { code: 2, message }
    }

    pub fn data(message: String) -> CliError {
        CliError { code: 3, message }
    }

    pub fn runtime(message: String) -> CliError {
        CliError { code: 4, message }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> CliError {
        match e {
            GraphError::Argument(_) => CliError::config(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> CliError {
        CliError::runtime(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> CliError {
        match e {
            ModelError::Config(_) | ModelError::Argument(_) => CliError::config(e.to_string()),
            ModelError::Tensor(t) => t.into(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        match e {
            TrainError::Config(_) => CliError::config(e.to_string()),
            TrainError::Checkpoint(_) | TrainError::Io { .. } => CliError::data(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Tensor(t) => t.into(),
            TrainError::Graph(g) => g.into(),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> CliError {
        match e {
            EvalError::Model(m) => m.into(),
            // Eval inputs are data files (embeddings, labels); mismatches
            // are data errors.
            EvalError::Argument(_) | EvalError::Parse { .. } | EvalError::Io { .. } => {
                CliError::data(e.to_string())
            }
        }
    }
}

impl From<MemError> for CliError {
    fn from(e: MemError) -> CliError {
        match e {
            MemError::Model(m) => m.into(),
            MemError::Tensor(t) => t.into(),
        }
    }
}
