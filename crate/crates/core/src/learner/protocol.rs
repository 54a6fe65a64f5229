//! JSON bodies for the remote learner endpoints.
//!
//! | endpoint            | request            | response            |
//! |---------------------|--------------------|---------------------|
//! | `POST /v1/generate` | [`GenerateRequest`]| [`GenerateResponse`]|
//! | `POST /v1/train`    | [`TrainRequest`]   | [`TrainResponse`]   |
//! | `POST /v1/reset`    | `{}`               | [`ResetResponse`]   |

use serde::{Deserialize, Serialize};

use crate::corpus::Exemplar;

pub const GENERATE_PATH: &str = "/v1/generate";
pub const TRAIN_PATH: &str = "/v1/train";
pub const RESET_PATH: &str = "/v1/reset";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub request_id: String,
    pub question: String,
    pub exemplars: Vec<Exemplar>,
    pub hint: Option<String>,
    pub n: usize,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub answer: String,
    pub cot: String,
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub request_id: String,
    pub completions: Vec<Completion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainItem {
    pub question: String,
    pub cot: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    pub request_id: String,
    pub examples: Vec<TrainItem>,
    pub accumulate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResponse {
    pub request_id: String,
    pub alpha: f64,
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResetResponse {
    pub ok: bool,
}
