//! JSON bodies of the three HTTP endpoints.
//!
//! ```text
//! POST /v1/generate  {"prompt", "n", "seed", "width", "height"} -> {"images": [base64 PNG]}
//! POST /v1/score     {"image": base64 PNG, "texts": [str]}       -> {"scores": [float]}
//! POST /v1/caption   {"image": base64 PNG, "n": int}             -> {"captions": [str]}
//! ```

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const GENERATE_PATH: &str = "/v1/generate";
pub const SCORE_PATH: &str = "/v1/score";
pub const CAPTION_PATH: &str = "/v1/caption";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateBody {
    pub prompt: String,
    pub n: u32,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateReply {
    pub images: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreBody {
    pub image: String,
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReply {
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionBody {
    pub image: String,
    pub n: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionReply {
    pub captions: Vec<String>,
}

pub fn encode_base64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn decode_base64(text: &str) -> Result<Vec<u8>> {
    base64::engine::general_purpose::STANDARD
        .decode(text)
        .map_err(|e| Error::BadResponse(format!("invalid base64 image: {e}")))
}
