//! Clients for the three model capabilities: text-to-image generation,
//! image-text similarity scoring and image captioning.
//!
//! [`Client`] validates requests and responses and delegates to a
//! [`Backend`]: the deterministic in-process [`MockBackend`] or the
//! [`RemoteBackend`] speaking the JSON-over-HTTP protocol in [`protocol`].

mod mock;
pub mod protocol;
mod remote;

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use mock::{
    jaccard_similarity, mock_caption, mock_tokens, MockBackend, MockShape, MOCK_PROMPT_KEY,
};
pub use remote::RemoteBackend;

use crate::rng::derive_seed;
use crate::{Error, Result};

pub const MAX_IMAGES_PER_CALL: u32 = 64;

/// PNG-encoded image bytes, the unit exchanged with every backend.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct PngBytes(pub Vec<u8>);

impl std::fmt::Debug for PngBytes {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PngBytes({} bytes)", self.0.len())
    }
}

impl PngBytes {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn decode(&self) -> Result<crate::imageio::DecodedPng> {
        crate::imageio::decode(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub n: u32,
    pub seed: u64,
    #[serde(default = "default_side")]
    pub width: u32,
    #[serde(default = "default_side")]
    pub height: u32,
}

fn default_side() -> u32 {
    512
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>, n: u32, seed: u64) -> Self {
        GenerationRequest {
            prompt: prompt.into(),
            n,
            seed,
            width: default_side(),
            height: default_side(),
        }
    }

    pub fn with_size(mut self, width: u32, height: u32) -> Self {
        self.width = width;
        self.height = height;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n > MAX_IMAGES_PER_CALL {
            return Err(Error::InvalidRequest(format!(
                "n must be in 1..={MAX_IMAGES_PER_CALL}, got {}",
                self.n
            )));
        }
        for side in [self.width, self.height] {
            if !(64..=2048).contains(&side) || side % 8 != 0 {
                return Err(Error::InvalidRequest(format!(
                    "image sides must be multiples of 8 in [64, 2048], got {}x{}",
                    self.width, self.height
                )));
            }
        }
        Ok(())
    }
}

/// A model backend. Implementations must be safe to call from many threads.
pub trait Backend: Send + Sync {
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<PngBytes>>;
    fn score(&self, image: &PngBytes, texts: &[String]) -> Result<Vec<f64>>;
    fn caption(&self, image: &PngBytes, n: u32) -> Result<Vec<String>>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Remote,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mock" => Ok(BackendKind::Mock),
            "remote" => Ok(BackendKind::Remote),
            other => Err(Error::Config(format!("unknown backend {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub backend: BackendKind,
    pub endpoint: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    /// First retry delay; doubles per attempt up to `backoff_cap_ms`.
    pub backoff_ms: u64,
    pub backoff_cap_ms: u64,
    pub max_in_flight: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            backend: BackendKind::Mock,
            endpoint: "http://127.0.0.1:8000".into(),
            timeout_secs: 120.0,
            max_retries: 3,
            backoff_ms: 500,
            backoff_cap_ms: 8_000,
            max_in_flight: 4,
        }
    }
}

/// Validating front end shared by all pipeline stages. Cheap to clone.
#[derive(Clone)]
pub struct Client {
    backend: Arc<dyn Backend>,
}

impl std::fmt::Debug for Client {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Client")
    }
}

impl Client {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Client { backend }
    }

    pub fn mock(mock: MockBackend) -> Self {
        Client::new(Arc::new(mock))
    }

    /// Build the backend selected by `config`. `mock` supplies the mock's
    /// prompt knowledge and is ignored for remote backends.
    pub fn from_config(config: &GatewayConfig, mock: MockBackend) -> Result<Self> {
        match config.backend {
            BackendKind::Mock => Ok(Client::mock(mock)),
            BackendKind::Remote => Ok(Client::new(Arc::new(RemoteBackend::new(config)?))),
        }
    }

    /// Exactly `req.n` images of the requested size.
    pub fn generate_images(&self, req: &GenerationRequest) -> Result<Vec<PngBytes>> {
        req.validate()?;
        let images = self.backend.generate(req)?;
        if images.len() != req.n as usize {
            return Err(Error::BadResponse(format!(
                "asked for {} images, got {}",
                req.n,
                images.len()
            )));
        }
        for image in &images {
            let decoded = image
                .decode()
                .map_err(|e| Error::BadResponse(format!("undecodable image: {e}")))?;
            if decoded.image.dimensions() != (req.width, req.height) {
                return Err(Error::BadResponse(format!(
                    "expected {}x{} image, got {:?}",
                    req.width,
                    req.height,
                    decoded.image.dimensions()
                )));
            }
        }
        Ok(images)
    }

    /// `n` images for one prompt, split into calls of at most
    /// [`MAX_IMAGES_PER_CALL`]. Call `k` uses seed `derive_seed(seed, k)`,
    /// so the result does not depend on how calls are scheduled.
    pub fn generate_many(&self, prompt: &str, n: u32, seed: u64, width: u32, height: u32) -> Result<Vec<PngBytes>> {
        let calls: Vec<u32> = (0..n.div_ceil(MAX_IMAGES_PER_CALL)).collect();
        let chunks: Vec<Vec<PngBytes>> = calls
            .into_par_iter()
            .map(|k| {
                let count = (n - k * MAX_IMAGES_PER_CALL).min(MAX_IMAGES_PER_CALL);
                let req = GenerationRequest::new(prompt, count, derive_seed(seed, &[&"call", &k]))
                    .with_size(width, height);
                self.generate_images(&req)
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    /// One similarity per text, order-aligned, each in [-1, 1].
    pub fn score_image_text(&self, image: &PngBytes, texts: &[String]) -> Result<Vec<f64>> {
        if texts.is_empty() {
            return Err(Error::InvalidRequest("score needs at least one text".into()));
        }
        let scores = self.backend.score(image, texts)?;
        if scores.len() != texts.len() {
            return Err(Error::BadResponse(format!(
                "asked for {} scores, got {}",
                texts.len(),
                scores.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite() || !(-1.0..=1.0).contains(*s)) {
            return Err(Error::BadResponse(format!("score {bad} outside [-1, 1]")));
        }
        Ok(scores)
    }

    pub fn caption_image(&self, image: &PngBytes, n: u32) -> Result<Vec<String>> {
        if n == 0 {
            return Err(Error::InvalidRequest("caption count must be >= 1".into()));
        }
        let captions = self.backend.caption(image, n)?;
        if captions.len() != n as usize {
            return Err(Error::BadResponse(format!(
                "asked for {n} captions, got {}",
                captions.len()
            )));
        }
        if captions.iter().any(|c| c.trim().is_empty()) {
            return Err(Error::BadResponse("empty caption".into()));
        }
        Ok(captions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Broken;

    impl Backend for Broken {
        fn generate(&self, _req: &GenerationRequest) -> Result<Vec<PngBytes>> {
            Ok(vec![PngBytes(b"junk".to_vec())])
        }
        fn score(&self, _image: &PngBytes, _texts: &[String]) -> Result<Vec<f64>> {
            Ok(vec![1.5])
        }
        fn caption(&self, _image: &PngBytes, _n: u32) -> Result<Vec<String>> {
            Ok(vec![])
        }
    }

    #[test]
    fn request_validation() {
        assert!(GenerationRequest::new("x", 1, 0).validate().is_ok());
        assert!(matches!(
            GenerationRequest::new("x", 0, 0).validate(),
            Err(Error::InvalidRequest(_))
        ));
        assert!(GenerationRequest::new("x", 65, 0).validate().is_err());
        assert!(GenerationRequest::new("x", 1, 0).with_size(60, 64).validate().is_err());
        assert!(GenerationRequest::new("x", 1, 0).with_size(100, 64).validate().is_err());
        assert!(GenerationRequest::new("x", 1, 0).with_size(2048, 64).validate().is_ok());
    }

    #[test]
    fn schema_violations_become_bad_response() {
        let client = Client::new(Arc::new(Broken));
        let img = PngBytes(vec![]);
        assert!(matches!(
            client.generate_images(&GenerationRequest::new("x", 1, 0).with_size(64, 64)),
            Err(Error::BadResponse(_))
        ));
        assert!(matches!(
            client.score_image_text(&img, &["a".into()]),
            Err(Error::BadResponse(_))
        ));
        assert!(matches!(client.caption_image(&img, 1), Err(Error::BadResponse(_))));
        assert!(matches!(client.score_image_text(&img, &[]), Err(Error::InvalidRequest(_))));
        assert!(matches!(client.caption_image(&img, 0), Err(Error::InvalidRequest(_))));
    }

    #[test]
    fn backend_kind_parses() {
        assert_eq!("mock".parse::<BackendKind>().unwrap(), BackendKind::Mock);
        assert_eq!("remote".parse::<BackendKind>().unwrap(), BackendKind::Remote);
        assert!("gpu".parse::<BackendKind>().is_err());
    }
}
