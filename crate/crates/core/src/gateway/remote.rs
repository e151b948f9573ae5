//! HTTP backend for a model sidecar.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use tracing::warn;

use super::protocol::{
    decode_base64, encode_base64, CaptionBody, CaptionReply, GenerateBody, GenerateReply,
    ScoreBody, ScoreReply, CAPTION_PATH, GENERATE_PATH, SCORE_PATH,
};
use super::{Backend, GatewayConfig, GenerationRequest, PngBytes};
use crate::{Error, Result};

const MAX_BODY_BYTES: u64 = 1 << 30;

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct InFlight {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(limit: usize) -> Self {
        InFlight {
            free: Mutex::new(limit.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("semaphore poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("semaphore poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

enum Failure {
    Retryable(String),
    Fatal(Error),
}

/// Blocking JSON-over-HTTP client with bounded retries.
///
/// Transport errors, timeouts and 408/429/5xx statuses are retried with
/// exponential backoff; malformed bodies and other 4xx statuses are not.
/// A call makes at most `1 + max_retries` attempts.
#[derive(Debug)]
pub struct RemoteBackend {
    agent: ureq::Agent,
    endpoint: String,
    max_retries: u32,
    backoff: Duration,
    backoff_cap: Duration,
    in_flight: InFlight,
}

impl RemoteBackend {
    pub fn new(config: &GatewayConfig) -> Result<Self> {
        if !(config.timeout_secs.is_finite() && config.timeout_secs > 0.0) {
            return Err(Error::Config("gateway timeout must be positive".into()));
        }
        let endpoint = config.endpoint.trim_end_matches('/').to_string();
        if !(endpoint.starts_with("http://") || endpoint.starts_with("https://")) {
            return Err(Error::Config(format!("endpoint {endpoint:?} is not an http(s) URL")));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(RemoteBackend {
            agent,
            endpoint,
            max_retries: config.max_retries,
            backoff: Duration::from_millis(config.backoff_ms),
            backoff_cap: Duration::from_millis(config.backoff_cap_ms.max(config.backoff_ms)),
            in_flight: InFlight::new(config.max_in_flight),
        })
    }

    fn attempt<B: Serialize, R: DeserializeOwned>(&self, url: &str, body: &B) -> std::result::Result<R, Failure> {
        let _permit = self.in_flight.acquire();
        let mut response = match self.agent.post(url).send_json(body) {
            Ok(r) => r,
            Err(e) => return Err(Failure::Retryable(e.to_string())),
        };
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .with_config()
            .limit(MAX_BODY_BYTES)
            .read_to_string();
        match status {
            200..=299 => {
                let text = text.map_err(|e| Failure::Retryable(e.to_string()))?;
                serde_json::from_str(&text)
                    .map_err(|e| Failure::Fatal(Error::BadResponse(format!("{url}: {e}"))))
            }
            408 | 429 | 500..=599 => Err(Failure::Retryable(format!("{url}: HTTP {status}"))),
            _ => Err(Failure::Fatal(Error::BadResponse(format!(
                "{url}: HTTP {status}: {}",
                text.unwrap_or_default()
            )))),
        }
    }

    fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R> {
        let url = format!("{}{}", self.endpoint, path);
        let mut delay = self.backoff;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&url, body) {
                Ok(reply) => return Ok(reply),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(message)) => {
                    if attempts > self.max_retries {
                        return Err(Error::GatewayUnavailable { attempts, message });
                    }
                    warn!(url = %url, attempt = attempts, error = %message, "gateway call failed, retrying");
                    std::thread::sleep(delay);
                    delay = (delay * 2).min(self.backoff_cap);
                }
            }
        }
    }
}

impl Backend for RemoteBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<PngBytes>> {
        let body = GenerateBody {
            prompt: req.prompt.clone(),
            n: req.n,
            seed: req.seed,
            width: req.width,
            height: req.height,
        };
        let reply: GenerateReply = self.post(GENERATE_PATH, &body)?;
        reply
            .images
            .iter()
            .map(|b64| decode_base64(b64).map(PngBytes))
            .collect()
    }

    fn score(&self, image: &PngBytes, texts: &[String]) -> Result<Vec<f64>> {
        let body = ScoreBody {
            image: encode_base64(image.as_bytes()),
            texts: texts.to_vec(),
        };
        let reply: ScoreReply = self.post(SCORE_PATH, &body)?;
        Ok(reply.scores)
    }

    fn caption(&self, image: &PngBytes, n: u32) -> Result<Vec<String>> {
        let body = CaptionBody {
            image: encode_base64(image.as_bytes()),
            n,
        };
        let reply: CaptionReply = self.post(CAPTION_PATH, &body)?;
        Ok(reply.captions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::BackendKind;

    #[test]
    fn rejects_bad_endpoint_and_timeout() {
        let mut cfg = GatewayConfig { backend: BackendKind::Remote, endpoint: "ftp://x".into(), ..Default::default() };
        assert!(matches!(RemoteBackend::new(&cfg), Err(Error::Config(_))));
        cfg.endpoint = "http://127.0.0.1:1".into();
        cfg.timeout_secs = 0.0;
        assert!(matches!(RemoteBackend::new(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn unreachable_endpoint_exhausts_retries() {
        // port 9 (discard) is closed in the sandbox; connection is refused fast
        let cfg = GatewayConfig {
            backend: BackendKind::Remote,
            endpoint: "http://127.0.0.1:9".into(),
            timeout_secs: 2.0,
            max_retries: 2,
            backoff_ms: 1,
            backoff_cap_ms: 2,
            max_in_flight: 1,
        };
        let backend = RemoteBackend::new(&cfg).unwrap();
        match backend.caption(&PngBytes(vec![1, 2, 3]), 1) {
            Err(Error::GatewayUnavailable { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
