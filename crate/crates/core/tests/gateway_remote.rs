use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use synthpaste::gateway::protocol::{
    decode_base64, encode_base64, CaptionBody, CaptionReply, GenerateBody, GenerateReply, ScoreBody, ScoreReply,
    CAPTION_PATH, GENERATE_PATH, SCORE_PATH,
};
use synthpaste::gateway::{
    Backend, BackendKind, Client, GatewayConfig, GenerationRequest, MockBackend, PngBytes, RemoteBackend,
};
use synthpaste::prompting::TemplateSet;
use synthpaste::Error;

type Handler = dyn Fn(usize, &str, &str) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server. `handler` gets the call number, path and body.
struct FakeServer {
    endpoint: String,
    calls: Arc<AtomicUsize>,
    paths: Arc<Mutex<Vec<String>>>,
}

impl FakeServer {
    fn start(handler: Arc<Handler>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let endpoint = format!("http://{}", listener.local_addr().unwrap());
        let calls = Arc::new(AtomicUsize::new(0));
        let paths = Arc::new(Mutex::new(Vec::new()));
        let (c, p) = (calls.clone(), paths.clone());
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
                let mut length = 0;
                loop {
                    let mut header = String::new();
                    reader.read_line(&mut header).unwrap();
                    if header.trim().is_empty() {
                        break;
                    }
                    let lower = header.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap();
                    }
                }
                let mut body = vec![0; length];
                reader.read_exact(&mut body).unwrap();
                let n = c.fetch_add(1, Ordering::SeqCst);
                p.lock().unwrap().push(path.clone());
                let (status, reply) = handler(n, &path, &String::from_utf8(body).unwrap());
                let head = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    reply.len()
                );
                stream.write_all(head.as_bytes()).unwrap();
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        FakeServer { endpoint, calls, paths }
    }

    fn config(&self, max_retries: u32) -> GatewayConfig {
        GatewayConfig {
            backend: BackendKind::Remote,
            endpoint: self.endpoint.clone(),
            timeout_secs: 10.0,
            max_retries,
            backoff_ms: 1,
            backoff_cap_ms: 4,
            max_in_flight: 2,
        }
    }
}

fn mock() -> MockBackend {
    MockBackend::new(TemplateSet::bundled()).with_labels(&["dog".to_string()])
}

/// Serves the three endpoints from the mock backend.
fn sidecar(_n: usize, path: &str, body: &str) -> (u16, String) {
    let m = mock();
    let reply = match path {
        GENERATE_PATH => {
            let b: GenerateBody = serde_json::from_str(body).unwrap();
            let req = GenerationRequest::new(b.prompt, b.n, b.seed).with_size(b.width, b.height);
            let images = m.generate(&req).unwrap().iter().map(|p| encode_base64(p.as_bytes())).collect();
            serde_json::to_string(&GenerateReply { images }).unwrap()
        }
        SCORE_PATH => {
            let b: ScoreBody = serde_json::from_str(body).unwrap();
            let image = PngBytes(decode_base64(&b.image).unwrap());
            serde_json::to_string(&ScoreReply { scores: m.score(&image, &b.texts).unwrap() }).unwrap()
        }
        CAPTION_PATH => {
            let b: CaptionBody = serde_json::from_str(body).unwrap();
            let image = PngBytes(decode_base64(&b.image).unwrap());
            serde_json::to_string(&CaptionReply { captions: m.caption(&image, b.n).unwrap() }).unwrap()
        }
        _ => return (404, "{}".into()),
    };
    (200, reply)
}

#[test]
fn round_trip_matches_in_process_backend() {
    let server = FakeServer::start(Arc::new(sidecar));
    let remote = Client::new(Arc::new(RemoteBackend::new(&server.config(0)).unwrap()));
    let local = Client::mock(mock());
    let req = GenerationRequest::new("A photo of dog", 3, 42).with_size(128, 128);
    let images = remote.generate_images(&req).unwrap();
    assert_eq!(images, local.generate_images(&req).unwrap());
    let texts = vec!["A photo of dog".to_string(), "dog".to_string()];
    assert_eq!(remote.score_image_text(&images[0], &texts).unwrap(), local.score_image_text(&images[0], &texts).unwrap());
    assert_eq!(remote.caption_image(&images[1], 2).unwrap(), local.caption_image(&images[1], 2).unwrap());
    assert_eq!(*server.paths.lock().unwrap(), [GENERATE_PATH, SCORE_PATH, CAPTION_PATH]);
}

#[test]
fn transient_failures_are_retried() {
    let server = FakeServer::start(Arc::new(|n, path, body| match n {
        0 => (503, "{}".into()),
        1 => (429, "{}".into()),
        _ => sidecar(n, path, body),
    }));
    let client = Client::new(Arc::new(RemoteBackend::new(&server.config(2)).unwrap()));
    let captions = client.caption_image(&PngBytes(mock_image()), 1).unwrap();
    assert_eq!(captions.len(), 1);
    assert_eq!(server.calls.load(Ordering::SeqCst), 3);
}

#[test]
fn retries_are_bounded() {
    let server = FakeServer::start(Arc::new(|_, _, _| (500, "{}".into())));
    let backend = RemoteBackend::new(&server.config(3)).unwrap();
    let err = backend.caption(&PngBytes(mock_image()), 1).unwrap_err();
    assert!(matches!(err, Error::GatewayUnavailable { attempts: 4, .. }), "{err:?}");
    assert_eq!(err.exit_code(), 3);
    assert_eq!(server.calls.load(Ordering::SeqCst), 4);
}

#[test]
fn client_errors_and_malformed_bodies_are_not_retried() {
    let server = FakeServer::start(Arc::new(|_, _, _| (400, r#"{"error":"bad schema"}"#.into())));
    let backend = RemoteBackend::new(&server.config(5)).unwrap();
    let err = backend.caption(&PngBytes(mock_image()), 1).unwrap_err();
    assert!(matches!(&err, Error::BadResponse(m) if m.contains("400")), "{err:?}");
    assert_eq!(server.calls.load(Ordering::SeqCst), 1);

    let server = FakeServer::start(Arc::new(|_, _, _| (200, r#"{"captions": 7}"#.into())));
    let backend = RemoteBackend::new(&server.config(5)).unwrap();
    let err = backend.caption(&PngBytes(mock_image()), 1).unwrap_err();
    assert!(matches!(err, Error::BadResponse(_)), "{err:?}");
    assert_eq!(err.exit_code(), 3);
    assert_eq!(server.calls.load(Ordering::SeqCst), 1);
}

#[test]
fn client_rejects_wrong_image_count() {
    let server = FakeServer::start(Arc::new(|n, path, body| {
        let (status, reply) = sidecar(n, path, body);
        let mut r: GenerateReply = serde_json::from_str(&reply).unwrap();
        r.images.pop();
        (status, serde_json::to_string(&r).unwrap())
    }));
    let client = Client::new(Arc::new(RemoteBackend::new(&server.config(0)).unwrap()));
    let err = client.generate_images(&GenerationRequest::new("A photo of dog", 2, 1).with_size(64, 64)).unwrap_err();
    assert!(err.is_gateway(), "{err:?}");
}

fn mock_image() -> Vec<u8> {
    let req = GenerationRequest::new("A photo of dog", 1, 0).with_size(64, 64);
    mock().generate(&req).unwrap().remove(0).0
}
