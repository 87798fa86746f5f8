//! Scripted chat-completions server for wire tests.

#![allow(dead_code)]

use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

#[derive(Clone, Debug)]
pub struct Recorded {
    pub url: String,
    pub body: String,
    pub authorization: Option<String>,
    pub content_type: Option<String>,
}

pub struct Stub {
    pub endpoint: String,
    pub requests: Arc<Mutex<Vec<Recorded>>>,
    handle: Option<JoinHandle<()>>,
}

/// A chat-completions reply whose message content is `content`.
pub fn chat_reply(content: &str) -> String {
    serde_json::json!({
        "id": "stub",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}]
    })
    .to_string()
}

impl Stub {
    /// Serve one scripted `(status, body)` reply per request, then stop.
    pub fn start(script: Vec<(u16, String)>) -> Self {
        let server = tiny_http::Server::http("127.0.0.1:0").expect("bind stub");
        let port = server.server_addr().to_ip().expect("ip listener").port();
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&requests);
        let handle = std::thread::spawn(move || {
            for (status, reply) in script {
                let Ok(mut req) = server.recv() else { return };
                let mut body = String::new();
                let _ = req.as_reader().read_to_string(&mut body);
                let header = |name: &str| {
                    req.headers()
                        .iter()
                        .find(|h| h.field.as_str().as_str().eq_ignore_ascii_case(name))
                        .map(|h| h.value.as_str().to_string())
                };
                log.lock().unwrap().push(Recorded {
                    url: req.url().to_string(),
                    body,
                    authorization: header("Authorization"),
                    content_type: header("Content-Type"),
                });
                let resp = tiny_http::Response::from_string(reply)
                    .with_status_code(status)
                    .with_header("Content-Type: application/json".parse::<tiny_http::Header>().unwrap());
                let _ = req.respond(resp);
            }
        });
        Self {
            endpoint: format!("http://127.0.0.1:{port}/v1"),
            requests,
            handle: Some(handle),
        }
    }

    pub fn requests(&self) -> Vec<Recorded> {
        self.requests.lock().unwrap().clone()
    }
}

impl Drop for Stub {
    fn drop(&mut self) {
        // The server thread exits once its script is exhausted; an unfinished
        // script is left to die with the process.
        if let Some(h) = self.handle.take() {
            if h.is_finished() {
                let _ = h.join();
            }
        }
    }
}

/// Replace every base64 image payload with a placeholder.
pub fn redact_images(body: &str) -> String {
    let re = regex::Regex::new(r"data:image/png;base64,[A-Za-z0-9+/=]+").unwrap();
    re.replace_all(body, "data:image/png;base64,<BASE64>").into_owned()
}

/// Base64 image payloads in a request body, in order.
pub fn image_payloads(body: &str) -> Vec<String> {
    let re = regex::Regex::new(r"data:image/png;base64,([A-Za-z0-9+/=]+)").unwrap();
    re.captures_iter(body).map(|c| c[1].to_string()).collect()
}
