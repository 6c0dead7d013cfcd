//! Out-of-process scorer adapter. The plugin speaks line-delimited JSON over
//! stdio: requests `{image_id, embedding_b64?, caption}`, responses
//! `{score}`. Responses are cached by (image_id, caption hash).

use super::{ScoreImage, Scorer, ScorerError};
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PluginSpec {
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
    /// per-request deadline in milliseconds
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// include the image embedding in requests
    #[serde(default)]
    pub send_embedding: bool,
    pub scorer_id: String,
}

fn default_timeout_ms() -> u64 {
    5_000
}

#[derive(Serialize)]
struct PluginRequest<'a> {
    image_id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    embedding_b64: Option<String>,
    caption: &'a str,
}

#[derive(Deserialize)]
struct PluginResponse {
    score: f64,
}

pub struct ExternalScorer {
    spec: PluginSpec,
    child: Mutex<Child>,
    stdin: Mutex<std::process::ChildStdin>,
    lines: Mutex<Receiver<std::io::Result<String>>>,
    cache: RwLock<HashMap<(String, String), f64>>,
}

impl ExternalScorer {
    pub fn spawn(spec: PluginSpec) -> Result<Self, ScorerError> {
        let mut child = Command::new(&spec.command)
            .args(&spec.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let reader = BufReader::new(stdout);
            for line in reader.lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(ExternalScorer {
            spec,
            child: Mutex::new(child),
            stdin: Mutex::new(stdin),
            lines: Mutex::new(rx),
            cache: RwLock::new(HashMap::new()),
        })
    }

    fn cache_key(image_id: &str, caption: &str) -> (String, String) {
        let mut h = Sha256::new();
        h.update(caption.as_bytes());
        let digest = h.finalize();
        (image_id.to_string(), format!("{digest:x}"))
    }

    fn request(&self, image: ScoreImage<'_>, caption: &str) -> Result<f64, ScorerError> {
        let embedding_b64 = if self.spec.send_embedding {
            let mut bytes = Vec::with_capacity(image.embedding.len() * 4);
            for v in image.embedding {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            Some(base64::engine::general_purpose::STANDARD.encode(bytes))
        } else {
            None
        };
        let req = PluginRequest { image_id: image.image_id, embedding_b64, caption };
        let line = serde_json::to_string(&req).expect("request serializes");
        {
            let mut stdin = self.stdin.lock().expect("stdin lock");
            stdin
                .write_all(line.as_bytes())
                .and_then(|_| stdin.write_all(b"\n"))
                .and_then(|_| stdin.flush())
                .map_err(|_| ScorerError::ScorerTimeout(self.spec.timeout_ms))?;
        }
        let rx = self.lines.lock().expect("reader lock");
        match rx.recv_timeout(Duration::from_millis(self.spec.timeout_ms)) {
            Ok(Ok(line)) => {
                let resp: PluginResponse = serde_json::from_str(&line)
                    .map_err(|e| ScorerError::ProtocolError(format!("{e}: {line}")))?;
                Ok(resp.score)
            }
            Ok(Err(e)) => Err(ScorerError::ProtocolError(e.to_string())),
            // a dead plugin and a stalled plugin both surface as a timeout
            Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => {
                Err(ScorerError::ScorerTimeout(self.spec.timeout_ms))
            }
        }
    }
}

impl Scorer for ExternalScorer {
    fn id(&self) -> &str {
        &self.spec.scorer_id
    }

    fn score(&self, image: ScoreImage<'_>, caption: &str) -> Result<f64, ScorerError> {
        let key = Self::cache_key(image.image_id, caption);
        if let Some(&v) = self.cache.read().expect("cache read").get(&key) {
            return Ok(v);
        }
        let v = self.request(image, caption)?;
        self.cache.write().expect("cache write").insert(key, v);
        Ok(v)
    }

    fn score_range(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }
}

impl Drop for ExternalScorer {
    fn drop(&mut self) {
        if let Ok(mut child) = self.child.lock() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sh_plugin(script: &str, timeout_ms: u64) -> ExternalScorer {
        ExternalScorer::spawn(PluginSpec {
            command: "/bin/sh".into(),
            args: vec!["-c".into(), script.into()],
            timeout_ms,
            send_embedding: false,
            scorer_id: "test-plugin".into(),
        })
        .unwrap()
    }

    fn img<'a>() -> ScoreImage<'a> {
        ScoreImage { image_id: "img0", embedding: &[] }
    }

    #[test]
    fn echo_plugin_returns_constant() {
        let s = sh_plugin(r#"while IFS= read -r line; do echo '{"score":0.5}'; done"#, 5_000);
        for cap in ["a dog", "a cat", "a bird"] {
            assert_eq!(s.score(img(), cap).unwrap(), 0.5);
        }
    }

    #[test]
    fn repeated_request_is_served_from_cache() {
        // plugin returns an incrementing counter; a cache hit keeps the old value
        let s = sh_plugin(
            r#"i=0; while IFS= read -r line; do i=$((i+1)); echo "{\"score\":$i}"; done"#,
            5_000,
        );
        assert_eq!(s.score(img(), "a dog").unwrap(), 1.0);
        assert_eq!(s.score(img(), "a dog").unwrap(), 1.0);
        assert_eq!(s.score(img(), "a cat").unwrap(), 2.0);
    }

    #[test]
    fn plugin_death_mid_batch_times_out() {
        let s = sh_plugin(r#"IFS= read -r line; echo '{"score":0.1}'; exit 0"#, 500);
        assert_eq!(s.score(img(), "first").unwrap(), 0.1);
        match s.score(img(), "second") {
            Err(ScorerError::ScorerTimeout(_)) => {}
            other => panic!("expected timeout, got {other:?}"),
        }
    }

    #[test]
    fn malformed_response_is_protocol_error() {
        let s = sh_plugin(r#"while IFS= read -r line; do echo 'not json'; done"#, 5_000);
        assert!(matches!(s.score(img(), "a dog"), Err(ScorerError::ProtocolError(_))));
    }
}
