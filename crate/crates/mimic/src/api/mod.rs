//! Wire transport for the oracle: a small HTTP/1.1 JSON service and a
//! matching client that satisfies the `Oracle` contract remotely.
//!
//! Schemas (`application/json` throughout):
//!
//! ```text
//! GET  /info          -> {"input_shape":[1,28,28],"num_classes":10}
//! POST /predict       <- {"pixels":[0.0, 0.5, ...]}            (C*H*W reals)
//!                     -> {"label":3}            (label-only defense)
//!                     -> {"probs":[0.1, ...]}   (softmax modes)
//! POST /predict_batch <- {"inputs":[[...],[...]]}
//!                     -> {"labels":[3,1]} | {"probs":[[...],[...]]}
//! ```
//!
//! Floats survive the round trip bit-exactly: every f32 widens losslessly
//! to f64, the JSON writer emits a shortest representation that parses
//! back to the same f64, and narrowing recovers the original f32.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{IpAddr, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use crate::oracle::{
    wrap_label_only, wrap_perturbed_softmax, wrap_watermark, Oracle, OracleError, OracleInfo,
    OracleResponse, PerturbationConfig, TriggerSpec,
};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseMode {
    FullSoftmax,
    LabelOnly,
    Perturbed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    /// e.g. "127.0.0.1:0" (port 0 picks a free one).
    pub bind: String,
    pub defense: DefenseMode,
    /// Required when `defense` is `Perturbed`.
    pub perturbation: Option<PerturbationConfig>,
    /// Watermark the served oracle before the defense wrapper.
    pub trigger: Option<TriggerSpec>,
    pub max_body_bytes: usize,
    /// Per-client requests per second; 0 disables the limit.
    pub rate_limit_per_sec: u32,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:0".into(),
            defense: DefenseMode::LabelOnly,
            perturbation: None,
            trigger: None,
            max_body_bytes: 16 << 20,
            rate_limit_per_sec: 0,
        }
    }
}

impl EndpointConfig {
    /// `MIMIC_BIND` and `MIMIC_RATE_LIMIT` override the config file.
    pub fn apply_env(&mut self) -> Result<(), String> {
        if let Ok(bind) = std::env::var("MIMIC_BIND") {
            self.bind = bind;
        }
        if let Ok(rl) = std::env::var("MIMIC_RATE_LIMIT") {
            self.rate_limit_per_sec = rl
                .parse()
                .map_err(|_| format!("MIMIC_RATE_LIMIT {rl:?} is not a nonnegative integer"))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.defense == DefenseMode::Perturbed && self.perturbation.is_none() {
            return Err("perturbed defense needs a perturbation config".into());
        }
        if self.max_body_bytes == 0 {
            return Err("max_body_bytes must be positive".into());
        }
        Ok(())
    }
}

/// Stack the configured wrappers onto a base oracle.
pub fn apply_defense(
    base: Box<dyn Oracle>,
    cfg: &EndpointConfig,
) -> Result<Box<dyn Oracle>, String> {
    cfg.validate()?;
    let mut oracle: Box<dyn Oracle> = match &cfg.trigger {
        Some(t) => {
            t.validate(&base.info())?;
            Box::new(wrap_watermark(base, t.clone()))
        }
        None => base,
    };
    oracle = match cfg.defense {
        DefenseMode::FullSoftmax => oracle,
        DefenseMode::LabelOnly => Box::new(wrap_label_only(oracle)),
        DefenseMode::Perturbed => Box::new(wrap_perturbed_softmax(
            oracle,
            cfg.perturbation.clone().expect("validated"),
        )),
    };
    Ok(oracle)
}

struct RateLimiter {
    per_sec: u32,
    windows: Mutex<HashMap<IpAddr, (u64, u32)>>,
}

impl RateLimiter {
    fn allow(&self, peer: IpAddr) -> bool {
        if self.per_sec == 0 {
            return true;
        }
        let now = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or(Duration::ZERO)
            .as_secs();
        let mut windows = self.windows.lock().unwrap();
        let entry = windows.entry(peer).or_insert((now, 0));
        if entry.0 != now {
            *entry = (now, 0);
        }
        entry.1 += 1;
        entry.1 <= self.per_sec
    }
}

struct ServerState {
    oracle: Box<dyn Oracle>,
    info: OracleInfo,
    pixels_expected: usize,
    defense: DefenseMode,
    max_body: usize,
    limiter: RateLimiter,
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    join: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    /// Block the current thread until the service stops.
    pub fn wait(mut self) {
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }

    fn stop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // poke the accept loop awake
        let _ = TcpStream::connect(self.addr);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.join.is_some() {
            self.stop();
        }
    }
}

/// Bind, wrap the oracle per the config, and serve on a background
/// thread until the handle is shut down or dropped.
pub fn serve(base: Box<dyn Oracle>, cfg: EndpointConfig) -> Result<ServerHandle, String> {
    let oracle = apply_defense(base, &cfg)?;
    let info = oracle.info();
    let pixels_expected = info.input_shape.iter().product();
    let state = Arc::new(ServerState {
        oracle,
        info,
        pixels_expected,
        defense: cfg.defense,
        max_body: cfg.max_body_bytes,
        limiter: RateLimiter {
            per_sec: cfg.rate_limit_per_sec,
            windows: Mutex::new(HashMap::new()),
        },
    });
    let listener =
        TcpListener::bind(&cfg.bind).map_err(|e| format!("bind {}: {e}", cfg.bind))?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop2 = stop.clone();
    let join = std::thread::spawn(move || {
        for conn in listener.incoming() {
            if stop2.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = conn else { continue };
            let state = state.clone();
            std::thread::spawn(move || {
                let _ = handle_connection(stream, &state);
            });
        }
    });
    Ok(ServerHandle {
        addr,
        stop,
        join: Some(join),
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictRequest {
    pixels: Vec<f32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BatchRequest {
    inputs: Vec<Vec<f32>>,
}

#[derive(Serialize, Deserialize)]
struct ErrorBody {
    error: String,
}

fn handle_connection(stream: TcpStream, state: &ServerState) -> std::io::Result<()> {
    let peer = stream.peer_addr()?.ip();
    stream.set_read_timeout(Some(Duration::from_secs(30)))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = stream;
    loop {
        let mut request_line = String::new();
        if reader.read_line(&mut request_line)? == 0 {
            return Ok(()); // client closed
        }
        let mut parts = request_line.split_whitespace();
        let (method, path) = match (parts.next(), parts.next()) {
            (Some(m), Some(p)) => (m.to_string(), p.to_string()),
            _ => {
                respond(&mut writer, 400, r#"{"error":"malformed request line"}"#)?;
                return Ok(());
            }
        };
        let mut content_length = 0usize;
        let mut close = false;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line)?;
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            if let Some((name, value)) = line.split_once(':') {
                let value = value.trim();
                if name.eq_ignore_ascii_case("content-length") {
                    content_length = value.parse().unwrap_or(0);
                } else if name.eq_ignore_ascii_case("connection")
                    && value.eq_ignore_ascii_case("close")
                {
                    close = true;
                }
            }
        }
        if content_length > state.max_body {
            respond(&mut writer, 413, r#"{"error":"request body too large"}"#)?;
            return Ok(());
        }
        let mut body = vec![0u8; content_length];
        reader.read_exact(&mut body)?;

        if !state.limiter.allow(peer) {
            respond(&mut writer, 429, r#"{"error":"rate limit exceeded"}"#)?;
            if close {
                return Ok(());
            }
            continue;
        }

        let (status, reply) = route(state, &method, &path, &body);
        respond(&mut writer, status, &reply)?;
        if close {
            return Ok(());
        }
    }
}

fn route(state: &ServerState, method: &str, path: &str, body: &[u8]) -> (u16, String) {
    match (method, path) {
        ("GET", "/info") => {
            let info = serde_json::json!({
                "input_shape": state.info.input_shape,
                "num_classes": state.info.num_classes,
            });
            (200, info.to_string())
        }
        ("POST", "/predict") => match serde_json::from_slice::<PredictRequest>(body) {
            Ok(req) => predict_one(state, req.pixels),
            Err(e) => (400, error_json(&format!("bad request body: {e}"))),
        },
        ("POST", "/predict_batch") => match serde_json::from_slice::<BatchRequest>(body) {
            Ok(req) => predict_batch(state, req.inputs),
            Err(e) => (400, error_json(&format!("bad request body: {e}"))),
        },
        ("GET" | "POST", _) => (404, error_json("no such endpoint")),
        _ => (405, error_json("method not allowed")),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::to_string(&ErrorBody { error: msg.into() }).unwrap()
}

fn query(state: &ServerState, pixels: Vec<f32>) -> Result<OracleResponse, (u16, String)> {
    if pixels.len() != state.pixels_expected {
        return Err((
            400,
            error_json(&format!(
                "expected {} pixels, got {}",
                state.pixels_expected,
                pixels.len()
            )),
        ));
    }
    let input = Tensor::new(state.info.input_shape.clone(), pixels)
        .map_err(|e| (400, error_json(&e.to_string())))?;
    state
        .oracle
        .predict(&input)
        .map_err(|e| (500, error_json(&e.to_string())))
}

fn predict_one(state: &ServerState, pixels: Vec<f32>) -> (u16, String) {
    match query(state, pixels) {
        Ok(resp) => {
            let body = match (state.defense, resp) {
                (DefenseMode::LabelOnly, r) => serde_json::json!({ "label": r.label() }),
                (_, OracleResponse::Probabilities(p)) => serde_json::json!({ "probs": p }),
                // a label-only base behind a softmax-mode endpoint still
                // only has the label to give
                (_, OracleResponse::Label(l)) => serde_json::json!({ "label": l }),
            };
            (200, body.to_string())
        }
        Err(e) => e,
    }
}

fn predict_batch(state: &ServerState, inputs: Vec<Vec<f32>>) -> (u16, String) {
    let mut labels = Vec::with_capacity(inputs.len());
    let mut probs: Vec<Vec<f32>> = Vec::with_capacity(inputs.len());
    let mut soft = state.defense != DefenseMode::LabelOnly;
    for pixels in inputs {
        match query(state, pixels) {
            Ok(resp) => {
                labels.push(resp.label());
                match resp.probabilities() {
                    Some(p) if soft => probs.push(p.to_vec()),
                    _ => soft = false,
                }
            }
            Err(e) => return e,
        }
    }
    let body = if soft {
        serde_json::json!({ "probs": probs })
    } else {
        serde_json::json!({ "labels": labels })
    };
    (200, body.to_string())
}

fn respond(writer: &mut TcpStream, status: u16, body: &str) -> std::io::Result<()> {
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        405 => "Method Not Allowed",
        413 => "Payload Too Large",
        429 => "Too Many Requests",
        _ => "Internal Server Error",
    };
    write!(
        writer,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    )?;
    writer.flush()
}

/// HTTP client fulfilling the `Oracle` contract against a served
/// endpoint. One connection, reused; transient transport failures are
/// retried idempotently up to `retries` times.
#[derive(Debug)]
pub struct RemoteOracle {
    addr: String,
    info: OracleInfo,
    retries: u32,
    conn: Mutex<Option<BufReader<TcpStream>>>,
}

impl RemoteOracle {
    /// `base_url` is "http://host:port" or bare "host:port".
    pub fn connect(base_url: &str, retries: u32) -> Result<Self, OracleError> {
        let addr = base_url
            .trim_start_matches("http://")
            .trim_end_matches('/')
            .to_string();
        let mut client = Self {
            addr,
            info: OracleInfo {
                input_shape: vec![],
                num_classes: 0,
            },
            retries,
            conn: Mutex::new(None),
        };
        let body = client.request("GET", "/info", None)?;
        #[derive(Deserialize)]
        struct InfoBody {
            input_shape: Vec<usize>,
            num_classes: usize,
        }
        let info: InfoBody = serde_json::from_str(&body)
            .map_err(|e| OracleError::Transport(format!("bad /info body: {e}")))?;
        client.info = OracleInfo {
            input_shape: info.input_shape,
            num_classes: info.num_classes,
        };
        Ok(client)
    }

    fn request(
        &self,
        method: &str,
        path: &str,
        body: Option<&str>,
    ) -> Result<String, OracleError> {
        let mut last_err = String::new();
        for _ in 0..=self.retries {
            match self.request_once(method, path, body) {
                Ok(reply) => return Ok(reply),
                Err(e) => {
                    last_err = e.to_string();
                    *self.conn.lock().unwrap() = None; // force reconnect
                }
            }
        }
        Err(OracleError::Transport(format!(
            "{method} {path} failed after {} attempts: {last_err}",
            self.retries + 1
        )))
    }

    fn request_once(
        &self,
        method: &str,
        path: &str,
        body: Option<&str>,
    ) -> std::io::Result<String> {
        let mut guard = self.conn.lock().unwrap();
        if guard.is_none() {
            let stream = TcpStream::connect(&self.addr)?;
            stream.set_read_timeout(Some(Duration::from_secs(30)))?;
            *guard = Some(BufReader::new(stream));
        }
        let reader = guard.as_mut().unwrap();
        let body = body.unwrap_or("");
        write!(
            reader.get_mut(),
            "{method} {path} HTTP/1.1\r\nHost: {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
            self.addr,
            body.len()
        )?;
        reader.get_mut().flush()?;

        let mut status_line = String::new();
        if reader.read_line(&mut status_line)? == 0 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "server closed connection",
            ));
        }
        let status: u16 = status_line
            .split_whitespace()
            .nth(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, "bad status line")
            })?;
        let mut content_length = 0usize;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line)?;
            if line.trim_end().is_empty() {
                break;
            }
            if let Some((name, value)) = line.split_once(':') {
                if name.eq_ignore_ascii_case("content-length") {
                    content_length = value.trim().parse().unwrap_or(0);
                }
            }
        }
        let mut buf = vec![0u8; content_length];
        reader.read_exact(&mut buf)?;
        let text = String::from_utf8_lossy(&buf).into_owned();
        if status != 200 {
            // non-200 is a definitive server answer, not a transport
            // fault: don't burn retries on it
            return Err(std::io::Error::other(format!("HTTP {status}: {text}")));
        }
        Ok(text)
    }
}

impl Oracle for RemoteOracle {
    fn info(&self) -> OracleInfo {
        self.info.clone()
    }

    fn predict(&self, input: &Tensor) -> Result<OracleResponse, OracleError> {
        input.assert_shape(&self.info.input_shape).map_err(|_| OracleError::Shape {
            expected: self.info.input_shape.clone(),
            actual: input.shape().to_vec(),
        })?;
        let body = serde_json::json!({ "pixels": input.data() }).to_string();
        let reply = self.request("POST", "/predict", Some(&body))?;
        #[derive(Deserialize)]
        struct Reply {
            label: Option<usize>,
            probs: Option<Vec<f32>>,
        }
        let reply: Reply = serde_json::from_str(&reply)
            .map_err(|e| OracleError::Transport(format!("bad /predict body: {e}")))?;
        match (reply.probs, reply.label) {
            (Some(p), _) => Ok(OracleResponse::Probabilities(p)),
            (None, Some(l)) => Ok(OracleResponse::Label(l)),
            (None, None) => Err(OracleError::Transport("response carried neither label nor probs".into())),
        }
    }
}
