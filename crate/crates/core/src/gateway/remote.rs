//! Line-delimited JSON protocol for out-of-process backends.
//!
//! Each request is one line `{"id", "method", "params"}`; each response is
//! one line `{"id", "result"}` or `{"id", "error": {"code", "message"}}`.
//! Binary payloads are base64: images as PNG bytes, arrays as little-endian
//! `f64` with an explicit shape.
//!
//! [`RemoteClip`], [`RemoteMllm`], [`RemoteDiffusion`], [`RemoteDetector`]
//! and [`RemoteFeatures`] are clients; [`Dispatcher`] serves any set of
//! local backends over the same protocol.

use std::io::{BufRead, BufReader, Read as _, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::Engine as _;
use base64::engine::general_purpose::STANDARD as B64;
use serde::{Deserialize, Serialize};
use serde_json::{Value, json};

use super::{
    ClipBackend, DenoiseRequest, Detection, DetectorBackend, DiffusionBackend, Latent,
    MllmBackend, NoiseSchedule, ProbeMode, VisionInput, YesProbe,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{EmbeddingVector, TokenSeq};

/// Longest accepted protocol line (bytes).
pub const MAX_LINE_BYTES: usize = 256 * 1024 * 1024;
/// Largest accepted array element count.
pub const MAX_ARRAY_ELEMENTS: usize = 1 << 28;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub method: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
}

impl Response {
    fn ok(id: u64, result: Value) -> Self {
        Self {
            id,
            result: Some(result),
            error: None,
        }
    }

    fn err(id: u64, code: &str, message: impl Into<String>) -> Self {
        Self {
            id,
            result: None,
            error: Some(WireError {
                code: code.to_string(),
                message: message.into(),
            }),
        }
    }
}

pub fn parse_request(line: &str) -> Result<Request> {
    serde_json::from_str(line).map_err(|e| Error::decode("request", e))
}

/// Parses a response line and checks it carries exactly one of
/// `result`/`error`.
pub fn parse_response(line: &str) -> Result<Response> {
    let response: Response =
        serde_json::from_str(line).map_err(|e| Error::decode("response", e))?;
    match (&response.result, &response.error) {
        (Some(_), None) | (None, Some(_)) => Ok(response),
        _ => Err(Error::decode(
            "response",
            "exactly one of `result` and `error` must be present",
        )),
    }
}

/// Base64 little-endian `f64` array with shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayPayload {
    pub shape: Vec<usize>,
    pub f64le: String,
}

impl ArrayPayload {
    pub fn encode(shape: Vec<usize>, data: &[f64]) -> Self {
        let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            shape,
            f64le: B64.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Vec<f64>> {
        let count = self
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= MAX_ARRAY_ELEMENTS)
            .ok_or_else(|| Error::decode("array", "shape too large"))?;
        let bytes = B64
            .decode(self.f64le.as_bytes())
            .map_err(|e| Error::decode("array", e))?;
        if bytes.len() != count * 8 {
            return Err(Error::decode(
                "array",
                format!("{} bytes for {count} elements", bytes.len()),
            ));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}

fn encode_image(image: &Image) -> Result<Value> {
    Ok(json!({ "png": B64.encode(image.encode_png()?) }))
}

fn decode_image(value: &Value) -> Result<Image> {
    let b64 = value
        .get("png")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::decode("image payload", "missing `png`"))?;
    let bytes = B64
        .decode(b64.as_bytes())
        .map_err(|e| Error::decode("image payload", e))?;
    Image::decode_png(&bytes)
}

fn encode_vector(v: &EmbeddingVector) -> Value {
    json!(ArrayPayload::encode(vec![v.dim()], v.as_slice()))
}

fn decode_vector(value: &Value) -> Result<EmbeddingVector> {
    let payload: ArrayPayload = serde_json::from_value(value.clone())
        .map_err(|e| Error::decode("vector payload", e))?;
    if payload.shape.len() != 1 {
        return Err(Error::decode("vector payload", "expected rank-1 shape"));
    }
    Ok(EmbeddingVector::new(payload.decode()?))
}

fn encode_tokens(t: &TokenSeq) -> Value {
    json!(ArrayPayload::encode(vec![t.n_tokens, t.dim], &t.data))
}

fn decode_tokens(value: &Value) -> Result<TokenSeq> {
    let payload: ArrayPayload = serde_json::from_value(value.clone())
        .map_err(|e| Error::decode("token payload", e))?;
    let [n, d] = payload.shape[..] else {
        return Err(Error::decode("token payload", "expected rank-2 shape"));
    };
    TokenSeq::from_flat(n, d, payload.decode()?)
}

fn encode_latent(l: &Latent) -> Value {
    let mut v = json!(ArrayPayload::encode(l.shape.clone(), &l.data));
    if !l.tags.is_empty() {
        v["tags"] = json!(l.tags);
    }
    v
}

fn decode_latent(value: &Value) -> Result<Latent> {
    let payload: ArrayPayload = serde_json::from_value(value.clone())
        .map_err(|e| Error::decode("latent payload", e))?;
    let mut latent = Latent::new(payload.shape.clone(), payload.decode()?)?;
    if let Some(tags) = value.get("tags") {
        latent.tags = serde_json::from_value(tags.clone())
            .map_err(|e| Error::decode("latent tags", e))?;
    }
    Ok(latent)
}

fn field<'a>(params: &'a Value, name: &'static str) -> Result<&'a Value> {
    params
        .get(name)
        .ok_or_else(|| Error::decode("params", format!("missing `{name}`")))
}

fn field_str<'a>(params: &'a Value, name: &'static str) -> Result<&'a str> {
    field(params, name)?
        .as_str()
        .ok_or_else(|| Error::decode("params", format!("`{name}` is not a string")))
}

fn field_f64(params: &Value, name: &'static str) -> Result<f64> {
    field(params, name)?
        .as_f64()
        .ok_or_else(|| Error::decode("params", format!("`{name}` is not a number")))
}

fn field_u64(params: &Value, name: &'static str) -> Result<u64> {
    field(params, name)?
        .as_u64()
        .ok_or_else(|| Error::decode("params", format!("`{name}` is not an integer")))
}

fn field_mode(params: &Value) -> Result<ProbeMode> {
    match params.get("mode") {
        None => Ok(ProbeMode::DirectAnswer),
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::decode("mode", e)),
    }
}

/// Blocking client over a single TCP connection; calls are serialized.
pub struct RemoteClient {
    endpoint: String,
    timeout: Duration,
    next_id: AtomicU64,
    conn: Mutex<Option<(BufReader<TcpStream>, TcpStream)>>,
}

impl RemoteClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(600),
            next_id: AtomicU64::new(1),
            conn: Mutex::new(None),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn connect(&self) -> Result<(BufReader<TcpStream>, TcpStream)> {
        let addr = self
            .endpoint
            .to_socket_addrs()
            .map_err(|e| Error::unavailable(&self.endpoint, e.to_string()))?
            .next()
            .ok_or_else(|| Error::unavailable(&self.endpoint, "endpoint resolved to nothing"))?;
        let stream = TcpStream::connect_timeout(&addr, Duration::from_secs(10))
            .map_err(|e| Error::unavailable(&self.endpoint, e.to_string()))?;
        stream
            .set_nodelay(true)
            .and_then(|_| stream.set_read_timeout(Some(self.timeout)))
            .and_then(|_| stream.set_write_timeout(Some(self.timeout)))
            .map_err(|e| Error::unavailable(&self.endpoint, e.to_string()))?;
        let reader = stream
            .try_clone()
            .map_err(|e| Error::unavailable(&self.endpoint, e.to_string()))?;
        Ok((BufReader::new(reader), stream))
    }

    fn exchange(
        &self,
        conn: &mut (BufReader<TcpStream>, TcpStream),
        line: &str,
    ) -> std::io::Result<String> {
        let mut buf = Vec::with_capacity(line.len() + 1);
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
        conn.1.write_all(&buf)?;
        conn.1.flush()?;
        let mut reply = String::new();
        let n = conn.0.read_line(&mut reply)?;
        if n == 0 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "connection closed",
            ));
        }
        Ok(reply)
    }

    /// Sends one request; reconnects once if the connection dropped.
    pub fn call(&self, method: &str, params: Value) -> Result<Value> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let line = serde_json::to_string(&Request {
            id,
            method: method.to_string(),
            params,
        })?;
        let mut guard = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        let mut last_err = None;
        for _ in 0..2 {
            if guard.is_none() {
                *guard = Some(self.connect()?);
            }
            let conn = guard.as_mut().expect("connection just set");
            match self.exchange(conn, &line) {
                Ok(reply) => {
                    let response = parse_response(reply.trim_end())?;
                    if response.id != id {
                        *guard = None;
                        return Err(Error::backend(
                            &self.endpoint,
                            format!("response id {} for request {id}", response.id),
                        ));
                    }
                    if let Some(err) = response.error {
                        return Err(Error::backend(
                            &self.endpoint,
                            format!("{method}: {} ({})", err.message, err.code),
                        ));
                    }
                    return Ok(response.result.unwrap_or(Value::Null));
                }
                Err(e) => {
                    *guard = None;
                    last_err = Some(e);
                }
            }
        }
        Err(Error::unavailable(
            &self.endpoint,
            last_err.map_or_else(|| "unreachable".to_string(), |e| e.to_string()),
        ))
    }
}

pub struct RemoteClip {
    client: RemoteClient,
    id: String,
    dims: usize,
}

impl RemoteClip {
    /// Connects and reads the backend's dimensions.
    pub fn connect(client: RemoteClient) -> Result<Self> {
        let info = client.call("clip.info", Value::Null)?;
        let dims = field_u64(&info, "dims")? as usize;
        Ok(Self {
            id: format!("remote-clip@{}", client.endpoint()),
            client,
            dims,
        })
    }
}

impl ClipBackend for RemoteClip {
    fn id(&self) -> &str {
        &self.id
    }

    fn dims(&self) -> usize {
        self.dims
    }

    fn embed_image(&self, image: &Image) -> Result<EmbeddingVector> {
        let r = self
            .client
            .call("clip.embed_image", json!({ "image": encode_image(image)? }))?;
        decode_vector(field(&r, "vector")?)
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        let r = self.client.call("clip.embed_text", json!({ "text": text }))?;
        decode_vector(field(&r, "vector")?)
    }

    fn max_concurrency(&self) -> Option<usize> {
        Some(1)
    }
}

pub struct RemoteMllm {
    client: RemoteClient,
    id: String,
    dims: (usize, usize),
    gradients: bool,
    yes_variants: Vec<String>,
}

impl RemoteMllm {
    /// `yes_variants` are the answer tokens whose probabilities are summed
    /// (e.g. `"Yes"`, `" Yes"`, `"yes"`).
    pub fn connect(client: RemoteClient, yes_variants: Vec<String>) -> Result<Self> {
        let info = client.call("mllm.info", Value::Null)?;
        let n = field_u64(&info, "n_tokens")? as usize;
        let d = field_u64(&info, "d_m")? as usize;
        let gradients = info
            .get("gradients")
            .and_then(Value::as_bool)
            .unwrap_or(false);
        Ok(Self {
            id: format!("remote-mllm@{}", client.endpoint()),
            client,
            dims: (n, d),
            gradients,
            yes_variants,
        })
    }

    fn probe_params(&self, tokens: &TokenSeq, prompt: &str, mode: ProbeMode) -> Value {
        json!({
            "tokens": encode_tokens(tokens),
            "prompt": prompt,
            "mode": mode,
            "yes_variants": self.yes_variants,
        })
    }
}

impl MllmBackend for RemoteMllm {
    fn id(&self) -> &str {
        &self.id
    }

    fn token_dims(&self) -> (usize, usize) {
        self.dims
    }

    fn encode_vision(&self, image: &Image) -> Result<TokenSeq> {
        let r = self
            .client
            .call("mllm.encode_vision", json!({ "image": encode_image(image)? }))?;
        decode_tokens(field(&r, "tokens")?)
    }

    fn yes_probability(&self, tokens: &TokenSeq, prompt: &str, mode: ProbeMode) -> Result<f64> {
        let r = self
            .client
            .call("mllm.yes_probability", self.probe_params(tokens, prompt, mode))?;
        field_f64(&r, "probability")
    }

    fn supports_gradients(&self) -> bool {
        self.gradients
    }

    fn yes_probability_grad(
        &self,
        tokens: &TokenSeq,
        prompt: &str,
        mode: ProbeMode,
    ) -> Result<YesProbe> {
        if !self.gradients {
            return Err(Error::GradientUnavailable(self.id.clone()));
        }
        let r = self.client.call(
            "mllm.yes_probability_grad",
            self.probe_params(tokens, prompt, mode),
        )?;
        Ok(YesProbe {
            probability: field_f64(&r, "probability")?,
            grad: decode_tokens(field(&r, "grad")?)?,
        })
    }

    fn respond(&self, input: VisionInput<'_>, prompt: &str) -> Result<String> {
        let params = match input {
            VisionInput::Image(image) => json!({ "image": encode_image(image)?, "prompt": prompt }),
            VisionInput::Tokens(tokens) => {
                json!({ "tokens": encode_tokens(tokens), "prompt": prompt })
            }
        };
        let r = self.client.call("mllm.respond", params)?;
        Ok(field_str(&r, "text")?.to_string())
    }

    fn max_concurrency(&self) -> Option<usize> {
        Some(1)
    }
}

pub struct RemoteDiffusion {
    client: RemoteClient,
    id: String,
    schedule: NoiseSchedule,
}

impl RemoteDiffusion {
    pub fn connect(client: RemoteClient) -> Result<Self> {
        let info = client.call("diffusion.info", Value::Null)?;
        let payload: ArrayPayload = serde_json::from_value(field(&info, "alpha_bars")?.clone())
            .map_err(|e| Error::decode("schedule", e))?;
        let schedule = NoiseSchedule::new(payload.decode()?)?;
        Ok(Self {
            id: format!("remote-diffusion@{}", client.endpoint()),
            client,
            schedule,
        })
    }
}

impl DiffusionBackend for RemoteDiffusion {
    fn id(&self) -> &str {
        &self.id
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn vae_encode(&self, image: &Image) -> Result<Latent> {
        let r = self
            .client
            .call("diffusion.vae_encode", json!({ "image": encode_image(image)? }))?;
        decode_latent(field(&r, "latent")?)
    }

    fn vae_decode(&self, latent: &Latent) -> Result<Image> {
        let r = self
            .client
            .call("diffusion.vae_decode", json!({ "latent": encode_latent(latent) }))?;
        decode_image(field(&r, "image")?)
    }

    fn denoise(&self, req: &DenoiseRequest<'_>) -> Result<Latent> {
        let r = self.client.call(
            "diffusion.denoise",
            json!({
                "latent": encode_latent(req.noisy),
                "start_step": req.start_step,
                "conditioning": encode_vector(req.conditioning),
                "guidance_scale": req.guidance_scale,
                "num_inference_steps": req.num_inference_steps,
                "seed": req.seed,
            }),
        )?;
        decode_latent(field(&r, "latent")?)
    }

    fn max_concurrency(&self) -> Option<usize> {
        Some(1)
    }
}

pub struct RemoteDetector {
    client: RemoteClient,
    id: String,
}

impl RemoteDetector {
    pub fn connect(client: RemoteClient) -> Result<Self> {
        client.call("detector.info", Value::Null)?;
        Ok(Self {
            id: format!("remote-detector@{}", client.endpoint()),
            client,
        })
    }
}

impl DetectorBackend for RemoteDetector {
    fn id(&self) -> &str {
        &self.id
    }

    fn detect(&self, image: &Image, object: &str, threshold: f64) -> Result<Vec<Detection>> {
        let r = self.client.call(
            "detector.detect",
            json!({ "image": encode_image(image)?, "object": object, "threshold": threshold }),
        )?;
        let detections: Vec<Detection> = serde_json::from_value(field(&r, "detections")?.clone())
            .map_err(|e| Error::decode("detections", e))?;
        // Enforce the threshold contract locally as well.
        Ok(detections
            .into_iter()
            .filter(|d| d.score >= threshold)
            .collect())
    }

    fn max_concurrency(&self) -> Option<usize> {
        Some(1)
    }
}

/// Image feature extractor (for FID) served over the protocol.
pub struct RemoteFeatures {
    client: RemoteClient,
}

impl RemoteFeatures {
    pub fn new(client: RemoteClient) -> Self {
        Self { client }
    }

    pub fn extract(&self, image: &Image) -> Result<Vec<f64>> {
        let r = self
            .client
            .call("features.extract", json!({ "image": encode_image(image)? }))?;
        Ok(decode_vector(field(&r, "vector")?)?.0)
    }
}

/// Local feature extractor hook for the dispatcher.
pub type FeatureFn = dyn Fn(&Image) -> Result<Vec<f64>> + Send + Sync;

/// Serves local backends over the protocol.
#[derive(Clone, Default)]
pub struct Dispatcher {
    pub clip: Option<Arc<dyn ClipBackend>>,
    pub mllm: Option<Arc<dyn MllmBackend>>,
    pub diffusion: Option<Arc<dyn DiffusionBackend>>,
    pub detector: Option<Arc<dyn DetectorBackend>>,
    pub features: Option<Arc<FeatureFn>>,
}

fn missing(role: &str) -> Error {
    Error::backend("dispatcher", format!("no {role} backend served here"))
}

impl Dispatcher {
    /// Handles one request line and returns the response line (no newline).
    pub fn handle_line(&self, line: &str) -> String {
        let response = match parse_request(line) {
            Ok(req) => match self.dispatch(&req.method, &req.params) {
                Ok(result) => Response::ok(req.id, result),
                Err(Error::Decode { what, message }) => {
                    Response::err(req.id, "bad_request", format!("{what}: {message}"))
                }
                Err(e) => Response::err(req.id, "backend_error", e.to_string()),
            },
            Err(e) => Response::err(0, "parse_error", e.to_string()),
        };
        serde_json::to_string(&response).expect("response serializes")
    }

    fn dispatch(&self, method: &str, p: &Value) -> Result<Value> {
        let clip = || self.clip.as_ref().ok_or_else(|| missing("clip"));
        let mllm = || self.mllm.as_ref().ok_or_else(|| missing("mllm"));
        let diffusion = || self.diffusion.as_ref().ok_or_else(|| missing("diffusion"));
        let detector = || self.detector.as_ref().ok_or_else(|| missing("detector"));
        Ok(match method {
            "clip.info" => json!({ "dims": clip()?.dims() }),
            "clip.embed_image" => {
                json!({ "vector": encode_vector(&clip()?.embed_image(&decode_image(field(p, "image")?)?)?) })
            }
            "clip.embed_text" => {
                json!({ "vector": encode_vector(&clip()?.embed_text(field_str(p, "text")?)?) })
            }
            "mllm.info" => {
                let m = mllm()?;
                let (n, d) = m.token_dims();
                json!({ "n_tokens": n, "d_m": d, "gradients": m.supports_gradients() })
            }
            "mllm.encode_vision" => json!({
                "tokens": encode_tokens(&mllm()?.encode_vision(&decode_image(field(p, "image")?)?)?)
            }),
            "mllm.yes_probability" => {
                let tokens = decode_tokens(field(p, "tokens")?)?;
                let prob = mllm()?.yes_probability(&tokens, field_str(p, "prompt")?, field_mode(p)?)?;
                json!({ "probability": prob })
            }
            "mllm.yes_probability_grad" => {
                let tokens = decode_tokens(field(p, "tokens")?)?;
                let probe =
                    mllm()?.yes_probability_grad(&tokens, field_str(p, "prompt")?, field_mode(p)?)?;
                json!({ "probability": probe.probability, "grad": encode_tokens(&probe.grad) })
            }
            "mllm.respond" => {
                let prompt = field_str(p, "prompt")?;
                let text = if let Some(image) = p.get("image") {
                    mllm()?.respond(VisionInput::Image(&decode_image(image)?), prompt)?
                } else {
                    let tokens = decode_tokens(field(p, "tokens")?)?;
                    mllm()?.respond(VisionInput::Tokens(&tokens), prompt)?
                };
                json!({ "text": text })
            }
            "diffusion.info" => {
                let bars = diffusion()?.schedule().alpha_bars().to_vec();
                json!({ "alpha_bars": ArrayPayload::encode(vec![bars.len()], &bars) })
            }
            "diffusion.vae_encode" => json!({
                "latent": encode_latent(&diffusion()?.vae_encode(&decode_image(field(p, "image")?)?)?)
            }),
            "diffusion.vae_decode" => json!({
                "image": encode_image(&diffusion()?.vae_decode(&decode_latent(field(p, "latent")?)?)?)?
            }),
            "diffusion.denoise" => {
                let noisy = decode_latent(field(p, "latent")?)?;
                let conditioning = decode_vector(field(p, "conditioning")?)?;
                let out = diffusion()?.denoise(&DenoiseRequest {
                    noisy: &noisy,
                    start_step: field_u64(p, "start_step")? as usize,
                    conditioning: &conditioning,
                    guidance_scale: field_f64(p, "guidance_scale")?,
                    num_inference_steps: field_u64(p, "num_inference_steps")? as usize,
                    seed: field_u64(p, "seed")?,
                })?;
                json!({ "latent": encode_latent(&out) })
            }
            "detector.info" => {
                json!({ "id": detector()?.id() })
            }
            "detector.detect" => {
                let image = decode_image(field(p, "image")?)?;
                let hits = detector()?.detect(
                    &image,
                    field_str(p, "object")?,
                    field_f64(p, "threshold")?,
                )?;
                json!({ "detections": hits })
            }
            "features.extract" => {
                let f = self.features.as_ref().ok_or_else(|| missing("features"))?;
                let v = f(&decode_image(field(p, "image")?)?)?;
                json!({ "vector": ArrayPayload::encode(vec![v.len()], &v) })
            }
            other => {
                return Err(Error::decode("method", format!("unknown method `{other}`")));
            }
        })
    }

    /// Serves one connection until EOF.
    pub fn serve_connection(&self, stream: TcpStream) -> std::io::Result<()> {
        stream.set_nodelay(true)?;
        let mut writer = stream.try_clone()?;
        let mut reader = BufReader::new(stream);
        let mut line = String::new();
        loop {
            line.clear();
            let n = (&mut reader)
                .take(MAX_LINE_BYTES as u64)
                .read_line(&mut line)?;
            if n == 0 {
                return Ok(());
            }
            let mut reply = self.handle_line(line.trim_end());
            reply.push('\n');
            writer.write_all(reply.as_bytes())?;
            writer.flush()?;
        }
    }

    /// Accepts connections forever, one thread per connection.
    pub fn serve(self, listener: TcpListener) -> std::io::Result<()> {
        let this = Arc::new(self);
        for stream in listener.incoming() {
            let stream = stream?;
            let this = Arc::clone(&this);
            std::thread::spawn(move || {
                if let Err(e) = this.serve_connection(stream) {
                    log::warn!("backend connection closed: {e}");
                }
            });
        }
        Ok(())
    }
}
