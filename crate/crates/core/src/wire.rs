//! Newline-delimited JSON protocol for external model servers.
//!
//! One JSON object per line in each direction, one response per request, in
//! request order:
//!
//! ```text
//! {"op":"predict","text":"...","mask_token":"<mask>","top_n":N}
//!     -> {"predictions":[{"token":"good","prob":0.31},...]}
//! {"op":"train","sentences":[...],"config":{"learning_rate":0.00001,"batch_size":96,"epochs":3,"eval_checkpoint_step":500}}
//!     -> {"ok":true,"checkpoint":"<id>"}
//! {"op":"load_checkpoint","checkpoint":"<id>"} -> {"ok":true}
//! {"op":"nli","premise":"...","hypothesis":"..."}
//!     -> {"entail":0.91,"neutral":0.07,"contradict":0.02}
//! ```
//!
//! Failures come back as `{"ok":false,"error":"..."}`. Floats are written
//! in positional decimal notation, never with an exponent.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::lm::{
    prediction_order, split_masked, CountMlm, FillerPrediction, MaskedLm, TrainConfig, WordProbability,
    DEFAULT_MASK_TOKEN,
};
use crate::nli::{Entailment, EntailmentProbs};

/// Checkpoint id that addresses the server's initial model state.
pub const BASE_CHECKPOINT: &str = "base";

pub mod decimal {
    use serde::Serializer;
    use serde_json::value::RawValue;

    /// Positional decimal rendering of a finite float (`1e-5` -> `0.00001`).
    pub fn format(x: f64) -> Option<String> {
        x.is_finite().then(|| format!("{x}"))
    }

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::{Error, Serialize};
        let text = format(*x).ok_or_else(|| S::Error::custom("non-finite number"))?;
        let raw = RawValue::from_string(text).map_err(S::Error::custom)?;
        raw.serialize(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Predict {
        text: String,
        mask_token: String,
        top_n: usize,
    },
    Train {
        sentences: Vec<String>,
        config: TrainConfig,
    },
    LoadCheckpoint {
        checkpoint: String,
    },
    Nli {
        premise: String,
        hypothesis: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WirePrediction {
    pub token: String,
    #[serde(serialize_with = "decimal::serialize")]
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub predictions: Vec<WirePrediction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainResponse {
    pub ok: bool,
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OkResponse {
    pub ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NliResponse {
    #[serde(serialize_with = "decimal::serialize")]
    pub entail: f64,
    #[serde(serialize_with = "decimal::serialize")]
    pub neutral: f64,
    #[serde(serialize_with = "decimal::serialize")]
    pub contradict: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub ok: bool,
    pub error: String,
}

pub fn encode_request(req: &Request) -> Result<String> {
    Ok(serde_json::to_string(req)?)
}

/// Parses one response line into `T`, turning `{"error":...}` objects into
/// protocol errors.
pub fn decode_response<T: for<'de> Deserialize<'de>>(line: &str) -> Result<T> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| Error::Protocol(format!("invalid JSON response: {e}")))?;
    if let Some(err) = value.get("error") {
        let msg = err.as_str().map(str::to_string).unwrap_or_else(|| err.to_string());
        return Err(Error::Protocol(format!("backend reported: {msg}")));
    }
    if value.get("ok").and_then(Value::as_bool) == Some(false) {
        return Err(Error::Protocol("backend answered ok=false".into()));
    }
    serde_json::from_value(value).map_err(|e| Error::Protocol(format!("unexpected response shape: {e}")))
}

/// Validates and orders a predict response.
pub fn decode_predictions(line: &str, top_n: usize) -> Result<Vec<FillerPrediction>> {
    let resp: PredictResponse = decode_response(line)?;
    let mut out = Vec::with_capacity(resp.predictions.len());
    for p in resp.predictions {
        if !(p.prob.is_finite() && (0.0..=1.0).contains(&p.prob)) || p.token.is_empty() {
            return Err(Error::Protocol(format!(
                "invalid prediction {:?} ({})",
                p.token, p.prob
            )));
        }
        out.push(FillerPrediction {
            token: p.token,
            prob: p.prob,
        });
    }
    out.sort_by(prediction_order);
    out.truncate(top_n);
    Ok(out)
}

pub fn decode_nli(line: &str) -> Result<EntailmentProbs> {
    let r: NliResponse = decode_response(line)?;
    let probs = EntailmentProbs {
        entail: r.entail,
        neutral: r.neutral,
        contradict: r.contradict,
    };
    if !probs.is_valid() {
        return Err(Error::Protocol(format!(
            "entailment probabilities out of range: {probs:?}"
        )));
    }
    Ok(probs)
}

pub trait LineTransport: Send {
    fn send_line(&mut self, line: &str) -> io::Result<()>;
    /// Next line without its terminator. EOF is an error.
    fn recv_line(&mut self) -> io::Result<String>;
}

pub struct StreamTransport<R, W> {
    reader: R,
    writer: W,
    child: Option<Child>,
}

impl<R: BufRead + Send, W: Write + Send> StreamTransport<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        StreamTransport {
            reader,
            writer,
            child: None,
        }
    }
}

impl<R: BufRead + Send, W: Write + Send> LineTransport for StreamTransport<R, W> {
    fn send_line(&mut self, line: &str) -> io::Result<()> {
        debug_assert!(!line.contains('\n'));
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()
    }

    fn recv_line(&mut self) -> io::Result<String> {
        let mut buf = String::new();
        loop {
            buf.clear();
            if self.reader.read_line(&mut buf)? == 0 {
                return Err(io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    "backend closed the stream",
                ));
            }
            let line = buf.trim_end_matches(['\n', '\r']);
            if !line.trim().is_empty() {
                return Ok(line.to_string());
            }
        }
    }
}

impl<R, W> Drop for StreamTransport<R, W> {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Opens a transport from an endpoint string:
/// `tcp:HOST:PORT`, `unix:/path/to/socket` or `cmd:program arg ...`
/// (spawned with its stdin/stdout as the pipe).
pub fn connect(endpoint: &str) -> Result<Box<dyn LineTransport>> {
    let transport_err = |e: io::Error| Error::Transport(format!("{endpoint}: {e}"));
    if let Some(addr) = endpoint.strip_prefix("tcp:") {
        let stream = TcpStream::connect(addr).map_err(transport_err)?;
        let reader = BufReader::new(stream.try_clone().map_err(transport_err)?);
        return Ok(Box::new(StreamTransport::new(reader, stream)));
    }
    #[cfg(unix)]
    if let Some(path) = endpoint.strip_prefix("unix:") {
        let stream = std::os::unix::net::UnixStream::connect(path).map_err(transport_err)?;
        let reader = BufReader::new(stream.try_clone().map_err(transport_err)?);
        return Ok(Box::new(StreamTransport::new(reader, stream)));
    }
    if let Some(cmd) = endpoint.strip_prefix("cmd:") {
        let mut words = cmd.split_whitespace();
        let program = words
            .next()
            .ok_or_else(|| Error::Config("empty backend command".into()))?;
        let mut child = Command::new(program)
            .args(words)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(transport_err)?;
        let stdin = child.stdin.take().expect("piped");
        let stdout = BufReader::new(child.stdout.take().expect("piped"));
        let mut t = StreamTransport::new(stdout, stdin);
        t.child = Some(child);
        return Ok(Box::new(t));
    }
    Err(Error::Config(format!(
        "unknown endpoint `{endpoint}` (expected tcp:, unix: or cmd:)"
    )))
}

struct Session {
    transport: Box<dyn LineTransport>,
    /// `None` until a checkpoint is explicitly loaded or trained.
    loaded: Option<String>,
}

/// Serializes requests over one transport. The lock is held for a whole
/// request/response exchange, so responses always match request order.
pub struct WireClient {
    session: Mutex<Session>,
}

impl WireClient {
    pub fn new(transport: Box<dyn LineTransport>) -> Arc<WireClient> {
        Arc::new(WireClient {
            session: Mutex::new(Session {
                transport,
                loaded: None,
            }),
        })
    }

    pub fn connect(endpoint: &str) -> Result<Arc<WireClient>> {
        Ok(WireClient::new(connect(endpoint)?))
    }

    fn exchange(session: &mut Session, req: &Request) -> Result<String> {
        let line = encode_request(req)?;
        session
            .transport
            .send_line(&line)
            .map_err(|e| Error::Transport(e.to_string()))?;
        session
            .transport
            .recv_line()
            .map_err(|e| Error::Transport(e.to_string()))
    }

    /// Sends `req` after making sure `checkpoint` is the active model state.
    fn call_at(&self, checkpoint: Option<&str>, req: &Request) -> Result<String> {
        let mut session = self
            .session
            .lock()
            .map_err(|_| Error::Transport("client lock poisoned".into()))?;
        let want = checkpoint.unwrap_or(BASE_CHECKPOINT);
        let current = session.loaded.as_deref().unwrap_or(BASE_CHECKPOINT);
        if want != current {
            let load = Request::LoadCheckpoint {
                checkpoint: want.to_string(),
            };
            let _: OkResponse = decode_response(&Self::exchange(&mut session, &load)?)?;
            session.loaded = Some(want.to_string());
        }
        let line = Self::exchange(&mut session, req)?;
        if let Request::Train { .. } = req {
            if let Ok(TrainResponse { checkpoint, .. }) = decode_response::<TrainResponse>(&line) {
                session.loaded = Some(checkpoint);
            }
        }
        Ok(line)
    }

    pub fn call(&self, req: &Request) -> Result<String> {
        let mut session = self
            .session
            .lock()
            .map_err(|_| Error::Transport("client lock poisoned".into()))?;
        Self::exchange(&mut session, req)
    }
}

/// Masked LM served over the wire protocol.
///
/// Label-word probabilities are read from a `predict` call with
/// `scoring_depth` predictions; words missing from that list score 0 and are
/// reported as unknown.
#[derive(Clone)]
pub struct ExternalMlm {
    client: Arc<WireClient>,
    checkpoint: Option<String>,
    mask_token: String,
    scoring_depth: usize,
}

impl ExternalMlm {
    pub fn new(client: Arc<WireClient>) -> Self {
        ExternalMlm {
            client,
            checkpoint: None,
            mask_token: DEFAULT_MASK_TOKEN.into(),
            scoring_depth: 1000,
        }
    }

    pub fn with_mask_token(mut self, marker: impl Into<String>) -> Self {
        self.mask_token = marker.into();
        self
    }

    pub fn with_scoring_depth(mut self, depth: usize) -> Self {
        self.scoring_depth = depth.max(1);
        self
    }
}

impl MaskedLm for ExternalMlm {
    fn mask_token(&self) -> &str {
        &self.mask_token
    }

    fn checkpoint(&self) -> String {
        self.checkpoint.clone().unwrap_or_else(|| BASE_CHECKPOINT.into())
    }

    fn predict_fillers(&self, masked_text: &str, top_n: usize) -> Result<Vec<FillerPrediction>> {
        split_masked(masked_text, &self.mask_token)?;
        if top_n == 0 {
            return Ok(Vec::new());
        }
        let req = Request::Predict {
            text: masked_text.to_string(),
            mask_token: self.mask_token.clone(),
            top_n,
        };
        decode_predictions(&self.client.call_at(self.checkpoint.as_deref(), &req)?, top_n)
    }

    fn word_probabilities(&self, masked_text: &str, words: &[String]) -> Result<Vec<WordProbability>> {
        let preds = self.predict_fillers(masked_text, self.scoring_depth)?;
        // subword vocabularies can return " good" and "good"; the first
        // (most probable) spelling wins
        let mut lookup: HashMap<String, f64> = HashMap::new();
        for p in preds {
            lookup.entry(p.token.trim().to_lowercase()).or_insert(p.prob);
        }
        Ok(words
            .iter()
            .map(|w| match lookup.get(&w.to_lowercase()) {
                Some(&prob) => WordProbability { prob, known: true },
                None => WordProbability {
                    prob: 0.0,
                    known: false,
                },
            })
            .collect())
    }

    fn continual_train(&self, sentences: &[String], config: &TrainConfig) -> Result<Box<dyn MaskedLm>> {
        if sentences.is_empty() {
            log::warn!("continual training requested on an empty set; state unchanged");
            return Ok(Box::new(self.clone()));
        }
        let req = Request::Train {
            sentences: sentences.to_vec(),
            config: config.clone(),
        };
        let resp: TrainResponse = decode_response(&self.client.call_at(self.checkpoint.as_deref(), &req)?)?;
        Ok(Box::new(ExternalMlm {
            checkpoint: Some(resp.checkpoint),
            ..self.clone()
        }))
    }
}

pub struct ExternalNli {
    client: Arc<WireClient>,
}

impl ExternalNli {
    pub fn new(client: Arc<WireClient>) -> Self {
        ExternalNli { client }
    }
}

impl Entailment for ExternalNli {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<EntailmentProbs> {
        let req = Request::Nli {
            premise: premise.to_string(),
            hypothesis: hypothesis.to_string(),
        };
        decode_nli(&self.client.call(&req)?)
    }
}

/// Serves the built-in backends over the protocol until `reader` hits EOF.
///
/// Checkpoints produced by `train` stay addressable for the lifetime of the
/// server; the initial model is `base`.
pub fn serve<R: BufRead, W: Write>(
    reader: R,
    mut writer: W,
    model: Option<CountMlm>,
    nli: Option<&dyn Entailment>,
) -> io::Result<()> {
    let mut checkpoints: HashMap<String, CountMlm> = HashMap::new();
    let mut current = BASE_CHECKPOINT.to_string();
    if let Some(m) = model {
        checkpoints.insert(current.clone(), m);
    }
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match handle(&line, &mut checkpoints, &mut current, nli) {
            Ok(s) => s,
            Err(e) => serde_json::to_string(&ErrorResponse {
                ok: false,
                error: e.to_string(),
            })
            .expect("error response serializes"),
        };
        writeln!(writer, "{reply}")?;
        writer.flush()?;
    }
    Ok(())
}

fn handle(
    line: &str,
    checkpoints: &mut HashMap<String, CountMlm>,
    current: &mut String,
    nli: Option<&dyn Entailment>,
) -> Result<String> {
    let req: Request = serde_json::from_str(line).map_err(|e| Error::Protocol(format!("bad request: {e}")))?;
    let no_model = || Error::Protocol("no masked LM loaded".into());
    let out = match req {
        Request::Predict {
            text,
            mask_token,
            top_n,
        } => {
            let model = checkpoints.get(current.as_str()).ok_or_else(no_model)?;
            let ctx = model.context_for(&text, &mask_token)?;
            let mut preds = model.distribution(&ctx)?;
            preds.truncate(top_n);
            serde_json::to_string(&PredictResponse {
                predictions: preds
                    .into_iter()
                    .map(|p| WirePrediction {
                        token: p.token,
                        prob: p.prob,
                    })
                    .collect(),
            })?
        }
        Request::Train { sentences, .. } => {
            let model = checkpoints.get(current.as_str()).ok_or_else(no_model)?;
            let mut next = model.clone();
            next.count(&sentences);
            let id = next.checkpoint();
            checkpoints.insert(id.clone(), next);
            *current = id.clone();
            serde_json::to_string(&TrainResponse {
                ok: true,
                checkpoint: id,
            })?
        }
        Request::LoadCheckpoint { checkpoint } => {
            if !checkpoints.contains_key(&checkpoint) {
                return Err(Error::Protocol(format!("unknown checkpoint `{checkpoint}`")));
            }
            *current = checkpoint;
            serde_json::to_string(&OkResponse { ok: true })?
        }
        Request::Nli { premise, hypothesis } => {
            let nli = nli.ok_or_else(|| Error::Protocol("no entailment model loaded".into()))?;
            let p = nli.judge(&premise, &hypothesis)?;
            serde_json::to_string(&NliResponse {
                entail: p.entail,
                neutral: p.neutral,
                contradict: p.contradict,
            })?
        }
    };
    Ok(out)
}
