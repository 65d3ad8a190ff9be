//! Line-delimited JSON protocol for out-of-process backends.
//!
//! Every request is one object `{"id": n, "op": ..., ...}` on its own line; replies carry
//! the same id plus either `"ok": true` and the payload, or
//! `"error": {"code": ..., "message": ...}`. Requests are answered in order.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{BackendInfo, GenerationContext, RegionSegment, Segment, StepBackend, StepResult, TokenId};
use crate::attention::AttentionSnapshot;
use crate::error::{BackendError, Result};
use crate::geometry::{BBox, Region};
use crate::infogain::TokenDistribution;

/// Payload of one evaluated context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPayload {
    pub probs: Vec<f64>,
    pub attention: Vec<Vec<f64>>,
    pub visual_indices: Vec<usize>,
}

impl StepPayload {
    pub fn from_result(r: &StepResult) -> Self {
        Self {
            probs: r.distribution.probs().to_vec(),
            attention: r.attention.per_layer.clone(),
            visual_indices: r.attention.visual_indices.clone(),
        }
    }

    /// Validates the payload against the context it was computed for.
    pub fn into_result(self, context_len: usize) -> std::result::Result<StepResult, String> {
        let distribution = TokenDistribution::new(self.probs).map_err(|e| e.to_string())?;
        let attention =
            AttentionSnapshot { per_layer: self.attention, context_len, visual_indices: self.visual_indices };
        attention.validate().map_err(|e| e.to_string())?;
        Ok(StepResult { distribution, attention })
    }
}

#[derive(Deserialize)]
struct RegionKey {
    row: usize,
    col: usize,
    span: usize,
}

/// Client half of the protocol over any reader/writer pair.
pub struct WireClient<R, W> {
    reader: R,
    writer: W,
    next_id: u64,
}

impl<R: BufRead, W: Write> WireClient<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self { reader, writer, next_id: 1 }
    }

    /// Sends one request and returns the reply object of a successful answer.
    pub fn call(&mut self, op: &str, body: Map<String, Value>) -> Result<Map<String, Value>, BackendError> {
        let id = self.next_id;
        self.next_id += 1;
        let mut msg = Map::new();
        msg.insert("id".into(), id.into());
        msg.insert("op".into(), op.into());
        msg.extend(body);
        let transport = |e: std::io::Error| BackendError::Transport(e.to_string());
        serde_json::to_writer(&mut self.writer, &msg).map_err(|e| BackendError::Transport(e.to_string()))?;
        self.writer.write_all(b"\n").map_err(transport)?;
        self.writer.flush().map_err(transport)?;

        let mut line = String::new();
        if self.reader.read_line(&mut line).map_err(transport)? == 0 {
            return Err(BackendError::Transport(format!("backend closed the stream before answering request {id}")));
        }
        let protocol = |message: String| BackendError::Protocol { id, message };
        let reply: Map<String, Value> =
            serde_json::from_str(line.trim_end()).map_err(|e| protocol(format!("unparsable reply: {e}")))?;
        if reply.get("id").and_then(Value::as_u64) != Some(id) {
            return Err(protocol(format!("reply id {:?} does not match", reply.get("id"))));
        }
        if let Some(err) = reply.get("error") {
            let field = |k: &str| err.get(k).and_then(Value::as_str).unwrap_or("").to_string();
            return Err(BackendError::Remote { id, code: field("code"), message: field("message") });
        }
        if reply.get("ok") != Some(&Value::Bool(true)) {
            return Err(protocol("reply has neither ok nor error".into()));
        }
        Ok(reply)
    }

    fn call_as<T: for<'de> Deserialize<'de>>(&mut self, op: &str, body: Value) -> Result<T, BackendError> {
        let id = self.next_id;
        let Value::Object(body) = body else { unreachable!("request bodies are objects") };
        let reply = self.call(op, body)?;
        serde_json::from_value(Value::Object(reply))
            .map_err(|e| BackendError::Protocol { id, message: format!("{op} reply: {e}") })
    }
}

/// A [`StepBackend`] reached through a [`WireClient`].
pub struct WireBackend<R, W> {
    client: WireClient<R, W>,
    info: BackendInfo,
}

impl<R: BufRead, W: Write> WireBackend<R, W> {
    /// Sends `init` with `config` and reads the declared constants.
    pub fn connect(reader: R, writer: W, config: Value) -> Result<Self, BackendError> {
        let mut client = WireClient::new(reader, writer);
        let info: BackendInfo = client.call_as("init", json!({ "config": config }))?;
        if info.v_sub == 0 || info.n_layers == 0 {
            return Err(BackendError::Protocol { id: 1, message: "v_sub and n_layers must be positive".into() });
        }
        Ok(Self { client, info })
    }

    fn decode(&self, id: u64, payload: StepPayload, context_len: usize) -> Result<StepResult, BackendError> {
        if payload.probs.len() != self.info.vocab_size {
            return Err(BackendError::Protocol {
                id,
                message: format!("{} probabilities for vocabulary {}", payload.probs.len(), self.info.vocab_size),
            });
        }
        payload.into_result(context_len).map_err(|message| BackendError::Protocol { id, message })
    }
}

impl<R: BufRead, W: Write> StepBackend for WireBackend<R, W> {
    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn evaluate(&mut self, ctx: &GenerationContext) -> Result<StepResult, BackendError> {
        let id = self.client.next_id;
        let payload: StepPayload = self.client.call_as("evaluate", json!({ "segments": ctx.segments() }))?;
        self.decode(id, payload, ctx.cursor())
    }

    fn evaluate_batch(
        &mut self,
        base: &GenerationContext,
        suffixes: &[RegionSegment],
    ) -> Result<Vec<StepResult>, BackendError> {
        #[derive(Deserialize)]
        struct Batch {
            results: Vec<StepPayload>,
        }
        let id = self.client.next_id;
        let wrapped: Vec<Vec<Segment>> = suffixes.iter().map(|s| vec![Segment::VisualRegion(s.clone())]).collect();
        let batch: Batch =
            self.client.call_as("evaluate_batch", json!({ "base": base.segments(), "suffixes": wrapped }))?;
        if batch.results.len() != suffixes.len() {
            return Err(BackendError::Protocol {
                id,
                message: format!("{} results for {} suffixes", batch.results.len(), suffixes.len()),
            });
        }
        batch
            .results
            .into_iter()
            .zip(suffixes)
            .enumerate()
            .map(|(index, (p, s))| {
                self.decode(id, p, base.cursor() + s.len())
                    .map_err(|e| BackendError::Batch { index, message: e.to_string() })
            })
            .collect()
    }

    fn embed_region(&mut self, image: &str, region: &Region) -> Result<Vec<TokenId>, BackendError> {
        #[derive(Deserialize)]
        struct Vokens {
            vokens: Vec<TokenId>,
        }
        let id = self.client.next_id;
        let body = json!({
            "image": image,
            "bbox": region.bbox.to_array(),
            "region": { "row": region.row, "col": region.col, "span": region.span },
        });
        let v: Vokens = self.client.call_as("embed_region", body)?;
        if v.vokens.len() != self.info.v_sub {
            return Err(BackendError::Protocol {
                id,
                message: format!("{} vokens, declared v_sub {}", v.vokens.len(), self.info.v_sub),
            });
        }
        Ok(v.vokens)
    }

    fn describe(&mut self, image: &str, prompt: &str) -> Result<String, BackendError> {
        #[derive(Deserialize)]
        struct Text {
            text: String,
        }
        let t: Text = self.client.call_as("describe", json!({ "image": image, "prompt": prompt }))?;
        Ok(t.text)
    }
}

/// A wire backend running as a child process speaking the protocol on its stdio.
pub struct ExecBackend {
    inner: WireBackend<BufReader<ChildStdout>, ChildStdin>,
    child: Child,
}

impl ExecBackend {
    /// Spawns `command` (program followed by whitespace-separated arguments) and
    /// initializes it with `config`.
    pub fn spawn(command: &str, config: Value) -> Result<Self, BackendError> {
        let mut parts = command.split_whitespace();
        let program = parts.next().ok_or_else(|| BackendError::Invalid("empty backend command".into()))?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BackendError::Transport(format!("cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        match WireBackend::connect(stdout, stdin, config) {
            Ok(inner) => Ok(Self { inner, child }),
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(e)
            }
        }
    }
}

impl Drop for ExecBackend {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl StepBackend for ExecBackend {
    fn info(&self) -> &BackendInfo {
        self.inner.info()
    }

    fn evaluate(&mut self, ctx: &GenerationContext) -> Result<StepResult, BackendError> {
        self.inner.evaluate(ctx)
    }

    fn evaluate_batch(
        &mut self,
        base: &GenerationContext,
        suffixes: &[RegionSegment],
    ) -> Result<Vec<StepResult>, BackendError> {
        self.inner.evaluate_batch(base, suffixes)
    }

    fn embed_region(&mut self, image: &str, region: &Region) -> Result<Vec<TokenId>, BackendError> {
        self.inner.embed_region(image, region)
    }

    fn describe(&mut self, image: &str, prompt: &str) -> Result<String, BackendError> {
        self.inner.describe(image, prompt)
    }
}

struct Failure {
    code: &'static str,
    message: String,
}

fn bad_request(message: impl Into<String>) -> Failure {
    Failure { code: "bad_request", message: message.into() }
}

fn from_backend(e: BackendError) -> Failure {
    Failure { code: "backend_error", message: e.to_string() }
}

fn field<T: for<'de> Deserialize<'de>>(msg: &Map<String, Value>, key: &str) -> std::result::Result<T, Failure> {
    let v = msg.get(key).ok_or_else(|| bad_request(format!("missing field {key}")))?;
    T::deserialize(v).map_err(|e| bad_request(format!("field {key}: {e}")))
}

fn context(segments: Vec<Segment>) -> std::result::Result<GenerationContext, Failure> {
    GenerationContext::from_segments(segments).map_err(|e| bad_request(e.to_string()))
}

fn handle<B: StepBackend>(backend: &mut B, op: &str, msg: &Map<String, Value>) -> std::result::Result<Value, Failure> {
    match op {
        "init" => Ok(serde_json::to_value(backend.info()).expect("info serializes")),
        "evaluate" => {
            let ctx = context(field(msg, "segments")?)?;
            let r = backend.evaluate(&ctx).map_err(from_backend)?;
            Ok(serde_json::to_value(StepPayload::from_result(&r)).expect("payload serializes"))
        }
        "evaluate_batch" => {
            let base = context(field(msg, "base")?)?;
            let suffixes: Vec<Vec<Segment>> = field(msg, "suffixes")?;
            let regions = suffixes
                .into_iter()
                .map(|s| match <[Segment; 1]>::try_from(s) {
                    Ok([Segment::VisualRegion(r)]) => Ok(r),
                    _ => Err(bad_request("each suffix must be a single visual_region segment")),
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let results = backend.evaluate_batch(&base, &regions).map_err(from_backend)?;
            let payloads: Vec<StepPayload> = results.iter().map(StepPayload::from_result).collect();
            Ok(json!({ "results": payloads }))
        }
        "embed_region" => {
            let image: String = field(msg, "image")?;
            let [x0, y0, x1, y1]: [u32; 4] = field(msg, "bbox")?;
            let key: RegionKey = field(msg, "region")?;
            let region = Region { row: key.row, col: key.col, span: key.span, bbox: BBox { x0, y0, x1, y1 } };
            let vokens = backend.embed_region(&image, &region).map_err(from_backend)?;
            Ok(json!({ "vokens": vokens }))
        }
        "describe" => {
            let image: String = field(msg, "image")?;
            let prompt: String = field(msg, "prompt")?;
            let text = backend.describe(&image, &prompt).map_err(from_backend)?;
            Ok(json!({ "text": text }))
        }
        other => Err(Failure { code: "unknown_op", message: format!("unknown op {other:?}") }),
    }
}

/// Serves the protocol until end of input. The backend is built from the `config` of the
/// first `init` request; a later `init` rebuilds it.
pub fn serve<B, F, R, W>(mut init: F, reader: R, mut writer: W) -> std::io::Result<()>
where
    B: StepBackend,
    F: FnMut(&Value) -> Result<B>,
    R: BufRead,
    W: Write,
{
    let mut backend: Option<B> = None;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: std::result::Result<Map<String, Value>, _> = serde_json::from_str(&line);
        let (id, outcome) = match parsed {
            Err(e) => (Value::Null, Err(bad_request(format!("unparsable request: {e}")))),
            Ok(msg) => {
                let id = msg.get("id").cloned().unwrap_or(Value::Null);
                let outcome = match (id.as_u64(), msg.get("op").and_then(Value::as_str)) {
                    (None, _) => Err(bad_request("request id must be a non-negative integer")),
                    (_, None) => Err(bad_request("request op must be a string")),
                    (Some(_), Some("init")) => {
                        let config = msg.get("config").cloned().unwrap_or(Value::Null);
                        match init(&config) {
                            Ok(b) => handle(backend.insert(b), "init", &msg),
                            Err(e) => Err(bad_request(format!("init: {e}"))),
                        }
                    }
                    (Some(_), Some(op)) => match backend.as_mut() {
                        Some(b) => handle(b, op, &msg),
                        None => Err(Failure { code: "not_initialized", message: "first request must be init".into() }),
                    },
                };
                (id, outcome)
            }
        };
        let reply = match outcome {
            Ok(Value::Object(payload)) => {
                let mut out = Map::new();
                out.insert("id".into(), id);
                out.insert("ok".into(), Value::Bool(true));
                out.extend(payload);
                Value::Object(out)
            }
            Ok(_) => unreachable!("handlers return objects"),
            Err(f) => json!({ "id": id, "error": { "code": f.code, "message": f.message } }),
        };
        serde_json::to_writer(&mut writer, &reply)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::sim::{SimOracle, SimOracleSpec};
    use crate::geometry::GridSpec;
    use std::io::Cursor;
    use std::thread;

    fn spec() -> SimOracleSpec {
        SimOracleSpec::new(GridSpec::new(4, 1, 64, 64).unwrap(), [(0, 1), (2, 2), (3, 0)])
    }

    fn init_sim(config: &Value) -> Result<SimOracle> {
        SimOracle::new(serde_json::from_value(config.clone())?)
    }

    fn serve_lines(input: &str) -> Vec<Value> {
        let mut out = Vec::new();
        serve(init_sim, Cursor::new(input.to_string()), &mut out).unwrap();
        String::from_utf8(out).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
    }

    /// A wire backend talking to an in-process server thread.
    fn loopback() -> WireBackend<BufReader<std::io::PipeReader>, std::io::PipeWriter> {
        let (req_r, req_w) = std::io::pipe().unwrap();
        let (rep_r, rep_w) = std::io::pipe().unwrap();
        thread::spawn(move || serve(init_sim, BufReader::new(req_r), rep_w));
        WireBackend::connect(BufReader::new(rep_r), req_w, serde_json::to_value(spec()).unwrap()).unwrap()
    }

    fn region_seg(b: &mut impl StepBackend, row: usize, col: usize) -> RegionSegment {
        let g = GridSpec::new(4, 1, 64, 64).unwrap();
        let region = g.region_from_cell(row, col).unwrap();
        let vokens = b.embed_region("img", &region).unwrap();
        RegionSegment { region, vokens, boi: b.info().boi, eoi: b.info().eoi }
    }

    #[test]
    fn wire_matches_in_process_bitwise() {
        let mut local = SimOracle::new(spec()).unwrap();
        let mut remote = loopback();
        assert_eq!(remote.info(), local.info());

        let mut ctx = GenerationContext::new("img", 16);
        ctx.push_text(crate::backend::TextRole::Prompt, b"where?".map(TokenId::from).as_slice());
        let suffixes: Vec<_> = [(0, 1), (1, 1), (2, 2)].iter().map(|&(r, c)| region_seg(&mut local, r, c)).collect();
        assert_eq!(region_seg(&mut remote, 2, 2), suffixes[2]);

        assert_eq!(remote.evaluate(&ctx).unwrap(), local.evaluate(&ctx).unwrap());
        assert_eq!(remote.evaluate_batch(&ctx, &suffixes).unwrap(), local.evaluate_batch(&ctx, &suffixes).unwrap());
        assert_eq!(remote.evaluate_batch(&ctx, &[]).unwrap(), vec![]);
        assert_eq!(remote.describe("img", "p").unwrap(), local.describe("img", "p").unwrap());
    }

    #[test]
    fn error_replies_keep_ids() {
        let cfg = serde_json::to_string(&spec()).unwrap();
        let input = format!(
            "{{\"id\":7,\"op\":\"evaluate\",\"segments\":[]}}\n\
             {{\"id\":8,\"op\":\"init\",\"config\":{cfg}}}\n\
             {{\"id\":9,\"op\":\"fly\"}}\n\
             not json\n\
             {{\"id\":10,\"op\":\"evaluate\",\"segments\":[]}}\n\
             {{\"op\":\"describe\"}}\n\
             {{\"id\":12,\"op\":\"describe\",\"image\":\"x\",\"prompt\":\"y\"}}\n"
        );
        let replies = serve_lines(&input);
        let code = |v: &Value| v["error"]["code"].as_str().map(str::to_string);
        assert_eq!(replies.len(), 7);
        assert_eq!(replies[0]["id"], 7);
        assert_eq!(code(&replies[0]).as_deref(), Some("not_initialized"));
        assert_eq!(replies[1]["ok"], true);
        assert_eq!(replies[1]["v_sub"], 4);
        assert_eq!(code(&replies[2]).as_deref(), Some("unknown_op"));
        assert_eq!(replies[3]["id"], Value::Null);
        assert_eq!(code(&replies[3]).as_deref(), Some("bad_request"));
        assert_eq!(code(&replies[4]).as_deref(), Some("bad_request"));
        assert_eq!(code(&replies[5]).as_deref(), Some("bad_request"));
        assert_eq!(replies[6]["id"], 12);
        assert!(replies[6]["text"].as_str().unwrap().starts_with("Relevant areas:"));
    }

    #[test]
    fn client_rejects_mismatched_ids_and_remote_errors() {
        let reply = "{\"id\":5,\"ok\":true}\n";
        let mut c = WireClient::new(Cursor::new(reply), Vec::new());
        assert!(matches!(c.call("x", Map::new()), Err(BackendError::Protocol { id: 1, .. })));

        let reply = "{\"id\":1,\"error\":{\"code\":\"boom\",\"message\":\"no\"}}\n";
        let mut c = WireClient::new(Cursor::new(reply), Vec::new());
        let err = c.call("x", Map::new()).unwrap_err();
        assert_eq!(err, BackendError::Remote { id: 1, code: "boom".into(), message: "no".into() });

        let mut c = WireClient::new(Cursor::new(""), Vec::new());
        assert!(matches!(c.call("x", Map::new()), Err(BackendError::Transport(_))));
    }

    #[test]
    fn requests_are_single_lines_with_increasing_ids() {
        let replies = "{\"id\":1,\"ok\":true}\n{\"id\":2,\"ok\":true}\n";
        let mut sent = Vec::new();
        let mut c = WireClient::new(Cursor::new(replies), &mut sent);
        c.call("a", Map::new()).unwrap();
        c.call("b", Map::new()).unwrap();
        let text = String::from_utf8(sent).unwrap();
        let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines[0]["id"], 1);
        assert_eq!(lines[1]["op"], "b");
    }
}
