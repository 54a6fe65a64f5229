//! In-process HTTP server speaking the remote learner protocol, backed by a
//! [`SyntheticModel`]. Used for protocol conformance tests and for trying
//! the remote backend without a real inference server.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tiny_http::{Header, Response, Server};

use super::protocol::{
    Completion, GenerateRequest, GenerateResponse, ResetResponse, TrainRequest, TrainResponse,
    GENERATE_PATH, RESET_PATH, TRAIN_PATH,
};
use super::synthetic::{resolve_difficulties, SyntheticModel, SyntheticParams};
use crate::corpus::Corpus;

#[derive(Debug, Clone, Default)]
pub struct StubConfig {
    pub seed: u64,
    pub params: SyntheticParams,
    /// Zero-based request ordinals answered with HTTP 503.
    pub fail_requests: BTreeSet<u64>,
    /// Zero-based request ordinals answered with a wrong `request_id`.
    pub mismatch_requests: BTreeSet<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StubStats {
    pub requests: u64,
    pub injected_failures: u64,
    pub generate: u64,
    pub train: u64,
    pub reset: u64,
}

struct StubState {
    model: SyntheticModel,
    rng: ChaCha8Rng,
    ids: HashMap<String, usize>,
    answers: Vec<String>,
    config: StubConfig,
}

pub struct StubServer {
    server: Arc<Server>,
    base_url: String,
    stats: Arc<Mutex<StubStats>>,
    worker: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Starts serving on `addr` (use `127.0.0.1:0` for an ephemeral port).
    /// `corpus` must contain every question the client will send.
    pub fn start(addr: &str, corpus: &Corpus, config: StubConfig) -> std::io::Result<Self> {
        let server = Arc::new(Server::http(addr).map_err(std::io::Error::other)?);
        let port = server
            .server_addr()
            .to_ip()
            .map(|a| a.port())
            .ok_or_else(|| std::io::Error::other("stub must listen on a TCP address"))?;
        let base_url = format!("http://127.0.0.1:{port}");
        let difficulty = resolve_difficulties(corpus, config.seed ^ 0xD1FF_1C17);
        let state = StubState {
            model: SyntheticModel::new(config.params, difficulty),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            ids: corpus.iter().map(|o| (o.question.clone(), o.id)).collect(),
            answers: corpus.iter().map(|o| o.answer.clone()).collect(),
            config,
        };
        let stats = Arc::new(Mutex::new(StubStats::default()));
        let worker = {
            let server = Arc::clone(&server);
            let stats = Arc::clone(&stats);
            std::thread::spawn(move || serve(&server, state, &stats))
        };
        Ok(Self {
            server,
            base_url,
            stats,
            worker: Some(worker),
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn stats(&self) -> StubStats {
        *self.stats.lock().expect("stub stats poisoned")
    }

    /// Blocks until the server thread exits (it runs until dropped).
    pub fn join(mut self) {
        if let Some(worker) = self.worker.take() {
            let _ = worker.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(worker) = self.worker.take() {
            let _ = worker.join();
        }
    }
}

fn json_response<T: Serialize>(status: u16, body: &T) -> Response<std::io::Cursor<Vec<u8>>> {
    let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
    Response::from_data(serde_json::to_vec(body).expect("serializable"))
        .with_status_code(status)
        .with_header(header)
}

fn serve(server: &Server, mut state: StubState, stats: &Mutex<StubStats>) {
    for mut request in server.incoming_requests() {
        let ordinal = {
            let mut s = stats.lock().expect("stub stats poisoned");
            s.requests += 1;
            s.requests - 1
        };
        let mut body = String::new();
        if request.as_reader().read_to_string(&mut body).is_err() {
            let _ = request.respond(json_response(400, &serde_json::json!({"error": "unreadable body"})));
            continue;
        }
        if state.config.fail_requests.contains(&ordinal) {
            stats.lock().expect("stub stats poisoned").injected_failures += 1;
            let _ = request.respond(json_response(503, &serde_json::json!({"error": "injected fault"})));
            continue;
        }
        let mismatch = state.config.mismatch_requests.contains(&ordinal);
        let path = request.url().to_string();
        let response = match path.as_str() {
            GENERATE_PATH => {
                stats.lock().expect("stub stats poisoned").generate += 1;
                handle(&body, |req| state.generate(req, mismatch))
            }
            TRAIN_PATH => {
                stats.lock().expect("stub stats poisoned").train += 1;
                handle(&body, |req| state.train(req, mismatch))
            }
            RESET_PATH => {
                stats.lock().expect("stub stats poisoned").reset += 1;
                state.model.reset();
                json_response(200, &ResetResponse { ok: true })
            }
            _ => json_response(404, &serde_json::json!({"error": format!("no route {path}")})),
        };
        let _ = request.respond(response);
    }
}

fn handle<Req, Resp>(
    body: &str,
    f: impl FnOnce(Req) -> Result<Resp, String>,
) -> Response<std::io::Cursor<Vec<u8>>>
where
    Req: serde::de::DeserializeOwned,
    Resp: Serialize,
{
    match serde_json::from_str::<Req>(body) {
        Ok(req) => match f(req) {
            Ok(resp) => json_response(200, &resp),
            Err(e) => json_response(400, &serde_json::json!({"error": e})),
        },
        Err(e) => json_response(400, &serde_json::json!({"error": e.to_string()})),
    }
}

impl StubState {
    fn lookup(&self, question: &str) -> Result<usize, String> {
        self.ids
            .get(question)
            .copied()
            .ok_or_else(|| format!("unknown question {question:?}"))
    }

    fn generate(&mut self, req: GenerateRequest, mismatch: bool) -> Result<GenerateResponse, String> {
        let id = self.lookup(&req.question)?;
        let p = if req.hint.is_some() {
            self.model.hinted_probability(id)
        } else {
            self.model.success_probability(id)
        };
        let params = *self.model.params();
        let gold = &self.answers[id];
        let completions = (0..req.n)
            .map(|_| {
                let hit = if req.temperature <= 0.0 {
                    p >= 0.5
                } else {
                    self.rng.random::<f64>() < p
                };
                let tokens = self
                    .rng
                    .random_range(params.min_cot_tokens..=params.max_cot_tokens.max(params.min_cot_tokens));
                Completion {
                    // Decorated so the client has to canonicalize.
                    answer: if hit {
                        format!(" {}.", gold.to_uppercase())
                    } else {
                        format!("not {gold}")
                    },
                    cot: vec!["step"; tokens as usize].join(" "),
                    tokens,
                }
            })
            .collect();
        Ok(GenerateResponse {
            request_id: echo(req.request_id, mismatch),
            completions,
        })
    }

    fn train(&mut self, req: TrainRequest, mismatch: bool) -> Result<TrainResponse, String> {
        if req.examples.is_empty() {
            return Err("empty training batch".into());
        }
        let ids = req
            .examples
            .iter()
            .map(|ex| self.lookup(&ex.question))
            .collect::<Result<Vec<_>, _>>()?;
        if !req.accumulate {
            self.model.reset();
        }
        self.model.apply_training(ids.iter().copied());
        let alpha = ids.iter().map(|&i| self.model.success_probability(i)).sum::<f64>() / ids.len() as f64;
        let tokens = req
            .examples
            .iter()
            .map(|ex| ex.cot.split_whitespace().count() as u64)
            .sum();
        Ok(TrainResponse {
            request_id: echo(req.request_id, mismatch),
            alpha,
            tokens,
        })
    }
}

fn echo(id: String, mismatch: bool) -> String {
    if mismatch {
        format!("{id}-corrupted")
    } else {
        id
    }
}
