//! Stub prediction server exposing a toy model over the oracle wire
//! protocol.

use std::future::Future;
use std::net::{SocketAddr, TcpListener as StdListener};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::sync::oneshot;

use super::http::{ErrorBody, OracleInfo, PredictRequest, PredictResponse};
use crate::error::{Error, Result};
use crate::toymodel::Mlp;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerConfig {
    /// Largest batch accepted per request; larger ones get 413.
    pub max_batch: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { max_batch: 64 }
    }
}

#[derive(Clone)]
struct AppState {
    model: Arc<Mlp>,
    cfg: ServerConfig,
    served: Arc<AtomicU64>,
}

fn reject(status: StatusCode, error: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: error.into() })).into_response()
}

async fn predict(State(state): State<AppState>, body: Bytes) -> Response {
    let request: PredictRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return reject(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    let n = request.inputs.len();
    if n > state.cfg.max_batch {
        return reject(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("batch of {n} exceeds the cap of {}", state.cfg.max_batch),
        );
    }
    let dims = state.model.input_dims();
    for (i, x) in request.inputs.iter().enumerate() {
        if x.len() != dims {
            return reject(StatusCode::BAD_REQUEST, format!("input {i} has {} values, expected {dims}", x.len()));
        }
        if x.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return reject(StatusCode::BAD_REQUEST, format!("input {i} has values outside [-1, 1]"));
        }
    }
    let model = Arc::clone(&state.model);
    let scores = match tokio::task::spawn_blocking(move || {
        request.inputs.iter().map(|x| model.forward(x)).collect::<Vec<_>>()
    })
    .await
    {
        Ok(s) => s,
        Err(e) => return reject(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    let total = state.served.fetch_add(n as u64, Ordering::SeqCst) + n as u64;
    log::debug!("answered {n} queries ({total} total)");
    Json(PredictResponse { scores }).into_response()
}

async fn info(State(state): State<AppState>) -> Json<OracleInfo> {
    Json(OracleInfo {
        input_dims: state.model.input_dims(),
        classes: state.model.classes(),
        max_batch: state.cfg.max_batch,
    })
}

fn router(state: AppState) -> Router {
    Router::new()
        .route("/predict", post(predict))
        .route("/info", get(info))
        .layer(DefaultBodyLimit::max(256 * 1024 * 1024))
        .with_state(state)
}

/// Serves until `shutdown` resolves. Returns the number of queries answered.
pub async fn serve(
    listener: tokio::net::TcpListener,
    model: Arc<Mlp>,
    cfg: ServerConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<u64> {
    let served = Arc::new(AtomicU64::new(0));
    serve_counted(listener, model, cfg, Arc::clone(&served), shutdown).await?;
    Ok(served.load(Ordering::SeqCst))
}

async fn serve_counted(
    listener: tokio::net::TcpListener,
    model: Arc<Mlp>,
    cfg: ServerConfig,
    served: Arc<AtomicU64>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let app = router(AppState { model, cfg, served });
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}

/// A stub server running on a background thread with its own runtime.
/// Shuts down when dropped.
pub struct StubServer {
    addr: SocketAddr,
    served: Arc<AtomicU64>,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl StubServer {
    pub fn spawn(model: Arc<Mlp>, addr: SocketAddr, cfg: ServerConfig) -> Result<Self> {
        let listener = StdListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let served = Arc::new(AtomicU64::new(0));
        let (stop, stopped) = oneshot::channel::<()>();
        let counter = Arc::clone(&served);
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)?;
                serve_counted(listener, model, cfg, counter, async {
                    let _ = stopped.await;
                })
                .await
            })
        });
        Ok(Self { addr, served, stop: Some(stop), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Queries answered so far.
    pub fn served(&self) -> u64 {
        self.served.load(Ordering::SeqCst)
    }

    pub fn shutdown(mut self) -> Result<u64> {
        self.stop_inner()?;
        Ok(self.served())
    }

    fn stop_inner(&mut self) -> Result<()> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(thread) = self.thread.take() {
            thread
                .join()
                .map_err(|_| Error::Transport("stub server thread panicked".into()))??;
        }
        Ok(())
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        let _ = self.stop_inner();
    }
}
