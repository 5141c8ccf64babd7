//! `qkdsim` command implementations and the KMS HTTP front-end.

use std::fmt;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use qkdsim_core::netmodel::NodeId;
use qkdsim_core::qkd_kms::service::{DecKeysRequest, EncKeysRequest, ServeConfig, ServiceError, SharedKms};
use qkdsim_core::scenario::{self, canned, load_scenario, BatchSummary, RunSummary, ScenarioError, TopologySpec};
use qkdsim_core::security_model::{
    data_compromised, enumerate_matrix, AdversaryCapabilities, ConfidentialityVerdict, MatrixRow, SecurityError,
};

pub const SAE_HEADER: &str = "x-sae-id";

#[derive(Debug)]
pub enum CliError {
    Io { path: PathBuf, source: io::Error },
    Scenario(ScenarioError),
    Config { path: PathBuf, message: String },
    Security(SecurityError),
}

impl CliError {
    /// Process exit code; 2 is left to argument parsing.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => 3,
            CliError::Config { .. } => 4,
            CliError::Scenario(ScenarioError::Parse { .. } | ScenarioError::Validation { .. }) => 4,
            CliError::Scenario(ScenarioError::UnknownTarget(_)) => 5,
            CliError::Security(_) => 6,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Config { .. } => "config",
            CliError::Scenario(ScenarioError::Parse { .. }) => "parse",
            CliError::Scenario(ScenarioError::Validation { .. }) => "validation",
            CliError::Scenario(ScenarioError::UnknownTarget(_)) => "fault",
            CliError::Security(_) => "security",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            CliError::Scenario(e) => write!(f, "{e}"),
            CliError::Config { path, message } => write!(f, "{}: {message}", path.display()),
            CliError::Security(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        CliError::Scenario(e)
    }
}

impl From<SecurityError> for CliError {
    fn from(e: SecurityError) -> Self {
        CliError::Security(e)
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_owned(), source })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|source| CliError::Io { path: path.to_owned(), source })
}

/// A scenario file, or the name of a shipped scenario when no such file exists.
pub fn load_scenario_arg(arg: &Path) -> Result<TopologySpec, CliError> {
    if !arg.exists() {
        if let Some(spec) = arg.to_str().and_then(canned) {
            return Ok(spec);
        }
    }
    let spec = load_scenario(&read(arg)?)?;
    Ok(spec)
}

pub struct RunArgs {
    pub scenario: PathBuf,
    pub seed: Option<u64>,
    pub until_s: Option<u64>,
    pub trace: Option<PathBuf>,
    pub summary: Option<PathBuf>,
}

pub fn cmd_run(args: &RunArgs) -> Result<RunSummary, CliError> {
    let spec = load_scenario_arg(&args.scenario)?;
    let seed = args.seed.unwrap_or(spec.seed);
    let (summary, trace) = scenario::run_seed(&spec, seed, args.until_s)?;
    if let Some(p) = &args.trace {
        write(p, &trace.to_jsonl())?;
    }
    if let Some(p) = &args.summary {
        write(p, serde_json::to_string_pretty(&summary).expect("serializable").as_bytes())?;
    }
    Ok(summary)
}

pub fn cmd_batch(scenario_arg: &Path, seeds: u64, until_s: Option<u64>) -> Result<BatchSummary, CliError> {
    let spec = load_scenario_arg(scenario_arg)?;
    if seeds == 0 {
        return Err(ScenarioError::Validation { field: "seeds".into(), message: "need at least one seed".into() }.into());
    }
    Ok(scenario::run_batch(&spec, seeds, until_s)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionVerdict {
    pub session: String,
    pub verdict: ConfidentialityVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMatrix {
    pub session: String,
    pub rows: Vec<MatrixRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SecurityReport {
    Verdicts(Vec<SessionVerdict>),
    Matrix(Vec<SessionMatrix>),
}

/// Evaluate an adversary file against every session, or the full matrix when no adversary is given.
pub fn cmd_security_check(topology: &Path, adversary: Option<&Path>) -> Result<SecurityReport, CliError> {
    let spec = load_scenario_arg(topology)?;
    spec.validate()?;
    let (topo, sessions) = spec.security_view();
    match adversary {
        Some(path) => {
            let caps: AdversaryCapabilities = toml::from_str(&read(path)?)
                .map_err(|e| CliError::Config { path: path.to_owned(), message: e.message().to_owned() })?;
            let rows = sessions
                .iter()
                .map(|s| Ok(SessionVerdict { session: s.id.clone(), verdict: data_compromised(&topo, s, &caps)? }))
                .collect::<Result<_, SecurityError>>()?;
            Ok(SecurityReport::Verdicts(rows))
        }
        None => {
            let rows = sessions
                .iter()
                .map(|s| Ok(SessionMatrix { session: s.id.clone(), rows: enumerate_matrix(&topo, s)? }))
                .collect::<Result<_, SecurityError>>()?;
            Ok(SecurityReport::Matrix(rows))
        }
    }
}

/// One JSON document per line.
pub fn write_json_lines<T: Serialize>(out: &mut impl Write, items: &[T]) -> io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut *out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_serve_config(path: &Path) -> Result<ServeConfig, CliError> {
    toml::from_str(&read(path)?).map_err(|e| CliError::Config { path: path.to_owned(), message: e.message().to_owned() })
}

struct ApiError(ServiceError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.0.body())).into_response()
    }
}

fn bad_request(message: String) -> Response {
    (StatusCode::BAD_REQUEST, Json(serde_json::json!({ "message": message }))).into_response()
}

fn caller(headers: &HeaderMap) -> Option<NodeId> {
    headers.get(SAE_HEADER).and_then(|v| v.to_str().ok()).map(NodeId::new)
}

async fn status(State(kms): State<Arc<SharedKms>>, UrlPath(peer): UrlPath<String>, headers: HeaderMap) -> Response {
    match kms.status(caller(&headers).as_ref(), &NodeId::new(peer)) {
        Ok(r) => Json(r).into_response(),
        Err(e) => ApiError(e).into_response(),
    }
}

async fn enc_keys(
    State(kms): State<Arc<SharedKms>>,
    UrlPath(peer): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let req: EncKeysRequest = if body.is_empty() {
        EncKeysRequest::default()
    } else {
        match serde_json::from_slice(&body) {
            Ok(r) => r,
            Err(e) => return bad_request(e.to_string()),
        }
    };
    match kms.enc_keys(caller(&headers).as_ref(), &NodeId::new(peer), &req) {
        Ok(r) => Json(r).into_response(),
        Err(e) => ApiError(e).into_response(),
    }
}

async fn dec_keys(
    State(kms): State<Arc<SharedKms>>,
    UrlPath(peer): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let req: DecKeysRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return bad_request(e.to_string()),
    };
    match kms.dec_keys(caller(&headers).as_ref(), &NodeId::new(peer), &req) {
        Ok(r) => Json(r).into_response(),
        Err(e) => ApiError(e).into_response(),
    }
}

/// ETSI GS QKD 014 routes. The calling SAE is named by the `X-SAE-ID` header
/// and defaults to the configured local node.
pub fn kms_router(kms: Arc<SharedKms>) -> Router {
    Router::new()
        .route("/api/v1/keys/{peer_id}/status", get(status))
        .route("/api/v1/keys/{peer_id}/enc_keys", post(enc_keys))
        .route("/api/v1/keys/{peer_id}/dec_keys", post(dec_keys))
        .with_state(kms)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct_per_category() {
        let io = CliError::Io { path: "x".into(), source: io::Error::other("boom") };
        let parse = CliError::Scenario(ScenarioError::Parse { line: 1, column: 1, message: "m".into() });
        let fault = CliError::Scenario(ScenarioError::UnknownTarget("t".into()));
        let sec = CliError::Security(SecurityError::UnknownNode(NodeId::new("z")));
        let codes: Vec<i32> = [&io, &parse, &fault, &sec].iter().map(|e| e.exit_code()).collect();
        assert_eq!(codes, vec![3, 4, 5, 6]);
        assert_eq!(parse.category(), "parse");
    }

    #[test]
    fn canned_name_falls_back_when_no_file() {
        assert_eq!(load_scenario_arg(Path::new("fig3")).unwrap().name, "fig3");
        assert!(matches!(load_scenario_arg(Path::new("no-such-scenario")), Err(CliError::Io { .. })));
    }
}
