//! Blocking client for the audit service's `/api/v1` interface.

use reqwest::blocking::{Client as Http, RequestBuilder};
use reqwest::StatusCode;
use rla_core::api::{
    ErrorBody, EscalateRequest, EscalateResponse, HandCountRequest, MemberUpdate, ObservationRequest, ObservationResponse, ParliamentRequest,
    ParliamentView, SessionSummary, PREFIX,
};
use rla_core::observation::Observation;
use rla_core::parliament::HandCount;
use rla_core::session::{SessionInputs, SessionStatus};
use serde::de::DeserializeOwned;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    /// The service answered with an error status.
    #[error("{status}: {message}")]
    Api { status: StatusCode, message: String },
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            ClientError::Transport(e) => e.status(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: Http,
}

impl Client {
    /// `base` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl AsRef<str>) -> Self {
        let base = format!("{}{PREFIX}", base.as_ref().trim_end_matches('/'));
        Client { base, http: Http::new() }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn send<T: DeserializeOwned>(&self, request: RequestBuilder) -> Result<T, ClientError> {
        let response = request.send()?;
        let status = response.status();
        if status.is_success() {
            return Ok(response.json()?);
        }
        let text = response.text().unwrap_or_default();
        let message = serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or(text);
        Err(ClientError::Api { status, message })
    }

    pub fn create_session(&self, inputs: &SessionInputs) -> Result<SessionStatus, ClientError> {
        self.send(self.http.post(self.url("/sessions")).json(inputs))
    }

    pub fn list_sessions(&self) -> Result<Vec<SessionSummary>, ClientError> {
        self.send(self.http.get(self.url("/sessions")))
    }

    pub fn session(&self, id: &str) -> Result<SessionStatus, ClientError> {
        self.send(self.http.get(self.url(&format!("/sessions/{id}"))))
    }

    pub fn observe(&self, id: &str, observed: Observation, counter: Option<u64>) -> Result<ObservationResponse, ClientError> {
        let body = ObservationRequest { observed, counter };
        self.send(self.http.post(self.url(&format!("/sessions/{id}/observations"))).json(&body))
    }

    pub fn hand_count(&self, id: &str, result: HandCount) -> Result<SessionStatus, ClientError> {
        self.send(self.http.post(self.url(&format!("/sessions/{id}/handcount"))).json(&HandCountRequest { result }))
    }

    pub fn halt(&self, id: &str) -> Result<SessionStatus, ClientError> {
        self.send(self.http.post(self.url(&format!("/sessions/{id}/halt"))))
    }

    pub fn create_parliament(&self, request: &ParliamentRequest) -> Result<ParliamentView, ClientError> {
        self.send(self.http.post(self.url("/parliament")).json(request))
    }

    pub fn parliament(&self, id: &str) -> Result<ParliamentView, ClientError> {
        self.send(self.http.get(self.url(&format!("/parliament/{id}"))))
    }

    pub fn escalate(&self, id: &str, request: &EscalateRequest) -> Result<EscalateResponse, ClientError> {
        self.send(self.http.post(self.url(&format!("/parliament/{id}/escalate"))).json(request))
    }

    pub fn update_member(&self, id: &str, constituency: &str, update: &MemberUpdate) -> Result<ParliamentView, ClientError> {
        self.send(self.http.post(self.url(&format!("/parliament/{id}/constituencies/{constituency}"))).json(update))
    }
}
