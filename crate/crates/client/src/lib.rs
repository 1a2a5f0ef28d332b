//! Thin async client for the stnet job service.

use std::time::Duration;

use reqwest::StatusCode;
use stnet_api::{ConfigDump, ErrorBody, JobCreated, JobRequest, JobStatus, Preset};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request to {url} failed: {source}")]
    Transport {
        url: String,
        #[source]
        source: reqwest::Error,
    },
    #[error("server answered {status}: {message}")]
    Server { status: StatusCode, message: String },
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
    poll: Duration,
}

impl Client {
    /// `base` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
            poll: Duration::from_millis(100),
        }
    }

    pub fn with_poll_interval(mut self, poll: Duration) -> Self {
        self.poll = poll;
        self
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn decode<T: serde::de::DeserializeOwned>(url: &str, resp: reqwest::Response) -> Result<T> {
        let status = resp.status();
        if !status.is_success() {
            let message = match resp.json::<ErrorBody>().await {
                Ok(body) => body.error,
                Err(_) => status.canonical_reason().unwrap_or("unknown error").to_string(),
            };
            return Err(ClientError::Server { status, message });
        }
        resp.json().await.map_err(|source| ClientError::Transport {
            url: url.to_string(),
            source,
        })
    }

    async fn get<T: serde::de::DeserializeOwned>(&self, path: &str) -> Result<T> {
        let url = self.url(path);
        let resp = self
            .http
            .get(&url)
            .send()
            .await
            .map_err(|source| ClientError::Transport {
                url: url.clone(),
                source,
            })?;
        Self::decode(&url, resp).await
    }

    pub async fn health(&self) -> Result<serde_json::Value> {
        self.get("/v1/health").await
    }

    pub async fn default_config(&self, preset: Preset) -> Result<ConfigDump> {
        let name = match preset {
            Preset::Toy => "toy",
            Preset::Paper => "paper",
        };
        self.get(&format!("/v1/config?preset={name}")).await
    }

    pub async fn submit(&self, req: &JobRequest) -> Result<u64> {
        let url = self.url("/v1/jobs");
        let resp = self
            .http
            .post(&url)
            .json(req)
            .send()
            .await
            .map_err(|source| ClientError::Transport {
                url: url.clone(),
                source,
            })?;
        Ok(Self::decode::<JobCreated>(&url, resp).await?.id)
    }

    pub async fn status(&self, id: u64) -> Result<JobStatus> {
        self.get(&format!("/v1/jobs/{id}")).await
    }

    /// Polls until the job finishes, handing each new log line to `on_log` once.
    pub async fn wait(&self, id: u64, mut on_log: impl FnMut(&str)) -> Result<JobStatus> {
        let mut seen = 0;
        loop {
            let status = self.status(id).await?;
            for line in &status.log[seen.min(status.log.len())..] {
                on_log(line);
            }
            seen = status.log.len();
            if status.state.is_finished() {
                return Ok(status);
            }
            tokio::time::sleep(self.poll).await;
        }
    }

    /// Submits and waits.
    pub async fn run(&self, req: &JobRequest, on_log: impl FnMut(&str)) -> Result<JobStatus> {
        let id = self.submit(req).await?;
        self.wait(id, on_log).await
    }
}
