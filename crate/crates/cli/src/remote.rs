//! Text-only adapter for a model behind an HTTP endpoint.
//!
//! The endpoint receives `{"prompt": "..."}` and answers with
//! `{"completion": "..."}`. Plain HTTP only.

use std::time::Duration;

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};

use callmask::eval::TextModel;

#[derive(Serialize)]
struct Request<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct Response {
    completion: String,
}

pub struct RemoteModel {
    url: String,
    client: reqwest::blocking::Client,
}

impl RemoteModel {
    pub fn new(url: &str) -> Result<Self> {
        if !url.starts_with("http://") {
            bail!("remote endpoint must be an http:// url, got {url:?}");
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()?;
        Ok(RemoteModel {
            url: url.to_string(),
            client,
        })
    }
}

impl TextModel for RemoteModel {
    fn complete(&self, prompt: &str) -> Result<String, String> {
        let resp = self
            .client
            .post(&self.url)
            .json(&Request { prompt })
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| format!("request to {} failed: {e}", self.url))?;
        resp.json::<Response>()
            .map(|r| r.completion)
            .map_err(|e| format!("bad response from {}: {e}", self.url))
    }
}
