//! In-process clients: simulated probit raters driving the HTTP API
//! without a socket.

use std::collections::HashMap;

use axum::body::Body;
use axum::http::{HeaderMap, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

use vata_core::synth::probit_choice;
use vata_core::{Indicator, Side};

use crate::TARGET_PER_INDICATOR;

pub struct Reply {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or(Value::Null)
    }
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app
        .clone()
        .oneshot(req.body(body).expect("valid request"))
        .await
        .expect("router is infallible");
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.expect("body").to_bytes().to_vec();
    Reply { status, headers, body }
}

/// Registers `participants` raters who each answer the full quota for
/// `indicator`; returns the number of recorded responses.
pub async fn simulated_survey(
    app: &Router,
    latent: &HashMap<String, f64>,
    indicator: Indicator,
    participants: usize,
    beta: f64,
    seed: u64,
) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut recorded = 0;
    for p in 0..participants {
        let id = format!("sim-{seed}-{p:04}");
        let r = call(app, Method::POST, "/api/participants", Some(json!({ "participant_id": id }))).await;
        if !r.status.is_success() {
            return Err(format!("register {id}: {}", r.status));
        }
        for _ in 0..TARGET_PER_INDICATOR {
            let pair = call(
                app,
                Method::GET,
                &format!("/api/pair?indicator={indicator}&participant={id}"),
                None,
            )
            .await;
            if pair.status != StatusCode::OK {
                return Err(format!("pair for {id}: {}", pair.status));
            }
            let v = pair.json();
            let (left, right) = (v["left"].as_str().unwrap_or(""), v["right"].as_str().unwrap_or(""));
            let diff = latent.get(left).copied().unwrap_or(0.0) - latent.get(right).copied().unwrap_or(0.0);
            let winner = match probit_choice(diff, beta, &mut rng) {
                Side::Left => left,
                Side::Right => right,
            };
            let body = json!({
                "indicator": indicator, "left": left, "right": right,
                "winner": winner, "participant": id,
            });
            let r = call(app, Method::POST, "/api/response", Some(body)).await;
            if r.status != StatusCode::CREATED {
                return Err(format!("response for {id}: {}", r.status));
            }
            recorded += 1;
        }
    }
    Ok(recorded)
}
