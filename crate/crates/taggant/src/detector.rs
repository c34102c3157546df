//! Black-box detection: probe a suspect model with the key images, count
//! how many key labels land in the top-k response, and refer the count to
//! its exact binomial null. Per-run p-values combine across independent
//! retrainings with Fisher's method.
//!
//! All tail probabilities are carried in log-space; Table-1-scale evidence
//! (log10 p near -74) is far below f64 underflow after combination.

use std::io::{Read as _, Write as _};
use std::net::TcpStream;
use std::time::Duration;

use base64::Engine;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keys::KeySet;
use crate::models::{self, hex_digest, Model};

const LN10: f64 = std::f64::consts::LN_10;

// ---------------------------------------------------------------- statistics

/// Lanczos approximation, g=7, valid for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // reflection
        return std::f64::consts::PI.ln() - (std::f64::consts::PI * x).sin().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = G[0];
    for (i, &g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn ln_choose(n: usize, k: usize) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

fn logsumexp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

fn ln_binom_pmf(n: usize, z: usize, q: f64) -> f64 {
    ln_choose(n, z) + z as f64 * q.ln() + (n - z) as f64 * (-q).ln_1p()
}

fn check_binomial_params(hits: usize, keys: usize, k: usize, classes: usize) -> Result<f64> {
    if keys == 0 {
        return Err(Error::Config("key count must be >= 1".into()));
    }
    if hits > keys {
        return Err(Error::Config(format!("hits {hits} > keys {keys}")));
    }
    if k == 0 || k >= classes {
        return Err(Error::Config(format!("need 1 <= k < |Y|, got k={k}, |Y|={classes}")));
    }
    Ok(k as f64 / classes as f64)
}

/// Natural log of the exact upper tail P(Z >= hits), Z ~ Binomial(keys, k/|Y|).
pub fn binomial_log_pvalue(hits: usize, keys: usize, k: usize, classes: usize) -> Result<f64> {
    let q = check_binomial_params(hits, keys, k, classes)?;
    if hits == 0 {
        return Ok(0.0);
    }
    let terms: Vec<f64> = (hits..=keys).map(|z| ln_binom_pmf(keys, z, q)).collect();
    Ok(logsumexp(&terms).min(0.0))
}

pub fn binomial_pvalue(hits: usize, keys: usize, k: usize, classes: usize) -> Result<f64> {
    Ok(binomial_log_pvalue(hits, keys, k, classes)?.exp())
}

/// Natural log of the mid-p tail: P(Z > hits) + 0.5 P(Z = hits). Used only
/// for the reject/accept decision; reported p-values stay the inclusive
/// tail. The inclusive rule is conservative in a lumpy way (its real false
/// positive rate at alpha=0.01 can sit near 0.0016); mid-p keeps the
/// realized rate near the nominal level.
pub fn binomial_log_midp(hits: usize, keys: usize, k: usize, classes: usize) -> Result<f64> {
    let q = check_binomial_params(hits, keys, k, classes)?;
    let ln_p = binomial_log_pvalue(hits, keys, k, classes)?;
    let ln_half_pmf = ln_binom_pmf(keys, hits, q) - 2f64.ln();
    // ln(p - 0.5 pmf) = ln_p + ln(1 - exp(ln_half_pmf - ln_p))
    let d = (ln_half_pmf - ln_p).exp();
    Ok(ln_p + (-d).ln_1p())
}

/// Fisher's method: X = -2 sum(ln p_i) referred to the chi-square upper
/// tail with 2m degrees of freedom. Input and output are natural-log /
/// log10 respectively. For integer shape m the regularized upper
/// incomplete gamma has the exact finite form
/// Q(m, x) = exp(-x) * sum_{i<m} x^i / i!, evaluated in log-space.
pub fn fisher_combine(ln_pvalues: &[f64]) -> Result<f64> {
    if ln_pvalues.is_empty() {
        return Err(Error::Config("fisher_combine needs at least one p-value".into()));
    }
    for &lp in ln_pvalues {
        if !(lp <= 0.0) {
            return Err(Error::Config(format!("ln p must be <= 0, got {lp}")));
        }
    }
    let m = ln_pvalues.len();
    let x: f64 = -ln_pvalues.iter().sum::<f64>(); // X/2 = sum(-ln p)
    if x == 0.0 {
        return Ok(0.0);
    }
    let lx = x.ln();
    let mut ln_fact = 0.0;
    let terms: Vec<f64> = (0..m)
        .map(|i| {
            if i > 0 {
                ln_fact += (i as f64).ln();
            }
            i as f64 * lx - ln_fact
        })
        .collect();
    let ln_q = (-x + logsumexp(&terms)).min(0.0);
    Ok(ln_q / LN10)
}

// ----------------------------------------------------------------- endpoints

/// A suspect model reachable only through top-k label queries.
pub trait SuspectEndpoint: Sync {
    /// Largest k the endpoint will answer.
    fn k_limit(&self) -> usize;
    fn classes(&self) -> usize;
    /// Ordered (most confident first) distinct labels, exactly k of them.
    fn predict_topk(&self, image: &[f64], k: usize) -> Result<Vec<usize>>;
}

pub struct InProcessEndpoint {
    pub model: Model,
}

impl InProcessEndpoint {
    pub fn new(model: Model) -> Self {
        InProcessEndpoint { model }
    }
}

impl SuspectEndpoint for InProcessEndpoint {
    fn k_limit(&self) -> usize {
        self.model.spec.classes
    }

    fn classes(&self) -> usize {
        self.model.spec.classes
    }

    fn predict_topk(&self, image: &[f64], k: usize) -> Result<Vec<usize>> {
        models::predict_topk(&self.model, image, k)
    }
}

#[derive(Serialize)]
struct PredictRequest<'a> {
    image: &'a str,
    k: usize,
}

#[derive(Deserialize)]
struct PredictResponse {
    labels: Vec<i64>,
}

/// Remote endpoint speaking HTTP POST /predict with a JSON body
/// {image: base64 little-endian float32 CHW, k} and response {labels: [..]}.
pub struct HttpEndpoint {
    /// host:port
    pub addr: String,
    pub classes: usize,
    pub k_limit: usize,
    pub timeout: Duration,
    pub retries: usize,
}

impl HttpEndpoint {
    pub fn new(addr: &str, classes: usize, k_limit: usize) -> Self {
        HttpEndpoint {
            addr: addr.to_string(),
            classes,
            k_limit,
            timeout: Duration::from_secs(10),
            retries: 2,
        }
    }

    fn request_once(&self, body: &str) -> Result<Vec<usize>> {
        let stream = TcpStream::connect(&self.addr)?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;
        let mut stream = stream;
        let req = format!(
            "POST /predict HTTP/1.1\r\nHost: {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
            self.addr,
            body.len(),
            body
        );
        stream.write_all(req.as_bytes())?;
        let mut raw = Vec::new();
        stream.read_to_end(&mut raw)?;
        let text = String::from_utf8_lossy(&raw);
        let (head, payload) = text
            .split_once("\r\n\r\n")
            .ok_or_else(|| Error::Detection("malformed endpoint response: no header/body split".into()))?;
        let status = head.lines().next().unwrap_or("");
        if !status.contains(" 200") {
            return Err(Error::Detection(format!("endpoint returned {status}")));
        }
        let resp: PredictResponse = serde_json::from_str(payload.trim())
            .map_err(|e| Error::Detection(format!("malformed endpoint response: {e}")))?;
        let mut labels = Vec::with_capacity(resp.labels.len());
        for l in resp.labels {
            if l < 0 || l as usize >= self.classes {
                return Err(Error::Detection(format!("endpoint label {l} out of range")));
            }
            labels.push(l as usize);
        }
        Ok(labels)
    }
}

impl SuspectEndpoint for HttpEndpoint {
    fn k_limit(&self) -> usize {
        self.k_limit
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn predict_topk(&self, image: &[f64], k: usize) -> Result<Vec<usize>> {
        let mut blob = Vec::with_capacity(image.len() * 4);
        for &v in image {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let body = serde_json::to_string(&PredictRequest {
            image: &base64::engine::general_purpose::STANDARD.encode(&blob),
            k,
        })?;
        let mut last = None;
        for _ in 0..=self.retries {
            match self.request_once(&body) {
                Ok(labels) => return Ok(labels),
                Err(e) => last = Some(e),
            }
        }
        Err(last.unwrap())
    }
}

// -------------------------------------------------------------------- detect

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub hits: usize,
    /// Inclusive upper-tail p-value, log10.
    pub log10_p: f64,
    /// Top-k labels returned for each key, in key order.
    pub responses: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectionReport {
    pub keys: usize,
    pub k: usize,
    pub classes: usize,
    pub alpha: f64,
    pub runs: Vec<RunResult>,
    /// Fisher combination of the per-run inclusive p-values, log10.
    pub fisher_log10_p: f64,
    /// Decision statistic: Fisher combination of per-run mid-p values.
    pub decision_log10_p: f64,
    pub reject_null: bool,
    /// sha256 over the serialized probe responses.
    pub transcript_sha256: String,
}

/// Query the endpoint once per key and count keys whose label appears in
/// the top-k response. Key labels never leave this process.
pub fn probe(endpoint: &dyn SuspectEndpoint, keyset: &KeySet, k: usize) -> Result<(usize, Vec<Vec<usize>>)> {
    if k == 0 || k > endpoint.k_limit() {
        return Err(Error::Config(format!("k={k} exceeds endpoint limit {}", endpoint.k_limit())));
    }
    if k > keyset.classes {
        return Err(Error::Config(format!("k={k} > |Y|={}", keyset.classes)));
    }
    if endpoint.classes() != keyset.classes {
        return Err(Error::Config(format!(
            "endpoint classes {} != keyset classes {}",
            endpoint.classes(),
            keyset.classes
        )));
    }
    let mut hits = 0;
    let mut responses = Vec::with_capacity(keyset.len());
    for key in &keyset.keys {
        let labels = endpoint.predict_topk(&key.image, k)?;
        if labels.len() != k {
            return Err(Error::Detection(format!("endpoint returned {} labels, expected {k}", labels.len())));
        }
        if labels.contains(&key.label) {
            hits += 1;
        }
        responses.push(labels);
    }
    Ok((hits, responses))
}

/// Probe each endpoint (one per independent training run), compute per-run
/// exact binomial p-values, Fisher-combine, and decide at level alpha.
pub fn detect(
    endpoints: &[&dyn SuspectEndpoint],
    keyset: &KeySet,
    k: usize,
    alpha: f64,
) -> Result<DetectionReport> {
    if endpoints.is_empty() {
        return Err(Error::Config("detect needs at least one endpoint".into()));
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must be in (0,1), got {alpha}")));
    }
    let probes: Vec<(usize, Vec<Vec<usize>>)> = endpoints
        .par_iter()
        .map(|ep| probe(*ep, keyset, k))
        .collect::<Result<_>>()?;

    let mut runs = Vec::with_capacity(probes.len());
    let mut ln_ps = Vec::with_capacity(probes.len());
    let mut ln_midps = Vec::with_capacity(probes.len());
    for (hits, responses) in probes {
        let ln_p = binomial_log_pvalue(hits, keyset.len(), k, keyset.classes)?;
        ln_midps.push(binomial_log_midp(hits, keyset.len(), k, keyset.classes)?);
        ln_ps.push(ln_p);
        runs.push(RunResult { hits, log10_p: ln_p / LN10, responses });
    }
    let fisher_log10_p = fisher_combine(&ln_ps)?;
    let decision_log10_p = fisher_combine(&ln_midps)?;
    let transcript: Vec<&Vec<Vec<usize>>> = runs.iter().map(|r| &r.responses).collect();
    Ok(DetectionReport {
        keys: keyset.len(),
        k,
        classes: keyset.classes,
        alpha,
        fisher_log10_p,
        decision_log10_p,
        reject_null: decision_log10_p < alpha.log10(),
        transcript_sha256: hex_digest(&serde_json::to_vec(&transcript)?),
        runs,
    })
}
