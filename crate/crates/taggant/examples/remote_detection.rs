//! Detection over the wire. The verifier only needs black-box access: an
//! HTTP endpoint accepting POST /predict with {"image": <base64 f32 CHW,
//! little-endian>, "k": n} and answering {"labels": [..]}. This example
//! stands up such a server on a local port around a trained model, then
//! runs detection against it exactly as one would against a third party.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};

use anyhow::Result;
use base64::Engine;
use serde::Deserialize;
use taggant::data;
use taggant::detector::{detect, HttpEndpoint, SuspectEndpoint};
use taggant::keys::generate_keys;
use taggant::models::{predict_topk, Activation, Arch, Model, ModelSpec};
use taggant::trainer::{train, TrainConfig};

#[derive(Deserialize)]
struct PredictRequest {
    image: String,
    k: usize,
}

fn serve_one(stream: TcpStream, model: &Model) -> Result<()> {
    let mut reader = BufReader::new(stream);
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let line = line.trim();
        if line.is_empty() {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            content_length = v.trim().parse()?;
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    let req: PredictRequest = serde_json::from_slice(&body)?;
    let blob = base64::engine::general_purpose::STANDARD.decode(&req.image)?;
    let image: Vec<f64> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let labels = predict_topk(model, &image, req.k)?;
    let payload = serde_json::to_string(&serde_json::json!({ "labels": labels }))?;
    let resp = format!(
        "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        payload.len(),
        payload
    );
    reader.into_inner().write_all(resp.as_bytes())?;
    Ok(())
}

fn main() -> Result<()> {
    let shape = (3, 16, 16);
    let classes = 8;
    let train_set = data::synthesize(400, shape, classes, 1)?;
    let val_set = data::synthesize(100, shape, classes, 2)?;
    let mut cfg = TrainConfig::new(ModelSpec {
        arch: Arch::CnnSmall,
        input_shape: shape,
        classes,
        seed: 3,
        activation: Activation::Gelu,
    });
    cfg.epochs = 3;
    cfg.lr = 0.05;
    cfg.seed = 3;
    let (model, _) = train(&train_set, &val_set, &cfg)?;

    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    println!("suspect model serving on {addr}");
    let handle = std::thread::spawn(move || {
        // One connection per probe query: K keys, K requests, then stop.
        for stream in listener.incoming().flatten() {
            if serve_one(stream, &model).is_err() {
                break;
            }
        }
    });

    let keyset = generate_keys(6, shape, classes, 99)?;
    let endpoint = HttpEndpoint::new(&addr.to_string(), classes, classes);
    let refs: Vec<&dyn SuspectEndpoint> = vec![&endpoint];
    let report = detect(&refs, &keyset, 2, 0.01)?;
    println!(
        "probed {} keys over HTTP: {} hits, log10 p = {:.2} (clean model, so no detection expected)",
        keyset.len(),
        report.runs[0].hits,
        report.fisher_log10_p
    );
    drop(handle); // server thread exits when the process does
    Ok(())
}
