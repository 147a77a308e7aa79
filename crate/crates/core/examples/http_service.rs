//! Serves a checkpoint over HTTP and calls it once from a client.
//!
//! ```text
//! cargo run --release --example http_service
//! ```

use std::net::SocketAddr;

use base64::Engine;
use turbo_i2i::checkpoint::save_generator;
use turbo_i2i::generator::{AdapterSpec, GeneratorConfig, GeneratorState};
use turbo_i2i::service::{
    router, AppState, LoadedModel, ServiceConfig, TranslateRequest, TranslateResponse,
};
use turbo_i2i::types::TensorImage;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("turbo-i2i-served");
    let mut state = GeneratorState::new_random(GeneratorConfig::default())?;
    state.attach_adapters(AdapterSpec::default())?;
    save_generator(&state, None, &dir, Some("demo"))?;

    let app = router(AppState::new(
        vec![LoadedModel::load(&dir)?],
        ServiceConfig::default(),
    )?);
    let listener = tokio::net::TcpListener::bind(SocketAddr::from(([127, 0, 0, 1], 0))).await?;
    let addr = listener.local_addr()?;
    tokio::spawn(async move { axum::serve(listener, app).await });
    println!("listening on http://{addr}");

    let img = TensorImage::filled(64, 64, [0.4, 0.1, -0.2])?;
    let req = TranslateRequest {
        image: base64::engine::general_purpose::STANDARD.encode(img.to_png_bytes()?),
        domain: "night".into(),
        gamma: 1.0,
        seed: 7,
        model: None,
    };
    let body = serde_json::to_string(&req)?;
    let raw = post(addr, "/translate", &body).await?;
    let resp: TranslateResponse = serde_json::from_str(&raw)?;
    println!(
        "translated in {:.2} ms, {} base64 bytes",
        resp.latency_ms,
        resp.image.len()
    );
    println!("health: {}", get(addr, "/health").await?);
    Ok(())
}

// Minimal HTTP/1.1 client over a raw socket.
async fn roundtrip(addr: SocketAddr, request: String) -> std::io::Result<String> {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let mut s = tokio::net::TcpStream::connect(addr).await?;
    s.write_all(request.as_bytes()).await?;
    let mut buf = String::new();
    s.read_to_string(&mut buf).await?;
    Ok(buf.split("\r\n\r\n").nth(1).unwrap_or_default().to_string())
}

async fn post(addr: SocketAddr, path: &str, body: &str) -> std::io::Result<String> {
    roundtrip(
        addr,
        format!(
            "POST {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        ),
    )
    .await
}

async fn get(addr: SocketAddr, path: &str) -> std::io::Result<String> {
    roundtrip(
        addr,
        format!("GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n"),
    )
    .await
}
