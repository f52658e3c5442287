//! Standalone DocXplain service.

use clap::Parser;
use docxplain_server::{serve, AppState};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "docxplain-server", version, about = "DocXplain HTTP/JSON service")]
struct Args {
    /// Address to listen on.
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: String,
}

#[tokio::main]
async fn main() -> std::io::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("DOCXPLAIN_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();
    let listener = tokio::net::TcpListener::bind(&args.bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    serve(listener, AppState::new()).await
}
