//! Runs the HTTP service on the toy backend.
//!
//!     cargo run --release -p diffcolor-app --example serve -- [addr] [data_dir] [config]
//!
//! Then, for example:
//!
//!     curl -F gray=@crates/app/assets/sample_gray.png \
//!          -F prompt='A pink square and a yellow triangle on a purple background.' \
//!          http://127.0.0.1:8080/api/jobs/stage1
//!     curl -N http://127.0.0.1:8080/api/jobs/<job_id>/events

use diffcolor::PipelineConfig;
use diffcolor_app::backend::{load_models, BackendKind};
use diffcolor_app::service::{router, Service};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let addr = args.next().unwrap_or_else(|| "127.0.0.1:8080".into());
    let data_dir = args.next().unwrap_or_else(|| "diffcolor-data".into());
    let config = match args.next() {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::toy_demo(),
    };
    let kind = BackendKind::from_env();
    let models = {
        let config = config.clone();
        tokio::task::spawn_blocking(move || load_models(&kind, &config)).await??
    };
    let service = Service::new(&data_dir, config, models)?;
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    println!("listening on http://{addr} (data in {data_dir})");
    axum::serve(listener, router(service)).await?;
    Ok(())
}
