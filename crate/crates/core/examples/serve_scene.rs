//! Serves a scene file over HTTP, or a briefly trained toy scene when no file is given.
//!
//! cargo run --release --example serve_scene -- [scene.fspl] [addr]
//!
//! Then, for example:
//!   curl localhost:8080/scene/info
//!   curl -X POST localhost:8080/render -d @request.json -o frame.png

use std::sync::Arc;

use featsplat::dataset::{make_toy_dataset, ToySpec};
use featsplat::format::load_scene;
use featsplat::service::{serve, RenderRequest, SceneService};
use featsplat::trainer::{train, TrainConfig};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let scene_path = args.next().filter(|a| a != "-");
    let addr = args.next().unwrap_or_else(|| "127.0.0.1:8080".into()).parse()?;

    let (scene, decoder, example_camera) = match scene_path {
        Some(path) => {
            let (s, d) = load_scene(path.as_ref())?;
            (s, d, None)
        }
        None => {
            let toy = make_toy_dataset(&ToySpec::three_gaussians(), 0)?;
            let cfg = TrainConfig {
                iterations: 500,
                probe_interval: 500,
                ..TrainConfig::default()
            };
            let out = tokio::task::spawn_blocking(move || train(&toy.dataset, &cfg, |_| {}).map(|o| (o, toy)))
                .await??;
            let cam = out.1.dataset.views[0].camera.clone();
            (out.0.scene, out.0.decoder, Some(cam))
        }
    };
    if let Some(cam) = example_camera {
        let req = RenderRequest {
            camera: (&cam).into(),
            overrides: None,
            background: [0.0; 3],
        };
        println!("example request body:\n{}", serde_json::to_string(&req)?);
    }
    serve(Arc::new(SceneService::new(scene, decoder)), addr).await?;
    Ok(())
}
