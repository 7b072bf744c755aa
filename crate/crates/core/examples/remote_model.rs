//! A short ring run against a real chat-completions endpoint.
//!
//! COMAL_API_KEY=... cargo run --example remote_model -- [endpoint] [model]

use comal::harness::{export, run};
use comal::llm_client::{BackendConfig, RemoteBackend};
use comal::scenario::find;

fn main() {
    let mut args = std::env::args().skip(1);
    let mut config = BackendConfig::default();
    if let Some(e) = args.next() {
        config.endpoint = e;
    }
    if let Some(m) = args.next() {
        config.model = m;
    }
    if std::env::var(&config.api_key_env).is_err() {
        eprintln!("set {} to run against {}", config.api_key_env, config.url());
        return;
    }
    let backend = RemoteBackend::new(config).expect("valid config");
    let cfg = comal::scenario::ScenarioConfig {
        horizon: 40.0,
        ..find("Ring 1").unwrap()
    };
    let result = run(&cfg, &backend).expect("run");
    println!(
        "avg {:.3} m/s, std {:.3} m/s",
        result.avg_speed, result.speed_std
    );
    println!("flags: {:?}", result.flags);
    let out = std::path::Path::new("remote_run");
    export(&result, out).expect("export");
    println!("transcript and metrics written to {}", out.display());
}
