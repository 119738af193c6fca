//! HTTP endpoint behavior against an in-process server on an ephemeral port.

use astra_core::classify::{classify_with, ClassifyResponse, SegmentPolicy};
use astra_core::encoder::EncoderConfig;
use astra_core::model::{build_model, Arch, GuardModel, ModelConfig};
use astra_cli::service::{spawn, RunningService, ServeOptions};
use serde_json::json;

fn toy_model(arch: Arch, seed: u64) -> GuardModel<f32> {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_len: 32,
            ..EncoderConfig::default()
        },
        seed,
        ..ModelConfig::default()
    };
    build_model(arch, &cfg).unwrap().freeze()
}

fn serve(model: GuardModel<f32>, opts: ServeOptions) -> RunningService {
    spawn(model, "test-model", &ServeOptions { addr: "127.0.0.1:0".to_string(), ..opts }).unwrap()
}

/// Agent that reports 4xx/5xx as plain responses instead of errors.
fn lenient() -> ureq::Agent {
    ureq::Agent::new_with_config(ureq::Agent::config_builder().http_status_as_error(false).build())
}

fn post_json(agent: &ureq::Agent, url: &str, body: serde_json::Value) -> (u16, String) {
    let mut resp = agent.post(url).send_json(body).unwrap();
    (resp.status().as_u16(), resp.body_mut().read_to_string().unwrap())
}

#[test]
fn health_reports_the_loaded_model() {
    let service = serve(toy_model(Arch::Sharanga, 1), ServeOptions::default());
    let mut resp = ureq::get(&service.url("/v1/health")).call().unwrap();
    assert_eq!(resp.status().as_u16(), 200);
    assert_eq!(resp.headers().get("content-type").unwrap(), "application/json");
    let body: serde_json::Value = resp.body_mut().read_json().unwrap();
    assert_eq!(body["status"], "ok");
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["arch"], "sharanga");
}

#[test]
fn classify_matches_the_direct_call() {
    let model = toy_model(Arch::Sharanga, 2);
    let direct = classify_with(&model, "hello over there", None, None).unwrap();
    let service = serve(model, ServeOptions::default());
    let mut resp = ureq::post(&service.url("/v1/classify"))
        .send_json(json!({ "text": "hello over there" }))
        .unwrap();
    assert_eq!(resp.status().as_u16(), 200);
    let got: ClassifyResponse = resp.body_mut().read_json().unwrap();
    assert_eq!(got.jailbreak.to_bits(), direct.jailbreak.to_bits());
    assert_eq!(got.prompt_injection.to_bits(), direct.prompt_injection.to_bits());
    assert_eq!(got.malicious, direct.malicious);
    assert_eq!(got.segments_used, 1);
}

#[test]
fn empty_text_is_classifiable() {
    let service = serve(toy_model(Arch::Sharanga, 3), ServeOptions::default());
    let (status, body) = post_json(&lenient(), &service.url("/v1/classify"), json!({ "text": "" }));
    assert_eq!(status, 200, "{body}");
    let got: ClassifyResponse = serde_json::from_str(&body).unwrap();
    assert_eq!(got.segments_used, 1);
}

#[test]
fn malformed_json_is_a_400() {
    let service = serve(toy_model(Arch::Sharanga, 4), ServeOptions::default());
    let agent = lenient();
    let mut resp = agent
        .post(&service.url("/v1/classify"))
        .header("content-type", "application/json")
        .send("{ not json")
        .unwrap();
    assert_eq!(resp.status().as_u16(), 400);
    let body: serde_json::Value = resp.body_mut().read_json().unwrap();
    assert!(body["error"].as_str().unwrap().contains("invalid request"));

    // Valid JSON of the wrong shape is refused the same way.
    let (status, _) = post_json(&agent, &service.url("/v1/classify"), json!({ "prompt": "hi" }));
    assert_eq!(status, 400);
}

#[test]
fn unknown_paths_and_methods_are_refused() {
    let service = serve(toy_model(Arch::Sharanga, 5), ServeOptions::default());
    let agent = lenient();
    let resp = agent.get(&service.url("/v1/classify")).call().unwrap();
    assert_eq!(resp.status().as_u16(), 405);
    let (status, _) = post_json(&agent, &service.url("/v1/health"), json!({}));
    assert_eq!(status, 405);
    let resp = agent.get(&service.url("/v2/missing")).call().unwrap();
    assert_eq!(resp.status().as_u16(), 404);
}

#[test]
fn oversize_bodies_are_a_413() {
    let opts = ServeOptions { max_body_bytes: 64, ..ServeOptions::default() };
    let service = serve(toy_model(Arch::Sharanga, 6), opts);
    let big = "x".repeat(400);
    let (status, body) = post_json(&lenient(), &service.url("/v1/classify"), json!({ "text": big }));
    assert_eq!(status, 413, "{body}");
    let err: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert!(err["error"].as_str().unwrap().contains("64 bytes"));
}

#[test]
fn threshold_override_changes_the_decision() {
    let model = toy_model(Arch::Sharanga, 7);
    let base = classify_with(&model, "borderline words", None, None).unwrap();
    let lo = base.jailbreak.min(base.prompt_injection);
    let hi = base.jailbreak.max(base.prompt_injection);
    let service = serve(model, ServeOptions::default());
    let agent = lenient();

    let (status, body) = post_json(
        &agent,
        &service.url("/v1/classify"),
        json!({ "text": "borderline words", "threshold_override": lo / 2.0 }),
    );
    assert_eq!(status, 200);
    let got: ClassifyResponse = serde_json::from_str(&body).unwrap();
    assert!(got.malicious, "threshold below both probabilities must flag");

    let above = hi + (1.0 - hi) / 2.0;
    let (status, body) = post_json(
        &agent,
        &service.url("/v1/classify"),
        json!({ "text": "borderline words", "threshold_override": above }),
    );
    assert_eq!(status, 200);
    let got: ClassifyResponse = serde_json::from_str(&body).unwrap();
    assert!(!got.malicious, "threshold above both probabilities must clear");

    for bad in [0.0, 1.0, -0.3, 2.5] {
        let (status, _) = post_json(
            &agent,
            &service.url("/v1/classify"),
            json!({ "text": "x", "threshold_override": bad }),
        );
        assert_eq!(status, 400, "threshold {bad} must be refused");
    }
}

#[test]
fn segmentation_policy_applies_to_requests() {
    let opts = ServeOptions { policy: Some(SegmentPolicy::new(8, 2)), ..ServeOptions::default() };
    let service = serve(toy_model(Arch::Sharanga, 8), opts);
    let agent = lenient();
    let long = "the quick brown fox jumps over the lazy dog again";
    let (status, body) = post_json(&agent, &service.url("/v1/classify"), json!({ "text": long }));
    assert_eq!(status, 200);
    let got: ClassifyResponse = serde_json::from_str(&body).unwrap();
    assert!(got.segments_used > 1, "a {} byte text must take several 8-token windows", long.len());

    let (_, body) = post_json(&agent, &service.url("/v1/classify"), json!({ "text": "tiny" }));
    let got: ClassifyResponse = serde_json::from_str(&body).unwrap();
    assert_eq!(got.segments_used, 1);
}

#[test]
fn spawn_refuses_models_that_cannot_classify() {
    // Tree heads that were never fitted fail at startup, not per request.
    let unfitted = build_model(
        Arch::Vaishnava,
        &ModelConfig {
            encoder: EncoderConfig {
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                d_ff: 32,
                max_len: 32,
                ..EncoderConfig::default()
            },
            ..ModelConfig::default()
        },
    )
    .unwrap()
    .freeze::<f32>();
    let opts = ServeOptions { addr: "127.0.0.1:0".to_string(), ..ServeOptions::default() };
    assert!(spawn(unfitted, "bad", &opts).is_err());

    // A window wider than the model's token budget is a config error.
    let opts = ServeOptions {
        addr: "127.0.0.1:0".to_string(),
        policy: Some(SegmentPolicy::new(64, 4)),
        ..ServeOptions::default()
    };
    assert!(spawn(toy_model(Arch::Sharanga, 9), "bad", &opts).is_err());
}

#[test]
fn identical_requests_share_one_body() {
    let service = serve(toy_model(Arch::Sharanga, 10), ServeOptions::default());
    let url = service.url("/v1/classify");
    let bodies: Vec<String> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let url = url.clone();
                scope.spawn(move || {
                    let mut resp =
                        ureq::post(&url).send_json(json!({ "text": "same words each time" })).unwrap();
                    resp.body_mut().read_to_string().unwrap()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert!(bodies.iter().all(|b| *b == bodies[0]), "identical requests must share one body");

    // Distinct payloads are not conflated by the cache.
    let (_, other) = post_json(&lenient(), &url, json!({ "text": "different words now" }));
    assert_ne!(other, bodies[0]);
    let a: ClassifyResponse = serde_json::from_str(&bodies[0]).unwrap();
    let b: ClassifyResponse = serde_json::from_str(&other).unwrap();
    assert!(a.jailbreak != b.jailbreak || a.prompt_injection != b.prompt_injection);
}
