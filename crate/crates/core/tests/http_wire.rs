mod support;

use std::path::Path;

use base64::Engine;
use bami_core::backend::{http_correct, http_ground, BackendError, CoordinateSpace, HttpConfig};
use bami_core::geometry::{BBox, ImageDims, Point};
use bami_core::image_ops::{Raster, GREEN, RED};
use bami_core::protocol::{Choice, Expect, Grounding, PromptStyle};
use support::stub::{chat_reply, image_payloads, redact_images, Stub};

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Compare against a checked-in fixture; `BAMI_BLESS=1` rewrites it.
fn assert_golden(name: &str, actual: &str) {
    let path = fixture(name);
    if std::env::var_os("BAMI_BLESS").is_some() {
        std::fs::write(&path, format!("{actual}\n")).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected.trim_end_matches('\n'), "request body differs from {name}");
}

fn screenshot() -> Raster {
    let mut img = Raster::filled(ImageDims::new(64, 48).unwrap(), [200, 200, 200]);
    img.fill_box(BBox::new(10, 10, 30, 20).unwrap(), GREEN);
    img
}

fn config(stub: &Stub) -> HttpConfig {
    let mut cfg = HttpConfig::new(stub.endpoint.clone(), "ui-tars-7b");
    cfg.retry_backoff_ms = 1;
    cfg
}

fn png_dims(b64: &str) -> (u32, u32) {
    let bytes = base64::engine::general_purpose::STANDARD.decode(b64).unwrap();
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let reader = decoder.read_info().unwrap();
    let info = reader.info();
    (info.width, info.height)
}

#[test]
fn grounding_request_is_golden() {
    let stub = Stub::start(vec![(200, chat_reply("<|box_start|>(10,12),(30,20)<|box_end|>"))]);
    let pred = http_ground(&config(&stub), "Open the settings menu", &screenshot()).unwrap();
    assert_eq!(
        pred.target,
        Grounding::Box {
            bbox: BBox::new(10, 12, 30, 20).unwrap()
        }
    );
    let reqs = stub.requests();
    assert_eq!(reqs.len(), 1);
    assert_eq!(reqs[0].url, "/v1/chat/completions");
    assert_eq!(reqs[0].content_type.as_deref(), Some("application/json"));
    assert_eq!(reqs[0].authorization, None);
    let images = image_payloads(&reqs[0].body);
    assert_eq!(images.len(), 1);
    assert_eq!(png_dims(&images[0]), (64, 48));
    assert_golden("ground_request.json", &redact_images(&reqs[0].body));
}

#[test]
fn correction_request_is_golden() {
    let reply = "<analysis>Box 2 covers the gear icon.</analysis>\n<answer>2</answer>\n<reason>Matches the instruction.</reason>";
    let stub = Stub::start(vec![(200, chat_reply(reply))]);
    let mut a = screenshot();
    a.fill_box(BBox::new(0, 0, 3, 3).unwrap(), GREEN);
    let mut b = screenshot();
    b.fill_box(BBox::new(0, 0, 3, 3).unwrap(), RED);
    let answer = http_correct(&config(&stub), "Open the settings menu", &a, &b, PromptStyle::CotKp).unwrap();
    assert_eq!(answer.choice, Choice::Second);
    assert_eq!(answer.reason.as_deref(), Some("Matches the instruction."));
    let body = &stub.requests()[0].body;
    let images = image_payloads(body);
    assert_eq!(images.len(), 2);
    assert_ne!(images[0], images[1]);
    assert_golden("correct_request.json", &redact_images(body));
}

#[test]
fn vanilla_correction_prompt_differs() {
    let stub = Stub::start(vec![(200, chat_reply("<answer>1</answer>"))]);
    let img = screenshot();
    let answer = http_correct(&config(&stub), "q", &img, &img, PromptStyle::Vanilla).unwrap();
    assert_eq!(answer.choice, Choice::First);
    let body = &stub.requests()[0].body;
    assert!(!body.contains("KEY PRINCIPLES"));
}

#[test]
fn retries_then_succeeds() {
    let stub = Stub::start(vec![
        (500, "{}".into()),
        (500, "{}".into()),
        (200, chat_reply("(5, 6)")),
    ]);
    let mut cfg = config(&stub);
    cfg.max_retries = 2;
    cfg.output = Expect::Click;
    let pred = http_ground(&cfg, "q", &screenshot()).unwrap();
    assert_eq!(pred.target, Grounding::Click { click: Point::new(5, 6) });
    let reqs = stub.requests();
    assert_eq!(reqs.len(), 3);
    assert!(reqs.windows(2).all(|w| w[0].body == w[1].body));
}

#[test]
fn retry_budget_is_respected() {
    let stub = Stub::start(vec![(503, "busy".into()), (429, "slow down".into()), (502, "bad gateway".into())]);
    let mut cfg = config(&stub);
    cfg.max_retries = 2;
    match http_ground(&cfg, "q", &screenshot()) {
        Err(BackendError::Status { status: 502, body }) => assert_eq!(body, "bad gateway"),
        other => panic!("expected final 502, got {other:?}"),
    }
    assert_eq!(stub.requests().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let stub = Stub::start(vec![(400, "bad request".into()), (200, chat_reply("(1,1)"))]);
    let err = http_ground(&config(&stub), "q", &screenshot()).unwrap_err();
    assert!(matches!(err, BackendError::Status { status: 400, .. }));
    assert_eq!(stub.requests().len(), 1);
}

#[test]
fn unparseable_outputs_are_typed() {
    let stub = Stub::start(vec![(200, chat_reply("I cannot find it.")), (200, chat_reply("Both look fine."))]);
    let cfg = config(&stub);
    let err = http_ground(&cfg, "q", &screenshot()).unwrap_err();
    assert!(err.is_parse(), "{err:?}");
    let img = screenshot();
    let err = http_correct(&cfg, "q", &img, &img, PromptStyle::Cot).unwrap_err();
    assert!(err.is_unparseable_answer(), "{err:?}");
}

#[test]
fn malformed_reply_is_typed() {
    let stub = Stub::start(vec![(200, "not json".into()), (200, r#"{"choices": []}"#.into())]);
    let cfg = config(&stub);
    assert!(matches!(http_ground(&cfg, "q", &screenshot()), Err(BackendError::MalformedReply(_))));
    assert!(matches!(http_ground(&cfg, "q", &screenshot()), Err(BackendError::MalformedReply(_))));
}

#[test]
fn unreachable_endpoint_is_transport_error() {
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let mut cfg = HttpConfig::new(format!("http://127.0.0.1:{port}/v1"), "m");
    cfg.max_retries = 1;
    cfg.retry_backoff_ms = 1;
    match http_ground(&cfg, "q", &screenshot()) {
        Err(BackendError::Transport { attempts: 2, .. }) => {}
        other => panic!("expected transport error, got {other:?}"),
    }
}

#[test]
fn bearer_token_and_system_prompt() {
    let stub = Stub::start(vec![(200, chat_reply("<|box_start|>(1,1),(2,2)<|box_end|>"))]);
    let mut cfg = config(&stub);
    std::env::set_var("BAMI_WIRE_TEST_KEY", "sk-test");
    cfg.api_key_env = Some("BAMI_WIRE_TEST_KEY".into());
    cfg.system_prompt = Some("You are a GUI agent.".into());
    http_ground(&cfg, "q", &screenshot()).unwrap();
    let req = &stub.requests()[0];
    assert_eq!(req.authorization.as_deref(), Some("Bearer sk-test"));
    let v: serde_json::Value = serde_json::from_str(&req.body).unwrap();
    assert_eq!(v["messages"][0]["role"], "system");
    assert_eq!(v["messages"][0]["content"], "You are a GUI agent.");
    assert_eq!(v["messages"][1]["role"], "user");
}

#[test]
fn relative_coordinates_are_rescaled() {
    let stub = Stub::start(vec![(200, chat_reply("<|box_start|>(500,500),(1000,1000)<|box_end|>"))]);
    let mut cfg = config(&stub);
    cfg.coordinates = CoordinateSpace::Relative1000;
    let pred = http_ground(&cfg, "q", &screenshot()).unwrap();
    assert_eq!(
        pred.target,
        Grounding::Box {
            bbox: BBox::new(32, 24, 64, 48).unwrap()
        }
    );
}
