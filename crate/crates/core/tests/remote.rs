mod common;

use common::{completion_body, StubServer};
use dealbench::agents::{
    chat_complete, AgentEndpoint, AgentError, ChatClient, ChatMessage, WireLog,
};

fn endpoint(url: &str, key_env: &str) -> AgentEndpoint {
    let mut e = AgentEndpoint::new(url, "stub-model", key_env);
    e.backoff_base_ms = 5;
    e.timeout_secs = 5.0;
    e
}

fn history() -> Vec<ChatMessage> {
    vec![ChatMessage::system("You are terse."), ChatMessage::user("Say hello.")]
}

#[test]
fn echo_completion() {
    std::env::set_var("DEALBENCH_TEST_KEY_ECHO", "sk-secret-echo");
    let server = StubServer::start(vec![(200, completion_body("Hello"))]);
    let e = endpoint(&server.url, "DEALBENCH_TEST_KEY_ECHO");
    assert_eq!(chat_complete(&e, &history()).unwrap(), "Hello");
    let req = server.requests.lock().unwrap()[0].clone();
    assert!(req.starts_with("POST /chat/completions"));
    let body: serde_json::Value =
        serde_json::from_str(req.split("\r\n\r\n").nth(1).unwrap()).unwrap();
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["messages"][1]["role"], "user");
    assert!(body.get("temperature").is_none());
    assert!(req.contains("Bearer sk-secret-echo"));
}

#[test]
fn retries_transient_failures() {
    std::env::set_var("DEALBENCH_TEST_KEY_RETRY", "k");
    let server = StubServer::start(vec![
        (500, "{}".into()),
        (500, "{}".into()),
        (200, completion_body("ok")),
    ]);
    let wire = WireLog::default();
    let client = ChatClient::new(endpoint(&server.url, "DEALBENCH_TEST_KEY_RETRY"))
        .with_wire_log(wire.clone());
    let c = client.complete(&history()).unwrap();
    assert_eq!((c.text.as_str(), c.retries), ("ok", 2));
    let entries = wire.entries();
    assert_eq!(entries.len(), 3);
    assert_eq!(
        entries.iter().map(|e| e.status).collect::<Vec<_>>(),
        [Some(500), Some(500), Some(200)]
    );
    let dump = serde_json::to_string(&entries).unwrap();
    assert!(!dump.contains("Bearer"));
}

#[test]
fn missing_key_fails_before_network() {
    let server = StubServer::start(vec![(200, completion_body("never"))]);
    let e = endpoint(&server.url, "DEALBENCH_TEST_KEY_DEFINITELY_UNSET");
    assert!(matches!(chat_complete(&e, &history()), Err(AgentError::Auth(_))));
    assert_eq!(server.hits(), 0);
}

#[test]
fn auth_errors_are_not_retried() {
    std::env::set_var("DEALBENCH_TEST_KEY_401", "k");
    let server = StubServer::start(vec![(401, "{}".into())]);
    let e = endpoint(&server.url, "DEALBENCH_TEST_KEY_401");
    assert!(matches!(chat_complete(&e, &history()), Err(AgentError::Auth(_))));
    assert_eq!(server.hits(), 1);
}

#[test]
fn rate_limit_exhausts_retries() {
    std::env::set_var("DEALBENCH_TEST_KEY_429", "k");
    let server = StubServer::start(vec![(429, "{}".into())]);
    let mut e = endpoint(&server.url, "DEALBENCH_TEST_KEY_429");
    e.max_retries = 2;
    assert!(matches!(
        chat_complete(&e, &history()),
        Err(AgentError::RateLimited { retries: 2 })
    ));
    assert_eq!(server.hits(), 3);
}

#[test]
fn empty_completion_is_an_error() {
    std::env::set_var("DEALBENCH_TEST_KEY_EMPTY", "k");
    let server = StubServer::start(vec![(200, completion_body("   "))]);
    let e = endpoint(&server.url, "DEALBENCH_TEST_KEY_EMPTY");
    assert!(matches!(chat_complete(&e, &history()), Err(AgentError::EmptyCompletion)));
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    std::env::set_var("DEALBENCH_TEST_KEY_DOWN", "k");
    let mut e = endpoint("http://127.0.0.1:9", "DEALBENCH_TEST_KEY_DOWN");
    e.max_retries = 1;
    assert!(matches!(
        chat_complete(&e, &history()),
        Err(AgentError::Transport { retries: 1, .. })
    ));
}
