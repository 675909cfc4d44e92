//! Scripted WebSocket clients against a live `balsim serve`.

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.json"))
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn spawn(name: &str, port: u16) -> Server {
    let child = Command::new(env!("CARGO_BIN_EXE_balsim"))
        .args(["serve", "--scenario"])
        .arg(scenario(name))
        .args(["--port", &port.to_string()])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    Server(child)
}

async fn connect(port: u16) -> Ws {
    let deadline = Instant::now() + Duration::from_secs(20);
    loop {
        match connect_async(format!("ws://127.0.0.1:{port}")).await {
            Ok((ws, _)) => return ws,
            Err(e) if Instant::now() > deadline => panic!("server never came up: {e}"),
            Err(_) => tokio::time::sleep(Duration::from_millis(50)).await,
        }
    }
}

async fn next_json(ws: &mut Ws) -> Value {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(5), ws.next())
            .await
            .expect("no message within 5 s")
            .expect("stream closed")
            .expect("websocket error");
        if let Message::Text(t) = msg {
            return serde_json::from_str(&t).unwrap();
        }
    }
}

/// Next message of the given type, skipping others.
async fn next_of(ws: &mut Ws, kind: &str) -> Value {
    loop {
        let v = next_json(ws).await;
        if v["type"] == kind {
            return v;
        }
    }
}

async fn send(ws: &mut Ws, v: Value) {
    ws.send(Message::text(v.to_string())).await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn steering_session_meets_rate_latency_and_balance_toggles() {
    let port = free_port();
    let _server = spawn("giant_to_dwarf", port);
    let mut ws = connect(port).await;

    let hello = next_json(&mut ws).await;
    assert_eq!(hello["type"], "hello");
    assert_eq!(hello["protocol"], 1);
    assert_eq!(hello["role"], "steer");

    // frame rate over two seconds
    let start = Instant::now();
    let mut frames = 0;
    while start.elapsed() < Duration::from_secs(2) {
        let f = next_of(&mut ws, "state").await;
        assert!(f["joints"].as_array().unwrap().len() > 12);
        assert!(f["com"].as_array().unwrap().len() == 3);
        assert!(f["ellipse"]["axes"].as_array().is_some());
        frames += 1;
    }
    let fps = frames as f64 / start.elapsed().as_secs_f64();

    // reach far forward and drop the balance constraint
    for (task, y) in [("l_hand", 0.12), ("r_hand", -0.12)] {
        send(&mut ws, json!({"type": "set_target", "task": task, "pos": [0.8, y, 0.45]})).await;
    }
    let sent = Instant::now();
    send(&mut ws, json!({"type": "toggle", "what": "balance", "on": false})).await;
    let off_latency = loop {
        let f = next_of(&mut ws, "state").await;
        if f["balance"] == false {
            break sent.elapsed();
        }
    };
    let deadline = Instant::now() + Duration::from_secs(15);
    let mut min_off = f64::INFINITY;
    while min_off >= 0.0 {
        assert!(Instant::now() < deadline, "delta never went negative (min {min_off})");
        let f = next_of(&mut ws, "state").await;
        if let Some(d) = f["delta"].as_f64() {
            min_off = min_off.min(d);
        }
    }

    let sent = Instant::now();
    send(&mut ws, json!({"type": "toggle", "what": "balance", "on": true})).await;
    let on_latency = loop {
        let f = next_of(&mut ws, "state").await;
        if f["balance"] == true {
            break sent.elapsed();
        }
    };
    let deadline = Instant::now() + Duration::from_secs(10);
    let recovered = loop {
        assert!(Instant::now() < deadline, "delta did not recover after balance was re-enabled");
        let f = next_of(&mut ws, "state").await;
        if f["delta"].as_f64().is_some_and(|d| d >= 0.0) {
            break f["delta"].as_f64().unwrap();
        }
    };

    println!(
        "criterion 10: {} - {fps:.1} frames/s, min delta off {min_off:.3e}, recovered to {recovered:.3e}, latency off {:.0} ms / on {:.0} ms",
        if fps >= 25.0 && off_latency.as_millis() < 100 && on_latency.as_millis() < 100 { "PASS" } else { "FAIL" },
        off_latency.as_secs_f64() * 1e3,
        on_latency.as_secs_f64() * 1e3,
    );
    assert!(fps >= 25.0, "{fps} frames/s");
    assert!(off_latency < Duration::from_millis(100), "{off_latency:?}");
    assert!(on_latency < Duration::from_millis(100), "{on_latency:?}");
}

#[tokio::test(flavor = "multi_thread")]
async fn observers_are_read_only_and_errors_keep_the_connection() {
    let port = free_port();
    let _server = spawn("drill", port);
    let mut steer = connect(port).await;
    assert_eq!(next_json(&mut steer).await["role"], "steer");
    let mut watch = connect(port).await;
    assert_eq!(next_json(&mut watch).await["role"], "observe");

    send(&mut watch, json!({"type": "reset"})).await;
    let e = next_of(&mut watch, "error").await;
    assert!(e["message"].as_str().unwrap().contains("read-only"));
    next_of(&mut watch, "state").await;

    steer.send(Message::text("{not json")).await.unwrap();
    let e = next_of(&mut steer, "error").await;
    assert!(e["message"].as_str().unwrap().contains("malformed"));
    send(&mut steer, json!({"type": "set_target", "task": "nope", "pos": [0, 0, 1]})).await;
    let e = next_of(&mut steer, "error").await;
    assert!(e["message"].as_str().unwrap().contains("unknown task"));
    send(&mut steer, json!({"type": "toggle", "what": "guide:missing", "on": true})).await;
    next_of(&mut steer, "error").await;

    // unknown fields are ignored: the command goes through and the target moves
    send(
        &mut steer,
        json!({"type": "set_target", "task": "drill", "pos": [0.7, -0.18, 1.35], "color": "red"}),
    )
    .await;
    let deadline = Instant::now() + Duration::from_secs(2);
    loop {
        assert!(Instant::now() < deadline, "target never updated");
        let v = next_json(&mut steer).await;
        assert_ne!(v["type"], "error", "{v}");
        if v["targets"]["drill"][0].as_f64() == Some(0.7) {
            break;
        }
    }
    send(&mut steer, json!({"type": "toggle", "what": "guide:bit", "on": false})).await;
    send(&mut steer, json!({"type": "reset"})).await;
    let f = next_of(&mut steer, "state").await;
    assert_eq!(f["type"], "state");

    // the steering role frees up when its holder leaves
    steer.close(None).await.unwrap();
    drop(steer);
    tokio::time::sleep(Duration::from_millis(200)).await;
    let mut next = connect(port).await;
    assert_eq!(next_json(&mut next).await["role"], "steer");
}

#[test]
fn busy_port_is_a_startup_error() {
    let holder = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = holder.local_addr().unwrap().port();
    let out = Command::new(env!("CARGO_BIN_EXE_balsim"))
        .args(["serve", "--scenario"])
        .arg(scenario("standing"))
        .args(["--port", &port.to_string()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cannot listen"), "{err}");
}
