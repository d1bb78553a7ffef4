//! Wire-level tests against a running server, using raw sockets instead of the client SDK.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use sara_core::protocol::{
    decode_event, decode_session_state, encode_event, encode_session_state, mqtt_inbox_topic, mqtt_session_topic,
    ConnectionMethod, Convention, DeviceProfile, EventEnvelope, NodeSpec, Payload, StateFormat,
};
use sara_core::users::UsersService;
use sara_core::{Node, SessionStatus, ROOT_ID};
use sara_server::{Server, ServerConfig, ServerError, SystemClock};
use serde_json::json;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpStream, UdpSocket};
use tokio_tungstenite::tungstenite::Message;

const WAIT: Duration = Duration::from_secs(5);

struct Fixture {
    server: Server,
    users: Arc<UsersService>,
}

impl Fixture {
    async fn start(config: ServerConfig) -> Self {
        let users = Arc::new(UsersService::with_seed(7));
        let server = Server::start(config, users.clone(), Arc::new(SystemClock)).await.unwrap();
        Self { server, users }
    }

    fn user(&self, name: &str) -> (String, String) {
        self.users.register(name).unwrap()
    }
}

fn hello(user: &str, token: &str, method: ConnectionMethod) -> EventEnvelope {
    EventEnvelope::new(
        user,
        "",
        Payload::NewUserConnection {
            user_id: user.into(),
            connection_method: method,
            convention: Convention::RightHanded,
            device_profile: DeviceProfile::DesktopPointer,
            token: Some(token.into()),
            client_id: None,
        },
    )
}

fn join(user: &str, session: &str) -> EventEnvelope {
    EventEnvelope::new(
        user,
        session,
        Payload::ConnectToSession { session_id: session.into(), user_id: user.into(), reception_format: StateFormat::CustomJson },
    )
}

fn add(user: &str, session: &str, id: &str) -> EventEnvelope {
    EventEnvelope::new(user, session, Payload::AddNode { parent_id: ROOT_ID.into(), node: NodeSpec::from_node(&Node::new(id)) })
}

fn state(e: &EventEnvelope) -> SessionStatus {
    match &e.payload {
        Payload::SetSessionState { format, state_base64 } => decode_session_state(state_base64, *format).unwrap(),
        p => panic!("expected state, got {p:?}"),
    }
}

struct TcpPeer {
    lines: tokio::io::Lines<BufReader<OwnedReadHalf>>,
    w: OwnedWriteHalf,
}

impl TcpPeer {
    async fn connect(addr: SocketAddr) -> Self {
        let (r, w) = TcpStream::connect(addr).await.unwrap().into_split();
        Self { lines: BufReader::new(r).lines(), w }
    }

    async fn send(&mut self, e: &EventEnvelope) {
        self.send_raw(&encode_event(e)).await;
    }

    async fn send_raw(&mut self, text: &str) {
        self.w.write_all(format!("{text}\n").as_bytes()).await.unwrap();
    }

    async fn recv(&mut self) -> Option<EventEnvelope> {
        let line = tokio::time::timeout(WAIT, self.lines.next_line()).await.expect("timed out").ok()??;
        Some(decode_event(&line).unwrap())
    }

    async fn handshake(addr: SocketAddr, user: &str, token: &str, session: &str) -> (Self, SessionStatus) {
        let mut p = Self::connect(addr).await;
        p.send(&hello(user, token, ConnectionMethod::Tcp)).await;
        assert!(matches!(p.recv().await.unwrap().payload, Payload::Ack { .. }));
        p.send(&join(user, session)).await;
        let st = state(&p.recv().await.unwrap());
        (p, st)
    }
}

type WsStream = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<TcpStream>>;

struct WsPeer(WsStream);

impl WsPeer {
    async fn connect(addr: SocketAddr) -> Self {
        let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/")).await.unwrap();
        Self(ws)
    }

    async fn send(&mut self, e: &EventEnvelope) {
        self.0.send(Message::Text(encode_event(e).into())).await.unwrap();
    }

    async fn recv(&mut self) -> Option<EventEnvelope> {
        loop {
            match tokio::time::timeout(WAIT, self.0.next()).await.expect("timed out")? {
                Ok(Message::Text(t)) => return Some(decode_event(t.as_str()).unwrap()),
                Ok(Message::Close(_)) | Err(_) => return None,
                Ok(_) => {}
            }
        }
    }
}

async fn http_get(addr: SocketAddr, path: &str) -> String {
    let mut s = TcpStream::connect(addr).await.unwrap();
    s.write_all(format!("GET {path} HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").as_bytes()).await.unwrap();
    let mut body = String::new();
    tokio::io::AsyncReadExt::read_to_string(&mut s, &mut body).await.unwrap();
    body
}

#[tokio::test]
async fn tcp_handshake_and_empty_session() {
    let f = Fixture::start(ServerConfig::ephemeral()).await;
    let (id, token) = f.user("alice");
    let (_p, st) = TcpPeer::handshake(f.server.tcp_addr().unwrap(), &id, &token, "s1").await;
    assert_eq!(st.len(), 1);
    assert!(st.contains(ROOT_ID));
}

#[tokio::test]
async fn first_frame_must_be_new_user_connection() {
    let f = Fixture::start(ServerConfig::ephemeral()).await;
    let mut p = TcpPeer::connect(f.server.tcp_addr().unwrap()).await;
    p.send(&EventEnvelope::new("u", "s", Payload::Click { node_id: ROOT_ID.into(), world_point: None, tool: None })).await;
    match p.recv().await.unwrap().payload {
        Payload::EventRejected { rule_id, reason, .. } => {
            assert_eq!(rule_id, "protocol.violation");
            assert!(reason.contains("ProtocolViolation"));
        }
        other => panic!("{other:?}"),
    }
    assert!(p.recv().await.is_none(), "connection closes after a protocol violation");
}

#[tokio::test]
async fn wrong_token_is_refused() {
    let f = Fixture::start(ServerConfig::ephemeral()).await;
    let (id, _) = f.user("alice");
    let mut p = TcpPeer::connect(f.server.tcp_addr().unwrap()).await;
    p.send(&hello(&id, "not-the-token", ConnectionMethod::Tcp)).await;
    match p.recv().await.unwrap().payload {
        Payload::EventRejected { rule_id, .. } => assert_eq!(rule_id, "auth.bad_token"),
        other => panic!("{other:?}"),
    }
    assert!(p.recv().await.is_none());
}

#[tokio::test]
async fn announced_method_must_match_transport() {
    let f = Fixture::start(ServerConfig::ephemeral()).await;
    let (id, token) = f.user("alice");
    let mut p = TcpPeer::connect(f.server.tcp_addr().unwrap()).await;
    p.send(&hello(&id, &token, ConnectionMethod::Websocket)).await;
    match p.recv().await.unwrap().payload {
        Payload::EventRejected { rule_id, .. } => assert_eq!(rule_id, "protocol.method_mismatch"),
        other => panic!("{other:?}"),
    }
}

#[tokio::test]
async fn events_before_joining_are_rejected() {
    let f = Fixture::start(ServerConfig::ephemeral()).await;
    let (id, token) = f.user("alice");
    let mut p = TcpPeer::connect(f.server.tcp_addr().unwrap()).await;
    p.send(&hello(&id, &token, ConnectionMethod::Tcp)).await;
    p.recv().await.unwrap();
    p.send(&add(&id, "s", "n1")).await;
    match p.recv().await.unwrap().payload {
        Payload::EventRejected { rule_id, .. } => assert_eq!(rule_id, "session.not_joined"),
        other => panic!("{other:?}"),
    }
    p.send_raw("{not json").await;
    match p.recv().await.unwrap().payload {
        Payload::EventRejected { rule_id, .. } => assert_eq!(rule_id, "protocol.malformed"),
        other => panic!("{other:?}"),
    }
}

#[tokio::test]
async fn tcp_and_websocket_clients_share_a_session() {
    let f = Fixture::start(ServerConfig::ephemeral()).await;
    let (a, ta) = f.user("alice");
    let (b, tb) = f.user("bob");
    let (mut pa, _) = TcpPeer::handshake(f.server.tcp_addr().unwrap(), &a, &ta, "mix").await;

    let mut pb = WsPeer::connect(f.server.ws_addr().unwrap()).await;
    pb.send(&hello(&b, &tb, ConnectionMethod::Websocket)).await;
    assert!(matches!(pb.recv().await.unwrap().payload, Payload::Ack { .. }));
    pb.send(&join(&b, "mix")).await;
    state(&pb.recv().await.unwrap());

    let e = add(&a, "mix", "cube");
    pa.send(&e).await;
    let echo_a = pa.recv().await.unwrap();
    let echo_b = pb.recv().await.unwrap();
    assert_eq!(echo_a.event_id, e.event_id);
    assert_eq!(echo_a, echo_b);

    let up = EventEnvelope::new(
        &b,
        "mix",
        Payload::IncrementalUpdate { node_id: "cube".into(), property_path: "transform.position".into(), new_value: json!([1.0, 0.0, 0.0]) },
    );
    pb.send(&up).await;
    assert_eq!(pa.recv().await.unwrap().event_id, up.event_id);
    assert_eq!(pb.recv().await.unwrap().event_id, up.event_id);

    let info = f.server.session_info("mix").unwrap();
    assert_eq!(info.broadcast_order, vec![e.event_id, up.event_id]);
    assert_eq!(info.status.node("cube").unwrap().transform.position, [1.0, 0.0, 0.0]);
    assert_eq!(info.max_in_pipeline, 1);
}

#[tokio::test]
async fn health_lists_transports_and_sessions() {
    let f = Fixture::start(ServerConfig::ephemeral()).await;
    let (id, token) = f.user("alice");
    let (_p, _) = TcpPeer::handshake(f.server.tcp_addr().unwrap(), &id, &token, "room").await;
    let body = http_get(f.server.ws_addr().unwrap(), "/health").await;
    assert!(body.contains("transports: tcp,websocket,udp"), "{body}");
    assert!(body.contains("sessions: 1"), "{body}");
    assert!(body.contains("session room revision 0 members 1"), "{body}");
}

#[tokio::test]
async fn second_server_on_same_port_fails() {
    let f = Fixture::start(ServerConfig::ephemeral()).await;
    let port = f.server.tcp_addr().unwrap().port();
    let config = ServerConfig { tcp_port: Some(port), ws_port: None, udp_port: None, ..ServerConfig::default() };
    let err = Server::start(config, Arc::new(UsersService::in_memory()), Arc::new(SystemClock)).await.err().unwrap();
    assert!(matches!(err, ServerError::PortInUse(_)), "{err}");
}

#[tokio::test]
async fn unreachable_broker_is_reported() {
    let free = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let config = ServerConfig { mqtt_url: Some(format!("mqtt://127.0.0.1:{free}")), ..ServerConfig::ephemeral() };
    let err = Server::start(config, Arc::new(UsersService::in_memory()), Arc::new(SystemClock)).await.err().unwrap();
    assert!(matches!(err, ServerError::BrokerUnreachable(_)), "{err}");
}

#[tokio::test]
async fn auto_create_can_be_disabled() {
    let config = ServerConfig { auto_create_sessions: false, ..ServerConfig::ephemeral() };
    let f = Fixture::start(config).await;
    let (id, token) = f.user("alice");
    let mut p = TcpPeer::connect(f.server.tcp_addr().unwrap()).await;
    p.send(&hello(&id, &token, ConnectionMethod::Tcp)).await;
    p.recv().await.unwrap();
    p.send(&join(&id, "nope")).await;
    match p.recv().await.unwrap().payload {
        Payload::EventRejected { rule_id, .. } => assert_eq!(rule_id, "session.unknown"),
        other => panic!("{other:?}"),
    }
}

#[tokio::test]
async fn udp_handshake_and_state_policy() {
    let f = Fixture::start(ServerConfig::ephemeral()).await;
    let (id, token) = f.user("alice");
    let sock = UdpSocket::bind("127.0.0.1:0").await.unwrap();
    sock.connect(f.server.udp_addr().unwrap()).await.unwrap();
    let mut buf = vec![0u8; 70_000];
    let mut recv = async |sock: &UdpSocket| {
        let n = tokio::time::timeout(WAIT, sock.recv(&mut buf)).await.unwrap().unwrap();
        decode_event(std::str::from_utf8(&buf[..n]).unwrap()).unwrap()
    };
    sock.send(encode_event(&hello(&id, &token, ConnectionMethod::Udp)).as_bytes()).await.unwrap();
    assert!(matches!(recv(&sock).await.payload, Payload::Ack { .. }));
    sock.send(encode_event(&join(&id, "u")).as_bytes()).await.unwrap();
    match recv(&sock).await.payload {
        Payload::EventRejected { rule_id, .. } => assert_eq!(rule_id, "protocol.udp_policy"),
        other => panic!("{other:?}"),
    }
    sock.send(encode_event(&add(&id, "u", "n1")).as_bytes()).await.unwrap();
    assert!(matches!(recv(&sock).await.payload, Payload::AddNode { .. }));
    let st = SessionStatus::new();
    let push = EventEnvelope::new(
        &id,
        "u",
        Payload::SetSessionState { format: StateFormat::CustomJson, state_base64: encode_session_state(&st, StateFormat::CustomJson).unwrap() },
    );
    sock.send(encode_event(&push).as_bytes()).await.unwrap();
    match recv(&sock).await.payload {
        Payload::EventRejected { rule_id, .. } => assert_eq!(rule_id, "protocol.udp_policy"),
        other => panic!("{other:?}"),
    }
}

#[tokio::test]
async fn disconnected_client_does_not_block_the_session() {
    let f = Fixture::start(ServerConfig::ephemeral()).await;
    let (a, ta) = f.user("alice");
    let (b, tb) = f.user("bob");
    let (mut pa, _) = TcpPeer::handshake(f.server.tcp_addr().unwrap(), &a, &ta, "s").await;
    let (pb, _) = TcpPeer::handshake(f.server.tcp_addr().unwrap(), &b, &tb, "s").await;
    drop(pb);
    for i in 0..50 {
        pa.send(&add(&a, "s", &format!("n{i}"))).await;
        assert!(matches!(pa.recv().await.unwrap().payload, Payload::AddNode { .. }));
    }
    assert_eq!(f.server.session_info("s").unwrap().revision, 50);
    assert_eq!(f.server.session_info("s").unwrap().members.len(), 1);
}

#[tokio::test]
async fn sessions_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let users = Arc::new(UsersService::with_seed(3));
    let (id, token) = users.register("alice").unwrap();
    let config = ServerConfig { snapshot_dir: Some(dir.path().to_path_buf()), ..ServerConfig::ephemeral() };
    let server = Server::start(config.clone(), users.clone(), Arc::new(SystemClock)).await.unwrap();
    let (mut p, _) = TcpPeer::handshake(server.tcp_addr().unwrap(), &id, &token, "keep").await;
    for i in 0..5 {
        p.send(&add(&id, "keep", &format!("n{i}"))).await;
        p.recv().await.unwrap();
    }
    let before = server.session_info("keep").unwrap();
    server.shutdown().await.unwrap();
    assert!(p.recv().await.is_none(), "clients are disconnected on shutdown");

    let server = Server::start(config, users.clone(), Arc::new(SystemClock)).await.unwrap();
    let after = server.session_info("keep").unwrap();
    assert_eq!(after.revision, before.revision);
    assert_eq!(after.state_hash, before.state_hash);
    let (_p, st) = TcpPeer::handshake(server.tcp_addr().unwrap(), &id, &token, "keep").await;
    assert_eq!(st.len(), 6);
}

fn start_broker() -> u16 {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let config: rumqttd::Config = serde_json::from_value(json!({
        "id": 0,
        "router": {"max_connections": 64, "max_outgoing_packet_count": 200, "max_segment_size": 104857600, "max_segment_count": 10},
        "v4": {"1": {
            "name": "v4-1",
            "listen": format!("127.0.0.1:{port}"),
            "next_connection_delay_ms": 1,
            "connections": {"connection_timeout_ms": 60000, "max_payload_size": 20971520, "max_inflight_count": 100, "dynamic_filters": true}
        }}
    }))
    .unwrap();
    std::thread::spawn(move || {
        let _ = rumqttd::Broker::new(config).start();
    });
    for _ in 0..100 {
        if std::net::TcpStream::connect(("127.0.0.1", port)).is_ok() {
            return port;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    panic!("broker did not come up");
}

#[tokio::test]
async fn mqtt_round_trip_through_a_broker() {
    use rumqttc::{AsyncClient, Event, MqttOptions, Packet, QoS};
    let port = start_broker();
    let config = ServerConfig { mqtt_url: Some(format!("mqtt://127.0.0.1:{port}")), ..ServerConfig::ephemeral() };
    let f = Fixture::start(config).await;
    assert_eq!(f.server.transports(), ["tcp", "websocket", "udp", "mqtt"]);
    let body = http_get(f.server.ws_addr().unwrap(), "/health").await;
    assert!(body.contains("transports: tcp,websocket,udp,mqtt"), "{body}");

    let (id, token) = f.user("alice");
    let mut opts = MqttOptions::new("test-client", "127.0.0.1", port);
    opts.set_max_packet_size(1 << 20, 1 << 20);
    let (client, mut events) = AsyncClient::new(opts, 64);
    client.subscribe(mqtt_inbox_topic("dev-1"), QoS::AtLeastOnce).await.unwrap();
    let (tx, mut rx) = tokio::sync::mpsc::unbounded_channel();
    tokio::spawn(async move {
        while let Ok(ev) = events.poll().await {
            match ev {
                Event::Incoming(Packet::Publish(p)) => {
                    let _ = tx.send(decode_event(std::str::from_utf8(&p.payload).unwrap()).unwrap());
                }
                Event::Incoming(Packet::SubAck(_)) => {
                    let _ = tx.send(EventEnvelope::new("", "", Payload::RequestTurn {}));
                }
                _ => {}
            }
        }
    });
    assert!(matches!(rx.recv().await.unwrap().payload, Payload::RequestTurn {}), "suback first");
    let mut h = hello(&id, &token, ConnectionMethod::Mqtt);
    if let Payload::NewUserConnection { client_id, .. } = &mut h.payload {
        *client_id = Some("dev-1".into());
    }
    let topic = mqtt_session_topic("m");
    client.publish(&topic, QoS::AtLeastOnce, false, encode_event(&h)).await.unwrap();
    let ack = tokio::time::timeout(WAIT, rx.recv()).await.unwrap().unwrap();
    assert_eq!(ack.payload, Payload::Ack { client_id: "dev-1".into() });
    client.publish(&topic, QoS::AtLeastOnce, false, encode_event(&join(&id, "m"))).await.unwrap();
    let st = state(&tokio::time::timeout(WAIT, rx.recv()).await.unwrap().unwrap());
    assert_eq!(st.len(), 1);
    let e = add(&id, "m", "n1");
    client.publish(&topic, QoS::AtLeastOnce, false, encode_event(&e)).await.unwrap();
    let echo = tokio::time::timeout(WAIT, rx.recv()).await.unwrap().unwrap();
    assert_eq!(echo.event_id, e.event_id);
}
