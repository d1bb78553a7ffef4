//! Byte-level plumbing: each transport becomes a pair of text-frame channels.

use std::net::SocketAddr;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use rumqttc::{AsyncClient, Event, MqttOptions, Packet, QoS};
use sara_core::protocol::{mqtt_inbox_topic, mqtt_session_topic, ConnectionMethod, UDP_MAX_DATAGRAM};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpStream, UdpSocket};
use tokio::sync::mpsc;
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::Message;

use crate::ClientError;

/// Where and how to reach the server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(SocketAddr),
    /// Full URL, e.g. `ws://127.0.0.1:7401/`.
    WebSocket(String),
    Udp(SocketAddr),
    /// Broker address; the server must be attached to the same broker.
    Mqtt { host: String, port: u16 },
}

impl Endpoint {
    pub fn method(&self) -> ConnectionMethod {
        match self {
            Self::Tcp(_) => ConnectionMethod::Tcp,
            Self::WebSocket(_) => ConnectionMethod::Websocket,
            Self::Udp(_) => ConnectionMethod::Udp,
            Self::Mqtt { .. } => ConnectionMethod::Mqtt,
        }
    }
}

pub(crate) struct Link {
    pub out: mpsc::UnboundedSender<String>,
    pub incoming: mpsc::UnboundedReceiver<String>,
    pub tasks: Vec<JoinHandle<()>>,
}

fn transport_err(e: impl std::fmt::Display) -> ClientError {
    ClientError::Transport(e.to_string())
}

pub(crate) async fn open(endpoint: &Endpoint, session_id: &str, mqtt_client_id: &str) -> Result<Link, ClientError> {
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<String>();
    let (in_tx, in_rx) = mpsc::unbounded_channel::<String>();
    let mut tasks = Vec::new();
    match endpoint {
        Endpoint::Tcp(addr) => {
            let stream = TcpStream::connect(addr).await.map_err(transport_err)?;
            let _ = stream.set_nodelay(true);
            let (r, mut w) = stream.into_split();
            tasks.push(tokio::spawn(async move {
                while let Some(frame) = out_rx.recv().await {
                    if w.write_all(format!("{frame}\n").as_bytes()).await.is_err() {
                        break;
                    }
                }
                let _ = w.shutdown().await;
            }));
            tasks.push(tokio::spawn(async move {
                let mut lines = BufReader::new(r).lines();
                while let Ok(Some(line)) = lines.next_line().await {
                    if !line.trim().is_empty() && in_tx.send(line).is_err() {
                        break;
                    }
                }
            }));
        }
        Endpoint::WebSocket(url) => {
            let (ws, _) = tokio_tungstenite::connect_async_with_config(url.as_str(), None, true).await.map_err(transport_err)?;
            let (mut sink, mut stream) = ws.split();
            tasks.push(tokio::spawn(async move {
                while let Some(frame) = out_rx.recv().await {
                    if sink.send(Message::Text(frame.into())).await.is_err() {
                        break;
                    }
                }
                let _ = sink.close().await;
            }));
            tasks.push(tokio::spawn(async move {
                while let Some(Ok(msg)) = stream.next().await {
                    let text = match msg {
                        Message::Text(t) => t.as_str().to_string(),
                        Message::Binary(b) => String::from_utf8_lossy(&b).into_owned(),
                        Message::Close(_) => break,
                        _ => continue,
                    };
                    if in_tx.send(text).is_err() {
                        break;
                    }
                }
            }));
        }
        Endpoint::Udp(addr) => {
            let local: SocketAddr = if addr.is_ipv4() { "0.0.0.0:0" } else { "[::]:0" }.parse().expect("valid");
            let sock = std::sync::Arc::new(UdpSocket::bind(local).await.map_err(transport_err)?);
            sock.connect(addr).await.map_err(transport_err)?;
            let tx_sock = sock.clone();
            tasks.push(tokio::spawn(async move {
                while let Some(frame) = out_rx.recv().await {
                    if frame.len() > UDP_MAX_DATAGRAM {
                        tracing::warn!(len = frame.len(), "frame too large for UDP, dropped");
                        continue;
                    }
                    let _ = tx_sock.send(frame.as_bytes()).await;
                }
            }));
            tasks.push(tokio::spawn(async move {
                let mut buf = vec![0u8; UDP_MAX_DATAGRAM + 1];
                while let Ok(n) = sock.recv(&mut buf).await {
                    if in_tx.send(String::from_utf8_lossy(&buf[..n]).into_owned()).is_err() {
                        break;
                    }
                }
            }));
        }
        Endpoint::Mqtt { host, port } => {
            let mut opts = MqttOptions::new(format!("sara-client-{mqtt_client_id}"), host.as_str(), *port);
            opts.set_keep_alive(Duration::from_secs(5));
            opts.set_max_packet_size(64 << 20, 64 << 20);
            let (client, mut eventloop) = AsyncClient::new(opts, 1024);
            client.subscribe(mqtt_inbox_topic(mqtt_client_id), QoS::AtLeastOnce).await.map_err(transport_err)?;
            // the subscription must be live before the hello goes out, or the Ack is lost
            let subscribed = async {
                loop {
                    match eventloop.poll().await {
                        Ok(Event::Incoming(Packet::SubAck(_))) => return Ok(()),
                        Ok(_) => {}
                        Err(e) => return Err(transport_err(e)),
                    }
                }
            };
            tokio::time::timeout(Duration::from_secs(5), subscribed).await.map_err(|_| ClientError::Timeout)??;
            tasks.push(tokio::spawn(async move {
                loop {
                    match eventloop.poll().await {
                        Ok(Event::Incoming(Packet::Publish(p))) => {
                            if in_tx.send(String::from_utf8_lossy(&p.payload).into_owned()).is_err() {
                                break;
                            }
                        }
                        Ok(_) => {}
                        Err(_) => break,
                    }
                }
            }));
            let topic = mqtt_session_topic(session_id);
            tasks.push(tokio::spawn(async move {
                while let Some(frame) = out_rx.recv().await {
                    if client.publish(topic.clone(), QoS::AtLeastOnce, false, frame).await.is_err() {
                        break;
                    }
                }
                let _ = client.disconnect().await;
            }));
        }
    }
    Ok(Link { out: out_tx, incoming: in_rx, tasks })
}
