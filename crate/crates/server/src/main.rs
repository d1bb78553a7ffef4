use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::Parser;
use sara_core::interp::GestureTable;
use sara_core::users::UsersService;
use sara_server::{Server, ServerConfig, SessionConfig, SystemClock};

/// Authoritative server for shared AR sessions.
#[derive(Debug, Parser)]
#[command(name = "sara-server", version)]
struct Args {
    #[arg(long, default_value = "127.0.0.1")]
    bind: std::net::IpAddr,
    /// Port 0 picks a free port.
    #[arg(long, default_value_t = 7400)]
    tcp_port: u16,
    #[arg(long, default_value_t = 7401)]
    ws_port: u16,
    #[arg(long, default_value_t = 7402)]
    udp_port: u16,
    #[arg(long)]
    no_tcp: bool,
    #[arg(long)]
    no_udp: bool,
    /// External broker, e.g. mqtt://127.0.0.1:1883
    #[arg(long)]
    mqtt_url: Option<String>,
    #[arg(long)]
    snapshot_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 30_000)]
    snapshot_interval_ms: u64,
    /// JSON user store; in-memory when omitted.
    #[arg(long)]
    users_db: Option<PathBuf>,
    /// Session defaults and per-session overrides (models, conflict settings, alignment).
    #[arg(long)]
    session_config: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    conflict_window_ms: u64,
    #[arg(long, default_value = "info")]
    log_level: tracing::Level,
    /// Replaces the built-in gesture table.
    #[arg(long)]
    gesture_table: Option<PathBuf>,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    auto_create_sessions: bool,
    /// Force a PassTurn when the holder keeps the token longer than this.
    #[arg(long)]
    turn_timeout_ms: Option<u64>,
    /// Register users in the store, print `name user_id token` lines and exit.
    #[arg(long, value_name = "NAME")]
    add_user: Vec<String>,
}

fn fail(msg: impl std::fmt::Display) -> ! {
    eprintln!("sara-server: {msg}");
    std::process::exit(1)
}

#[tokio::main]
async fn main() {
    let args = Args::parse();
    tracing_subscriber::fmt().with_max_level(args.log_level).with_writer(std::io::stderr).init();

    let users = match &args.users_db {
        Some(path) => UsersService::open(path).unwrap_or_else(|e| fail(e)),
        None => UsersService::in_memory(),
    };
    if !args.add_user.is_empty() {
        for name in &args.add_user {
            let (id, token) = users.register(name).unwrap_or_else(|e| fail(e));
            println!("{name} {id} {token}");
        }
        return;
    }
    let session_config = match &args.session_config {
        Some(path) => {
            let text = std::fs::read_to_string(path).unwrap_or_else(|e| fail(format!("{}: {e}", path.display())));
            SessionConfig::from_json(&text).unwrap_or_else(|e| fail(format!("{}: {e}", path.display())))
        }
        None => SessionConfig::default(),
    };
    let gestures = match &args.gesture_table {
        Some(path) => GestureTable::load(path).unwrap_or_else(|e| fail(e)),
        None => GestureTable::default(),
    };
    let config = ServerConfig {
        bind: args.bind,
        tcp_port: (!args.no_tcp).then_some(args.tcp_port),
        ws_port: Some(args.ws_port),
        udp_port: (!args.no_udp).then_some(args.udp_port),
        mqtt_url: args.mqtt_url,
        snapshot_dir: args.snapshot_dir,
        snapshot_interval: Duration::from_millis(args.snapshot_interval_ms.max(1)),
        session_config,
        conflict_window_ms: args.conflict_window_ms,
        auto_create_sessions: args.auto_create_sessions,
        turn_timeout_ms: args.turn_timeout_ms,
        gestures,
    };
    let server = Server::start(config, Arc::new(users), Arc::new(SystemClock)).await.unwrap_or_else(|e| fail(e));
    for (name, addr) in [("tcp", server.tcp_addr()), ("websocket", server.ws_addr()), ("udp", server.udp_addr())] {
        if let Some(addr) = addr {
            tracing::info!("{name} listening on {addr}");
        }
    }
    let _ = tokio::signal::ctrl_c().await;
    if let Err(e) = server.shutdown().await {
        fail(e);
    }
}
