//! WebSocket transport: one JSON message per text frame.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::thread::JoinHandle;
use std::time::Duration;

use tungstenite::{Message, WebSocket};

use crate::protocol::{parse_request, ErrorCode, Response};
use crate::service::{Client, Service};

const POLL: Duration = Duration::from_millis(5);

/// A bound listener serving the protocol on a background thread.
pub struct Server {
    addr: SocketAddr,
    handle: JoinHandle<()>,
}

impl Server {
    pub fn bind(addr: impl std::net::ToSocketAddrs, service: Service) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let handle = std::thread::Builder::new()
            .name("accept".into())
            .spawn(move || accept_loop(listener, service))?;
        Ok(Self { addr, handle })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks for as long as the listener runs.
    pub fn join(self) {
        let _ = self.handle.join();
    }
}

fn accept_loop(listener: TcpListener, service: Service) {
    for stream in listener.incoming() {
        match stream {
            Ok(stream) => {
                let service = service.clone();
                let spawned = std::thread::Builder::new()
                    .name("connection".into())
                    .spawn(move || serve_connection(stream, &service));
                if let Err(e) = spawned {
                    log::warn!("cannot spawn connection thread: {e}");
                }
            }
            Err(e) => log::warn!("accept failed: {e}"),
        }
    }
}

fn send(ws: &mut WebSocket<TcpStream>, response: &Response) -> tungstenite::Result<()> {
    let text = serde_json::to_string(response).expect("responses serialize");
    ws.send(Message::text(text))
}

fn serve_connection(stream: TcpStream, service: &Service) {
    let peer = stream.peer_addr().ok();
    let mut ws = match tungstenite::accept(stream) {
        Ok(ws) => ws,
        Err(e) => {
            log::warn!("handshake with {peer:?} failed: {e}");
            return;
        }
    };
    if let Err(e) = ws.get_ref().set_read_timeout(Some(POLL)) {
        log::warn!("{peer:?}: {e}");
        return;
    }
    log::info!("client {peer:?} connected");
    let client = service.connect();
    if let Err(e) = pump(&mut ws, &client) {
        log::info!("client {peer:?} left: {e}");
    }
}

fn pump(ws: &mut WebSocket<TcpStream>, client: &Client) -> tungstenite::Result<()> {
    loop {
        match ws.read() {
            Ok(Message::Text(text)) => {
                let response = match parse_request(&text) {
                    Ok(request) => client.request(request),
                    Err(e) => e.into(),
                };
                send(ws, &response)?;
            }
            Ok(Message::Binary(_)) => {
                send(
                    ws,
                    &Response::error(
                        ErrorCode::Protocol,
                        "binary frames are not part of the protocol",
                    ),
                )?;
            }
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => return Err(e),
        }
        while let Ok(pushed) = client.inbox().try_recv() {
            send(ws, &pushed)?;
        }
    }
}
