//! Minimal HTTP host for the wire protocol.
//!
//! Used to expose a backend (typically [`super::SimBackend`]) to remote
//! clients and to exercise [`super::ExternalBackend`] over real sockets.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use log::debug;

use super::protocol::{dispatch, Reply};
use super::QualityBackend;

type Handler = dyn Fn(&str, &str) -> Reply + Send + Sync;

/// Background HTTP server; stops when dropped.
pub struct ProtocolServer {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    workers: Vec<JoinHandle<()>>,
}

impl ProtocolServer {
    /// Serves `backend` on `addr` (use port 0 for an ephemeral port).
    pub fn spawn<B: QualityBackend + 'static>(
        addr: &str,
        backend: Arc<B>,
        workers: usize,
    ) -> std::io::Result<Self> {
        Self::spawn_handler(addr, workers, move |path, body| dispatch(backend.as_ref(), path, body))
    }

    /// Serves an arbitrary `(path, body) -> Reply` handler.
    pub fn spawn_handler<F>(addr: &str, workers: usize, handler: F) -> std::io::Result<Self>
    where
        F: Fn(&str, &str) -> Reply + Send + Sync + 'static,
    {
        let server = tiny_http::Server::http(addr).map_err(std::io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("server is not bound to an IP socket"))?;
        let server = Arc::new(server);
        let handler: Arc<Handler> = Arc::new(handler);
        let workers = (0..workers.max(1))
            .map(|_| {
                let server = Arc::clone(&server);
                let handler = Arc::clone(&handler);
                std::thread::spawn(move || serve_loop(&server, handler.as_ref()))
            })
            .collect();
        Ok(Self { server, addr, workers })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server is shut down from another thread.
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn serve_loop(server: &tiny_http::Server, handler: &Handler) {
    for mut request in server.incoming_requests() {
        let reply = if *request.method() != tiny_http::Method::Post {
            Reply { status: 405, body: r#"{"error":"only POST is supported"}"#.into() }
        } else {
            let mut body = String::new();
            match request.as_reader().read_to_string(&mut body) {
                Ok(_) => handler(request.url(), &body),
                Err(e) => Reply { status: 400, body: format!(r#"{{"error":"unreadable body: {e}"}}"#) },
            }
        };
        debug!("{} -> {}", request.url(), reply.status);
        let header = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..])
            .expect("static header");
        let response = tiny_http::Response::from_string(reply.body)
            .with_status_code(reply.status)
            .with_header(header);
        let _ = request.respond(response);
    }
}

impl Drop for ProtocolServer {
    fn drop(&mut self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}
