use std::io::{ErrorKind, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};

use super::envelope::read_frame;
use super::{Connection, ListenEvent, Listener, ServerAddress, Transport, TransportError};

pub const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);
const ACCEPT_POLL: Duration = Duration::from_millis(5);

/// Plain TCP, one connection per request/response exchange.
#[derive(Debug, Clone)]
pub struct TcpTransport {
    pub io_timeout: Duration,
}

impl Default for TcpTransport {
    fn default() -> Self {
        Self {
            io_timeout: Duration::from_secs(30),
        }
    }
}

impl Transport for TcpTransport {
    fn dial(&self, addr: &ServerAddress, _round: u64) -> Result<Box<dyn Connection>, TransportError> {
        let endpoint = addr
            .endpoint
            .as_deref()
            .ok_or_else(|| TransportError::Refused(format!("{} has no endpoint", addr.id)))?;
        let mut last = TransportError::Refused(format!("{endpoint} did not resolve"));
        for sock in endpoint.to_socket_addrs()? {
            match TcpStream::connect_timeout(&sock, CONNECT_TIMEOUT) {
                Ok(stream) => return Ok(Box::new(TcpConnection::new(stream, self.io_timeout)?)),
                Err(e) => last = TransportError::Refused(format!("{endpoint}: {e}")),
            }
        }
        Err(last)
    }
}

pub struct TcpConnection {
    stream: TcpStream,
}

impl TcpConnection {
    fn new(stream: TcpStream, io_timeout: Duration) -> Result<Self, TransportError> {
        stream.set_nonblocking(false)?;
        stream.set_read_timeout(Some(io_timeout))?;
        stream.set_write_timeout(Some(io_timeout))?;
        stream.set_nodelay(true)?;
        Ok(Self { stream })
    }
}

impl Connection for TcpConnection {
    fn send_frame(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.stream.write_all(frame)?;
        Ok(())
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>, TransportError> {
        match read_frame(&mut self.stream)? {
            None => Err(TransportError::Closed),
            Some(frame) => Ok(frame?),
        }
    }
}

/// Accepts connections with a wall-clock window per round: the window opens
/// the first time `next` is called for a round and lasts `timeout`.
pub struct TcpServerListener {
    listener: TcpListener,
    io_timeout: Duration,
    window: Option<(u64, Instant)>,
}

impl TcpServerListener {
    pub fn bind(endpoint: &str, io_timeout: Duration) -> std::io::Result<Self> {
        let listener = TcpListener::bind(endpoint)?;
        listener.set_nonblocking(true)?;
        Ok(Self {
            listener,
            io_timeout,
            window: None,
        })
    }

    pub fn local_addr(&self) -> std::io::Result<std::net::SocketAddr> {
        self.listener.local_addr()
    }
}

impl Listener for TcpServerListener {
    fn next(&mut self, round: u64, timeout: Duration) -> ListenEvent {
        let deadline = match self.window {
            Some((r, d)) if r == round => d,
            _ => {
                let d = Instant::now() + timeout;
                self.window = Some((round, d));
                d
            }
        };
        loop {
            match self.listener.accept() {
                Ok((stream, _)) => match TcpConnection::new(stream, self.io_timeout) {
                    Ok(c) => return ListenEvent::Incoming(Box::new(c)),
                    Err(e) => log::warn!("dropping connection: {e}"),
                },
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return ListenEvent::Deadline;
                    }
                    std::thread::sleep(ACCEPT_POLL);
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
    }

    fn timestamp(&self, _round: u64) -> DateTime<Utc> {
        Utc::now()
    }
}
