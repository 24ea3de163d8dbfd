use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use super::{NetError, Transport};
use crate::protocol::{self, DecodeError, FrameDecoder, Message};

/// Device side of a TCP connection to a verification server.
///
/// A reader thread decodes frames into a channel. Once the connection
/// fails the transport turns into a black hole: sends vanish and receives
/// time out, which the device's retry-then-fallback policy absorbs.
pub struct TcpTransport {
    stream: TcpStream,
    rx: Receiver<Result<Message, DecodeError>>,
    start: Instant,
    closed: bool,
}

impl TcpTransport {
    pub fn connect<A: ToSocketAddrs>(addr: A, timeout: Duration) -> io::Result<Self> {
        let mut last = None;
        for a in addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&a, timeout) {
                Ok(stream) => return Self::from_stream(stream),
                Err(e) => last = Some(e),
            }
        }
        Err(last.unwrap_or_else(|| io::Error::new(io::ErrorKind::NotFound, "no address")))
    }

    pub fn from_stream(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        let mut reader = stream.try_clone()?;
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut dec = FrameDecoder::new();
            let mut buf = [0u8; 8192];
            loop {
                let n = match reader.read(&mut buf) {
                    Ok(0) | Err(_) => return,
                    Ok(n) => n,
                };
                dec.push(&buf[..n]);
                loop {
                    match dec.next_message() {
                        Ok(Some(m)) => {
                            if tx.send(Ok(m)).is_err() {
                                return;
                            }
                        }
                        Ok(None) => break,
                        Err(e) => {
                            let _ = tx.send(Err(e));
                            return;
                        }
                    }
                }
            }
        });
        Ok(Self {
            stream,
            rx,
            start: Instant::now(),
            closed: false,
        })
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    fn close(&mut self) {
        self.closed = true;
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

fn sleep_until(start: Instant, deadline_ms: f64) {
    let now = start.elapsed().as_secs_f64() * 1000.0;
    if deadline_ms > now {
        thread::sleep(Duration::from_secs_f64((deadline_ms - now) / 1000.0));
    }
}

impl Transport for TcpTransport {
    fn now_ms(&mut self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1000.0
    }

    fn send(&mut self, msg: &Message) -> Result<(), NetError> {
        if self.closed {
            return Err(NetError::LinkClosed);
        }
        let frame = protocol::encode(msg).map_err(|e| NetError::Io(io::Error::other(e)))?;
        if let Err(e) = self.stream.write_all(&frame) {
            self.close();
            return Err(e.into());
        }
        Ok(())
    }

    fn recv_until(&mut self, deadline_ms: f64) -> Result<Option<Message>, NetError> {
        if self.closed {
            sleep_until(self.start, deadline_ms);
            return Ok(None);
        }
        let wait_ms = (deadline_ms - self.now_ms()).max(0.0);
        match self
            .rx
            .recv_timeout(Duration::from_secs_f64(wait_ms / 1000.0))
        {
            Ok(Ok(m)) => Ok(Some(m)),
            Ok(Err(e)) => {
                self.close();
                Err(e.into())
            }
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => {
                self.close();
                sleep_until(self.start, deadline_ms);
                Ok(None)
            }
        }
    }
}

/// A transport to an unreachable server: nothing is ever delivered.
pub struct BlackHoleTransport {
    start: Instant,
}

impl Default for BlackHoleTransport {
    fn default() -> Self {
        Self {
            start: Instant::now(),
        }
    }
}

impl Transport for BlackHoleTransport {
    fn now_ms(&mut self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1000.0
    }

    fn send(&mut self, _msg: &Message) -> Result<(), NetError> {
        Ok(())
    }

    fn recv_until(&mut self, deadline_ms: f64) -> Result<Option<Message>, NetError> {
        sleep_until(self.start, deadline_ms);
        Ok(None)
    }
}
