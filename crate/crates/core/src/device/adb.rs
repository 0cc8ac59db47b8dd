//! Real-device adapters: a native smart-socket client for the ADB server and
//! a fallback that shells out to a host `adb` binary.
//!
//! The smart-socket adapter runs commands on the device through the `shell:`
//! service, so script lines are reduced to their device-side form
//! (`adb shell X` becomes `X`). Host-level adb verbs such as `backup`,
//! `sideload` or `install` need the `AdbCli` adapter.

use std::io::{Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::protocol::{frame_request, parse_device_list, parse_hex_len};
use super::{DeviceDescriptor, DeviceEndpoint, DeviceError, DeviceSession, ExecOutcome, ExecRequest, ShellResult, TransportRecorder};
use crate::script::Interpreter;

const EXIT_MARKER: &str = "__DROIDPROBE_EXIT:";

#[derive(Debug, Clone)]
pub struct AdbServerClient {
    host: String,
    port: u16,
    connect_timeout: Duration,
    recorder: Arc<TransportRecorder>,
}

impl AdbServerClient {
    pub fn new(host: String, port: u16, connect_timeout: Duration, recorder: Arc<TransportRecorder>) -> Self {
        Self { host, port, connect_timeout, recorder }
    }

    fn address(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }

    fn connect(&self) -> Result<TcpStream, DeviceError> {
        self.recorder.record_connect();
        let addr = self
            .address()
            .to_socket_addrs()
            .map_err(|_| DeviceError::Unreachable(self.address()))?
            .next()
            .ok_or_else(|| DeviceError::Unreachable(self.address()))?;
        TcpStream::connect_timeout(&addr, self.connect_timeout).map_err(|_| DeviceError::Unreachable(self.address()))
    }

    /// Sends one service request and consumes the status reply.
    fn request(stream: &mut TcpStream, service: &str) -> Result<(), DeviceError> {
        stream
            .write_all(&frame_request(service)?)
            .map_err(|e| DeviceError::Disconnected(e.to_string()))?;
        let mut status = [0u8; 4];
        read_exact(stream, &mut status)?;
        match &status {
            b"OKAY" => Ok(()),
            b"FAIL" => {
                let msg = read_length_prefixed(stream)?;
                Err(DeviceError::Refused(msg))
            }
            other => Err(super::ProtocolError::MalformedStatus(String::from_utf8_lossy(other).into_owned()).into()),
        }
    }

    /// A host service answering `OKAY` plus a length-prefixed payload.
    pub fn query(&self, service: &str) -> Result<String, DeviceError> {
        let mut stream = self.connect()?;
        stream.set_read_timeout(Some(self.connect_timeout)).ok();
        Self::request(&mut stream, service)?;
        read_length_prefixed(&mut stream)
    }

    pub fn version(&self) -> Result<u32, DeviceError> {
        let payload = self.query("host:version")?;
        u32::from_str_radix(payload.trim(), 16)
            .map_err(|_| super::ProtocolError::MalformedLength(payload.clone()).into())
    }

    pub fn devices(&self) -> Result<Vec<DeviceDescriptor>, DeviceError> {
        let payload = self.query("host:devices")?;
        Ok(parse_device_list(&payload)
            .into_iter()
            .map(|(serial, state)| DeviceDescriptor { serial, state })
            .collect())
    }

    /// Runs `command` through `shell:` on `serial`, returning raw output.
    pub fn shell(&self, serial: &str, command: &str, timeout: Duration) -> Result<String, DeviceError> {
        let deadline = Instant::now() + timeout;
        let mut stream = self.connect()?;
        stream.set_read_timeout(Some(timeout)).ok();
        Self::request(&mut stream, &format!("host:transport:{serial}"))?;
        Self::request(&mut stream, &format!("shell:{command}"))?;
        let mut out = Vec::new();
        let mut buf = [0u8; 8192];
        loop {
            if Instant::now() >= deadline {
                return Err(DeviceError::Timeout(timeout));
            }
            match stream.read(&mut buf) {
                Ok(0) => break,
                Ok(n) => out.extend_from_slice(&buf[..n]),
                Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
                    return Err(DeviceError::Timeout(timeout));
                }
                Err(e) => return Err(DeviceError::Disconnected(e.to_string())),
            }
        }
        Ok(String::from_utf8_lossy(&out).into_owned())
    }
}

fn read_exact(stream: &mut TcpStream, buf: &mut [u8]) -> Result<(), DeviceError> {
    stream.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => DeviceError::Timeout(Duration::ZERO),
        _ => DeviceError::Disconnected(e.to_string()),
    })
}

fn read_length_prefixed(stream: &mut TcpStream) -> Result<String, DeviceError> {
    let mut len = [0u8; 4];
    read_exact(stream, &mut len)?;
    let len = parse_hex_len(&len)?;
    let mut payload = vec![0u8; len];
    read_exact(stream, &mut payload)?;
    Ok(String::from_utf8_lossy(&payload).into_owned())
}

/// Reduces a script to the command run by the device shell.
pub fn device_side_command(body: &str, interpreter: Interpreter) -> Result<String, DeviceError> {
    let mut lines = Vec::new();
    for line in body.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let device_line = match interpreter {
            Interpreter::Shell => match line.strip_prefix("adb shell ") {
                Some(rest) => rest,
                None if line.starts_with("adb ") || line == "adb" => {
                    return Err(DeviceError::Unsupported(line.to_string()));
                }
                None => line,
            },
            Interpreter::AdbDirect => line
                .strip_prefix("shell ")
                .ok_or_else(|| DeviceError::Unsupported(format!("adb {line}")))?,
            Interpreter::GenericText => return Err(DeviceError::NotExecutable(interpreter)),
        };
        lines.push(device_line);
    }
    Ok(lines.join("\n"))
}

/// Splits the exit marker appended by [`AdbServerSession`] off the output.
pub fn split_exit_marker(output: &str) -> (String, i32) {
    match output.rfind(EXIT_MARKER) {
        Some(at) => {
            let code = output[at + EXIT_MARKER.len()..].trim().parse().unwrap_or(-1);
            (output[..at].to_string(), code)
        }
        None => (output.to_string(), -1),
    }
}

pub struct AdbServerSession {
    endpoint: DeviceEndpoint,
    client: AdbServerClient,
    serial: String,
}

impl AdbServerSession {
    pub fn new(endpoint: DeviceEndpoint, client: AdbServerClient, serial: String) -> Self {
        Self { endpoint, client, serial }
    }
}

impl DeviceSession for AdbServerSession {
    fn endpoint(&self) -> &DeviceEndpoint {
        &self.endpoint
    }

    fn exec_shell(&mut self, request: &ExecRequest, timeout: Duration) -> Result<ExecOutcome, DeviceError> {
        if timeout.is_zero() {
            return Err(DeviceError::Timeout(timeout));
        }
        let command = device_side_command(&request.command, request.interpreter)?;
        let wrapped = format!("{command}\necho {EXIT_MARKER}$?");
        let started = Instant::now();
        let output = self.client.shell(&self.serial, &wrapped, timeout)?;
        let (stdout, exit_code) = split_exit_marker(&output);
        Ok(ExecOutcome {
            result: ShellResult {
                exit_code,
                stdout,
                stderr: String::new(),
                duration_ms: started.elapsed().as_millis() as u64,
            },
            detection: None,
            limitation: None,
        })
    }
}

pub struct AdbCliSession {
    endpoint: DeviceEndpoint,
    binary: PathBuf,
    serial: String,
    recorder: Arc<TransportRecorder>,
}

impl AdbCliSession {
    pub fn new(endpoint: DeviceEndpoint, binary: PathBuf, serial: String, recorder: Arc<TransportRecorder>) -> Self {
        Self { endpoint, binary, serial, recorder }
    }

    /// Host shell script for the request; `adb` resolves to the configured binary.
    fn host_script(&self, request: &ExecRequest) -> Result<String, DeviceError> {
        let body = match request.interpreter {
            Interpreter::Shell => request.command.clone(),
            Interpreter::AdbDirect => request
                .command
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(|l| format!("adb {l}"))
                .collect::<Vec<_>>()
                .join("\n"),
            Interpreter::GenericText => return Err(DeviceError::NotExecutable(request.interpreter)),
        };
        let binary = self.binary.display().to_string().replace('\'', r"'\''");
        Ok(format!("adb() {{ '{binary}' \"$@\"; }}\n{body}"))
    }
}

impl DeviceSession for AdbCliSession {
    fn endpoint(&self) -> &DeviceEndpoint {
        &self.endpoint
    }

    fn exec_shell(&mut self, request: &ExecRequest, timeout: Duration) -> Result<ExecOutcome, DeviceError> {
        if timeout.is_zero() {
            return Err(DeviceError::Timeout(timeout));
        }
        let script = self.host_script(request)?;
        self.recorder.record_connect();
        let mut cmd = Command::new("sh");
        cmd.arg("-c").arg(script).env("ANDROID_SERIAL", &self.serial);
        let result = run_with_timeout(cmd, timeout)?;
        Ok(ExecOutcome { result, detection: None, limitation: None })
    }
}

pub(crate) fn run_with_timeout(mut cmd: Command, timeout: Duration) -> Result<ShellResult, DeviceError> {
    let started = Instant::now();
    let mut child = cmd
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| DeviceError::Disconnected(format!("spawn failed: {e}")))?;
    let mut stdout = child.stdout.take().expect("piped");
    let mut stderr = child.stderr.take().expect("piped");
    let out_reader = std::thread::spawn(move || {
        let mut s = String::new();
        stdout.read_to_string(&mut s).ok();
        s
    });
    let err_reader = std::thread::spawn(move || {
        let mut s = String::new();
        stderr.read_to_string(&mut s).ok();
        s
    });
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) if started.elapsed() >= timeout => {
                child.kill().ok();
                child.wait().ok();
                return Err(DeviceError::Timeout(timeout));
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(10)),
            Err(e) => return Err(DeviceError::Disconnected(e.to_string())),
        }
    };
    Ok(ShellResult {
        exit_code: status.code().unwrap_or(-1),
        stdout: out_reader.join().unwrap_or_default(),
        stderr: err_reader.join().unwrap_or_default(),
        duration_ms: started.elapsed().as_millis() as u64,
    })
}

pub fn cli_devices(binary: &Path, recorder: &TransportRecorder) -> Result<Vec<DeviceDescriptor>, DeviceError> {
    recorder.record_connect();
    let mut cmd = Command::new(binary);
    cmd.arg("devices");
    let result = run_with_timeout(cmd, Duration::from_secs(10))
        .map_err(|_| DeviceError::Unreachable(binary.display().to_string()))?;
    if result.exit_code != 0 {
        return Err(DeviceError::Unreachable(result.stderr));
    }
    Ok(parse_device_list(
        &result
            .stdout
            .lines()
            .filter(|l| !l.starts_with("List of devices"))
            .collect::<Vec<_>>()
            .join("\n"),
    )
    .into_iter()
    .map(|(serial, state)| DeviceDescriptor { serial, state })
    .collect())
}
