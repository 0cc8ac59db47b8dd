//! ADB host smart-socket framing.
//!
//! Requests are ASCII service names prefixed with their byte length as four
//! lowercase hex digits. Replies start with a four-byte status, `OKAY` or
//! `FAIL`; a `FAIL` is followed by a length-prefixed message, an `OKAY` may be
//! followed by a length-prefixed payload (e.g. for `host:version`).

use thiserror::Error;

pub const MAX_SERVICE_LEN: usize = 0xffff;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("service is {0} bytes, limit is 65535")]
    OversizeService(usize),
    #[error("service must be ASCII")]
    NonAscii,
    #[error("malformed status token {0:?}")]
    MalformedStatus(String),
    #[error("malformed length prefix {0:?}")]
    MalformedLength(String),
    #[error("truncated reply: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AdbReply {
    Okay(Vec<u8>),
    Fail(String),
}

pub fn frame_request(service: &str) -> Result<Vec<u8>, ProtocolError> {
    if !service.is_ascii() {
        return Err(ProtocolError::NonAscii);
    }
    if service.len() > MAX_SERVICE_LEN {
        return Err(ProtocolError::OversizeService(service.len()));
    }
    let mut out = format!("{:04x}", service.len()).into_bytes();
    out.extend_from_slice(service.as_bytes());
    Ok(out)
}

/// Reads a 4-hex-digit length followed by that many bytes.
pub fn parse_length_prefixed(bytes: &[u8]) -> Result<(&[u8], &[u8]), ProtocolError> {
    if bytes.len() < 4 {
        return Err(ProtocolError::Truncated { expected: 4, got: bytes.len() });
    }
    let len = parse_hex_len(&bytes[..4])?;
    let rest = &bytes[4..];
    if rest.len() < len {
        return Err(ProtocolError::Truncated { expected: len, got: rest.len() });
    }
    Ok((&rest[..len], &rest[len..]))
}

pub fn parse_hex_len(prefix: &[u8]) -> Result<usize, ProtocolError> {
    let text = std::str::from_utf8(prefix)
        .map_err(|_| ProtocolError::MalformedLength(String::from_utf8_lossy(prefix).into_owned()))?;
    if text.len() != 4 || !text.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(ProtocolError::MalformedLength(text.to_string()));
    }
    usize::from_str_radix(text, 16).map_err(|_| ProtocolError::MalformedLength(text.to_string()))
}

pub fn parse_reply(bytes: &[u8]) -> Result<AdbReply, ProtocolError> {
    if bytes.len() < 4 {
        return Err(ProtocolError::Truncated { expected: 4, got: bytes.len() });
    }
    match &bytes[..4] {
        b"OKAY" => {
            let rest = &bytes[4..];
            if rest.is_empty() {
                Ok(AdbReply::Okay(Vec::new()))
            } else {
                let (payload, _) = parse_length_prefixed(rest)?;
                Ok(AdbReply::Okay(payload.to_vec()))
            }
        }
        b"FAIL" => {
            let (msg, _) = parse_length_prefixed(&bytes[4..])?;
            Ok(AdbReply::Fail(String::from_utf8_lossy(msg).into_owned()))
        }
        other => Err(ProtocolError::MalformedStatus(String::from_utf8_lossy(other).into_owned())),
    }
}

/// Parses the `host:devices` payload (`serial\tstate` per line).
pub fn parse_device_list(payload: &str) -> Vec<(String, String)> {
    payload
        .lines()
        .filter_map(|line| {
            let mut parts = line.split('\t');
            let serial = parts.next()?.trim();
            let state = parts.next()?.trim();
            (!serial.is_empty()).then(|| (serial.to_string(), state.to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_vectors() {
        assert_eq!(frame_request("host:version").unwrap(), b"000chost:version");
        assert_eq!(frame_request("host:devices").unwrap(), b"000chost:devices");
        assert_eq!(frame_request("").unwrap(), b"0000");
    }

    #[test]
    fn oversize_and_non_ascii() {
        assert_eq!(frame_request(&"a".repeat(65536)), Err(ProtocolError::OversizeService(65536)));
        assert!(frame_request(&"a".repeat(65535)).is_ok());
        assert_eq!(frame_request("héllo"), Err(ProtocolError::NonAscii));
    }

    #[test]
    fn replies() {
        assert_eq!(parse_reply(b"OKAY").unwrap(), AdbReply::Okay(vec![]));
        assert_eq!(parse_reply(b"OKAY00040029").unwrap(), AdbReply::Okay(b"0029".to_vec()));
        assert_eq!(parse_reply(b"FAIL0007no such").unwrap(), AdbReply::Fail("no such".into()));
        assert!(matches!(parse_reply(b"WHAT0000"), Err(ProtocolError::MalformedStatus(_))));
        assert!(matches!(parse_reply(b"FAIL0010short"), Err(ProtocolError::Truncated { .. })));
        assert!(matches!(parse_reply(b"FAILzzzz"), Err(ProtocolError::MalformedLength(_))));
        assert!(matches!(parse_reply(b"OK"), Err(ProtocolError::Truncated { .. })));
    }

    #[test]
    fn device_list() {
        let list = parse_device_list("emulator-5554\tdevice\n192.168.56.101:5555\toffline\n");
        assert_eq!(list.len(), 2);
        assert_eq!(list[1], ("192.168.56.101:5555".to_string(), "offline".to_string()));
    }
}
