//! Host-protocol client against an in-process fake ADB server.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use droidprobe::approval::ApprovalPolicy;
use droidprobe::device::{exec_shell, DeviceEndpoint, DeviceError, DeviceHub, EndpointFamily};
use droidprobe::engine::{Campaign, Engine};
use droidprobe::plan::{canonical_plan, CapabilityFlag, DeviceProfile, RootState, Verdict};

const SERIAL: &str = "emulator-5554";

fn read_request(s: &mut TcpStream) -> Option<String> {
    let mut len = [0u8; 4];
    s.read_exact(&mut len).ok()?;
    let n = usize::from_str_radix(std::str::from_utf8(&len).ok()?, 16).ok()?;
    let mut body = vec![0u8; n];
    s.read_exact(&mut body).ok()?;
    String::from_utf8(body).ok()
}

fn okay_payload(s: &mut TcpStream, payload: &str) {
    let _ = s.write_all(format!("OKAY{:04x}{payload}", payload.len()).as_bytes());
}

fn fail(s: &mut TcpStream, msg: &str) {
    let _ = s.write_all(format!("FAIL{:04x}{msg}", msg.len()).as_bytes());
}

/// Fake server: one connection per request, like the real one.
fn spawn_server() -> (u16, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut s) = stream else { continue };
            let log = log.clone();
            thread::spawn(move || {
                while let Some(req) = read_request(&mut s) {
                    log.lock().unwrap().push(req.clone());
                    if req == "host:version" {
                        okay_payload(&mut s, "0029");
                        return;
                    } else if req == "host:devices" {
                        okay_payload(&mut s, &format!("{SERIAL}\tdevice\nR58M123\tunauthorized\n"));
                        return;
                    } else if let Some(serial) = req.strip_prefix("host:transport:") {
                        if serial == SERIAL {
                            let _ = s.write_all(b"OKAY");
                        } else {
                            fail(&mut s, &format!("device '{serial}' not found"));
                            return;
                        }
                    } else if let Some(cmd) = req.strip_prefix("shell:") {
                        let _ = s.write_all(b"OKAY");
                        let first = cmd.lines().next().unwrap_or("");
                        let out = match first {
                            "id" => "uid=2000(shell) gid=2000(shell)\n__DROIDPROBE_EXIT:0\n".to_string(),
                            c if c.starts_with("ls /sdcard/pentest/backup") => "apps.ab\n__DROIDPROBE_EXIT:0\n".to_string(),
                            c if c.starts_with("sleep") => {
                                thread::sleep(Duration::from_millis(800));
                                "__DROIDPROBE_EXIT:0\n".to_string()
                            }
                            _ => format!("{first}: not found\n__DROIDPROBE_EXIT:127\n"),
                        };
                        let _ = s.write_all(out.as_bytes());
                        return;
                    } else {
                        fail(&mut s, "unknown host service");
                        return;
                    }
                }
            });
        }
    });
    (port, seen)
}

fn profile() -> DeviceProfile {
    DeviceProfile {
        name: "lab-pixel".into(),
        android_version: 13,
        root_state: RootState::Unrooted,
        capabilities: [CapabilityFlag::AdbTcp].into(),
        security_mechanisms: Default::default(),
    }
}

#[test]
fn version_and_device_list() {
    let (port, seen) = spawn_server();
    let hub = DeviceHub::empty();
    let family = EndpointFamily::AdbServer { host: "127.0.0.1".into(), port };
    let devices = hub.list_devices(&family).unwrap();
    assert_eq!(devices.len(), 2);
    assert_eq!(devices[0].serial, SERIAL);
    assert_eq!(devices[0].state, "device");
    assert_eq!(devices[1].state, "unauthorized");
    assert_eq!(seen.lock().unwrap().as_slice(), ["host:devices"]);
    assert_eq!(hub.recorder().connection_attempts(), 1);
}

#[test]
fn shell_round_trip_and_exit_codes() {
    let (port, seen) = spawn_server();
    let hub = DeviceHub::empty();
    let ep: DeviceEndpoint = format!("adb://127.0.0.1:{port}/{SERIAL}").parse().unwrap();
    let r = exec_shell(&hub, &ep, "adb shell id", Duration::from_secs(5)).unwrap();
    assert_eq!(r.exit_code, 0);
    assert!(r.stdout.contains("uid=2000(shell)"));
    assert!(!r.stdout.contains("__DROIDPROBE_EXIT"));
    let r = exec_shell(&hub, &ep, "su -c id", Duration::from_secs(5)).unwrap();
    assert_eq!(r.exit_code, 127);
    let log = seen.lock().unwrap().clone();
    assert!(log.contains(&format!("host:transport:{SERIAL}")));
    assert!(log.iter().any(|r| r.starts_with("shell:id\n")));
}

#[test]
fn unknown_serial_is_refused() {
    let (port, _) = spawn_server();
    let hub = DeviceHub::empty();
    let ep: DeviceEndpoint = format!("adb://127.0.0.1:{port}/nope").parse().unwrap();
    let err = exec_shell(&hub, &ep, "id", Duration::from_secs(5)).unwrap_err();
    assert!(matches!(err, DeviceError::Refused(m) if m.contains("not found")));
}

#[test]
fn slow_command_times_out() {
    let (port, _) = spawn_server();
    let hub = DeviceHub::empty();
    let ep: DeviceEndpoint = format!("adb://127.0.0.1:{port}/{SERIAL}").parse().unwrap();
    let err = exec_shell(&hub, &ep, "sleep 1", Duration::from_millis(200)).unwrap_err();
    assert!(matches!(err, DeviceError::Timeout(_)));
}

#[test]
fn unreachable_server() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let hub = DeviceHub::empty();
    let ep: DeviceEndpoint = format!("adb://127.0.0.1:{port}/{SERIAL}").parse().unwrap();
    assert!(matches!(exec_shell(&hub, &ep, "id", Duration::from_secs(1)), Err(DeviceError::Unreachable(_))));
}

#[test]
fn campaign_against_allowlisted_server() {
    let (port, seen) = spawn_server();
    let mut hub = DeviceHub::empty();
    let ep: DeviceEndpoint = format!("adb://127.0.0.1:{port}/{SERIAL}").parse().unwrap();
    hub.register_real_profile(&ep, profile());
    let hub = Arc::new(hub);

    let mut c = Campaign::new(Arc::new(canonical_plan()), vec![ep.clone()]);
    c.step_filter = Some(["backup".to_string(), "bootloader_check".to_string()].into());
    c.retry_budget = 0;

    // Not allowlisted: nothing is contacted.
    let engine = Engine::new(hub.clone());
    assert!(engine.run_campaign(&c).is_err());
    assert_eq!(hub.recorder().connection_attempts(), 0);

    let mut policy = ApprovalPolicy::default();
    policy.target_allowlist.insert(ep.to_string());
    c.policy = Arc::new(policy);
    let run = engine.run_campaign(&c).unwrap();
    let device = ep.to_string();
    assert_eq!(
        run.final_verdict(&device, "bootloader_check"),
        Some(Verdict::EnvironmentUnsupported { reason: droidprobe::plan::UnsupportedReason::FastbootNotAvailable })
    );
    // The backup action is not a shell command the fake device knows, so the
    // attempt fails even though validation finds the marker.
    assert_eq!(run.final_verdict(&device, "backup"), Some(Verdict::NotWorked));
    assert!(seen.lock().unwrap().iter().any(|r| r.starts_with("shell:ls /sdcard/pentest/backup")));
    assert!(hub.recorder().connection_attempts() > 0);
    assert!(run.unapproved_executions().is_empty());
}
