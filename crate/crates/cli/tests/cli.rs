use std::io::{BufRead, BufReader};
use std::process::{Child, ChildStdout, Command as StdCommand, Stdio};
use std::time::Duration;

use assert_cmd::cargo::cargo_bin;
use assert_cmd::Command;
use predicates::prelude::*;

const ZERO_SECRET: &str = "0000000000000000000000000000000000000000000000000000000000000000";
const ZERO_EPOCH0_KEY: &str = "fb118f87476b7c8ee15755872b735d6f05db8249de783b3fa21fdc7acd28db2d";

fn tagrelay() -> Command {
    Command::cargo_bin("tagrelay").unwrap()
}

fn stdout_of(args: &[&str]) -> String {
    let out = tagrelay().args(args).assert().success().get_output().stdout.clone();
    String::from_utf8(out).unwrap()
}

struct Server {
    child: Child,
    addr: String,
    _stdout: BufReader<ChildStdout>,
}

impl Server {
    fn start(args: &[&str]) -> Self {
        let mut child = StdCommand::new(cargo_bin("tagrelay"))
            .args(args)
            .args(["--listen", "127.0.0.1:0"])
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        let mut stdout = BufReader::new(child.stdout.take().unwrap());
        let mut line = String::new();
        stdout.read_line(&mut line).unwrap();
        let addr = line.trim().strip_prefix("listening on ").expect("listen banner").to_owned();
        Self { child, addr, _stdout: stdout }
    }

    fn interrupt(mut self) -> std::process::ExitStatus {
        StdCommand::new("kill").args(["-INT", &self.child.id().to_string()]).status().unwrap();
        for _ in 0..100 {
            if let Some(status) = self.child.try_wait().unwrap() {
                return status;
            }
            std::thread::sleep(Duration::from_millis(50));
        }
        self.child.kill().unwrap();
        panic!("server ignored SIGINT");
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[test]
fn keys_range_is_three_stable_lines() {
    let a = stdout_of(&["keys", "--secret", ZERO_SECRET, "--epoch", "0..2"]);
    let b = stdout_of(&["keys", "--secret", ZERO_SECRET, "--epoch", "0..2"]);
    assert_eq!(a, b);
    let lines: Vec<_> = a.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with(&format!("epoch=0 start=0 public={ZERO_EPOCH0_KEY} ")));
    assert!(lines[2].starts_with("epoch=2 start=172800 "));
}

#[test]
fn keys_bad_input_exits_2() {
    tagrelay().args(["keys", "--secret", "xyz"]).assert().code(2);
    tagrelay().args(["keys", "--secret", "00"]).assert().code(2);
    tagrelay().args(["keys", "--secret", ZERO_SECRET, "--epoch", "3..1"]).assert().code(2);
}

#[test]
fn adv_round_trip() {
    let frame = stdout_of(&["adv", "encode", ZERO_EPOCH0_KEY]);
    let frame = frame.trim();
    assert_eq!(frame.len(), 68);
    tagrelay()
        .args(["adv", "decode", frame])
        .assert()
        .success()
        .stdout(format!("key={ZERO_EPOCH0_KEY} status=lost battery_low=false\n"));

    let connected = stdout_of(&["adv", "encode", ZERO_EPOCH0_KEY, "--status", "connected", "--battery-low"]);
    tagrelay()
        .args(["adv", "decode", connected.trim()])
        .assert()
        .stdout(predicate::str::contains("status=connected battery_low=true"));
}

#[test]
fn adv_decode_rejects_reserved_bits() {
    let frame = stdout_of(&["adv", "encode", ZERO_EPOCH0_KEY]);
    let mut bad = frame.trim().to_owned();
    bad.replace_range(66..68, "ff");
    tagrelay().args(["adv", "decode", &bad]).assert().code(2).stderr(predicate::str::contains("malformed"));
    tagrelay().args(["adv", "decode", "00"]).assert().code(2);
}

#[test]
fn sim_relay_basic_shows_relay_site() {
    let out = stdout_of(&["sim", "--preset", "relay-basic", "--until", "3600"]);
    assert!(out.starts_with("time,event,entity,key_epoch,lat,lon,source,flags\n"));
    let last_view = out.lines().rfind(|l| l.contains(",owner_view,")).unwrap();
    // finder-b sits 1005 m east of the origin at 48.2082, 16.3738
    assert_eq!(last_view, "3600,owner_view,tag,0,48.208200,16.387347,cloud,");
}

#[test]
fn sim_replay_lifetime_outdated_after_seven_days() {
    let out = stdout_of(&["sim", "--preset", "replay-lifetime", "--until", "10d"]);
    let first = out.lines().find(|l| l.ends_with(",outdated")).unwrap();
    assert!(first.starts_with("691200,owner_view,"), "{first}");
    let before = out.lines().find(|l| l.starts_with("691140,owner_view,")).unwrap();
    assert!(before.ends_with(",cloud,"), "{before}");
}

#[test]
fn sim_output_matches_core_golden_and_file() {
    let golden = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/golden/alternation-600.csv")).unwrap();
    assert_eq!(stdout_of(&["sim", "--preset", "alternation", "--until", "600"]), golden);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.csv");
    tagrelay()
        .args(["sim", "--preset", "alternation", "--until", "10m", "--out"])
        .arg(&path)
        .assert()
        .success()
        .stdout("");
    assert_eq!(std::fs::read_to_string(path).unwrap(), golden);
}

#[test]
fn sim_seed_changes_output() {
    let a = stdout_of(&["sim", "--preset", "relay-basic", "--until", "60"]);
    let b = stdout_of(&["--seed", "7", "sim", "--preset", "relay-basic", "--until", "60"]);
    assert_ne!(a, b);
}

#[test]
fn sim_validation_errors_exit_2() {
    tagrelay().args(["sim", "--scenario", "/does/not/exist.json", "--until", "10"]).assert().code(2);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"entities\": [\n    {\"id\": 5}\n  ]\n}\n").unwrap();
    tagrelay()
        .args(["sim", "--until", "10", "--scenario"])
        .arg(&bad)
        .assert()
        .code(2)
        .stderr(predicate::str::contains("line 3"));
    let invalid = dir.path().join("invalid.json");
    std::fs::write(&invalid, r#"{"entities": [{"id": "a", "kind": "finder", "position": [0, 0]}, {"id": "a", "kind": "finder", "position": [1, 0]}]}"#).unwrap();
    tagrelay()
        .args(["sim", "--until", "10", "--scenario"])
        .arg(&invalid)
        .assert()
        .code(2)
        .stderr(predicate::str::contains("duplicate"));
    tagrelay().args(["sim", "--preset", "relay-basic", "--set", "distance=far"]).assert().code(2);
    tagrelay().args(["sim", "--preset", "nope"]).assert().code(2);
    tagrelay().args(["sim", "--preset", "relay-basic", "--until", "soon"]).assert().code(2);
}

#[test]
fn sim_scenario_file_runs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    std::fs::write(
        &path,
        r#"{
  "world": {"lost_adv_interval": 5},
  "entities": [
    {"id": "tag", "kind": "tag", "position": [0, 0], "mode": "lost", "pairing_time": 0},
    {"id": "f", "kind": "finder", "position": [3, 0]}
  ],
  "timeline": [{"at": "20s", "action": "power", "args": {"tag": "tag", "on": false}}]
}"#,
    )
    .unwrap();
    let out = stdout_of(&["sim", "--until", "60", "--scenario", path.to_str().unwrap()]);
    let uploads: Vec<_> = out.lines().filter(|l| l.contains(",upload,")).map(|l| l.split(',').next().unwrap()).collect();
    // power-off at 20 lands before the advertisement due at 20
    assert_eq!(uploads, ["0", "5", "10", "15"]);
    tagrelay().args(["sim", "--scenario", path.to_str().unwrap()]).assert().code(2);
}

#[test]
fn serve_cloud_stops_on_interrupt_and_double_bind_fails() {
    let server = Server::start(&["serve", "cloud"]);
    tagrelay().args(["serve", "cloud", "--listen", &server.addr]).assert().code(1);
    assert!(server.interrupt().success());
}

#[test]
fn relay_nodes_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("relay.journal");
    let server = Server::start(&["serve", "relay", "--virtual", "--journal", journal.to_str().unwrap()]);
    let addr = server.addr.clone();

    let frame = stdout_of(&["adv", "encode", ZERO_EPOCH0_KEY]);
    let frame = frame.trim();
    let capture = dir.path().join("capture.jsonl");
    let line = |t: u64| format!("{{\"collector_id\":\"x\",\"advertisement\":\"{frame}\",\"rssi\":-50.0,\"heard_at\":{t}}}\n");
    std::fs::write(&capture, format!("{}{}", line(30), line(10))).unwrap();

    let emitter = StdCommand::new(cargo_bin("tagrelay"))
        .args(["node", "emitter", "--relay", &addr, "--id", "remote", "--count", "2"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    tagrelay()
        .args(["node", "collector", "--relay", &addr, "--id", "near", "--capture"])
        .arg(&capture)
        .assert()
        .success()
        .stdout("beacon=1 first_seen=30 seen_count=1\nbeacon=1 first_seen=10 seen_count=2\n");

    // the emitter registers asynchronously
    let schedule = ["node", "control", "--relay", &addr, "schedule", "--beacon", "1", "--emitter", "remote", "--start", "100", "--interval", "1m"];
    let mut ok = false;
    for _ in 0..100 {
        if tagrelay().args(schedule).output().unwrap().status.success() {
            ok = true;
            break;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    assert!(ok, "schedule never accepted");
    tagrelay()
        .args(["node", "control", "--relay", &addr, "advance", "170"])
        .assert()
        .success()
        .stdout("emitted=2\n");
    let out = emitter.wait_with_output().unwrap();
    assert!(out.status.success());
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        format!("at=100 schedule=1 beacon=1 adv={frame}\nat=160 schedule=1 beacon=1 adv={frame}\n")
    );
    tagrelay()
        .args(["node", "control", "--relay", &addr, "advance", "50"])
        .assert()
        .code(2);
    assert!(server.interrupt().success());

    // journal replays the capture on restart
    let server = Server::start(&["serve", "relay", "--virtual", "--journal", journal.to_str().unwrap()]);
    let again = dir.path().join("again.jsonl");
    std::fs::write(&again, line(5)).unwrap();
    tagrelay()
        .args(["node", "collector", "--relay", &server.addr, "--id", "near", "--capture"])
        .arg(&again)
        .assert()
        .stdout("beacon=1 first_seen=5 seen_count=3\n");
}
