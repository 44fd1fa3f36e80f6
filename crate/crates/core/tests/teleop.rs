use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use biact_core::episode::list_episodes;
use biact_core::runtime::QualityGate;
use biact_core::teleop::{spawn, Pacing, ServeOptions, ServerHandle};
use biact_core::{Episode, SimConfig};
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

type Client = WebSocket<MaybeTlsStream<TcpStream>>;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn start(pacing: Pacing, out_dir: Option<PathBuf>) -> (ServerHandle, Client) {
    let mut opts = ServeOptions::new(0);
    opts.pacing = pacing;
    opts.out_dir = out_dir;
    let server = spawn(&SimConfig::default(), opts).unwrap();
    let (ws, _) = tungstenite::connect(format!("ws://{}", server.local_addr)).unwrap();
    (server, ws)
}

fn read_line(ws: &mut Client) -> String {
    loop {
        match ws.read().unwrap() {
            Message::Text(t) => return t.as_str().to_string(),
            _ => continue,
        }
    }
}

fn send(ws: &mut Client, line: &str) {
    ws.send(Message::text(line.to_string())).unwrap();
}

/// Replaces the value of the top-level `"t"` field.
fn without_t(line: &str) -> String {
    match line.find("\"t\":") {
        Some(i) => {
            let end = line[i..].find(',').map_or(line.len(), |j| i + j);
            format!("{}\"t\":_{}", &line[..i], &line[end..])
        }
        None => line.to_string(),
    }
}

#[test]
fn transcript_replay_matches_golden_responses() {
    let (server, mut ws) = start(Pacing::Lockstep { steps: 100 }, None);
    let mut responses = vec![read_line(&mut ws)];
    let transcript = std::fs::read_to_string(data("teleop_transcript.jsonl")).unwrap();
    for line in transcript.lines() {
        send(&mut ws, line);
        loop {
            let r = read_line(&mut ws);
            let is_state = r.starts_with("{\"type\":\"state\"");
            responses.push(r);
            if is_state {
                break;
            }
        }
    }
    ws.close(None).ok();
    server.shutdown();

    let golden = data("teleop_responses.jsonl");
    let got: String = responses.concat();
    if std::env::var_os("BIACT_BLESS").is_some() {
        std::fs::write(&golden, &got).unwrap();
    }
    let want = std::fs::read_to_string(&golden).unwrap();
    let (got, want): (Vec<_>, Vec<_>) = (got.lines().map(without_t).collect(), want.lines().map(without_t).collect());
    assert_eq!(got.len(), want.len());
    for (i, (g, w)) in got.iter().zip(&want).enumerate() {
        assert_eq!(g, w, "response {i}");
    }
}

#[test]
fn bad_message_gets_an_error_frame_and_the_next_one_still_works() {
    let (server, mut ws) = start(Pacing::Lockstep { steps: 10 }, None);
    assert_eq!(read_line(&mut ws), "{\"type\":\"hello\",\"version\":1}\n");
    send(&mut ws, "{\"type\":\"bogus\"}");
    let err = read_line(&mut ws);
    assert!(err.starts_with("{\"type\":\"error\",\"msg\":"), "{err}");
    let first: serde_json::Value = serde_json::from_str(&read_line(&mut ws)).unwrap();
    send(&mut ws, "{\"type\":\"target\",\"x\":0.2,\"y\":-0.12,\"grip\":0.0}");
    let mut last = first.clone();
    for _ in 0..30 {
        last = serde_json::from_str(&read_line(&mut ws)).unwrap();
        send(&mut ws, "{\"type\":\"target\",\"x\":0.2,\"y\":-0.12,\"grip\":0.0}");
    }
    assert_eq!(last["type"], "state");
    assert_ne!(last["leader"], first["leader"], "target was not applied");
    ws.close(None).ok();
    server.shutdown();
}

/// Streams targets for `secs` of wall time, reading frames as they arrive.
fn drive(ws: &mut Client, secs: f64, mut target: impl FnMut(f64) -> (f64, f64, f64)) -> usize {
    let t0 = Instant::now();
    let mut states = 0;
    let mut next_send = 0.0;
    loop {
        let t = t0.elapsed().as_secs_f64();
        if t >= secs {
            return states;
        }
        if t >= next_send {
            let (x, y, grip) = target(t / secs);
            send(ws, &format!("{{\"type\":\"target\",\"x\":{x},\"y\":{y},\"grip\":{grip}}}"));
            next_send += 0.02;
        }
        match ws.read() {
            Ok(Message::Text(m)) => {
                assert!(!m.as_str().contains("\"error\""), "{}", m.as_str());
                states += 1;
            }
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
            Err(e) => panic!("{e}"),
        }
    }
}

#[test]
fn scripted_client_records_a_gated_episode() {
    let dir = tempfile::tempdir().unwrap();
    let begun = Instant::now();
    let (server, mut ws) = start(Pacing::Realtime, Some(dir.path().to_path_buf()));
    if let MaybeTlsStream::Plain(s) = ws.get_mut() {
        s.set_read_timeout(Some(Duration::from_millis(2))).unwrap();
    }
    let lerp = |a: f64, b: f64, s: f64| a + (b - a) * s.clamp(0.0, 1.0);
    let (home, pick) = ([0.14, 0.0], [0.2, -0.12]);
    drive(&mut ws, 1.5, |s| (lerp(home[0], pick[0], 2.0 * s), lerp(home[1], pick[1], 2.0 * s), 0.0));
    send(&mut ws, "{\"type\":\"record\",\"action\":\"start\"}");
    let states = drive(&mut ws, 2.0, |s| (pick[0], lerp(pick[1], -0.09, 2.0 * s - 1.0), lerp(0.0, 0.55, 2.5 * s)));
    send(&mut ws, "{\"type\":\"record\",\"action\":\"stop\"}");
    assert!((40..=80).contains(&states), "{states} state frames in 2 s");

    let deadline = Instant::now() + Duration::from_secs(10);
    let episodes = loop {
        let _ = ws.read();
        let found = list_episodes(dir.path()).unwrap_or_default();
        if !found.is_empty() || Instant::now() > deadline {
            break found;
        }
    };
    ws.close(None).ok();
    server.shutdown();
    assert_eq!(episodes.len(), 1, "no episode written");

    let ep = Episode::load(&episodes[0]).unwrap();
    ep.validate().unwrap();
    assert_eq!(ep.meta.expert, "teleop");
    assert!((180..=220).contains(&ep.len()), "{} ticks", ep.len());
    let gate = QualityGate::default();
    let m = gate.metrics(&ep.follower, &ep.leader, ep.meta.sample_rate);
    gate.check(&m).unwrap();
    assert!(begun.elapsed() < Duration::from_secs(30));
}
