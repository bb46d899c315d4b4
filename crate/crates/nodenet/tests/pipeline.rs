use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use acslm_core::SampleBuffer;
use acslm_nodenet::codec::{encode_segment, Codec};
use acslm_nodenet::commands::{CommandKind, ControlMessage, NodeCommand};
use acslm_nodenet::envelope::seal_envelope;
use acslm_nodenet::node::{Node, NodeConfig, PinkNoiseSource};
use acslm_nodenet::segment::{Segment, SplSummary};
use acslm_nodenet::server::Server;
use acslm_nodenet::transport::{serve_tcp, LoopbackTransport, Request, Response, TcpTransport, Transport};
use acslm_nodenet::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

const RATE: u32 = 32_000;

struct DeadLink;

impl Transport for DeadLink {
    fn exchange(&mut self, _: &Request) -> acslm_nodenet::Result<Response> {
        Err(Error::Transport("link down".into()))
    }
}

fn cfg(id: &str, segment_s: f64) -> NodeConfig {
    NodeConfig {
        node_id: id.into(),
        sample_rate_hz: RATE,
        segment_s,
        start_time_ms: 1_700_000_000_000,
        ..NodeConfig::default()
    }
}

fn pink(seed: u64) -> PinkNoiseSource {
    PinkNoiseSource {
        sample_rate_hz: RATE,
        seed,
        rms: 0.005,
    }
}

fn shared(seed: u64) -> Arc<Mutex<Server>> {
    Arc::new(Mutex::new(Server::new(seed).unwrap()))
}

fn tapped(node: &mut Node) -> Arc<Mutex<Vec<Segment>>> {
    let seen = Arc::new(Mutex::new(Vec::new()));
    let sink = Arc::clone(&seen);
    node.set_tap(Box::new(move |s| sink.lock().unwrap().push(s.clone())));
    seen
}

#[test]
fn lossy_link_delivers_every_segment_bit_exactly() {
    let server = shared(11);
    let mut link = LoopbackTransport::lossy(Arc::clone(&server), 0.2, 7);
    let mut node = Node::new(cfg("lossy", 10.0)).unwrap();
    let seen = tapped(&mut node);
    node.run(&mut pink(1), &mut link, 15).unwrap();
    assert!(node.drain(&mut link, 3_600_000).unwrap());
    assert!(link.dropped() > 0);
    assert!(node.backlog().is_empty());

    let s = server.lock().unwrap();
    assert_eq!(s.records("lossy").len(), 15);
    assert_eq!(s.contiguous("lossy"), Some(14));
    for seg in seen.lock().unwrap().iter() {
        let got = s.segment("lossy", seg.seq).unwrap().unwrap();
        assert_eq!(got.audio.samples(), seg.audio.samples());
        assert_eq!(got.start_time_ms, seg.start_time_ms);
        assert_eq!(got.spl_summary, seg.spl_summary);
    }
}

#[test]
fn duplicate_upload_is_acked_and_stored_once() {
    let mut server = Server::new(12).unwrap();
    let pk = server.private_key().to_public_key();
    let seg = Segment {
        node_id: "dup".into(),
        seq: 0,
        start_time_ms: 0,
        audio: SampleBuffer::new(vec![0.0; 1000], 1000).unwrap(),
        spl_summary: SplSummary { leq_dba: 40.0, max_dba: 41.0 },
        short: false,
    };
    let payload = encode_segment(&seg, Codec::Store).unwrap();
    let env = seal_envelope(&payload, "dup", 0, &pk, &mut ChaCha20Rng::seed_from_u64(0)).unwrap();
    let req = Request {
        control: ControlMessage::Upload { seq: 0, applied: vec![] },
        envelope: Some(env.to_bytes()),
    };
    for _ in 0..3 {
        let r = server.handle(&req);
        assert!(matches!(r.control, ControlMessage::Ack { seq: 0, contiguous: Some(0), .. }), "{r:?}");
    }
    assert_eq!(server.record_count(), 1);
    assert_eq!(server.stats().duplicates, 2);
}

#[test]
fn tampered_envelope_is_quarantined() {
    let mut server = Server::new(13).unwrap();
    let pk = server.private_key().to_public_key();
    let seg = Segment {
        node_id: "t".into(),
        seq: 5,
        start_time_ms: 0,
        audio: SampleBuffer::new(vec![0.25; 500], 1000).unwrap(),
        spl_summary: SplSummary { leq_dba: 40.0, max_dba: 41.0 },
        short: true,
    };
    let payload = encode_segment(&seg, Codec::Lossless).unwrap();
    let mut env = seal_envelope(&payload, "t", 5, &pk, &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
    env.ciphertext[40] ^= 0x10;
    let r = server.handle(&Request {
        control: ControlMessage::Upload { seq: 5, applied: vec![] },
        envelope: Some(env.to_bytes()),
    });
    assert!(matches!(r.control, ControlMessage::Reject { seq: 5, .. }));
    assert_eq!(server.quarantined(), 1);
    assert_eq!(server.record_count(), 0);
    assert!(server.records("t").is_empty());
}

#[test]
fn envelopes_for_another_server_are_rejected_and_dropped() {
    let real = shared(14);
    let other = shared(15);
    let mut node = Node::new(cfg("wrong", 2.0)).unwrap();
    // Learn the other server's key, then talk to the real one.
    node.upload_window(&mut LoopbackTransport::new(Arc::clone(&other)), 1_000).unwrap();
    let mut link = LoopbackTransport::new(Arc::clone(&real));
    node.run(&mut pink(2), &mut link, 2).unwrap();
    assert_eq!(node.stats().rejected, 2);
    assert!(node.backlog().is_empty());
    assert_eq!(real.lock().unwrap().quarantined(), 2);
    assert_eq!(real.lock().unwrap().record_count(), 0);
}

#[test]
fn gain_command_shifts_following_segments() {
    let base_server = shared(16);
    let mut base = Node::new(cfg("g", 10.0)).unwrap();
    let base_levels = base
        .run(&mut pink(9), &mut LoopbackTransport::new(base_server), 3)
        .unwrap();

    let server = shared(16);
    let id = server
        .lock()
        .unwrap()
        .queue_command("g", CommandKind::GainAdjust { delta_db: 3.0 })
        .unwrap();
    let mut node = Node::new(cfg("g", 10.0)).unwrap();
    let mut link = LoopbackTransport::new(Arc::clone(&server));
    let levels = node.run(&mut pink(9), &mut link, 3).unwrap();

    assert_eq!(levels[0], base_levels[0]);
    for k in 1..3 {
        let d = levels[k].leq_dba - base_levels[k].leq_dba;
        assert!((d - 3.0).abs() < 0.05, "segment {k}: {d}");
    }
    assert_eq!(node.gain_db(), 3.0);
    assert_eq!(node.audit_log().len(), 1);
    let s = server.lock().unwrap();
    assert_eq!(s.pending_commands("g"), 0);
    assert!(s.audit_log().iter().any(|e| e.command_id == id));
    assert_eq!(s.records("g")[1].leq_dba, levels[1].leq_dba);
}

#[test]
fn commands_apply_once_per_id() {
    let mut node = Node::new(cfg("idem", 2.0)).unwrap();
    let cmd = NodeCommand::new(4, CommandKind::GainAdjust { delta_db: 3.0 }, 0).unwrap();
    node.apply(cmd.clone()).unwrap();
    node.apply(cmd).unwrap();
    assert_eq!(node.gain_db(), 3.0);
    assert_eq!(node.audit_log().len(), 1);

    node.apply(NodeCommand::new(5, CommandKind::Update { version: "2.1.0".into() }, 0).unwrap())
        .unwrap();
    node.apply(NodeCommand::new(6, CommandKind::Reboot, 0).unwrap()).unwrap();
    assert_eq!(node.firmware(), "2.1.0");
    assert_eq!(node.reboots(), 1);
    assert_eq!(node.audit_log().len(), 3);

    let bad = NodeCommand {
        id: 7,
        kind: CommandKind::GainAdjust { delta_db: 25.0 },
        issued_at_ms: 0,
    };
    assert!(node.apply(bad).is_err());
    assert_eq!(node.gain_db(), 3.0);
}

#[test]
fn flush_command_empties_the_backlog() {
    let server = shared(17);
    let mut node = Node::new(cfg("flush", 2.0)).unwrap();
    node.upload_window(&mut LoopbackTransport::new(Arc::clone(&server)), 1_000).unwrap();
    node.run(&mut pink(3), &mut DeadLink, 4).unwrap();
    assert_eq!(node.backlog().len(), 4);
    server.lock().unwrap().queue_command("flush", CommandKind::Flush).unwrap();
    // The first upload is acked and carries the flush for the rest.
    node.upload_window(&mut LoopbackTransport::new(Arc::clone(&server)), 400_000).unwrap();
    assert!(node.backlog().is_empty());
    assert_eq!(server.lock().unwrap().record_count(), 1);
}

#[test]
fn outage_backs_off_then_recovers() {
    let server = shared(18);
    let mut node = Node::new(cfg("outage", 60.0)).unwrap();
    node.upload_window(&mut LoopbackTransport::new(Arc::clone(&server)), 1_000).unwrap();
    let mut src = PinkNoiseSource {
        sample_rate_hz: RATE,
        seed: 4,
        rms: 0.005,
    };
    node.run(&mut src, &mut DeadLink, 10).unwrap();
    // Attempts at 0, 5, 15, 35, 75, 155, 315 s, then every 300 s.
    assert!(node.stats().link_failures <= 8, "{:?}", node.stats());
    assert_eq!(node.backlog().len(), 10);
    assert!(node.drain(&mut LoopbackTransport::new(Arc::clone(&server)), 3_600_000).unwrap());
    assert_eq!(server.lock().unwrap().contiguous("outage"), Some(9));
}

#[test]
fn node_storage_never_holds_plaintext() {
    let dir = tempfile::tempdir().unwrap();
    let server = shared(19);
    let mut c = cfg("disk", 2.0);
    c.storage_dir = Some(dir.path().to_path_buf());
    c.codec = Codec::Store;
    let mut node = Node::new(c.clone()).unwrap();
    let seen = tapped(&mut node);
    node.upload_window(&mut LoopbackTransport::new(Arc::clone(&server)), 1_000).unwrap();
    node.run(&mut pink(5), &mut DeadLink, 3).unwrap();

    let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(files.len(), 3);
    let first_pcm: Vec<u8> = seen.lock().unwrap()[0].audio.samples()[1000..1008]
        .iter()
        .flat_map(|&v| ((v * 32768.0).round() as i16).to_le_bytes())
        .collect();
    for f in &files {
        let bytes = std::fs::read(f).unwrap();
        assert!(bytes.starts_with(b"ACSEG"));
        assert!(!bytes.windows(4).any(|w| w == b"ACSP"));
        assert!(!bytes.windows(first_pcm.len()).any(|w| w == first_pcm.as_slice()));
    }

    drop(node);
    let mut reopened = Node::new(c).unwrap();
    assert_eq!(reopened.backlog().seqs(), vec![0, 1, 2]);
    assert!(reopened.drain(&mut LoopbackTransport::new(Arc::clone(&server)), 600_000).unwrap());
    assert_eq!(server.lock().unwrap().records("disk").len(), 3);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn day_of_segments_gives_a_contiguous_timeline() {
    let dir = tempfile::tempdir().unwrap();
    let mut server = Server::open(dir.path(), 20).unwrap();
    let pk = server.private_key().to_public_key();
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let t0 = 1_700_000_000_000i64;
    for seq in 0..1440u64 {
        let samples: Vec<f64> = (0..6000).map(|i| ((i as u64 + seq) % 7) as f64 / 32768.0).collect();
        let seg = Segment {
            node_id: "day".into(),
            seq,
            start_time_ms: t0 + seq as i64 * 60_000,
            audio: SampleBuffer::new(samples, 100).unwrap(),
            spl_summary: SplSummary { leq_dba: 50.0 + (seq % 10) as f64, max_dba: 70.0 },
            short: false,
        };
        let payload = encode_segment(&seg, Codec::Lossless).unwrap();
        let env = seal_envelope(&payload, "day", seq, &pk, &mut rng).unwrap();
        assert!(server.ingest(&env.to_bytes()).unwrap());
    }
    let check = |s: &Server| {
        let recs = s.records("day");
        assert_eq!(recs.len(), 1440);
        for w in recs.windows(2) {
            assert_eq!(w[0].end_time_ms(), w[1].start_time_ms);
        }
        assert_eq!(s.records_between("day", t0, t0 + 86_400_000).len(), 1440);
        assert_eq!(s.records_between("day", t0 + 3_600_000, t0 + 7_200_000).len(), 60);
        assert_eq!(s.contiguous("day"), Some(1439));
    };
    check(&server);
    drop(server);
    let reopened = Server::open(dir.path(), 999).unwrap();
    check(&reopened);
    let seg = reopened.segment("day", 700).unwrap().unwrap();
    assert_eq!(seg.spl_summary.leq_dba, 50.0);
    assert_eq!(seg.audio.samples()[0], (700 % 7) as f64 / 32768.0);
}

#[test]
fn tcp_transport_carries_the_protocol() {
    let server = shared(21);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let stop = Arc::new(AtomicBool::new(false));
    let handle = {
        let (server, stop) = (Arc::clone(&server), Arc::clone(&stop));
        std::thread::spawn(move || serve_tcp(listener, server, stop))
    };
    server.lock().unwrap().queue_command("tcp", CommandKind::GainAdjust { delta_db: -2.0 }).unwrap();
    let mut node = Node::new(cfg("tcp", 3.0)).unwrap();
    let mut link = TcpTransport::new(addr);
    node.run(&mut pink(6), &mut link, 3).unwrap();
    assert!(node.drain(&mut link, 60_000).unwrap());
    stop.store(true, Ordering::Relaxed);
    handle.join().unwrap().unwrap();
    let s = server.lock().unwrap();
    assert_eq!(s.records("tcp").len(), 3);
    assert_eq!(node.gain_db(), -2.0);
    assert_eq!(s.pending_commands("tcp"), 0);
}
