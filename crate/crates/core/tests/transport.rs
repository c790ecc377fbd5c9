use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use sgpc::encoder::CompressedObservation;
use sgpc::geometry::{Pose, SurfaceSample};
use sgpc::kernel::{AzimuthMetric, RqHyperparams};
use sgpc::transport::{BaseServer, LinkStats, Sender};
use sgpc::wire;

fn observation(tag: usize, m: usize) -> CompressedObservation {
    CompressedObservation {
        pose: Pose::new(tag as f64, 0.0, 0.0, 0.0, 0.0, 0.0),
        r_oc: 10.0,
        hyperparams: RqHyperparams::new(1.0, 0.5, 0.25, 1.0, 0.01).unwrap(),
        metric: AzimuthMetric::Raw,
        inducing: (0..m)
            .map(|i| SurfaceSample::new(i as f64 * 0.01, 1.5, 2.0 + tag as f64 * 0.125))
            .collect(),
    }
    .quantized()
}

struct Running {
    addr: String,
    shutdown: Arc<AtomicBool>,
    received: mpsc::Receiver<CompressedObservation>,
    handle: thread::JoinHandle<LinkStats>,
    stats: Arc<std::sync::Mutex<LinkStats>>,
}

fn start() -> Running {
    let server = BaseServer::bind("127.0.0.1:0").unwrap();
    let addr = server.local_addr().unwrap().to_string();
    let stats = server.stats();
    let shutdown = Arc::new(AtomicBool::new(false));
    let (tx, received) = mpsc::channel();
    let flag = Arc::clone(&shutdown);
    let handle = thread::spawn(move || {
        server
            .run(&flag, |obs| {
                tx.send(obs).unwrap();
            })
            .unwrap()
    });
    Running {
        addr,
        shutdown,
        received,
        handle,
        stats,
    }
}

fn wait_for(stats: &Arc<std::sync::Mutex<LinkStats>>, frames: u64) {
    let deadline = Instant::now() + Duration::from_secs(10);
    while stats.lock().unwrap().frames() < frames {
        assert!(Instant::now() < deadline, "receiver stalled");
        thread::sleep(Duration::from_millis(5));
    }
}

#[test]
fn twenty_frames_arrive_in_order_with_equal_counters() {
    let run = start();
    let sent: Vec<CompressedObservation> = (0..20).map(|i| observation(i, 40 + i)).collect();
    let mut sender = Sender::connect(&run.addr).unwrap();
    for obs in &sent {
        sender.send(obs).unwrap();
    }
    wait_for(&run.stats, 20);
    let got: Vec<CompressedObservation> = run.received.try_iter().collect();
    assert_eq!(got, sent);
    run.shutdown.store(true, Ordering::Relaxed);
    let base = run.handle.join().unwrap();
    assert_eq!(base.bytes(), sender.stats().bytes());
    assert_eq!(base.frames(), 20);
    assert_eq!(base.decode_failures(), 0);
    let expected: usize = sent.iter().map(|o| wire::message_len(o.len()) + 8).sum();
    assert_eq!(base.bytes(), expected as u64);
}

#[test]
fn corrupted_frame_is_counted_and_skipped() {
    let run = start();
    let mut sender = Sender::connect(&run.addr).unwrap();
    for i in 0..20 {
        let frame = wire::encode_frame(&wire::serialize(&observation(i, 10)));
        if i == 3 {
            let mut bad = frame.clone();
            bad[4 + 20] ^= 0x08;
            sender.send_raw(&bad).unwrap();
        } else {
            sender.send_raw(&frame).unwrap();
        }
    }
    wait_for(&run.stats, 20);
    let got: Vec<CompressedObservation> = run.received.try_iter().collect();
    assert_eq!(got.len(), 19);
    assert!(got.iter().all(|o| o.pose.x != 3.0));
    run.shutdown.store(true, Ordering::Relaxed);
    let base = run.handle.join().unwrap();
    assert_eq!(base.decode_failures(), 1);
    assert_eq!(base.bytes(), sender.stats().bytes());
}

#[test]
fn oversized_length_prefix_drops_the_connection() {
    let run = start();
    let mut sender = Sender::connect(&run.addr).unwrap();
    sender.send_raw(&u32::MAX.to_le_bytes()).unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    while run.stats.lock().unwrap().decode_failures() == 0 {
        assert!(Instant::now() < deadline, "oversized frame not rejected");
        thread::sleep(Duration::from_millis(5));
    }
    // The server keeps accepting new connections.
    let mut next = Sender::connect(&run.addr).unwrap();
    next.send(&observation(7, 5)).unwrap();
    let obs = run.received.recv_timeout(Duration::from_secs(10)).unwrap();
    assert_eq!(obs, observation(7, 5));
    run.shutdown.store(true, Ordering::Relaxed);
    run.handle.join().unwrap();
}

#[test]
fn shutdown_stops_an_idle_server() {
    let run = start();
    let _idle = Sender::connect(&run.addr).unwrap();
    thread::sleep(Duration::from_millis(50));
    let started = Instant::now();
    run.shutdown.store(true, Ordering::Relaxed);
    let stats = run.handle.join().unwrap();
    assert!(started.elapsed() < Duration::from_secs(2));
    assert_eq!(stats.frames(), 0);
}

#[test]
fn paced_stream_rate_is_reported_within_tolerance() {
    let run = start();
    let mut sender = Sender::connect(&run.addr).unwrap();
    let obs = observation(1, 500);
    let frame_bytes = (wire::message_len(500) + 8) as f64;
    let period = Duration::from_millis(50);
    let expected = frame_bytes / period.as_secs_f64();
    let begin = Instant::now();
    let mut rates = Vec::new();
    for i in 0..40u32 {
        let due = begin + period * i;
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            thread::sleep(wait);
        }
        sender.send(&obs).unwrap();
        if i >= 25 && i % 5 == 0 {
            thread::sleep(Duration::from_millis(10));
            rates.push(run.stats.lock().unwrap().rate());
        }
    }
    run.shutdown.store(true, Ordering::Relaxed);
    let base = run.handle.join().unwrap();
    assert_eq!(base.frames(), 40);
    for rate in rates {
        assert!((rate - expected).abs() <= 0.15 * expected, "rate {rate} vs {expected}");
    }
    let mut csv = Vec::new();
    base.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("timestamp,bytes,rate\n"));
    assert_eq!(text.lines().count(), 41);
}
