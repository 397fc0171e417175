//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Runs without the libtest harness so the lines always show.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use base64::Engine as _;
use kwsforge::audio::{write_wav, AudioClip, CLIP_LEN};
use kwsforge::checkpoint::{load_checkpoint, save_checkpoint};
use kwsforge::rng::seeded;
use kwsforge::synth::labeled_clip;
use kwsforge::train;
use kwsforge_cli::service::{serve_on, AppState, PredictResponse};
use serde_json::json;
use support::Outcome;

struct Report {
    failed: Vec<&'static str>,
}

impl Report {
    fn record(&mut self, name: &'static str, started: Instant, outcome: Outcome) {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                self.failed.push(name);
                ("FAIL", d)
            }
        };
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{tag}  {name}: {detail} [{:.1}s]", started.elapsed().as_secs_f64());
        let _ = out.flush();
    }

    fn run(&mut self, name: &'static str, check: impl FnOnce() -> Outcome) {
        let started = Instant::now();
        self.record(name, started, check());
    }
}

fn http_post(port: u16, path: &str, body: &str) -> std::io::Result<String> {
    let mut s = TcpStream::connect(("127.0.0.1", port))?;
    write!(
        s,
        "POST {path} HTTP/1.1\r\nHost: localhost\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    let mut reply = String::new();
    s.read_to_string(&mut reply)?;
    Ok(reply)
}

fn body_of(reply: &str) -> &str {
    reply.split_once("\r\n\r\n").map_or("", |(_, b)| b)
}

fn offline_single(ckpt: &Path, wav: &Path) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_kwsforge"))
        .args(["eval", "--json", "--checkpoint"])
        .arg(ckpt)
        .arg("--single")
        .arg(wav)
        .env_remove("KWS_CHECKPOINT")
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(String::from_utf8_lossy(&o.stderr).into_owned());
    }
    Ok(String::from_utf8_lossy(&o.stdout).trim().to_string())
}

/// Serves `ckpt` in-process and compares `/predict` with `eval --single`
/// on ten WAVs, one per class among the first ten labels.
fn check_service_parity(ckpt: &Path, wav_dir: &Path) -> Outcome {
    let mut rng = seeded(77);
    let wavs: Vec<PathBuf> = (0..10)
        .map(|label| {
            let path = wav_dir.join(format!("clip{label}.wav"));
            write_wav(&labeled_clip(label, &mut rng), &path).unwrap();
            path
        })
        .collect();
    let zero = wav_dir.join("zero.wav");
    write_wav(&AudioClip::silent(CLIP_LEN), &zero).unwrap();

    let state = Arc::new(AppState::new(load_checkpoint(ckpt).map_err(|e| e.to_string())?.model));
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    let listener = runtime
        .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
        .map_err(|e| e.to_string())?;
    let port = listener.local_addr().map_err(|e| e.to_string())?.port();
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = runtime.spawn(serve_on(listener, state, false, async {
        let _ = stopped.await;
    }));

    let mut mismatches = Vec::new();
    let mut labels = Vec::new();
    for wav in wavs.iter().chain(std::iter::once(&zero)) {
        let bytes = std::fs::read(wav).map_err(|e| e.to_string())?;
        let body = json!({"wav_data": base64::engine::general_purpose::STANDARD.encode(&bytes), "method": "all_label"});
        let reply = http_post(port, "/predict", &body.to_string()).map_err(|e| e.to_string())?;
        let served: PredictResponse = serde_json::from_str(body_of(&reply)).map_err(|e| format!("{e}: {reply}"))?;
        let offline: PredictResponse = serde_json::from_str(&offline_single(ckpt, wav)?).map_err(|e| e.to_string())?;
        if served != offline {
            mismatches.push(wav.file_name().unwrap().to_string_lossy().into_owned());
        }
        labels.push(served.label);
    }
    let _ = stop.send(());
    let _ = runtime.block_on(server);

    let zero_label = labels.pop().unwrap_or_default();
    let ok = mismatches.is_empty();
    let detail = format!(
        "{}/10 responses identical to offline eval (labels {labels:?}); all-zero clip -> {zero_label:?}",
        10 - mismatches.len()
    );
    if ok {
        Ok(detail)
    } else {
        Err(format!("{detail}; mismatched {mismatches:?}"))
    }
}

fn main() {
    let mut report = Report { failed: Vec::new() };

    report.run("multiply accounting", support::check_multiplies);
    report.run("gradient suite", support::check_gradients);
    report.run("conv oracle", support::check_conv_oracle);
    report.run("feature shape and DSP invariants", support::check_dsp);
    report.run("split determinism", support::check_splits);

    let started = Instant::now();
    let plain = support::toy_fit(0.0);
    report.record("overfit sanity", started, support::check_overfit(&plain));
    let started = Instant::now();
    let momentum = support::toy_fit(0.9);
    report.record(
        "momentum direction",
        started,
        support::check_momentum(&plain, &momentum),
    );

    let dir = tempfile::tempdir().expect("tempdir");
    let corpus = support::toy_corpus(&dir.path().join("corpus"));
    report.run("seed determinism", || support::check_determinism(&corpus));

    let ckpt = dir.path().join("toy.bin");
    report.run("service parity", || {
        let (checkpoint, _) = train(&support::toy_train_config(7), &corpus).map_err(|e| e.to_string())?;
        save_checkpoint(&checkpoint, &ckpt).map_err(|e| e.to_string())?;
        check_service_parity(&ckpt, dir.path())
    });

    let mut out = std::io::stdout().lock();
    if report.failed.is_empty() {
        let _ = writeln!(out, "acceptance: all criteria passed");
    } else {
        let _ = writeln!(out, "acceptance: {} failed: {:?}", report.failed.len(), report.failed);
        drop(out);
        std::process::exit(1);
    }
}
