mod common;

use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde_json::{json, Value};

use cfdecode::harness::server::{bind, serve_listener};
use cfdecode::model::{Endpoint, LanguageModel, NGramModel, RemoteModel, ToyModel, TokenId};
use cfdecode::Error;

const TIMEOUT: Duration = Duration::from_secs(10);

fn toy() -> NGramModel {
    common::toy_models(7).swap_remove(2)
}

fn spawn_server(model: NGramModel) -> String {
    let (listener, addr) = bind("127.0.0.1:0").unwrap();
    let shared: Arc<dyn LanguageModel> = Arc::new(model);
    thread::spawn(move || serve_listener(shared, listener));
    addr.to_string()
}

/// A hand-written server: announces `vocab_size`, collects `batch` requests,
/// then answers them via `respond(id, context)` in shuffled order.
fn fake_server<F>(vocab_size: usize, batch: usize, respond: F) -> String
where
    F: Fn(&Value, &[u64]) -> Value + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut writer = stream.try_clone().unwrap();
        let hs = json!({"protocol": 1, "vocab_size": vocab_size, "bos": 0, "eos": 1, "fingerprint": "00".repeat(32)});
        writeln!(writer, "{hs}").unwrap();
        let mut reader = BufReader::new(stream);
        let mut rng = StdRng::seed_from_u64(99);
        loop {
            let mut pending = Vec::new();
            for _ in 0..batch {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap() == 0 {
                    return;
                }
                let v: Value = serde_json::from_str(&line).unwrap();
                let ctx: Vec<u64> = v["context"].as_array().unwrap().iter().map(|t| t.as_u64().unwrap()).collect();
                pending.push(respond(&v["id"], &ctx));
            }
            pending.shuffle(&mut rng);
            for frame in pending {
                writeln!(writer, "{frame}").unwrap();
            }
        }
    });
    addr
}

#[test]
fn loopback_logits_are_bitwise_equal() {
    let model = toy();
    let remote = RemoteModel::connect(&Endpoint::Tcp(spawn_server(model.clone())), TIMEOUT).unwrap();
    assert_eq!(remote.fingerprint(), model.fingerprint());
    assert_eq!(remote.vocab().size(), model.vocab().size());
    let remote = remote.with_vocab(model.vocab().clone()).unwrap();
    let mut rng = StdRng::seed_from_u64(1);
    for _ in 0..50 {
        let (prompt, reference) = common::random_pair(&model, &mut rng);
        let mut ctx = prompt;
        for t in reference {
            let a = remote.next_logits(&ctx).unwrap();
            let b = model.next_logits(&ctx).unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
            ctx.push(t);
        }
    }
}

#[test]
fn vocab_mismatch_is_reported() {
    let model = toy();
    let remote = RemoteModel::connect(&Endpoint::Tcp(spawn_server(model)), TIMEOUT).unwrap();
    let other = NGramModel::train("ab", 2, 1.0).unwrap();
    let err = remote.with_vocab(other.vocab().clone()).unwrap_err().to_string();
    assert!(err.contains("size mismatch"), "{err}");
}

#[test]
fn pipelined_shuffled_responses_are_matched() {
    const V: usize = 8;
    // logits encode the request so mismatches are detectable
    let addr = fake_server(V, 1000, |id, ctx| {
        let mut logits = vec![0.0; V];
        logits[0] = ctx.len() as f64;
        logits[1] = ctx.iter().sum::<u64>() as f64;
        json!({"id": id, "logits": logits})
    });
    let remote = RemoteModel::connect(&Endpoint::Tcp(addr), TIMEOUT).unwrap();
    let contexts: Vec<Vec<TokenId>> = (0..1000u32).map(|i| vec![0; 1 + (i as usize % 37)].into_iter().chain([(i % 7) + 1]).collect()).collect();
    let refs: Vec<&[TokenId]> = contexts.iter().map(Vec::as_slice).collect();
    let answers = remote.next_logits_many(&refs).unwrap();
    for (ctx, logits) in contexts.iter().zip(&answers) {
        assert_eq!(logits[0], ctx.len() as f64);
        assert_eq!(logits[1], ctx.iter().map(|&t| t as f64).sum::<f64>());
    }
}

#[test]
fn wrong_logit_count_is_an_error() {
    let addr = fake_server(8, 1, |id, _| json!({"id": id, "logits": [0.0, 1.0, 2.0]}));
    let remote = RemoteModel::connect(&Endpoint::Tcp(addr), TIMEOUT).unwrap();
    let err = remote.next_logits(&[0]).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("expected 8 logits"), "{msg}");
    assert!(msg.contains("received 3"), "{msg}");
}

#[test]
fn server_error_frames_surface_as_errors() {
    let addr = fake_server(8, 1, |id, _| json!({"id": id, "error": "model exploded"}));
    let remote = RemoteModel::connect(&Endpoint::Tcp(addr), TIMEOUT).unwrap();
    let msg = remote.next_logits(&[0]).unwrap_err().to_string();
    assert!(msg.contains("model exploded"), "{msg}");
}

#[test]
fn out_of_range_token_gets_error_frame_and_connection_survives() {
    let model = toy();
    let v = model.vocab().size();
    let stream = std::net::TcpStream::connect(spawn_server(model)).unwrap();
    let mut writer = stream.try_clone().unwrap();
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    writeln!(writer, "{}", json!({"id": "a", "context": [0, v]})).unwrap();
    writeln!(writer, "{}", json!({"id": "b", "context": [0]})).unwrap();
    let mut frames = Vec::new();
    for _ in 0..2 {
        line.clear();
        reader.read_line(&mut line).unwrap();
        frames.push(serde_json::from_str::<Value>(&line).unwrap());
    }
    assert_eq!(frames[0]["id"], "a");
    assert!(frames[0]["error"].is_string());
    assert_eq!(frames[1]["id"], "b");
    assert_eq!(frames[1]["logits"].as_array().unwrap().len(), v);
}

#[test]
fn silent_server_times_out() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        let (_stream, _) = listener.accept().unwrap();
        thread::sleep(Duration::from_secs(3));
    });
    match RemoteModel::connect(&Endpoint::Tcp(addr), Duration::from_millis(200)) {
        Err(Error::Connection(msg)) => assert!(msg.contains("no response"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn dropped_connection_is_a_connection_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut w = stream.try_clone().unwrap();
        writeln!(w, "{}", json!({"protocol": 1, "vocab_size": 4, "bos": 0, "eos": 1, "fingerprint": "00".repeat(32)})).unwrap();
        drop(stream);
        drop(w);
    });
    let remote = RemoteModel::connect(&Endpoint::Tcp(addr), TIMEOUT).unwrap();
    assert!(matches!(remote.next_logits(&[0]), Err(Error::Connection(_)) | Err(Error::Io(_))));
}

#[test]
fn command_endpoint_speaks_over_stdio() {
    let model = toy();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.json");
    ToyModel::Ngram(model.clone()).save(&path).unwrap();
    let endpoint: Endpoint = format!(
        "cmd:{} serve-logits --model toy:{} --stdio",
        env!("CARGO_BIN_EXE_cfdecode"),
        path.display()
    )
    .parse()
    .unwrap();
    let remote = RemoteModel::connect(&endpoint, TIMEOUT).unwrap();
    assert_eq!(remote.fingerprint(), model.fingerprint());
    let ctx = [model.vocab().bos()];
    let a = remote.next_logits(&ctx).unwrap();
    let b = model.next_logits(&ctx).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}
