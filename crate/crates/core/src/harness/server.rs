//! Server side of the logit protocol (see [`crate::model::remote`]).

use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, ToSocketAddrs};
use std::sync::Arc;
use std::thread;

use serde_json::Value;

use crate::error::Result;
use crate::model::remote::{ErrorResponse, Handshake, LogitsResponse, PROTOCOL_VERSION};
use crate::model::{LanguageModel, TokenId};

pub fn handshake_for(model: &dyn LanguageModel) -> Handshake {
    let vocab = model.vocab();
    Handshake {
        protocol: PROTOCOL_VERSION,
        vocab_size: vocab.size(),
        bos: vocab.bos(),
        eos: vocab.eos(),
        fingerprint: model.fingerprint().to_hex(),
    }
}

fn parse_request(line: &str) -> (Value, std::result::Result<Vec<TokenId>, String>) {
    let value: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => return (Value::Null, Err(format!("malformed request: {e}"))),
    };
    let id = value.get("id").cloned().unwrap_or(Value::Null);
    let context = match value.get("context").and_then(Value::as_array) {
        Some(items) => items
            .iter()
            .map(|t| {
                t.as_u64()
                    .and_then(|x| TokenId::try_from(x).ok())
                    .ok_or_else(|| format!("context entry {t} is not a token id"))
            })
            .collect(),
        None => Err("request needs a \"context\" array".to_string()),
    };
    if id.is_null() && context.is_ok() {
        return (id, Err("request needs an \"id\"".to_string()));
    }
    (id, context)
}

/// Answer requests on one connection until the peer closes it. Malformed
/// requests get an error frame and the connection stays open.
pub fn serve_connection<R: BufRead, W: Write>(
    model: &dyn LanguageModel,
    reader: R,
    mut writer: W,
) -> io::Result<()> {
    serde_json::to_writer(&mut writer, &handshake_for(model))?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, context) = parse_request(&line);
        let result = context.and_then(|ctx| model.next_logits(&ctx).map_err(|e| e.to_string()));
        match result {
            Ok(logits) => serde_json::to_writer(&mut writer, &LogitsResponse { id: &id, logits: &logits })?,
            Err(msg) => serde_json::to_writer(&mut writer, &ErrorResponse { id: &id, error: &msg })?,
        }
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

pub fn bind(addr: impl ToSocketAddrs) -> Result<(TcpListener, SocketAddr)> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    Ok((listener, local))
}

/// Accept connections forever, one thread per connection.
pub fn serve_listener(model: Arc<dyn LanguageModel>, listener: TcpListener) -> Result<()> {
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let model = Arc::clone(&model);
        thread::spawn(move || {
            let peer = stream.peer_addr().ok();
            stream.set_nodelay(true).ok();
            let reader = match stream.try_clone() {
                Ok(r) => BufReader::new(r),
                Err(e) => {
                    log::warn!("cannot clone stream for {peer:?}: {e}");
                    return;
                }
            };
            if let Err(e) = serve_connection(model.as_ref(), reader, BufWriter::new(stream)) {
                log::info!("connection {peer:?} ended: {e}");
            }
        });
    }
    Ok(())
}

pub fn serve_stdio(model: &dyn LanguageModel) -> Result<()> {
    let stdin = io::stdin();
    let stdout = io::stdout();
    serve_connection(model, stdin.lock(), stdout.lock())?;
    Ok(())
}
