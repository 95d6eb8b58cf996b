//! A protocol v1 server around any local [`Scorer`].
//!
//! Serves with `mask_id = |V|`, so client-side ids pass through unchanged.
//! Requests on a connection are answered one at a time, in order.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;

use seqmc_core::energy::Scorer;
use seqmc_core::seq::{apply_mask, Sequence};

use crate::protocol::{decode, encode, Message, PROTOCOL_VERSION};

/// Answers one request line. Never fails: problems become error messages.
pub fn respond<S: Scorer + ?Sized>(scorer: &S, name: &str, line: &str) -> Message {
    let msg = match decode(line) {
        Ok(m) => m,
        Err(e) => {
            return Message::Error {
                id: None,
                message: e.to_string(),
            }
        }
    };
    match msg {
        Message::Hello { protocol_version } if protocol_version == PROTOCOL_VERSION => Message::Info {
            vocab_size: scorer.vocab().size(),
            mask_id: scorer.vocab().mask_id(),
            max_length: scorer.max_length(),
            name: name.to_string(),
            protocol_version: None,
        },
        Message::Hello { protocol_version } => Message::Error {
            id: None,
            message: format!("unsupported protocol version {protocol_version}"),
        },
        Message::Logits { id, tokens, masked } => match score(scorer, &tokens, &masked) {
            Ok(rows) => Message::Rows { id, rows },
            Err(message) => Message::Error { id: Some(id), message },
        },
        other => Message::Error {
            id: None,
            message: format!("unexpected message kind: {other:?}"),
        },
    }
}

fn score<S: Scorer + ?Sized>(scorer: &S, tokens: &[u32], masked: &[usize]) -> Result<Vec<Vec<f64>>, String> {
    let vocab = scorer.vocab();
    let mask = vocab.mask_id();
    if masked.is_empty() {
        return Err("no masked positions".into());
    }
    if tokens.is_empty() || tokens.len() > scorer.max_length() {
        return Err(format!(
            "sequence length {} outside [1, {}]",
            tokens.len(),
            scorer.max_length()
        ));
    }
    let mut is_masked = vec![false; tokens.len()];
    for &p in masked {
        if p >= tokens.len() {
            return Err(format!("masked position {p} beyond length {}", tokens.len()));
        }
        if is_masked[p] {
            return Err(format!("masked position {p} repeated"));
        }
        is_masked[p] = true;
    }
    let mut base = Vec::with_capacity(tokens.len());
    for (t, &tok) in tokens.iter().enumerate() {
        match (is_masked[t], tok == mask) {
            (true, true) => base.push(0),
            (true, false) => return Err(format!("masked position {t} carries token {tok}, not the mask id")),
            (false, true) => return Err(format!("mask id at unmasked position {t}")),
            (false, false) if tok >= vocab.size() => return Err(format!("token {tok} out of range")),
            (false, false) => base.push(tok),
        }
    }
    let seq = Sequence::new(base, vocab).map_err(|e| e.to_string())?;
    let view = apply_mask(&seq, masked).map_err(|e| e.to_string())?;
    let rows = scorer.logits(&view).map_err(|e| e.to_string())?;
    // the view holds positions sorted; answer in request order
    Ok(masked
        .iter()
        .map(|p| {
            let k = view.masked().binary_search(p).expect("masked position present");
            rows[k].values().to_vec()
        })
        .collect())
}

/// Serves until `reader` reaches end of input.
pub fn serve<S, R, W>(scorer: &S, name: &str, reader: R, mut writer: W) -> std::io::Result<()>
where
    S: Scorer + ?Sized,
    R: BufRead,
    W: Write,
{
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = respond(scorer, name, &line);
        let mut text = encode(&reply).unwrap_or_else(|e| {
            encode(&Message::Error {
                id: None,
                message: e.to_string(),
            })
            .expect("error messages always encode")
        });
        text.push('\n');
        writer.write_all(text.as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}

/// Accepts connections and serves each on its own thread, so one chain per
/// connection can run concurrently.
pub fn serve_tcp<S: Scorer + ?Sized>(scorer: &S, name: &str, listener: TcpListener) -> std::io::Result<()> {
    std::thread::scope(|scope| {
        for stream in listener.incoming() {
            let stream = stream?;
            stream.set_nodelay(true).ok();
            let reader = BufReader::new(stream.try_clone()?);
            // a client hanging up mid-request is not the server's failure
            scope.spawn(move || {
                let _ = serve(scorer, name, reader, stream);
            });
        }
        Ok(())
    })
}
