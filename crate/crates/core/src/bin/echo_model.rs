//! Reference model process for the DXP1/DXR1 protocol.
//!
//! The score of class `c` is the mean darkness (`1 - intensity`) of the `c`-th
//! of `n` equal horizontal stripes of the image.
//!
//! ```text
//! docxplain-echo-model [--classes N] [--fault bad-magic|truncate]
//! ```
//!
//! `--fault` makes every reply violate the protocol, for testing clients.

use std::io::{self, BufReader, BufWriter, Write};
use std::process::ExitCode;

use docxplain_core::model::protocol::{read_request, write_reply, ScoreRequest};

#[derive(Clone, Copy, PartialEq)]
enum Fault {
    None,
    BadMagic,
    Truncate,
}

fn parse_args() -> Result<(usize, Fault), String> {
    let mut classes = 2usize;
    let mut fault = Fault::None;
    let mut args = std::env::args().skip(1);
    while let Some(arg) = args.next() {
        let value = args.next().ok_or_else(|| format!("{arg} needs a value"))?;
        match arg.as_str() {
            "--classes" => {
                classes = value.parse().map_err(|e| format!("--classes {value:?}: {e}"))?;
                if classes == 0 {
                    return Err("--classes must be at least 1".into());
                }
            }
            "--fault" => {
                fault = match value.as_str() {
                    "bad-magic" => Fault::BadMagic,
                    "truncate" => Fault::Truncate,
                    other => return Err(format!("unknown fault {other:?}")),
                }
            }
            other => return Err(format!("unknown argument {other:?}")),
        }
    }
    Ok((classes, fault))
}

fn stripe_scores(req: &ScoreRequest, i: usize, classes: usize) -> Vec<f32> {
    let (h, w, c) = (req.height as usize, req.width as usize, req.channels as usize);
    let img = req.image(i);
    (0..classes)
        .map(|k| {
            let (y0, y1) = (k * h / classes, ((k + 1) * h / classes).max(k * h / classes + 1).min(h));
            let mut dark = 0.0f64;
            for y in y0..y1 {
                for px in img[y * w * c..(y + 1) * w * c].chunks_exact(c) {
                    dark += 1.0 - px.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
                }
            }
            (dark / ((y1 - y0) * w) as f64) as f32
        })
        .collect()
}

fn main() -> ExitCode {
    let (classes, fault) = match parse_args() {
        Ok(v) => v,
        Err(e) => {
            eprintln!("docxplain-echo-model: {e}");
            return ExitCode::from(1);
        }
    };
    let mut input = BufReader::new(io::stdin().lock());
    let mut output = BufWriter::new(io::stdout().lock());
    loop {
        let req = match read_request(&mut input) {
            Ok(Some(r)) => r,
            Ok(None) => return ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("docxplain-echo-model: {e}");
                return ExitCode::from(2);
            }
        };
        let scores: Vec<Vec<f32>> = (0..req.batch as usize)
            .map(|i| stripe_scores(&req, i, classes))
            .collect();
        let mut reply = Vec::new();
        write_reply(&mut reply, classes, &scores).expect("in-memory write");
        match fault {
            Fault::None => {}
            Fault::BadMagic => reply[..4].copy_from_slice(b"XXXX"),
            Fault::Truncate => reply.truncate(reply.len() / 2),
        }
        if output.write_all(&reply).and_then(|_| output.flush()).is_err() {
            return ExitCode::SUCCESS;
        }
        if fault == Fault::Truncate {
            // The client sees EOF in the middle of the reply.
            return ExitCode::SUCCESS;
        }
    }
}
