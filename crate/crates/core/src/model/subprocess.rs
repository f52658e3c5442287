//! Classifier backed by a child process speaking the DXP1/DXR1 protocol.

use std::io::{BufReader, BufWriter};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use super::protocol::{read_reply, write_request};
use super::{Backend, Classifier, ModelError, ModelInfo, ScoreVector};
use crate::imaging::RasterImage;

struct ChildIo {
    child: Child,
    stdin: Option<BufWriter<ChildStdin>>,
    stdout: BufReader<ChildStdout>,
}

pub struct SubprocessClassifier {
    info: ModelInfo,
    command: Vec<String>,
    io: Mutex<ChildIo>,
}

impl std::fmt::Debug for SubprocessClassifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SubprocessClassifier")
            .field("command", &self.command)
            .field("info", &self.info)
            .finish()
    }
}

impl SubprocessClassifier {
    /// Spawns `command[0]` with the remaining arguments. The child must answer
    /// every request with exactly `n_classes` scores per image.
    pub fn spawn(
        command: &[String],
        width: usize,
        height: usize,
        channels: usize,
        n_classes: usize,
        max_batch: usize,
    ) -> Result<Self, ModelError> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| ModelError::InvalidSpec("empty subprocess command".into()))?;
        if n_classes < 2 || max_batch == 0 {
            return Err(ModelError::InvalidSpec(format!(
                "n_classes {n_classes} must be >= 2 and max_batch {max_batch} >= 1"
            )));
        }
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ModelError::Backend(format!("failed to spawn {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(Self {
            info: ModelInfo {
                input_width: width,
                input_height: height,
                input_channels: channels,
                n_classes,
                max_batch,
                backend: Backend::Subprocess,
            },
            command: command.to_vec(),
            io: Mutex::new(ChildIo {
                child,
                stdin: Some(BufWriter::new(stdin)),
                stdout: BufReader::new(stdout),
            }),
        })
    }
}

impl Classifier for SubprocessClassifier {
    fn info(&self) -> ModelInfo {
        self.info.clone()
    }

    fn score(&self, images: &[RasterImage]) -> Result<Vec<ScoreVector>, ModelError> {
        let mut io = self.io.lock().unwrap_or_else(|p| p.into_inner());
        let stdin = io
            .stdin
            .as_mut()
            .ok_or_else(|| ModelError::Backend("model process already closed".into()))?;
        write_request(stdin, images)
            .map_err(|e| ModelError::Backend(format!("writing request: {e}")))?;
        let reply = read_reply(&mut io.stdout, images.len() as u32)?;
        if reply.n_classes as usize != self.info.n_classes {
            return Err(ModelError::Protocol(super::protocol::ProtocolError {
                offset: 8,
                message: format!(
                    "reply has {} classes, model declared {}",
                    reply.n_classes, self.info.n_classes
                ),
            }));
        }
        Ok((0..images.len())
            .map(|i| ScoreVector(reply.row(i).iter().map(|&v| v as f64).collect()))
            .collect())
    }
}

impl Drop for SubprocessClassifier {
    fn drop(&mut self) {
        let io = self.io.get_mut().unwrap_or_else(|p| p.into_inner());
        // Closing stdin signals EOF; the child is expected to exit.
        io.stdin.take();
        let _ = io.child.wait();
    }
}
