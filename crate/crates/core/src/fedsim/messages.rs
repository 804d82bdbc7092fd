use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Everything that crosses a party boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FedMessage {
    WeightsUpload {
        round: usize,
        party: usize,
        weights: Vec<Tensor>,
    },
    WeightsBroadcast {
        round: usize,
        weights: Vec<Tensor>,
    },
    /// A passive party's forward embedding for the listed sample ids.
    Embedding {
        round: usize,
        party: usize,
        sample_ids: Vec<u64>,
        h: Tensor,
    },
    EmbeddingGrad {
        round: usize,
        party: usize,
        grad: Tensor,
    },
}

impl FedMessage {
    pub fn payload(&self) -> Vec<&Tensor> {
        match self {
            FedMessage::WeightsUpload { weights, .. } | FedMessage::WeightsBroadcast { weights, .. } => {
                weights.iter().collect()
            }
            FedMessage::Embedding { h, .. } => vec![h],
            FedMessage::EmbeddingGrad { grad, .. } => vec![grad],
        }
    }
}

/// Append-only record of exchanged messages. When disabled only a count is
/// kept, which keeps long sweeps cheap.
#[derive(Clone, Debug, Default)]
pub struct MessageLog {
    keep: bool,
    count: usize,
    messages: Vec<FedMessage>,
}

impl MessageLog {
    pub fn new(keep: bool) -> Self {
        Self {
            keep,
            count: 0,
            messages: Vec::new(),
        }
    }

    pub fn push(&mut self, m: &FedMessage) {
        self.count += 1;
        if self.keep {
            self.messages.push(m.clone());
        }
    }

    pub fn messages(&self) -> &[FedMessage] {
        &self.messages
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

fn contains_run(hay: &[f64], needle: &[f64]) -> bool {
    if needle.is_empty() || needle.len() > hay.len() {
        return false;
    }
    hay.windows(needle.len()).any(|w| w == needle)
}

/// Fails if any secret (a whole tensor, or any non-constant row of it)
/// appears verbatim inside a logged payload.
pub fn audit_log(log: &MessageLog, secrets: &[(&str, &Tensor)]) -> Result<()> {
    for m in log.messages() {
        for p in m.payload() {
            for (name, s) in secrets {
                if contains_run(p.data(), s.data()) {
                    return Err(Error::Protocol(format!("{name} leaked in {m:?}")));
                }
                if s.ndim() >= 2 {
                    for i in 0..s.shape()[0] {
                        let stride = s.len() / s.shape()[0];
                        let row = &s.data()[i * stride..(i + 1) * stride];
                        let constant = row.iter().all(|&v| v == row[0]);
                        if !constant && contains_run(p.data(), row) {
                            return Err(Error::Protocol(format!("row {i} of {name} leaked")));
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub round: usize,
    pub party: String,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

pub fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn audit_catches_verbatim_rows() {
        let secret = Tensor::matrix(&[&[0.1, 0.2, 0.3], &[0.0, 0.0, 0.0]]);
        let mut log = MessageLog::new(true);
        log.push(&FedMessage::EmbeddingGrad {
            round: 0,
            party: 0,
            grad: Tensor::vector(vec![0.0, 0.0, 0.0, 9.0]),
        });
        audit_log(&log, &[("x", &secret)]).unwrap();
        log.push(&FedMessage::Embedding {
            round: 0,
            party: 0,
            sample_ids: vec![1],
            h: Tensor::vector(vec![5.0, 0.1, 0.2, 0.3]),
        });
        assert!(matches!(audit_log(&log, &[("x", &secret)]), Err(Error::Protocol(_))));
    }
}
