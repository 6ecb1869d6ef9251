//! Operation counts of the context layer: a recurrent pass over utterance
//! vectors against offline and online self-attention. Utterance encoding is
//! not part of any measurement; the inputs are random utterance vectors.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{attend, attend_online, AttentionConfig, AttentionParams, KeyMeanMode};
use crate::encoder::{lstm_forward, LstmParams};
use crate::error::{Error, Result};
use crate::tensor::{Stage, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchDims {
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub use_bias: bool,
    /// Timed repetitions per measurement; counts come from the first.
    pub repeats: usize,
}

impl Default for BenchDims {
    fn default() -> Self {
        BenchDims {
            model_dim: 64,
            heads: 4,
            head_dim: 16,
            use_bias: true,
            repeats: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityRow {
    pub n: usize,
    /// Whole recurrent context layer.
    pub lstm_macs: u64,
    /// Attention stage only: scores, weighted values and the locality prior.
    pub offline_attention_macs: u64,
    pub online_attention_macs: u64,
    /// Attention stage plus the query/key/value and output projections.
    pub offline_total_macs: u64,
    pub online_total_macs: u64,
    pub lstm_ms: f64,
    pub offline_ms: f64,
    pub online_ms: f64,
}

pub const CSV_HEADER: &str = "n,lstm_macs,offline_attention_macs,online_attention_macs,offline_total_macs,online_total_macs,lstm_ms,offline_ms,online_ms";

impl ComplexityRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.4},{:.4},{:.4}",
            self.n,
            self.lstm_macs,
            self.offline_attention_macs,
            self.online_attention_macs,
            self.offline_total_macs,
            self.online_total_macs,
            self.lstm_ms,
            self.offline_ms,
            self.online_ms
        )
    }
}

fn timed<F: FnMut() -> Result<Tape>>(repeats: usize, mut f: F) -> Result<(Tape, f64)> {
    let start = Instant::now();
    let tape = f()?;
    for _ in 1..repeats {
        f()?;
    }
    Ok((tape, start.elapsed().as_secs_f64() * 1e3 / repeats as f64))
}

pub fn measure(lengths: &[usize], dims: BenchDims) -> Result<Vec<ComplexityRow>> {
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(Error::invalid("lengths must be non-empty and positive"));
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("lengths must be strictly ascending"));
    }
    let max_len = *lengths.last().unwrap();
    let d = dims.model_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let lstm = LstmParams::init(d, d, &mut rng);
    let attention = AttentionParams::init(
        AttentionConfig {
            model_dim: d,
            heads: dims.heads,
            head_dim: dims.head_dim,
            max_len,
            center_bound: 3.0,
            deviation_scale: max_len as f64,
            key_mean: KeyMeanMode::FeatureMean,
        },
        &mut rng,
    )?;
    let repeats = dims.repeats.max(1);

    let mut rows = Vec::with_capacity(lengths.len());
    for &n in lengths {
        let s = Tensor::uniform(&[n, d], 1.0, &mut rng);
        let (lstm_tape, lstm_ms) = timed(repeats, || {
            let mut tape = Tape::new();
            tape.set_stage(Stage::Context);
            let vars = lstm.bind(&mut tape)?;
            let x = tape.leaf(&s);
            lstm_forward(&mut tape, x, &vars)?;
            Ok(tape)
        })?;
        let (off_tape, offline_ms) = timed(repeats, || {
            let mut tape = Tape::new();
            let vars = attention.bind(&mut tape);
            let x = tape.leaf(&s);
            attend(&mut tape, x, &vars, dims.use_bias)?;
            Ok(tape)
        })?;
        let (on_tape, online_ms) = timed(repeats, || {
            let mut tape = Tape::new();
            let vars = attention.bind(&mut tape);
            let x = tape.leaf(&s);
            attend_online(&mut tape, x, &vars, dims.use_bias)?;
            Ok(tape)
        })?;
        let attn = |t: &Tape| t.macs().stage(Stage::Attention);
        let with_proj = |t: &Tape| t.macs().stage(Stage::Attention) + t.macs().stage(Stage::Projection);
        rows.push(ComplexityRow {
            n,
            lstm_macs: lstm_tape.macs().total(),
            offline_attention_macs: attn(&off_tape),
            online_attention_macs: attn(&on_tape),
            offline_total_macs: with_proj(&off_tape),
            online_total_macs: with_proj(&on_tape),
            lstm_ms,
            offline_ms,
            online_ms,
        });
    }
    Ok(rows)
}
