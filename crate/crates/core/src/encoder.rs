//! Utterance encoder: token embedding, LSTM, and max-pooling over time.

use std::io::BufRead;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Stage, Tape, Tensor, Var};
use crate::vocab::{Vocab, PAD};

/// Token ids padded or truncated to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtteranceTokens {
    ids: Vec<usize>,
    true_length: usize,
}

impl UtteranceTokens {
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn true_length(&self) -> usize {
        self.true_length
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Keeps the first `max_len` ids and fills the rest with `PAD`.
pub fn pad_or_truncate(tokens: &[usize], max_len: usize) -> Result<UtteranceTokens> {
    if max_len < 1 {
        return Err(Error::invalid("utterance length must be at least 1"));
    }
    let true_length = tokens.len().min(max_len);
    let mut ids = tokens[..true_length].to_vec();
    ids.resize(max_len, PAD);
    Ok(UtteranceTokens { ids, true_length })
}

/// Weights of a single LSTM layer with gate blocks ordered `[i, f, g, o]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `[4·hidden × input]`
    pub w_ih: Tensor,
    /// `[4·hidden × hidden]`
    pub w_hh: Tensor,
    /// `[4·hidden]`
    pub bias: Tensor,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            w_ih: Tensor::zeros(&[4 * hidden, input]),
            w_hh: Tensor::zeros(&[4 * hidden, hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    /// Uniform weights in `±1/√hidden`, forget-gate bias 1, other biases 0.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        LstmParams {
            w_ih: Tensor::uniform(&[4 * hidden, input], bound, rng),
            w_hh: Tensor::uniform(&[4 * hidden, hidden], bound, rng),
            bias,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.cols()
    }

    pub fn input(&self) -> usize {
        self.w_ih.cols()
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("w_ih", &self.w_ih), ("w_hh", &self.w_hh), ("bias", &self.bias)]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("w_ih", &mut self.w_ih), ("w_hh", &mut self.w_hh), ("bias", &mut self.bias)]
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<LstmVars> {
        let w_ih = tape.param(&self.w_ih);
        let w_hh = tape.param(&self.w_hh);
        let bias = tape.param(&self.bias);
        LstmVars::from_vars(tape, w_ih, w_hh, bias)
    }
}

/// LSTM weights recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
    w_ih_t: Var,
    w_hh_t: Var,
    input: usize,
    hidden: usize,
}

impl LstmVars {
    /// Wraps weights already on `tape`, shaped like [`LstmParams`].
    pub fn from_vars(tape: &mut Tape, w_ih: Var, w_hh: Var, bias: Var) -> Result<Self> {
        let (gates, input) = match tape.shape(w_ih) {
            [g, i] => (*g, *i),
            other => return Err(Error::shape("LstmVars", "[4·hidden x input]", format!("{other:?}"))),
        };
        let hidden = gates / 4;
        if gates % 4 != 0 || tape.shape(w_hh) != [gates, hidden] || tape.shape(bias) != [gates] {
            return Err(Error::shape(
                "LstmVars",
                format!("[{gates} x {hidden}] and [{gates}]"),
                format!("{:?} and {:?}", tape.shape(w_hh), tape.shape(bias)),
            ));
        }
        Ok(LstmVars {
            w_ih_t: tape.transpose(w_ih)?,
            w_hh_t: tape.transpose(w_hh)?,
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        })
    }

    pub fn vars(&self) -> [Var; 3] {
        [self.w_ih, self.w_hh, self.bias]
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Projects time-major inputs `[steps·batch × input]` through the input
    /// weights, giving the per-step gate pre-activations.
    pub fn project_inputs(&self, tape: &mut Tape, inputs: Var) -> Result<Var> {
        let cols = tape.shape(inputs).get(1).copied().unwrap_or(0);
        if cols != self.input {
            return Err(Error::shape("lstm", format!("inputs with {} features", self.input), format!("{cols} features")));
        }
        tape.matmul(inputs, self.w_ih_t)
    }

    /// Runs the recurrence from `h₀ = c₀ = 0` over pre-projected inputs
    /// `[steps·batch × 4·hidden]` laid out time-major. Returns `h_1..h_steps`,
    /// each `[batch × hidden]`.
    pub fn run(&self, tape: &mut Tape, projected: Var, steps: usize, batch: usize) -> Result<Vec<Var>> {
        let d = self.hidden;
        let mut h = tape.zeros(&[batch, d]);
        let mut c = tape.zeros(&[batch, d]);
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            let x_t = tape.slice_rows(projected, t * batch..(t + 1) * batch)?;
            let rec = tape.matmul(h, self.w_hh_t)?;
            let pre = tape.add(x_t, rec)?;
            let gates = tape.add_row_bias(pre, self.bias)?;
            let i = tape.slice_cols(gates, 0..d)?;
            let f = tape.slice_cols(gates, d..2 * d)?;
            let g = tape.slice_cols(gates, 2 * d..3 * d)?;
            let o = tape.slice_cols(gates, 3 * d..4 * d)?;
            let i = tape.sigmoid(i)?;
            let f = tape.sigmoid(f)?;
            let g = tape.tanh(g)?;
            let o = tape.sigmoid(o)?;
            let keep = tape.mul(f, c)?;
            let write = tape.mul(i, g)?;
            c = tape.add(keep, write)?;
            let squashed = tape.tanh(c)?;
            h = tape.mul(o, squashed)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Embedding table plus the utterance-level LSTM.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `[|V| × d_e]`
    pub embedding: Tensor,
    pub lstm: LstmParams,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(vocab_size: usize, embed_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        EncoderParams {
            embedding: Tensor::uniform(&[vocab_size, embed_dim], 0.1, rng),
            lstm: LstmParams::init(embed_dim, hidden_dim, rng),
        }
    }

    pub fn zeros(vocab_size: usize, embed_dim: usize, hidden_dim: usize) -> Self {
        EncoderParams {
            embedding: Tensor::zeros(&[vocab_size, embed_dim]),
            lstm: LstmParams::zeros(embed_dim, hidden_dim),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.lstm.hidden()
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![("embedding", &self.embedding)];
        out.extend(self.lstm.named());
        out
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = vec![("embedding", &mut self.embedding)];
        out.extend(self.lstm.named_mut());
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<EncoderVars> {
        Ok(EncoderVars {
            embedding: tape.param(&self.embedding),
            lstm: self.lstm.bind(tape)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub embedding: Var,
    pub lstm: LstmVars,
}

impl EncoderVars {
    /// Same order as [`EncoderParams::named`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.embedding];
        out.extend(self.lstm.vars());
        out
    }
}

/// Looks up one embedding row per token, `[M × d_e]`.
pub fn embed(tape: &mut Tape, tokens: &UtteranceTokens, embedding: Var) -> Result<Var> {
    tape.gather_rows(embedding, tokens.ids())
}

/// Hidden states `h_1..h_M` for one utterance, `[M × d_s]`.
pub fn lstm_forward(tape: &mut Tape, embeds: Var, lstm: &LstmVars) -> Result<Var> {
    let steps = tape.shape(embeds)[0];
    let projected = lstm.project_inputs(tape, embeds)?;
    let hs = lstm.run(tape, projected, steps, 1)?;
    tape.concat_rows(&hs)
}

/// Per-dimension maximum over time steps, `[1 × d_s]`.
pub fn max_pool_time(tape: &mut Tape, hidden: Var) -> Result<Var> {
    if tape.value(hidden).is_empty() {
        return Err(Error::Empty("max_pool_time"));
    }
    tape.max_rows(hidden)
}

/// `embed → lstm_forward → max_pool_time`. With `pool_true_length`, only the
/// first `max(1, true_length)` positions take part in the pooling.
pub fn encode_utterance(tape: &mut Tape, tokens: &UtteranceTokens, vars: &EncoderVars, pool_true_length: bool) -> Result<Var> {
    let prev = tape.set_stage(Stage::Encoder);
    let result = (|| {
        let e = embed(tape, tokens, vars.embedding)?;
        let h = lstm_forward(tape, e, &vars.lstm)?;
        if pool_true_length {
            let keep = tokens.true_length().max(1);
            let h = tape.slice_rows(h, 0..keep)?;
            max_pool_time(tape, h)
        } else {
            max_pool_time(tape, h)
        }
    })();
    tape.set_stage(prev);
    result
}

/// Encodes several utterances in one batched recurrence, `[B × d_s]`. Row
/// `b` equals `encode_utterance(utterances[b])`.
pub fn encode_batch(tape: &mut Tape, utterances: &[UtteranceTokens], vars: &EncoderVars, pool_true_length: bool) -> Result<Var> {
    let first = utterances.first().ok_or(Error::Empty("encode_batch"))?;
    let steps = first.len();
    if let Some(bad) = utterances.iter().find(|u| u.len() != steps) {
        return Err(Error::shape("encode_batch", format!("{steps} tokens per utterance"), format!("{} tokens", bad.len())));
    }
    let batch = utterances.len();
    let mut ids = Vec::with_capacity(steps * batch);
    for t in 0..steps {
        ids.extend(utterances.iter().map(|u| u.ids()[t]));
    }
    let prev = tape.set_stage(Stage::Encoder);
    let result = (|| {
        let e = tape.gather_rows(vars.embedding, &ids)?;
        let projected = vars.lstm.project_inputs(tape, e)?;
        let hs = vars.lstm.run(tape, projected, steps, batch)?;
        if pool_true_length {
            let limits: Vec<usize> = utterances.iter().map(|u| u.true_length().max(1)).collect();
            tape.max_over(&hs, Some(&limits))
        } else {
            tape.max_over(&hs, None)
        }
    })();
    tape.set_stage(prev);
    result
}

/// Loads a text embedding file (`token v_1 .. v_d` per line) into the rows
/// of `embedding` whose tokens are in `vocab`. Returns how many rows were
/// overwritten.
pub fn load_embeddings(path: &Path, vocab: &Vocab, embedding: &mut Tensor) -> Result<usize> {
    let dim = embedding.cols();
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut hits = 0;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let values = values.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        if values.len() != dim {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("expected {dim} values, found {}", values.len()),
            });
        }
        let id = vocab.id(token);
        if id == crate::vocab::UNK && token != crate::vocab::UNK_TOKEN {
            continue;
        }
        embedding.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&values);
        hits += 1;
    }
    Ok(hits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn padding_and_truncation() {
        let t = pad_or_truncate(&[5, 6], 4).unwrap();
        assert_eq!(t.ids(), &[5, 6, PAD, PAD]);
        assert_eq!(t.true_length(), 2);
        let t = pad_or_truncate(&[5, 6, 7], 2).unwrap();
        assert_eq!(t.ids(), &[5, 6]);
        assert_eq!(t.true_length(), 2);
        let t = pad_or_truncate(&[], 3).unwrap();
        assert_eq!(t.ids(), &[PAD, PAD, PAD]);
        assert_eq!(t.true_length(), 0);
        assert!(pad_or_truncate(&[1], 0).is_err());
    }

    #[test]
    fn embed_lookup_and_scatter() {
        let e = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let mut tape = Tape::new();
        let ev = tape.param(&e);
        let toks = pad_or_truncate(&[2], 2).unwrap();
        let out = embed(&mut tape, &toks, ev).unwrap();
        assert_eq!(tape.value(out), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let s = tape.sum(out).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(ev).unwrap(), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let ev = tape.param(&e);
        let toks = pad_or_truncate(&[1, 1], 2).unwrap();
        let out = embed(&mut tape, &toks, ev).unwrap();
        let s = tape.sum(out).unwrap();
        let g = tape.backward(s).unwrap();
        // scatter-add oracle: row 1 hit twice
        let mut expected = vec![0.0; 9];
        for _ in 0..2 {
            for c in 0..3 {
                expected[3 + c] += 1.0;
            }
        }
        assert_eq!(g.get(ev).unwrap(), expected.as_slice());
    }

    #[test]
    fn embed_rejects_out_of_range() {
        let mut tape = Tape::new();
        let ev = tape.param(&Tensor::zeros(&[3, 2]));
        let toks = pad_or_truncate(&[7], 1).unwrap();
        assert!(matches!(embed(&mut tape, &toks, ev), Err(Error::OutOfVocab { id: 7, size: 3 })));
    }

    #[test]
    fn zero_lstm_gives_zero_states() {
        let params = EncoderParams::zeros(5, 3, 4);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape).unwrap();
        let toks = pad_or_truncate(&[2, 3, 4], 6).unwrap();
        let e = embed(&mut tape, &toks, vars.embedding).unwrap();
        let h = lstm_forward(&mut tape, e, &vars.lstm).unwrap();
        assert_eq!(tape.shape(h), &[6, 4]);
        assert!(tape.value(h).iter().all(|&v| v == 0.0));
        let u = encode_utterance(&mut tape, &toks, &vars, false).unwrap();
        assert!(tape.value(u).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forget_bias_initialized_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = LstmParams::init(3, 4, &mut rng);
        assert!(p.bias.data()[4..8].iter().all(|&b| b == 1.0));
        assert!(p.bias.data()[..4].iter().chain(&p.bias.data()[8..]).all(|&b| b == 0.0));
    }

    #[test]
    fn max_pool_examples() {
        let mut tape = Tape::new();
        let h = tape.param(&Tensor::from_rows(&[vec![1.0, 4.0], vec![3.0, 2.0]]).unwrap());
        let p = max_pool_time(&mut tape, h).unwrap();
        assert_eq!(tape.value(p), &[3.0, 4.0]);
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(h).unwrap(), &[0.0, 1.0, 1.0, 0.0]);

        let mut tape = Tape::new();
        let h = tape.param(&Tensor::from_rows(&[vec![-1.0, 0.5]]).unwrap());
        let p = max_pool_time(&mut tape, h).unwrap();
        assert_eq!(tape.value(p), &[-1.0, 0.5]);
    }

    #[test]
    fn lstm_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lstm = LstmParams::init(4, 4, &mut rng);
        let embeds = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let readout = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let err = finite_diff_check(&[embeds, lstm.w_ih.clone(), lstm.w_hh.clone(), lstm.bias.clone()], 1e-4, |t, v| {
            let w_ih_t = t.transpose(v[1])?;
            let w_hh_t = t.transpose(v[2])?;
            let vars = LstmVars {
                w_ih: v[1],
                w_hh: v[2],
                bias: v[3],
                w_ih_t,
                w_hh_t,
                input: 4,
                hidden: 4,
            };
            let h = lstm_forward(t, v[0], &vars)?;
            let r = t.leaf(&readout);
            let p = t.mul(h, r)?;
            t.sum(p)
        })
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn encoder_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = EncoderParams::init(6, 3, 4, &mut rng);
        let toks = pad_or_truncate(&[2, 5, 3], 4).unwrap();
        let readout = Tensor::uniform(&[1, 4], 1.0, &mut rng);
        let tensors: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
        let err = finite_diff_check(&tensors, 1e-4, |t, v| {
            let lstm = LstmVars {
                w_ih: v[1],
                w_hh: v[2],
                bias: v[3],
                w_ih_t: t.transpose(v[1])?,
                w_hh_t: t.transpose(v[2])?,
                input: 3,
                hidden: 4,
            };
            let vars = EncoderVars { embedding: v[0], lstm };
            let u = encode_utterance(t, &toks, &vars, false)?;
            let r = t.leaf(&readout);
            let p = t.mul(u, r)?;
            t.sum(p)
        })
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn encode_matches_manual_composition_and_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = EncoderParams::init(10, 5, 6, &mut rng);
        let utts: Vec<UtteranceTokens> = [vec![2, 3, 4], vec![9], vec![]]
            .iter()
            .map(|ids| pad_or_truncate(ids, 5).unwrap())
            .collect();
        for pool_true in [false, true] {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape).unwrap();
            let batch = encode_batch(&mut tape, &utts, &vars, pool_true).unwrap();
            let batch = tape.value(batch).to_vec();
            for (b, u) in utts.iter().enumerate() {
                let single = encode_utterance(&mut tape, u, &vars, pool_true).unwrap();
                let e = embed(&mut tape, u, vars.embedding).unwrap();
                let h = lstm_forward(&mut tape, e, &vars.lstm).unwrap();
                let h = if pool_true { tape.slice_rows(h, 0..u.true_length().max(1)).unwrap() } else { h };
                let manual = max_pool_time(&mut tape, h).unwrap();
                assert_eq!(tape.value(single), tape.value(manual));
                for (x, y) in tape.value(single).iter().zip(&batch[b * 6..(b + 1) * 6]) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn encoding_is_deterministic_and_order_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cases = 0;
        while cases < 10 {
            let params = EncoderParams::init(12, 4, 5, &mut rng);
            let a = rng.gen_range(2..12);
            let b = rng.gen_range(2..12);
            if a == b {
                continue;
            }
            let fwd = pad_or_truncate(&[a, b, 3], 4).unwrap();
            let rev = pad_or_truncate(&[b, a, 3], 4).unwrap();
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape).unwrap();
            let x = encode_utterance(&mut tape, &fwd, &vars, false).unwrap();
            let x2 = encode_utterance(&mut tape, &fwd, &vars, false).unwrap();
            let y = encode_utterance(&mut tape, &rev, &vars, false).unwrap();
            assert_eq!(tape.value(x), tape.value(x2));
            let diff = tape.value(x).iter().zip(tape.value(y)).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(diff > 1e-9, "swap produced identical encodings");
            cases += 1;
        }
    }

    #[test]
    fn pooled_output_dominates_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let rows = rng.gen_range(1..8);
            let mut tape = Tape::new();
            let h = tape.leaf(&Tensor::uniform(&[rows, 4], 2.0, &mut rng));
            let p = max_pool_time(&mut tape, h).unwrap();
            let pooled = tape.value(p).to_vec();
            for row in tape.value(h).chunks(4) {
                assert!(row.iter().zip(&pooled).all(|(r, m)| r <= m));
            }
        }
    }

    #[test]
    fn embedding_file_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        std::fs::write(&path, "hello 1 2\nmissing 3 4\n").unwrap();
        let vocab = Vocab::from_tokens(["hello"]).unwrap();
        let mut e = Tensor::zeros(&[3, 2]);
        assert_eq!(load_embeddings(&path, &vocab, &mut e).unwrap(), 1);
        assert_eq!(e.row(2), &[1.0, 2.0]);
        std::fs::write(&path, "hello 1\n").unwrap();
        assert!(matches!(load_embeddings(&path, &vocab, &mut e), Err(Error::Parse { line: 1, .. })));
    }
}
