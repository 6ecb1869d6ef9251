//! Inter-utterance context layer: multi-head scaled dot-product attention
//! with a learnable Gaussian locality prior, a residual connection, and the
//! per-utterance classifier.
//!
//! For a window of `N` utterance vectors `s`, each head computes
//! `softmax(Q Kᵀ / √d_z + POS) V`. The prior is
//! `POS[i][j] = -(j - c_i)² / (2 w_i²)` with
//!
//! ```text
//! c_i = i + C · tanh(W^c_i · K̄)
//! w_i = D · sigmoid(W^d_i · K̄)
//! ```
//!
//! so every center stays strictly within `C` positions of its own utterance
//! and every width lies in `(0, D)`. `K̄` summarizes the keys averaged over
//! heads (see [`KeyMeanMode`]), and one `POS` is shared by all heads.
//!
//! The online path ([`attend_online`]) evaluates only the query of the most
//! recent utterance, so its attention cost is linear in the window length.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Stage, Tape, Tensor, Var};

/// Which mean of the keys conditions the centers and widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KeyMeanMode {
    /// Mean over the feature dimension: one value per position, so `W^c`
    /// and `W^d` are `[N_max × N_max]`.
    #[default]
    FeatureMean,
    /// Mean over positions: a `d_z` vector, so `W^c` and `W^d` are
    /// `[N_max × d_z]`.
    PositionMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Longest window the locality weights cover.
    pub max_len: usize,
    /// Bound `C` on how far a center may move from its own position.
    pub center_bound: f64,
    /// Upper bound `D` on the Gaussian width.
    pub deviation_scale: f64,
    pub key_mean: KeyMeanMode,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.head_dim == 0 || self.max_len == 0 {
            return Err(Error::invalid("attention dimensions must be positive"));
        }
        if !(self.center_bound > 0.0) || !(self.deviation_scale > 0.0) {
            return Err(Error::invalid(format!(
                "center bound C and deviation scale D must be positive, got C={} D={}",
                self.center_bound, self.deviation_scale
            )));
        }
        Ok(())
    }

    fn locality_cols(&self) -> usize {
        match self.key_mean {
            KeyMeanMode::FeatureMean => self.max_len,
            KeyMeanMode::PositionMean => self.head_dim,
        }
    }
}

/// Attention weights. Head `h` owns columns `h·d_z .. (h+1)·d_z` of the
/// query, key, and value projections.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub config: AttentionConfig,
    /// `[d_s × H·d_z]`
    pub w_query: Tensor,
    /// `[d_s × H·d_z]`
    pub w_key: Tensor,
    /// `[d_s × H·d_z]`
    pub w_value: Tensor,
    /// `[H·d_z × d_s]`
    pub w_out: Tensor,
    /// Center weights `W^c`, zero-initialized.
    pub w_center: Tensor,
    /// Width weights `W^d`, zero-initialized.
    pub w_width: Tensor,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(config: AttentionConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let inner = config.heads * config.head_dim;
        let proj = 1.0 / (config.model_dim as f64).sqrt();
        let out = 1.0 / (inner as f64).sqrt();
        Ok(AttentionParams {
            config,
            w_query: Tensor::uniform(&[config.model_dim, inner], proj, rng),
            w_key: Tensor::uniform(&[config.model_dim, inner], proj, rng),
            w_value: Tensor::uniform(&[config.model_dim, inner], proj, rng),
            w_out: Tensor::uniform(&[inner, config.model_dim], out, rng),
            w_center: Tensor::zeros(&[config.max_len, config.locality_cols()]),
            w_width: Tensor::zeros(&[config.max_len, config.locality_cols()]),
        })
    }

    pub fn zeros(config: AttentionConfig) -> Result<Self> {
        config.validate()?;
        let inner = config.heads * config.head_dim;
        Ok(AttentionParams {
            config,
            w_query: Tensor::zeros(&[config.model_dim, inner]),
            w_key: Tensor::zeros(&[config.model_dim, inner]),
            w_value: Tensor::zeros(&[config.model_dim, inner]),
            w_out: Tensor::zeros(&[inner, config.model_dim]),
            w_center: Tensor::zeros(&[config.max_len, config.locality_cols()]),
            w_width: Tensor::zeros(&[config.max_len, config.locality_cols()]),
        })
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_query", &self.w_query),
            ("w_key", &self.w_key),
            ("w_value", &self.w_value),
            ("w_out", &self.w_out),
            ("w_center", &self.w_center),
            ("w_width", &self.w_width),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w_query", &mut self.w_query),
            ("w_key", &mut self.w_key),
            ("w_value", &mut self.w_value),
            ("w_out", &mut self.w_out),
            ("w_center", &mut self.w_center),
            ("w_width", &mut self.w_width),
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            config: self.config,
            w_query: tape.param(&self.w_query),
            w_key: tape.param(&self.w_key),
            w_value: tape.param(&self.w_value),
            w_out: tape.param(&self.w_out),
            w_center: tape.param(&self.w_center),
            w_width: tape.param(&self.w_width),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub config: AttentionConfig,
    pub w_query: Var,
    pub w_key: Var,
    pub w_value: Var,
    pub w_out: Var,
    pub w_center: Var,
    pub w_width: Var,
}

impl AttentionVars {
    /// Same order as [`AttentionParams::named`].
    pub fn vars(&self) -> Vec<Var> {
        vec![self.w_query, self.w_key, self.w_value, self.w_out, self.w_center, self.w_width]
    }
}

/// Tape handles for the locality prior of some rows.
#[derive(Debug, Clone, Copy)]
pub struct BiasVars {
    /// `[rows × N]`
    pub pos: Var,
    /// `[rows × 1]`
    pub centers: Var,
    /// `[rows × 1]`
    pub widths: Var,
}

impl BiasVars {
    pub fn to_field(&self, tape: &Tape) -> BiasField {
        BiasField {
            pos: tape.tensor(self.pos),
            centers: tape.value(self.centers).to_vec(),
            widths: tape.value(self.widths).to_vec(),
        }
    }
}

/// Evaluated locality prior.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasField {
    pub pos: Tensor,
    pub centers: Vec<f64>,
    pub widths: Vec<f64>,
}

/// Key summary feeding the locality weights.
///
/// `keys` is `[N × heads·d_z]`; heads are averaged first. With
/// [`KeyMeanMode::FeatureMean`] the result is `[N_max × 1]`, the per-position
/// feature mean zero-padded past `N`. With [`KeyMeanMode::PositionMean`] it is
/// `[d_z × 1]`.
pub fn key_mean(tape: &mut Tape, keys: Var, heads: usize, max_len: usize, mode: KeyMeanMode) -> Result<Var> {
    let shape = tape.shape(keys).to_vec();
    let (n, width) = match shape[..] {
        [n, w] => (n, w),
        _ => return Err(Error::shape("key_mean", "a matrix", format!("{shape:?}"))),
    };
    if heads == 0 || width % heads != 0 {
        return Err(Error::shape("key_mean", format!("width divisible by {heads} heads"), format!("{width}")));
    }
    match mode {
        KeyMeanMode::FeatureMean => {
            if n > max_len {
                return Err(Error::WindowTooLong { len: n, max: max_len });
            }
            // the mean over all heads·d_z columns equals the feature mean of
            // the head-averaged keys
            let m = tape.mean_cols(keys)?;
            if n == max_len {
                Ok(m)
            } else {
                let pad = tape.zeros(&[max_len - n, 1]);
                tape.concat_rows(&[m, pad])
            }
        }
        KeyMeanMode::PositionMean => {
            let d = width / heads;
            let mut acc = tape.slice_cols(keys, 0..d)?;
            for h in 1..heads {
                let part = tape.slice_cols(keys, h * d..(h + 1) * d)?;
                acc = tape.add(acc, part)?;
            }
            let avg = tape.scale(acc, 1.0 / heads as f64)?;
            let m = tape.mean_rows(avg)?;
            tape.reshape(m, &[d, 1])
        }
    }
}

/// Locality prior for query rows `rows` of a window of length `n`.
pub fn gaussian_bias(tape: &mut Tape, summary: Var, vars: &AttentionVars, n: usize, rows: std::ops::Range<usize>) -> Result<BiasVars> {
    let cfg = vars.config;
    if n == 0 {
        return Err(Error::Empty("gaussian_bias"));
    }
    if n > cfg.max_len {
        return Err(Error::WindowTooLong { len: n, max: cfg.max_len });
    }
    if rows.start >= rows.end || rows.end > n {
        return Err(Error::invalid(format!("gaussian_bias: rows {rows:?} outside window of {n}")));
    }
    let prev = tape.set_stage(Stage::Attention);
    let result = (|| {
        // zero padding past n contributes nothing, so only the leading n
        // columns of the locality weights take part
        let (summary, cols) = match cfg.key_mean {
            KeyMeanMode::FeatureMean => (tape.slice_rows(summary, 0..n)?, 0..n),
            KeyMeanMode::PositionMean => (summary, 0..cfg.head_dim),
        };
        let wc = tape.slice(vars.w_center, rows.clone(), cols.clone())?;
        let wd = tape.slice(vars.w_width, rows.clone(), cols)?;
        let zc = tape.matmul(wc, summary)?;
        let zd = tape.matmul(wd, summary)?;
        let shift = tape.tanh(zc)?;
        let shift = tape.scale(shift, cfg.center_bound)?;
        let own: Vec<f64> = rows.clone().map(|i| i as f64).collect();
        let centers = tape.add_const(shift, &own)?;
        let widths = tape.sigmoid(zd)?;
        let widths = tape.scale(widths, cfg.deviation_scale)?;
        let pos = tape.gaussian_pos(centers, widths, n)?;
        Ok(BiasVars { pos, centers, widths })
    })();
    tape.set_stage(prev);
    result
}

/// Result of the offline attention layer.
#[derive(Debug, Clone)]
pub struct Attended {
    /// `[N × d_s]`, residual included.
    pub output: Var,
    /// Post-softmax weights, one `[N × N]` matrix per head.
    pub weights: Vec<Var>,
    pub bias: Option<BiasVars>,
}

struct Projected {
    query: Var,
    key: Var,
    value: Var,
}

fn check_input(tape: &Tape, s: Var, cfg: &AttentionConfig) -> Result<usize> {
    let shape = tape.shape(s);
    match shape {
        [n, d] if *d == cfg.model_dim => {
            if *n > cfg.max_len {
                Err(Error::WindowTooLong { len: *n, max: cfg.max_len })
            } else {
                Ok(*n)
            }
        }
        _ => Err(Error::shape("attend", format!("[N x {}]", cfg.model_dim), format!("{shape:?}"))),
    }
}

fn project(tape: &mut Tape, queries_from: Var, s: Var, vars: &AttentionVars) -> Result<Projected> {
    let prev = tape.set_stage(Stage::Projection);
    let result = (|| {
        Ok(Projected {
            query: tape.matmul(queries_from, vars.w_query)?,
            key: tape.matmul(s, vars.w_key)?,
            value: tape.matmul(s, vars.w_value)?,
        })
    })();
    tape.set_stage(prev);
    result
}

/// Weighted values for each head, concatenated, plus the weight matrices.
fn heads_attend(tape: &mut Tape, p: &Projected, pos: Option<Var>, cfg: &AttentionConfig) -> Result<(Var, Vec<Var>)> {
    let prev = tape.set_stage(Stage::Attention);
    let result = (|| {
        let d = cfg.head_dim;
        let scale = 1.0 / (d as f64).sqrt();
        let mut outs = Vec::with_capacity(cfg.heads);
        let mut weights = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let cols = h * d..(h + 1) * d;
            let q = tape.slice_cols(p.query, cols.clone())?;
            let k = tape.slice_cols(p.key, cols.clone())?;
            let v = tape.slice_cols(p.value, cols)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let mut logits = tape.scale(scores, scale)?;
            if let Some(pos) = pos {
                logits = tape.add(logits, pos)?;
            }
            let w = tape.softmax_rows(logits)?;
            outs.push(tape.matmul(w, v)?);
            weights.push(w);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        Ok((cat, weights))
    })();
    tape.set_stage(prev);
    result
}

fn finish(tape: &mut Tape, heads: Var, residual: Var, vars: &AttentionVars) -> Result<Var> {
    let prev = tape.set_stage(Stage::Projection);
    let out = tape.matmul(heads, vars.w_out);
    tape.set_stage(prev);
    tape.add(out?, residual)
}

/// Offline attention over a whole window, prior optional.
pub fn attend(tape: &mut Tape, s: Var, vars: &AttentionVars, use_bias: bool) -> Result<Attended> {
    let cfg = vars.config;
    let n = check_input(tape, s, &cfg)?;
    let p = project(tape, s, s, vars)?;
    let bias = if use_bias {
        let summary = key_mean(tape, p.key, cfg.heads, cfg.max_len, cfg.key_mean)?;
        Some(gaussian_bias(tape, summary, vars, n, 0..n)?)
    } else {
        None
    };
    let (heads, weights) = heads_attend(tape, &p, bias.map(|b| b.pos), &cfg)?;
    let output = finish(tape, heads, s, vars)?;
    Ok(Attended { output, weights, bias })
}

/// Offline attention with an explicitly supplied additive logit term in
/// place of the learned prior. `pos = None` is the unbiased layer.
pub fn attend_with_pos(tape: &mut Tape, s: Var, vars: &AttentionVars, pos: Option<Var>) -> Result<Attended> {
    let cfg = vars.config;
    check_input(tape, s, &cfg)?;
    let p = project(tape, s, s, vars)?;
    let (heads, weights) = heads_attend(tape, &p, pos, &cfg)?;
    let output = finish(tape, heads, s, vars)?;
    Ok(Attended { output, weights, bias: None })
}

/// Attention output for the last row only, `[1 × d_s]`. Equal to the last
/// row of [`attend`] with the same parameters.
pub fn attend_online(tape: &mut Tape, s: Var, vars: &AttentionVars, use_bias: bool) -> Result<Var> {
    let cfg = vars.config;
    if tape.shape(s).first() == Some(&0) {
        return Err(Error::Empty("attend_online"));
    }
    let n = check_input(tape, s, &cfg)?;
    let last = tape.slice_rows(s, n - 1..n)?;
    let p = project(tape, last, s, vars)?;
    let pos = if use_bias {
        let summary = key_mean(tape, p.key, cfg.heads, cfg.max_len, cfg.key_mean)?;
        Some(gaussian_bias(tape, summary, vars, n, n - 1..n)?.pos)
    } else {
        None
    };
    let (heads, _) = heads_attend(tape, &p, pos, &cfg)?;
    finish(tape, heads, last, vars)
}

/// Two-layer ReLU classifier applied to each row.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    /// `[d_s × d_f]`
    pub fc1: Tensor,
    /// `[d_f]`
    pub b1: Tensor,
    /// `[d_f × labels]`
    pub fc2: Tensor,
    /// `[labels]`
    pub b2: Tensor,
}

impl ClassifierParams {
    /// Random first layer; zero output layer, so initial predictions are
    /// uniform.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, labels: usize, rng: &mut R) -> Self {
        ClassifierParams {
            fc1: Tensor::uniform(&[input, hidden], 1.0 / (input as f64).sqrt(), rng),
            b1: Tensor::zeros(&[hidden]),
            fc2: Tensor::zeros(&[hidden, labels]),
            b2: Tensor::zeros(&[labels]),
        }
    }

    pub fn zeros(input: usize, hidden: usize, labels: usize) -> Self {
        ClassifierParams {
            fc1: Tensor::zeros(&[input, hidden]),
            b1: Tensor::zeros(&[hidden]),
            fc2: Tensor::zeros(&[hidden, labels]),
            b2: Tensor::zeros(&[labels]),
        }
    }

    pub fn labels(&self) -> usize {
        self.fc2.cols()
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("fc1", &self.fc1), ("b1", &self.b1), ("fc2", &self.fc2), ("b2", &self.b2)]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("fc1", &mut self.fc1), ("b1", &mut self.b1), ("fc2", &mut self.fc2), ("b2", &mut self.b2)]
    }

    pub fn bind(&self, tape: &mut Tape) -> ClassifierVars {
        ClassifierVars {
            fc1: tape.param(&self.fc1),
            b1: tape.param(&self.b1),
            fc2: tape.param(&self.fc2),
            b2: tape.param(&self.b2),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierVars {
    pub fc1: Var,
    pub b1: Var,
    pub fc2: Var,
    pub b2: Var,
}

impl ClassifierVars {
    pub fn vars(&self) -> Vec<Var> {
        vec![self.fc1, self.b1, self.fc2, self.b2]
    }
}

/// `relu(u · FC1 + b1) · FC2 + b2`, row by row.
pub fn classify(tape: &mut Tape, u: Var, vars: &ClassifierVars) -> Result<Var> {
    let prev = tape.set_stage(Stage::Classifier);
    let result = (|| {
        let h = tape.matmul(u, vars.fc1)?;
        let h = tape.add_row_bias(h, vars.b1)?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, vars.fc2)?;
        tape.add_row_bias(o, vars.b2)
    })();
    tape.set_stage(prev);
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(d: usize, heads: usize, dz: usize, max_len: usize) -> AttentionConfig {
        AttentionConfig {
            model_dim: d,
            heads,
            head_dim: dz,
            max_len,
            center_bound: 3.0,
            deviation_scale: max_len as f64,
            key_mean: KeyMeanMode::FeatureMean,
        }
    }

    fn randomize(p: &mut AttentionParams, rng: &mut ChaCha8Rng, scale: f64) {
        p.w_center = Tensor::uniform(p.w_center.shape(), scale, rng);
        p.w_width = Tensor::uniform(p.w_width.shape(), scale, rng);
    }

    #[test]
    fn key_mean_examples() {
        let mut tape = Tape::new();
        let k = tape.leaf(&Tensor::new(&[3, 4], vec![1.0; 12]).unwrap());
        let m = key_mean(&mut tape, k, 1, 3, KeyMeanMode::FeatureMean).unwrap();
        assert_eq!(tape.value(m), &[1.0, 1.0, 1.0]);

        let k = tape.leaf(&Tensor::from_rows(&[vec![1.0, 3.0]]).unwrap());
        let m = key_mean(&mut tape, k, 1, 1, KeyMeanMode::FeatureMean).unwrap();
        assert_eq!(tape.value(m), &[2.0]);

        let k = tape.leaf(&Tensor::new(&[3, 2], vec![1.0, 3.0, 2.0, 2.0, 5.0, 7.0]).unwrap());
        let m = key_mean(&mut tape, k, 1, 5, KeyMeanMode::FeatureMean).unwrap();
        assert_eq!(tape.value(m), &[2.0, 2.0, 6.0, 0.0, 0.0]);

        let m = key_mean(&mut tape, k, 1, 5, KeyMeanMode::PositionMean).unwrap();
        assert_eq!(tape.shape(m), &[2, 1]);
        assert!((tape.value(m)[0] - 8.0 / 3.0).abs() < 1e-15);
        assert!((tape.value(m)[1] - 4.0).abs() < 1e-15);

        let empty_rows = tape.leaf(&Tensor::zeros(&[6, 2]));
        assert!(matches!(
            key_mean(&mut tape, empty_rows, 1, 5, KeyMeanMode::FeatureMean),
            Err(Error::WindowTooLong { len: 6, max: 5 })
        ));
    }

    #[test]
    fn zero_locality_weights_give_default_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = cfg(4, 1, 4, 10);
        c.deviation_scale = 10.0;
        let params = AttentionParams::init(c, &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let s = tape.leaf(&Tensor::uniform(&[6, 4], 1.0, &mut rng));
        let k = tape.matmul(s, vars.w_key).unwrap();
        let summary = key_mean(&mut tape, k, 1, 10, KeyMeanMode::FeatureMean).unwrap();
        let field = gaussian_bias(&mut tape, summary, &vars, 6, 0..6).unwrap().to_field(&tape);
        for i in 0..6 {
            assert_eq!(field.centers[i], i as f64);
            assert_eq!(field.widths[i], 5.0);
            assert_eq!(field.pos.at(i, i), 0.0);
            if i > 0 {
                assert!((field.pos.at(i, i - 1) + 0.02).abs() < 1e-15);
            }
            if i < 5 {
                assert!((field.pos.at(i, i + 1) + 0.02).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bias_rejects_long_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = AttentionParams::init(cfg(4, 1, 4, 3), &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let s = tape.leaf(&Tensor::zeros(&[4, 4]));
        let err = attend(&mut tape, s, &vars, true).unwrap_err();
        assert!(matches!(err, Error::WindowTooLong { len: 4, max: 3 }));
        assert!(err.to_string().contains("config"));
    }

    #[test]
    fn bias_field_invariants_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for draw in 0..200 {
            let n_max = rng.gen_range(1..=8);
            let n = rng.gen_range(1..=n_max);
            let mut c = cfg(4, 2, 2, n_max);
            c.center_bound = rng.gen_range(0.5..4.0);
            c.deviation_scale = rng.gen_range(0.5..10.0);
            if draw % 2 == 1 {
                c.key_mean = KeyMeanMode::PositionMean;
            }
            let mut params = AttentionParams::init(c, &mut rng).unwrap();
            randomize(&mut params, &mut rng, 3.0);
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let s = tape.leaf(&Tensor::uniform(&[n, 4], 2.0, &mut rng));
            let out = attend(&mut tape, s, &vars, true).unwrap();
            let f = out.bias.unwrap().to_field(&tape);
            for i in 0..n {
                assert!((f.centers[i] - i as f64).abs() < c.center_bound);
                assert!(f.widths[i] > 0.0 && f.widths[i] < c.deviation_scale);
                for j in 0..n {
                    assert!(f.pos.at(i, j) <= 0.0);
                }
                let nearest = f.centers[i].round().clamp(0.0, (n - 1) as f64) as usize;
                let argmax = (0..n).fold(0, |b, j| if f.pos.at(i, j) > f.pos.at(i, b) { j } else { b });
                assert_eq!(argmax, nearest);
            }
        }
    }

    #[test]
    fn locality_weights_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = AttentionParams::init(cfg(4, 2, 2, 5), &mut rng).unwrap();
        randomize(&mut params, &mut rng, 1.0);
        let s = Tensor::uniform(&[4, 4], 1.0, &mut rng);
        let readout = Tensor::uniform(&[4, 4], 1.0, &mut rng);
        let err = finite_diff_check(&[params.w_center.clone(), params.w_width.clone(), s], 1e-4, |t, v| {
            let mut vars = params.bind(t);
            vars.w_center = v[0];
            vars.w_width = v[1];
            let k = t.matmul(v[2], vars.w_key)?;
            let summary = key_mean(t, k, 2, 5, KeyMeanMode::FeatureMean)?;
            let b = gaussian_bias(t, summary, &vars, 4, 0..4)?;
            let r = t.leaf(&readout);
            let p = t.mul(b.pos, r)?;
            t.sum(p)
        })
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn weights_normalized_with_and_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let n = rng.gen_range(1..=7);
            let mut params = AttentionParams::init(cfg(6, 3, 2, 7), &mut rng).unwrap();
            randomize(&mut params, &mut rng, 2.0);
            for use_bias in [false, true] {
                let mut tape = Tape::new();
                let vars = params.bind(&mut tape);
                let s = tape.leaf(&Tensor::uniform(&[n, 6], 3.0, &mut rng));
                let out = attend(&mut tape, s, &vars, use_bias).unwrap();
                assert_eq!(out.weights.len(), 3);
                for w in &out.weights {
                    assert_eq!(tape.shape(*w), &[n, n]);
                    for row in tape.value(*w).chunks(n) {
                        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn single_utterance_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = AttentionParams::init(cfg(4, 2, 2, 4), &mut rng).unwrap();
        let s_t = Tensor::uniform(&[1, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let s = tape.leaf(&s_t);
        let out = attend(&mut tape, s, &vars, true).unwrap();
        for w in &out.weights {
            assert_eq!(tape.value(*w), &[1.0]);
        }
        // projected V plus the residual
        let v = tape.matmul(s, vars.w_value).unwrap();
        let o = tape.matmul(v, vars.w_out).unwrap();
        let expected = tape.add(o, s).unwrap();
        for (a, b) in tape.value(out.output).iter().zip(tape.value(expected)) {
            assert!((a - b).abs() < 1e-12);
        }
        let online = attend_online(&mut tape, s, &vars, true).unwrap();
        for (a, b) in tape.value(online).iter().zip(tape.value(expected)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_logits_peak_on_diagonal() {
        let c = AttentionConfig {
            deviation_scale: 1.0,
            ..cfg(4, 2, 2, 6)
        };
        let mut params = AttentionParams::zeros(c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        params.w_value = Tensor::uniform(params.w_value.shape(), 1.0, &mut rng);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let s = tape.leaf(&Tensor::uniform(&[6, 4], 1.0, &mut rng));
        let out = attend(&mut tape, s, &vars, true).unwrap();
        for w in &out.weights {
            for (i, row) in tape.value(*w).chunks(6).enumerate() {
                for (j, &x) in row.iter().enumerate() {
                    if j != i {
                        assert!(row[i] > x);
                    }
                }
                // zero logits: weight ratio is exp(POS[i][j]) with w = D/2
                if i + 1 < 6 {
                    let ratio = row[i + 1] / row[i];
                    assert!((ratio - (-(1.0f64) / (2.0 * 0.25)).exp()).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn narrower_width_is_more_local() {
        // fixed zero logits; the width row is driven by W^d through K̄
        let ratio_at = |wd: f64| {
            let mut params = AttentionParams::zeros(cfg(2, 1, 2, 5)).unwrap();
            params.w_key = Tensor::new(&[2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
            params.w_width = Tensor::new(&[5, 5], vec![wd; 25]).unwrap();
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let s = tape.leaf(&Tensor::new(&[5, 2], vec![0.5; 10]).unwrap());
            let out = attend(&mut tape, s, &vars, true).unwrap();
            let w = tape.tensor(out.weights[0]);
            (1..5).map(|j| w.at(0, j) / w.at(0, 0)).collect::<Vec<_>>()
        };
        let wide = ratio_at(0.0);
        let narrow = ratio_at(-1.0);
        for (a, b) in wide.iter().zip(&narrow) {
            assert!(b < a, "{b} !< {a}");
        }
    }

    #[test]
    fn online_matches_last_offline_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for case in 0..40 {
            let n = rng.gen_range(1..=8);
            let mut c = cfg(6, 2, 3, 8);
            if case % 2 == 0 {
                c.key_mean = KeyMeanMode::PositionMean;
            }
            let mut params = AttentionParams::init(c, &mut rng).unwrap();
            randomize(&mut params, &mut rng, 1.5);
            let use_bias = case % 3 != 0;
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let s = tape.leaf(&Tensor::uniform(&[n, 6], 1.0, &mut rng));
            let off = attend(&mut tape, s, &vars, use_bias).unwrap();
            let on = attend_online(&mut tape, s, &vars, use_bias).unwrap();
            let last = &tape.value(off.output)[(n - 1) * 6..];
            for (a, b) in tape.value(on).iter().zip(last) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_stage_scaling() {
        let macs = |n: usize, online: bool| {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let params = AttentionParams::init(cfg(8, 2, 4, 64), &mut rng).unwrap();
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let s = tape.leaf(&Tensor::uniform(&[n, 8], 1.0, &mut rng));
            if online {
                attend_online(&mut tape, s, &vars, true).unwrap();
            } else {
                attend(&mut tape, s, &vars, true).unwrap();
            }
            tape.macs().stage(Stage::Attention)
        };
        assert_eq!(macs(64, false) as f64 / macs(16, false) as f64, 16.0);
        assert_eq!(macs(64, true) as f64 / macs(16, true) as f64, 4.0);
    }

    #[test]
    fn classifier_basics() {
        let params = ClassifierParams::zeros(4, 3, 5);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let u = tape.leaf(&Tensor::new(&[1, 4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let logits = classify(&mut tape, u, &vars).unwrap();
        assert_eq!(tape.value(logits), &[0.0; 5]);
        let p = tape.softmax_rows(logits).unwrap();
        assert!(tape.value(p).iter().all(|&x| (x - 0.2).abs() < 1e-15));

        let bad = tape.leaf(&Tensor::zeros(&[1, 3]));
        assert!(matches!(classify(&mut tape, bad, &vars), Err(Error::Shape { .. })));

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut params = ClassifierParams::init(4, 6, 3, &mut rng);
        params.fc2 = Tensor::uniform(params.fc2.shape(), 1.0, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let u = tape.leaf(&Tensor::new(&[1, 4], vec![0.3, -0.1, 0.8, 0.2]).unwrap());
            let l = classify(&mut tape, u, &vars).unwrap();
            tape.value(l).to_vec()
        };
        assert_eq!(run(), run());

        let u = Tensor::uniform(&[2, 4], 1.0, &mut rng);
        let tensors: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).chain([u]).collect();
        let err = finite_diff_check(&tensors, 1e-4, |t, v| {
            let vars = ClassifierVars {
                fc1: v[0],
                b1: v[1],
                fc2: v[2],
                b2: v[3],
            };
            let l = classify(t, v[4], &vars)?;
            t.cross_entropy(l, &[0, 2], &[1.0, 1.0])
        })
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn full_layer_gradcheck() {
        for (seed, mode) in [(21u64, KeyMeanMode::FeatureMean), (22, KeyMeanMode::PositionMean)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = AttentionConfig {
                key_mean: mode,
                ..cfg(4, 2, 2, 5)
            };
            let mut params = AttentionParams::init(c, &mut rng).unwrap();
            randomize(&mut params, &mut rng, 1.0);
            let mut cls = ClassifierParams::init(4, 5, 3, &mut rng);
            cls.fc2 = Tensor::uniform(cls.fc2.shape(), 1.0, &mut rng);
            let s = Tensor::uniform(&[4, 4], 1.0, &mut rng);
            let mut tensors: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
            tensors.extend(cls.named().into_iter().map(|(_, t)| t.clone()));
            tensors.push(s);
            let err = finite_diff_check(&tensors, 1e-4, |t, v| {
                let vars = AttentionVars {
                    config: c,
                    w_query: v[0],
                    w_key: v[1],
                    w_value: v[2],
                    w_out: v[3],
                    w_center: v[4],
                    w_width: v[5],
                };
                let cv = ClassifierVars {
                    fc1: v[6],
                    b1: v[7],
                    fc2: v[8],
                    b2: v[9],
                };
                let out = attend(t, v[10], &vars, true)?;
                let l = classify(t, out.output, &cv)?;
                t.cross_entropy(l, &[0, 1, 2, 1], &[0.25; 4])
            })
            .unwrap();
            assert!(err < 1e-3, "{mode:?}: {err}");
        }
    }

    #[test]
    fn zero_pos_reproduces_unbiased_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let params = AttentionParams::init(cfg(6, 2, 3, 6), &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let s = tape.leaf(&Tensor::uniform(&[5, 6], 1.0, &mut rng));
        let plain = attend(&mut tape, s, &vars, false).unwrap();
        let zero = tape.zeros(&[5, 5]);
        let zeroed = attend_with_pos(&mut tape, s, &vars, Some(zero)).unwrap();
        for (a, b) in tape.value(plain.output).iter().zip(tape.value(zeroed.output)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}
