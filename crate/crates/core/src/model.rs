//! The full recognizer: utterance encoder, context attention and classifier,
//! plus the hyperparameters that shape it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attend, attend_online, classify, AttentionConfig, AttentionParams, AttentionVars, BiasField, ClassifierParams,
    ClassifierVars, KeyMeanMode,
};
use crate::corpus::LabelMap;
use crate::encoder::{encode_batch, pad_or_truncate, EncoderParams, EncoderVars, LstmVars, UtteranceTokens};
use crate::error::{Error, Result};
use crate::segment::LossDivisor;
use crate::tensor::{Tape, Tensor, Var};
use crate::vocab::Vocab;

/// Every hyperparameter of a run. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Sub-dialogue length `W`.
    pub window: usize,
    /// Context padding `P` on each side of a window.
    pub padding: usize,
    /// Center bound `C`.
    pub center_bound: f64,
    /// Width bound `D`; `None` means the maximum window length.
    pub deviation_scale: Option<f64>,
    pub heads: usize,
    /// Tokens per utterance `M`.
    pub max_tokens: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub head_dim: usize,
    pub ff_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Windows per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub use_bias: bool,
    /// Report the online setting as the headline evaluation.
    pub online: bool,
    pub clip_norm: f64,
    /// Drop probability applied to utterance vectors during training.
    pub dropout: f64,
    pub vocab_size: usize,
    /// Max-pool only over real tokens instead of all `M` positions.
    pub pool_true_length: bool,
    /// Divide each window's loss by `W` instead of its unmasked count.
    pub literal_loss_divisor: bool,
    pub key_mean: KeyMeanMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            window: 5,
            padding: 2,
            center_bound: 3.0,
            deviation_scale: None,
            heads: 4,
            max_tokens: 32,
            embed_dim: 64,
            hidden_dim: 64,
            head_dim: 16,
            ff_dim: 64,
            learning_rate: 1e-3,
            epochs: 10,
            batch_size: 8,
            seed: 1,
            use_bias: true,
            online: false,
            clip_norm: 5.0,
            dropout: 0.0,
            vocab_size: 30_000,
            pool_true_length: false,
            literal_loss_divisor: false,
            key_mean: KeyMeanMode::FeatureMean,
        }
    }
}

impl TrainConfig {
    /// Longest window the model sees, `W + 2P`.
    pub fn max_len(&self) -> usize {
        self.window + 2 * self.padding
    }

    pub fn deviation(&self) -> f64 {
        self.deviation_scale.unwrap_or(self.max_len() as f64)
    }

    pub fn loss_divisor(&self) -> LossDivisor {
        if self.literal_loss_divisor {
            LossDivisor::Window(self.window)
        } else {
            LossDivisor::Unmasked
        }
    }

    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.hidden_dim,
            heads: self.heads,
            head_dim: self.head_dim,
            max_len: self.max_len(),
            center_bound: self.center_bound,
            deviation_scale: self.deviation(),
            key_mean: self.key_mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("window", self.window),
            ("heads", self.heads),
            ("max_tokens", self.max_tokens),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("head_dim", self.head_dim),
            ("ff_dim", self.ff_dim),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::invalid("learning_rate and clip_norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.vocab_size < 3 {
            return Err(Error::invalid("vocab_size must be at least 3"));
        }
        self.attention_config().validate()
    }
}

/// Parameters recorded on one tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub encoder: EncoderVars,
    pub attention: AttentionVars,
    pub classifier: ClassifierVars,
}

impl BoundModel {
    /// Wraps variables already on `tape`, given in [`Model::named_params`]
    /// order.
    pub fn from_vars(tape: &mut Tape, config: &TrainConfig, vars: &[Var]) -> Result<Self> {
        if vars.len() != 14 {
            return Err(Error::invalid(format!("expected 14 parameter variables, got {}", vars.len())));
        }
        Ok(BoundModel {
            encoder: EncoderVars {
                embedding: vars[0],
                lstm: LstmVars::from_vars(tape, vars[1], vars[2], vars[3])?,
            },
            attention: AttentionVars {
                config: config.attention_config(),
                w_query: vars[4],
                w_key: vars[5],
                w_value: vars[6],
                w_out: vars[7],
                w_center: vars[8],
                w_width: vars[9],
            },
            classifier: ClassifierVars {
                fc1: vars[10],
                b1: vars[11],
                fc2: vars[12],
                b2: vars[13],
            },
        })
    }

    /// Same order as [`Model::named_params`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.encoder.vars();
        out.extend(self.attention.vars());
        out.extend(self.classifier.vars());
        out
    }
}

/// Output of one window's forward pass.
#[derive(Debug, Clone)]
pub struct WindowForward {
    /// `[len × labels]`
    pub logits: Var,
    pub weights: Vec<Var>,
    pub bias: Option<crate::attention::BiasVars>,
}

/// Post-softmax attention of one window, read off the tape.
#[derive(Debug, Clone)]
pub struct AttentionMaps {
    pub heads: Vec<Tensor>,
    pub bias: Option<BiasField>,
}

impl AttentionMaps {
    /// Element-wise mean of the head matrices.
    pub fn head_mean(&self) -> Tensor {
        let mut out = Tensor::zeros(self.heads[0].shape());
        let scale = 1.0 / self.heads.len() as f64;
        for h in &self.heads {
            for (o, v) in out.data_mut().iter_mut().zip(h.data()) {
                *o += v * scale;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub labels: LabelMap,
    pub encoder: EncoderParams,
    pub attention: AttentionParams,
    pub classifier: ClassifierParams,
}

impl Model {
    /// Fresh parameters drawn from `config.seed`.
    pub fn init(config: TrainConfig, vocab: Vocab, labels: LabelMap) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = EncoderParams::init(vocab.len(), config.embed_dim, config.hidden_dim, &mut rng);
        let attention = AttentionParams::init(config.attention_config(), &mut rng)?;
        let classifier = ClassifierParams::init(config.hidden_dim, config.ff_dim, labels.len(), &mut rng);
        Ok(Model {
            config,
            vocab,
            labels,
            encoder,
            attention,
            classifier,
        })
    }

    /// All-zero parameters with the shapes `init` would produce; the
    /// checkpoint loader fills them in.
    pub fn zeros(config: TrainConfig, vocab: Vocab, labels: LabelMap) -> Result<Model> {
        config.validate()?;
        Ok(Model {
            encoder: EncoderParams::zeros(vocab.len(), config.embed_dim, config.hidden_dim),
            attention: AttentionParams::zeros(config.attention_config())?,
            classifier: ClassifierParams::zeros(config.hidden_dim, config.ff_dim, labels.len()),
            config,
            vocab,
            labels,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        out.extend(self.encoder.named().into_iter().map(|(n, t)| (format!("encoder.{n}"), t)));
        out.extend(self.attention.named().into_iter().map(|(n, t)| (format!("attention.{n}"), t)));
        out.extend(self.classifier.named().into_iter().map(|(n, t)| (format!("classifier.{n}"), t)));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        out.extend(self.encoder.named_mut().into_iter().map(|(n, t)| (format!("encoder.{n}"), t)));
        out.extend(self.attention.named_mut().into_iter().map(|(n, t)| (format!("attention.{n}"), t)));
        out.extend(self.classifier.named_mut().into_iter().map(|(n, t)| (format!("classifier.{n}"), t)));
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundModel> {
        Ok(BoundModel {
            encoder: self.encoder.bind(tape)?,
            attention: self.attention.bind(tape),
            classifier: self.classifier.bind(tape),
        })
    }

    pub fn tokens(&self, text: &str) -> Result<UtteranceTokens> {
        pad_or_truncate(&self.vocab.encode(&text.to_lowercase()), self.config.max_tokens)
    }

    /// Utterance vectors `[B × d_s]` for a batch of utterances.
    pub fn encode(&self, tape: &mut Tape, bound: &BoundModel, utterances: &[UtteranceTokens]) -> Result<Var> {
        encode_batch(tape, utterances, &bound.encoder, self.config.pool_true_length)
    }

    /// Attention and classification over already encoded utterances `s`.
    pub fn forward_encoded(&self, tape: &mut Tape, bound: &BoundModel, s: Var) -> Result<WindowForward> {
        let attended = attend(tape, s, &bound.attention, self.config.use_bias)?;
        let logits = classify(tape, attended.output, &bound.classifier)?;
        Ok(WindowForward {
            logits,
            weights: attended.weights,
            bias: attended.bias,
        })
    }

    /// Encode, attend, classify: logits `[len × labels]` for one window.
    pub fn forward_window(&self, tape: &mut Tape, bound: &BoundModel, utterances: &[UtteranceTokens]) -> Result<WindowForward> {
        let s = self.encode(tape, bound, utterances)?;
        self.forward_encoded(tape, bound, s)
    }

    /// Utterance vectors as plain rows, one per text.
    pub fn encode_texts<S: AsRef<str>>(&self, texts: &[S]) -> Result<Tensor> {
        let tokens = texts.iter().map(|t| self.tokens(t.as_ref())).collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let s = self.encode(&mut tape, &bound, &tokens)?;
        Ok(tape.tensor(s))
    }

    /// Logits for a window of raw texts.
    pub fn window_logits<S: AsRef<str>>(&self, texts: &[S]) -> Result<Tensor> {
        let tokens = texts.iter().map(|t| self.tokens(t.as_ref())).collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let out = self.forward_window(&mut tape, &bound, &tokens)?;
        Ok(tape.tensor(out.logits))
    }

    /// Logits of selected rows of pre-encoded utterances, offline.
    pub fn logits_from_encoded(&self, encoded: &Tensor, rows: std::ops::Range<usize>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let s = rows_constant(&mut tape, encoded, rows)?;
        let out = self.forward_encoded(&mut tape, &bound, s)?;
        Ok(tape.tensor(out.logits))
    }

    /// Logits `[1 × labels]` of the last of the pre-encoded rows, seeing only
    /// preceding context.
    pub fn online_logits_from_encoded(&self, encoded: &Tensor, rows: std::ops::Range<usize>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let s = rows_constant(&mut tape, encoded, rows)?;
        let u = attend_online(&mut tape, s, &bound.attention, self.config.use_bias)?;
        let logits = classify(&mut tape, u, &bound.classifier)?;
        Ok(tape.tensor(logits))
    }

    /// Attention weights of one window of raw texts, with or without the
    /// locality prior regardless of the configured flag.
    pub fn attention_maps<S: AsRef<str>>(&self, texts: &[S], use_bias: bool) -> Result<AttentionMaps> {
        let tokens = texts.iter().map(|t| self.tokens(t.as_ref())).collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let s = self.encode(&mut tape, &bound, &tokens)?;
        let attended = attend(&mut tape, s, &bound.attention, use_bias)?;
        Ok(AttentionMaps {
            heads: attended.weights.iter().map(|&w| tape.tensor(w)).collect(),
            bias: attended.bias.map(|b| b.to_field(&tape)),
        })
    }
}

fn rows_constant(tape: &mut Tape, encoded: &Tensor, rows: std::ops::Range<usize>) -> Result<Var> {
    if rows.is_empty() || rows.end > encoded.rows() {
        return Err(Error::invalid(format!("row range {rows:?} outside {} encoded utterances", encoded.rows())));
    }
    let d = encoded.cols();
    let data = encoded.data()[rows.start * d..rows.end * d].to_vec();
    tape.constant(&[rows.len(), d], data)
}

/// Index of the largest entry; the first wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Streaming predictor: each pushed utterance is classified from itself and
/// up to `P` preceding utterances.
#[derive(Debug)]
pub struct OnlinePredictor<'m> {
    model: &'m Model,
    encoded: Vec<f64>,
    count: usize,
}

impl<'m> OnlinePredictor<'m> {
    pub fn new(model: &'m Model) -> Self {
        OnlinePredictor {
            model,
            encoded: Vec::new(),
            count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Adds one already encoded utterance and predicts its label id.
    pub fn push_encoded(&mut self, row: &[f64]) -> Result<usize> {
        let d = self.model.config.hidden_dim;
        if row.len() != d {
            return Err(Error::shape("OnlinePredictor::push_encoded", format!("{d} values"), format!("{}", row.len())));
        }
        self.encoded.extend_from_slice(row);
        self.count += 1;
        let window = crate::segment::online_window("", self.count, self.model.config.padding)?;
        let start = window.indices.start;
        let s = Tensor::new(&[window.len(), d], self.encoded[start * d..].to_vec())?;
        let logits = self.model.online_logits_from_encoded(&s, 0..window.len())?;
        Ok(argmax(logits.data()))
    }

    pub fn push(&mut self, text: &str) -> Result<usize> {
        let row = self.model.encode_texts(&[text])?;
        self.push_encoded(row.data())
    }
}

/// Inverted dropout mask for `[rows × cols]`.
pub(crate) fn dropout_mask<R: Rng>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..rows * cols).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::masked_loss;
    use crate::tensor::finite_diff_check;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            window: 2,
            padding: 1,
            heads: 2,
            max_tokens: 3,
            embed_dim: 3,
            hidden_dim: 4,
            head_dim: 2,
            ff_dim: 3,
            ..Default::default()
        }
    }

    fn tiny_model(seed: u64) -> Model {
        let vocab = Vocab::from_tokens(["a", "b", "c", "?"]).unwrap();
        let labels = LabelMap::new(vec!["x".into(), "y".into(), "z".into()]).unwrap();
        let mut model = Model::init(TrainConfig { seed, ..tiny_config() }, vocab, labels).unwrap();
        // move off the zero init so every parameter gets a gradient
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for (_, t) in model.named_params_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        model
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!(c.max_len(), 9);
        assert_eq!(c.deviation(), 9.0);
        c.validate().unwrap();
        assert!(TrainConfig { window: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { dropout: 1.0, ..c.clone() }.validate().is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"window": 1, "padding": 0}"#).unwrap();
        assert_eq!(parsed.window, 1);
        assert_eq!(parsed.heads, 4);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"windw": 1}"#).is_err());
    }

    #[test]
    fn logits_shape_and_uniform_start() {
        let vocab = Vocab::from_tokens(["a", "b"]).unwrap();
        let labels = LabelMap::new(vec!["x".into(), "y".into(), "z".into()]).unwrap();
        let model = Model::init(tiny_config(), vocab, labels).unwrap();
        let logits = model.window_logits(&["a b", "b", "a a a a"]).unwrap();
        assert_eq!(logits.shape(), [3, 3]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
        assert_eq!(model.window_logits(&["a b", "b", "a"]).unwrap(), model.window_logits(&["a b", "b", "a"]).unwrap());
    }

    #[test]
    fn end_to_end_gradcheck() {
        for seed in 0..3 {
            let model = tiny_model(seed);
            let tokens: Vec<UtteranceTokens> = ["a b ?", "c", "b a"].iter().map(|t| model.tokens(t).unwrap()).collect();
            let params: Vec<Tensor> = model.named_params().into_iter().map(|(_, t)| t.clone()).collect();
            let err = finite_diff_check(&params, 1e-4, |tape, vars| {
                let bound = BoundModel::from_vars(tape, &model.config, vars)?;
                let out = model.forward_window(tape, &bound, &tokens)?;
                masked_loss(tape, out.logits, &[0, 2, 1], &[true, true, false], model.config.loss_divisor())
            })
            .unwrap();
            assert!(err < 1e-3, "seed {seed}: {err}");
        }
    }

    #[test]
    fn online_predictor_matches_direct_online_logits() {
        let model = tiny_model(4);
        let texts = ["a", "b ?", "c c", "a b", "?"];
        let encoded = model.encode_texts(&texts).unwrap();
        let mut online = OnlinePredictor::new(&model);
        for (t, text) in texts.iter().enumerate() {
            let start = t.saturating_sub(model.config.padding);
            let direct = model.online_logits_from_encoded(&encoded, start..t + 1).unwrap();
            let offline_last = model.logits_from_encoded(&encoded, start..t + 1).unwrap();
            assert_eq!(online.push(text).unwrap(), argmax(direct.data()));
            let last = offline_last.row(t - start);
            for (a, b) in direct.data().iter().zip(last) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        assert_eq!(online.len(), texts.len());
    }

    #[test]
    fn attention_maps_rows_sum_to_one() {
        let model = tiny_model(2);
        for use_bias in [false, true] {
            let maps = model.attention_maps(&["a", "b", "c ?"], use_bias).unwrap();
            assert_eq!(maps.heads.len(), 2);
            assert_eq!(maps.bias.is_some(), use_bias);
            let mean = maps.head_mean();
            for r in 0..3 {
                assert!((mean.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn argmax_first_wins() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }
}
