//! Sliding-window segmentation of dialogues and the masked window loss.
//!
//! Utterance indices are 0-based. Window `k` covers the core range
//! `[k·W, (k+1)·W) ∩ [0, N)` plus up to `P` context utterances on each side,
//! clamped to the dialogue.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueWindow {
    pub dialogue_id: String,
    /// 0-based position of this window in its dialogue's split.
    pub window_index: usize,
    /// Global utterance indices covered, context included.
    pub indices: Range<usize>,
    /// Utterances whose loss counts.
    pub core: Range<usize>,
    /// `mask[t]` is set when `indices.start + t` lies in `core`.
    pub mask: Vec<bool>,
}

impl DialogueWindow {
    fn new(dialogue_id: &str, window_index: usize, indices: Range<usize>, core: Range<usize>) -> Self {
        let mask = indices.clone().map(|i| core.contains(&i)).collect();
        DialogueWindow {
            dialogue_id: dialogue_id.to_string(),
            window_index,
            indices,
            core,
            mask,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Window-relative positions with mask set.
    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(t, _)| t)
    }
}

/// Splits `n` utterances into `⌈n/W⌉` windows with `P` context on each side.
pub fn split_dialogue(dialogue_id: &str, n: usize, window: usize, padding: usize) -> Result<Vec<DialogueWindow>> {
    if n == 0 {
        return Err(Error::Empty("split_dialogue"));
    }
    if window == 0 {
        return Err(Error::invalid("window size W must be at least 1"));
    }
    let count = n.div_ceil(window);
    Ok((0..count)
        .map(|k| {
            let core = k * window..((k + 1) * window).min(n);
            let indices = core.start.saturating_sub(padding)..(core.end + padding).min(n);
            DialogueWindow::new(dialogue_id, k, indices, core)
        })
        .collect())
}

/// Window over the last `min(P + 1, len)` utterances of a history of
/// `history_len`, predicting only the final one.
pub fn online_window(dialogue_id: &str, history_len: usize, padding: usize) -> Result<DialogueWindow> {
    if history_len == 0 {
        return Err(Error::Empty("online_window"));
    }
    let last = history_len - 1;
    Ok(DialogueWindow::new(
        dialogue_id,
        last,
        last.saturating_sub(padding)..history_len,
        last..history_len,
    ))
}

/// Normalization of the masked loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossDivisor {
    /// Mean over unmasked positions.
    #[default]
    Unmasked,
    /// Divide by the configured window size `W` regardless of how many
    /// positions are unmasked.
    Window(usize),
}

/// Cross-entropy over masked-in positions; masked-out positions receive
/// exactly zero gradient.
pub fn masked_loss(tape: &mut Tape, logits: Var, labels: &[usize], mask: &[bool], divisor: LossDivisor) -> Result<Var> {
    if labels.len() != mask.len() {
        return Err(Error::shape("masked_loss", format!("{} labels", mask.len()), format!("{}", labels.len())));
    }
    let active = mask.iter().filter(|&&m| m).count();
    if active == 0 {
        return Err(Error::invalid("masked_loss: mask selects no positions"));
    }
    let denom = match divisor {
        LossDivisor::Unmasked => active as f64,
        LossDivisor::Window(w) if w > 0 => w as f64,
        LossDivisor::Window(_) => return Err(Error::invalid("masked_loss: window divisor must be positive")),
    };
    let weights: Vec<f64> = mask.iter().map(|&m| if m { 1.0 / denom } else { 0.0 }).collect();
    tape.cross_entropy(logits, labels, &weights)
}
