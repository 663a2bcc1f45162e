//! VQA evaluation: consensus accuracy, answer-type breakdown, Open-Ended and
//! Multiple-Choice protocols, and caption-based score adjustment.
//!
//! Per-example scores are `min(k, 3) / 3`, so aggregation is kept in
//! integer thirds and is exact.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, HUMAN_ANSWERS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AnswerType {
    YesNo,
    Number,
    Other,
}

impl AnswerType {
    pub const ALL: [AnswerType; 3] = [AnswerType::YesNo, AnswerType::Number, AnswerType::Other];

    pub fn label(self) -> &'static str {
        match self {
            AnswerType::YesNo => "Y/N",
            AnswerType::Number => "Num.",
            AnswerType::Other => "Other",
        }
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

/// Lowercase and trim.
pub fn normalize_answer(s: &str) -> String {
    s.trim().to_lowercase()
}

pub fn classify_answer_type(answer: &str) -> AnswerType {
    let a = normalize_answer(answer);
    if a == "yes" || a == "no" {
        AnswerType::YesNo
    } else if !a.is_empty() && a.bytes().all(|b| b.is_ascii_digit()) {
        AnswerType::Number
    } else {
        AnswerType::Other
    }
}

/// `min(k, 3)` for `k` humans agreeing with `predicted`.
pub fn consensus_thirds(predicted: &str, humans: &[String]) -> Result<u32> {
    if humans.len() != HUMAN_ANSWERS {
        return Err(Error::Contract(format!(
            "expected {HUMAN_ANSWERS} human answers, got {}",
            humans.len()
        )));
    }
    let p = normalize_answer(predicted);
    let k = humans.iter().filter(|h| normalize_answer(h) == p).count() as u32;
    Ok(k.min(3))
}

/// `min(#humans that gave the answer / 3, 1)`.
pub fn vqa_accuracy(predicted: &str, humans: &[String]) -> Result<f64> {
    Ok(consensus_thirds(predicted, humans)? as f64 / 3.0)
}

fn first_argmax(xs: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, x) in xs {
        if best.is_none_or(|(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best.map(|(i, _)| i)
}

/// Zeroes probabilities outside `candidates` and returns the masked vector
/// with the arg-max over the candidates (lowest id on ties).
pub fn multiple_choice_mask(probs: &[f64], candidates: &[usize]) -> Result<(Vec<f64>, usize)> {
    if candidates.is_empty() {
        return Err(Error::Contract("empty candidate set".into()));
    }
    let mut keep = vec![false; probs.len()];
    for &c in candidates {
        if c >= probs.len() {
            return Err(Error::Index {
                what: "candidate answer",
                index: c,
                bound: probs.len(),
            });
        }
        keep[c] = true;
    }
    let masked: Vec<f64> = probs
        .iter()
        .zip(&keep)
        .map(|(&p, &k)| if k { p } else { 0.0 })
        .collect();
    let best = first_argmax((0..probs.len()).filter(|&i| keep[i]).map(|i| (i, probs[i]))).expect("non-empty");
    Ok((masked, best))
}

/// Adds 1 to the score of every Other-type answer that occurs as a
/// whitespace token of `caption`.
pub fn caption_postprocess(pre_softmax: &[f64], caption: &str, answers: &[String]) -> Vec<f64> {
    let tokens: Vec<String> = caption.split_whitespace().map(normalize_answer).collect();
    pre_softmax
        .iter()
        .zip(answers)
        .map(|(&s, a)| {
            let a = normalize_answer(a);
            if classify_answer_type(&a) == AnswerType::Other && tokens.contains(&a) {
                s + 1.0
            } else {
                s
            }
        })
        .collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    OpenEnded,
    MultipleChoice,
}

impl Protocol {
    pub fn label(self) -> &'static str {
        match self {
            Protocol::OpenEnded => "Open-Ended",
            Protocol::MultipleChoice => "Multiple-Choice",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::OpenEnded => "oe",
            Protocol::MultipleChoice => "mc",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "oe" | "open-ended" => Ok(Protocol::OpenEnded),
            "mc" | "multiple-choice" => Ok(Protocol::MultipleChoice),
            _ => Err(Error::Config(format!("unknown protocol {s:?} (expected oe or mc)"))),
        }
    }
}

/// Produces pre-softmax answer scores for dataset examples.
pub trait Predictor {
    fn scores(&self, data: &Dataset, indices: &[usize]) -> Result<Vec<Vec<f64>>>;
}

/// Accuracy for one protocol, broken down by answer type.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub postprocess: bool,
    /// Examples per type, indexed like [`AnswerType::ALL`].
    pub counts: [u64; 3],
    /// Sum of per-example scores in thirds, per type.
    pub thirds: [u64; 3],
    pub predictions: Vec<usize>,
}

impl EvalReport {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn overall(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        self.thirds.iter().sum::<u64>() as f64 / (3 * n) as f64
    }

    pub fn by_type(&self, t: AnswerType) -> f64 {
        let i = t.code() as usize;
        if self.counts[i] == 0 {
            return 0.0;
        }
        self.thirds[i] as f64 / (3 * self.counts[i]) as f64
    }
}

/// Scores `indices` of `data` under `protocol`. Caption adjustment happens
/// before the softmax, candidate masking after it.
pub fn evaluate(
    predictor: &dyn Predictor,
    data: &Dataset,
    indices: &[usize],
    protocol: Protocol,
    postprocess: bool,
) -> Result<EvalReport> {
    let scores = predictor.scores(data, indices)?;
    let mut report = EvalReport {
        protocol,
        postprocess,
        counts: [0; 3],
        thirds: [0; 3],
        predictions: Vec::with_capacity(indices.len()),
    };
    for (&i, s) in indices.iter().zip(scores) {
        let e = &data.examples[i];
        if s.len() != data.answers.len() {
            return Err(Error::dim("evaluate", &[s.len()], &[data.answers.len()]));
        }
        let s = if postprocess {
            caption_postprocess(&s, &e.caption, &data.answers)
        } else {
            s
        };
        let probs = softmax(&s);
        let pred = match protocol {
            Protocol::OpenEnded => first_argmax(probs.iter().copied().enumerate()).expect("answers"),
            Protocol::MultipleChoice => {
                if e.candidates.is_empty() {
                    return Err(Error::Contract(format!(
                        "multiple-choice needs candidates; example {i} has none"
                    )));
                }
                multiple_choice_mask(&probs, &e.candidates)?.1
            }
        };
        let t = e.answer_type.code() as usize;
        report.counts[t] += 1;
        report.thirds[t] += consensus_thirds(&data.answers[pred], &e.humans)? as u64;
        report.predictions.push(pred);
    }
    Ok(report)
}

/// CSV with one row per report: protocol, All, Y/N, Num., Other.
pub fn report_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("protocol,postprocess,all,yn,num,other\n");
    for r in reports {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.protocol.label(),
            r.postprocess,
            r.overall(),
            r.by_type(AnswerType::YesNo),
            r.by_type(AnswerType::Number),
            r.by_type(AnswerType::Other)
        ));
    }
    s
}
