//! Early recognition: stop consuming a stream once the state head is
//! confident that the class prediction has settled.

use serde::{Deserialize, Serialize};

use crate::events::Event;
use crate::net::{argmax, sigmoid, Scalar};
use crate::slide::{SlideEngine, SlideError};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// 1 where a prediction repeats the one just before it; the first is 0.
pub fn stability_labels<C: PartialEq>(predictions: &[C]) -> Vec<u8> {
    let mut out = Vec::with_capacity(predictions.len());
    if !predictions.is_empty() {
        out.push(0);
    }
    for w in predictions.windows(2) {
        out.push(u8::from(w[0] == w[1]));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopPolicy {
    /// Confidence needed to stop, in [0, 1].
    pub threshold: f64,
    /// Heads are evaluated every `stride` events.
    pub stride: usize,
    /// No evaluation before this many events.
    pub min_events: usize,
}

impl Default for EarlyStopPolicy {
    fn default() -> Self {
        EarlyStopPolicy {
            threshold: DEFAULT_THRESHOLD,
            stride: 1,
            min_events: 0,
        }
    }
}

impl EarlyStopPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(format!("threshold {} outside [0, 1]", self.threshold));
        }
        if self.stride == 0 {
            return Err("stride must be >= 1".into());
        }
        Ok(())
    }

    /// Event counts (1-based) at which the heads are evaluated for a stream
    /// of `len` events: min_events (at least 1), then every `stride` events.
    /// The final index is always evaluated.
    pub fn evaluation_indices(&self, len: usize) -> Vec<usize> {
        let first = self.min_events.max(1);
        let mut v: Vec<usize> = (first..=len).step_by(self.stride).collect();
        if len > 0 && v.last() != Some(&len) {
            v.push(len);
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub index: usize,
    pub class: usize,
    pub confidence: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StabilityTrace {
    pub points: Vec<TracePoint>,
}

impl StabilityTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,class,confidence\n");
        for p in &self.points {
            s.push_str(&format!("{},{},{}\n", p.index, p.class, p.confidence));
        }
        s
    }

    /// First evaluated index with confidence at least `threshold`.
    pub fn stop_index(&self, threshold: f64) -> Option<usize> {
        self.points.iter().find(|p| p.confidence >= threshold).map(|p| p.index)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyResult {
    /// Prediction at the stop index (the final one if never confident).
    pub class: usize,
    /// Events consumed; the stream length when the policy never fired.
    pub stop_index: usize,
    pub stopped: bool,
    pub trace: StabilityTrace,
}

/// Feeds `stream` into `engine` and stops at the first evaluation that
/// meets the policy. Events between evaluations are slid in as one batch.
pub fn run_early_recognition<T: Scalar>(
    engine: &mut SlideEngine<T>,
    stream: &[Event],
    policy: &EarlyStopPolicy,
) -> Result<EarlyResult, SlideError> {
    let mut trace = StabilityTrace::default();
    let mut consumed = 0;
    let mut class = argmax(engine.logits());
    for idx in policy.evaluation_indices(stream.len()) {
        engine.step(&stream[consumed..idx])?;
        consumed = idx;
        class = argmax(engine.logits());
        let confidence = sigmoid(engine.state_logit()).as_f64();
        trace.points.push(TracePoint {
            index: idx,
            class,
            confidence,
        });
        if confidence >= policy.threshold {
            return Ok(EarlyResult {
                class,
                stop_index: idx,
                stopped: true,
                trace,
            });
        }
    }
    if consumed < stream.len() {
        engine.step(&stream[consumed..])?;
        class = argmax(engine.logits());
    }
    Ok(EarlyResult {
        class,
        stop_index: stream.len(),
        stopped: false,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn labels() {
        assert_eq!(stability_labels(&['a', 'a', 'a']), vec![0, 1, 1]);
        assert_eq!(stability_labels(&['a', 'b', 'a', 'b']), vec![0, 0, 0, 0]);
        assert_eq!(stability_labels::<u8>(&[]), Vec::<u8>::new());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p: Vec<u8> = (0..rng.random_range(1..40)).map(|_| rng.random_range(0..3)).collect();
            let l = stability_labels(&p);
            for k in 0..p.len() {
                assert_eq!(l[k] == 1, k > 0 && p[k] == p[k - 1]);
            }
        }
    }

    #[test]
    fn evaluation_schedule() {
        let p = EarlyStopPolicy {
            threshold: 0.5,
            stride: 3,
            min_events: 4,
        };
        assert_eq!(p.evaluation_indices(11), vec![4, 7, 10, 11]);
        assert_eq!(EarlyStopPolicy::default().evaluation_indices(3), vec![1, 2, 3]);
        assert!(p.evaluation_indices(0).is_empty());
        assert!(EarlyStopPolicy { stride: 0, ..p }.validate().is_err());
        assert!(EarlyStopPolicy { threshold: 1.5, ..p }.validate().is_err());
    }

    #[test]
    fn trace_csv_and_stop() {
        let t = StabilityTrace {
            points: vec![
                TracePoint { index: 2, class: 1, confidence: 0.2 },
                TracePoint { index: 4, class: 0, confidence: 0.75 },
            ],
        };
        assert_eq!(t.to_csv(), "index,class,confidence\n2,1,0.2\n4,0,0.75\n");
        assert_eq!(t.stop_index(0.5), Some(4));
        assert_eq!(t.stop_index(0.0), Some(2));
        assert_eq!(t.stop_index(0.9), None);
    }
}
