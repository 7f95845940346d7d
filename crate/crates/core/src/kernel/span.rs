//! Hierarchical wall-clock spans.
//!
//! A [`SpanRecorder`] owns a monotonic epoch and a flat list of
//! [`TimingSpan`]s; parents are indices into that list. Worker threads record
//! into their own recorders (sharing the epoch) which are merged back with
//! [`SpanRecorder::merge`].

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub type SpanId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingSpan {
    pub label: String,
    pub start_ns: u64,
    pub end_ns: u64,
    pub parent: Option<SpanId>,
}

impl TimingSpan {
    pub fn duration_ns(&self) -> u64 {
        self.end_ns - self.start_ns
    }
}

#[derive(Debug, Clone)]
pub struct SpanRecorder {
    epoch: Instant,
    spans: Vec<TimingSpan>,
}

impl Default for SpanRecorder {
    fn default() -> Self {
        Self::new()
    }
}

impl SpanRecorder {
    pub fn new() -> Self {
        Self {
            epoch: Instant::now(),
            spans: Vec::new(),
        }
    }

    /// Empty recorder on the same clock, for use on another thread.
    pub fn fork(&self) -> Self {
        Self {
            epoch: self.epoch,
            spans: Vec::new(),
        }
    }

    fn now_ns(&self) -> u64 {
        self.epoch.elapsed().as_nanos() as u64
    }

    /// Runs `f` inside a span labelled `label`. `f` receives the recorder and
    /// the new span's id so it can open children.
    ///
    /// # Panics
    ///
    /// Panics if `label` is empty.
    pub fn with_span<R>(
        &mut self,
        label: &str,
        parent: Option<SpanId>,
        f: impl FnOnce(&mut Self, SpanId) -> R,
    ) -> (R, TimingSpan) {
        assert!(!label.is_empty(), "span label must not be empty");
        let id = self.spans.len();
        let start_ns = self.now_ns();
        self.spans.push(TimingSpan {
            label: label.to_string(),
            start_ns,
            end_ns: start_ns,
            parent,
        });
        let out = f(self, id);
        let end_ns = self.now_ns();
        self.spans[id].end_ns = end_ns;
        (out, self.spans[id].clone())
    }

    /// Appends spans recorded by a fork. Spans the fork opened without a
    /// parent are attached to `attach_to`.
    pub fn merge(&mut self, other: SpanRecorder, attach_to: Option<SpanId>) {
        let offset = self.spans.len();
        self.spans.extend(other.spans.into_iter().map(|mut s| {
            s.parent = match s.parent {
                Some(p) => Some(p + offset),
                None => attach_to,
            };
            s
        }));
    }

    pub fn spans(&self) -> &[TimingSpan] {
        &self.spans
    }

    pub fn into_spans(self) -> Vec<TimingSpan> {
        self.spans
    }

    pub fn children(&self, id: SpanId) -> impl Iterator<Item = (SpanId, &TimingSpan)> {
        self.spans.iter().enumerate().filter(move |(_, s)| s.parent == Some(id))
    }

    /// JSON array of `{label, start_ns, end_ns, parent}`; `parent` indexes
    /// the array.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.spans).expect("spans serialize")
    }
}

/// Checks `end ≥ start` everywhere and that every child lies inside its
/// parent's interval.
pub fn check_nesting(spans: &[TimingSpan]) -> Result<(), String> {
    for (i, s) in spans.iter().enumerate() {
        if s.end_ns < s.start_ns {
            return Err(format!("span {i} ({}) ends before it starts", s.label));
        }
        if let Some(p) = s.parent {
            let parent = spans
                .get(p)
                .ok_or_else(|| format!("span {i} has dangling parent {p}"))?;
            if s.start_ns < parent.start_ns || s.end_ns > parent.end_ns {
                return Err(format!("span {i} ({}) escapes parent {p} ({})", s.label, parent.label));
            }
        }
    }
    Ok(())
}
