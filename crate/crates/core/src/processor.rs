//! Fixed vocabulary of record processors and the chains built from them.
//!
//! A stage sees a trailing window of its own input stream (the newest record
//! last) and emits at most one record per input. During warm-up the window is
//! shorter than the configured length. A chain feeds each stage's outputs into
//! the next stage's window; a record dropped by any stage produces no output.

use serde::{Deserialize, Serialize};

use crate::dsp;
use crate::error::{EngineError, Result};
use crate::ring::BoundedQueue;
use crate::types::{FieldKind, FieldSpec, StreamElement, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProcessorSpec {
    Identity,
    /// Sound level of one numeric field: `20·log10(rms / reference)` over the window.
    NoiseLevelDb {
        reference: f64,
        window: usize,
        /// Defaults to the first numeric input field.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        field: Option<String>,
    },
    /// Per-field mean of numeric fields; text fields pass the newest value.
    MovingAverage { window: usize },
    /// Drops records whose `field` lies outside `[min, max]`.
    Threshold { field: String, min: f64, max: f64 },
    Scale { field: String, factor: f64 },
}

impl ProcessorSpec {
    pub fn window(&self) -> usize {
        match self {
            ProcessorSpec::NoiseLevelDb { window, .. } | ProcessorSpec::MovingAverage { window } => *window,
            _ => 1,
        }
    }

    /// The structure this processor emits for records of structure `input`.
    pub fn declared_output(&self, input: &[FieldSpec]) -> Result<Vec<FieldSpec>> {
        self.validate_params()?;
        match self {
            ProcessorSpec::Identity | ProcessorSpec::MovingAverage { .. } => Ok(input.to_vec()),
            ProcessorSpec::NoiseLevelDb { field, .. } => {
                numeric_index(input, field.as_deref())?;
                Ok(vec![FieldSpec::numeric("level_db", "dB")])
            }
            ProcessorSpec::Threshold { field, .. } | ProcessorSpec::Scale { field, .. } => {
                numeric_index(input, Some(field))?;
                Ok(input.to_vec())
            }
        }
    }

    fn validate_params(&self) -> Result<()> {
        let bad = |msg: &str| Err(EngineError::invalid_descriptor(msg.to_owned()));
        match self {
            ProcessorSpec::NoiseLevelDb { reference, window, .. } => {
                if !(reference.is_finite() && *reference > 0.0) {
                    return bad("noise_level_db: reference must be > 0");
                }
                if *window == 0 {
                    return bad("noise_level_db: window must be >= 1");
                }
            }
            ProcessorSpec::MovingAverage { window } if *window == 0 => return bad("moving_average: window must be >= 1"),
            ProcessorSpec::Threshold { min, max, .. } if !(min <= max) => return bad("threshold: min must be <= max"),
            ProcessorSpec::Scale { factor, .. } if !factor.is_finite() => return bad("scale: factor must be finite"),
            _ => {}
        }
        Ok(())
    }
}

fn numeric_index(input: &[FieldSpec], field: Option<&str>) -> Result<usize> {
    let found = match field {
        Some(name) => input.iter().position(|f| f.name == name),
        None => input.iter().position(|f| f.kind == FieldKind::Numeric),
    };
    match found {
        Some(i) if input[i].kind == FieldKind::Numeric => Ok(i),
        _ => Err(EngineError::invalid_descriptor(format!(
            "no numeric input field {}",
            field.map(|f| format!("`{f}`")).unwrap_or_default()
        ))),
    }
}

/// One processor bound to a concrete input structure.
#[derive(Debug, Clone)]
struct Stage {
    spec: ProcessorSpec,
    field: usize,
    input: Vec<FieldSpec>,
    output: Vec<FieldSpec>,
}

impl Stage {
    fn new(spec: ProcessorSpec, input: &[FieldSpec]) -> Result<Self> {
        let output = spec.declared_output(input)?;
        let field = match &spec {
            ProcessorSpec::NoiseLevelDb { field, .. } => numeric_index(input, field.as_deref())?,
            ProcessorSpec::Threshold { field, .. } | ProcessorSpec::Scale { field, .. } => {
                numeric_index(input, Some(field))?
            }
            _ => 0,
        };
        Ok(Self {
            spec,
            field,
            input: input.to_vec(),
            output,
        })
    }

    /// Applies the processor to a trailing window (newest last, non-empty).
    fn apply<'a, I>(&self, window: I) -> Option<StreamElement>
    where
        I: DoubleEndedIterator<Item = &'a StreamElement> + ExactSizeIterator + Clone,
    {
        let newest = window.clone().next_back()?;
        let num = |e: &StreamElement, i: usize| e.values[i].as_f64().unwrap_or(0.0);
        match &self.spec {
            ProcessorSpec::Identity => Some(newest.clone()),
            ProcessorSpec::NoiseLevelDb { reference, .. } => {
                let xs: Vec<f64> = window.map(|e| num(e, self.field)).collect();
                let db = dsp::level_db(&xs, *reference)?;
                Some(StreamElement::numeric(newest.ts, [db]))
            }
            ProcessorSpec::MovingAverage { .. } => {
                let values = self
                    .input
                    .iter()
                    .enumerate()
                    .map(|(i, f)| match f.kind {
                        FieldKind::Numeric => {
                            let xs: Vec<f64> = window.clone().map(|e| num(e, i)).collect();
                            Value::Num(dsp::mean(&xs).unwrap_or(0.0))
                        }
                        FieldKind::Text => newest.values[i].clone(),
                    })
                    .collect();
                Some(StreamElement::new(newest.ts, values))
            }
            ProcessorSpec::Threshold { min, max, .. } => {
                let v = num(newest, self.field);
                (*min <= v && v <= *max).then(|| newest.clone())
            }
            ProcessorSpec::Scale { factor, .. } => {
                let mut e = newest.clone();
                e.values[self.field] = Value::Num(num(newest, self.field) * factor);
                Some(e)
            }
        }
    }
}

/// A processor chain bound to the structure of its input records.
#[derive(Debug, Clone)]
pub struct Chain {
    input: Vec<FieldSpec>,
    stages: Vec<Stage>,
}

impl Chain {
    pub fn new(specs: &[ProcessorSpec], input: &[FieldSpec]) -> Result<Self> {
        let mut stages = Vec::with_capacity(specs.len());
        let mut current = input.to_vec();
        for spec in specs {
            let stage = Stage::new(spec.clone(), &current)?;
            current = stage.output.clone();
            stages.push(stage);
        }
        Ok(Self {
            input: input.to_vec(),
            stages,
        })
    }

    pub fn input(&self) -> &[FieldSpec] {
        &self.input
    }

    /// Output structure of the last stage, or the input when the chain is empty.
    pub fn output(&self) -> &[FieldSpec] {
        self.stages.last().map_or(&self.input, |s| &s.output)
    }

    pub fn max_window(&self) -> usize {
        self.stages.iter().map(|s| s.spec.window()).max().unwrap_or(1)
    }

    /// Runs the chain over an input window and returns the output for the
    /// window's newest record, or `None` when some stage drops it.
    pub fn process(&self, window: &[StreamElement]) -> Result<Option<StreamElement>> {
        if window.is_empty() {
            return Err(EngineError::invalid_query("empty input window"));
        }
        for e in window {
            e.conforms_to(&self.input)?;
        }
        // (record, derived from the newest input)
        let last = window.len() - 1;
        let mut seq: Vec<(StreamElement, bool)> = window.iter().cloned().enumerate().map(|(i, e)| (e, i == last)).collect();
        for stage in &self.stages {
            let w = stage.spec.window();
            let mut next = Vec::with_capacity(seq.len());
            for i in 0..seq.len() {
                let from = (i + 1).saturating_sub(w);
                if let Some(out) = stage.apply(seq[from..=i].iter().map(|(e, _)| e)) {
                    next.push((out, seq[i].1));
                }
            }
            seq = next;
        }
        Ok(seq.pop().filter(|(_, newest)| *newest).map(|(e, _)| e))
    }

    /// Fresh streaming state for this chain.
    pub fn start(&self) -> ChainState {
        ChainState {
            chain: self.clone(),
            windows: self.stages.iter().map(|s| BoundedQueue::new(s.spec.window())).collect(),
        }
    }
}

/// Incremental form of [`Chain::process`]: each stage keeps its own window.
#[derive(Debug, Clone)]
pub struct ChainState {
    chain: Chain,
    windows: Vec<BoundedQueue<StreamElement>>,
}

impl ChainState {
    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    /// Feeds one input record; returns the chain output for it, if any.
    pub fn push(&mut self, element: StreamElement) -> Result<Option<StreamElement>> {
        element.conforms_to(&self.chain.input)?;
        let mut current = element;
        for (stage, window) in self.chain.stages.iter().zip(self.windows.iter_mut()) {
            window.push(current);
            match stage.apply(window.iter()) {
                Some(out) => current = out,
                None => return Ok(None),
            }
        }
        Ok(Some(current))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn amp() -> Vec<FieldSpec> {
        vec![FieldSpec::numeric("amplitude", "")]
    }

    fn elems(xs: &[f64]) -> Vec<StreamElement> {
        xs.iter().enumerate().map(|(i, &x)| StreamElement::numeric(i as i64, [x])).collect()
    }

    fn db(reference: f64, window: usize) -> ProcessorSpec {
        ProcessorSpec::NoiseLevelDb {
            reference,
            window,
            field: None,
        }
    }

    fn single(chain: &Chain, xs: &[f64]) -> f64 {
        chain.process(&elems(xs)).unwrap().unwrap().values[0].as_f64().unwrap()
    }

    #[test]
    fn noise_level_constant_is_zero_db() {
        let c = Chain::new(&[db(1.0, 8)], &amp()).unwrap();
        assert_eq!(single(&c, &[1.0; 8]), 0.0);
        assert_eq!(c.output(), &[FieldSpec::numeric("level_db", "dB")]);
    }

    #[test]
    fn noise_level_full_period_sine() {
        let n = 32;
        let xs: Vec<f64> = (0..n).map(|i| (2.0 * PI * i as f64 / n as f64).sin()).collect();
        let c = Chain::new(&[db(1.0, n)], &amp()).unwrap();
        let expected = 20.0 * (1.0 / 2f64.sqrt()).log10();
        let got = single(&c, &xs);
        assert!((got - expected).abs() < 1e-9);
        assert!((got - -3.0103).abs() < 1e-4);
    }

    #[test]
    fn moving_average_of_three() {
        let c = Chain::new(&[ProcessorSpec::MovingAverage { window: 3 }], &amp()).unwrap();
        assert_eq!(single(&c, &[1.0, 2.0, 3.0]), 2.0);
    }

    #[test]
    fn threshold_drops_out_of_range() {
        let spec = ProcessorSpec::Threshold {
            field: "amplitude".into(),
            min: 0.0,
            max: 10.0,
        };
        let c = Chain::new(&[spec], &amp()).unwrap();
        assert_eq!(c.process(&elems(&[42.0])).unwrap(), None);
        assert!(c.process(&elems(&[4.0])).unwrap().is_some());
    }

    #[test]
    fn identity_returns_newest_unchanged() {
        let c = Chain::new(&[ProcessorSpec::Identity], &amp()).unwrap();
        let w = elems(&[1.0, 2.0, 3.0]);
        assert_eq!(c.process(&w).unwrap().unwrap(), w[2]);
    }

    #[test]
    fn structure_mismatch_is_invalid_query() {
        let c = Chain::new(&[ProcessorSpec::Identity], &amp()).unwrap();
        let bad = vec![StreamElement::numeric(0, [1.0, 2.0])];
        assert_eq!(c.process(&bad).unwrap_err().kind, crate::error::ErrorKind::InvalidQuery);
        assert!(c.process(&[]).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(Chain::new(&[db(0.0, 4)], &amp()).is_err());
        assert!(Chain::new(&[db(1.0, 0)], &amp()).is_err());
        assert!(Chain::new(&[ProcessorSpec::MovingAverage { window: 0 }], &amp()).is_err());
        let missing = ProcessorSpec::Scale {
            field: "nope".into(),
            factor: 2.0,
        };
        assert!(Chain::new(&[missing], &amp()).is_err());
        // Threshold on the dB output needs the new field name.
        let after = ProcessorSpec::Threshold {
            field: "amplitude".into(),
            min: 0.0,
            max: 1.0,
        };
        assert!(Chain::new(&[db(1.0, 2), after], &amp()).is_err());
    }

    #[test]
    fn parses_from_toml() {
        #[derive(Deserialize)]
        struct W {
            processors: Vec<ProcessorSpec>,
        }
        let w: W = toml::from_str(
            r#"
[[processors]]
kind = "noise_level_db"
reference = 0.00002
window = 8
[[processors]]
kind = "threshold"
field = "level_db"
min = -200.0
max = 200.0
"#,
        )
        .unwrap();
        assert_eq!(w.processors.len(), 2);
        assert!(Chain::new(&w.processors, &amp()).is_ok());
    }

    fn spec_strategy() -> impl Strategy<Value = ProcessorSpec> {
        prop_oneof![
            Just(ProcessorSpec::Identity),
            (1usize..5).prop_map(|window| ProcessorSpec::MovingAverage { window }),
            (-5.0f64..0.0, 0.0f64..5.0).prop_map(|(min, max)| ProcessorSpec::Threshold {
                field: "amplitude".into(),
                min,
                max
            }),
            (-3.0f64..3.0).prop_map(|factor| ProcessorSpec::Scale {
                field: "amplitude".into(),
                factor
            }),
        ]
    }

    proptest! {
        #[test]
        fn streaming_matches_batch(
            specs in proptest::collection::vec(spec_strategy(), 0..4),
            xs in proptest::collection::vec(-6.0f64..6.0, 1..30),
        ) {
            let chain = Chain::new(&specs, &amp()).unwrap();
            let mut state = chain.start();
            let input = elems(&xs);
            for i in 0..input.len() {
                let streamed = state.push(input[i].clone()).unwrap();
                let batch = chain.process(&input[..=i]).unwrap();
                prop_assert_eq!(streamed, batch);
            }
        }

        #[test]
        fn chain_composition(
            a in spec_strategy(),
            b in spec_strategy(),
            xs in proptest::collection::vec(-6.0f64..6.0, 1..30),
        ) {
            let input = elems(&xs);
            let ab = Chain::new(&[a.clone(), b.clone()], &amp()).unwrap();
            let ca = Chain::new(&[a], &amp()).unwrap();
            let cb = Chain::new(&[b], ca.output()).unwrap();
            // Outputs of A over every prefix, in order: the window B sees.
            let a_out: Vec<StreamElement> = (0..input.len())
                .filter_map(|i| ca.process(&input[..=i]).unwrap())
                .collect();
            let a_newest = ca.process(&input).unwrap();
            let lhs = ab.process(&input).unwrap();
            let rhs = match a_newest {
                Some(_) => cb.process(&a_out).unwrap(),
                None => None,
            };
            prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn noise_level_scales_by_20_log10_c(
            xs in proptest::collection::vec(0.01f64..10.0, 1..64),
            c in 1.0001f64..1000.0,
            reference in 0.001f64..10.0,
        ) {
            let chain = Chain::new(&[db(reference, xs.len())], &amp()).unwrap();
            let base = single(&chain, &xs);
            let scaled: Vec<f64> = xs.iter().map(|x| x * c).collect();
            let up = single(&chain, &scaled);
            prop_assert!((up - base - 20.0 * c.log10()).abs() < 1e-9, "{} vs {}", up - base, 20.0 * c.log10());
        }
    }
}
