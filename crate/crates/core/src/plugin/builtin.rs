//! Simulated sensor sources standing in for on-board phone hardware.
//!
//! Every stochastic generator draws from its own ChaCha stream seeded by the
//! `seed` parameter (default 0), so a sample sequence depends only on the
//! parameters and the order of calls.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{EngineError, Result};
use crate::types::{FieldSpec, TimestampMs, Value};

pub const BUILTIN_NAMES: [&str; 8] = [
    "constant",
    "sine_wave",
    "gaussian_noise",
    "random_walk",
    "accelerometer_sim",
    "microphone_sim",
    "light_sim",
    "pressure_sim",
];

const STANDARD_GRAVITY: f64 = 9.80665;

/// A builtin source: produces one record's values for a sampling instant.
pub trait Generator: Send {
    fn sample(&mut self, at: TimestampMs) -> Vec<Value>;
}

/// Accepted parameters and their defaults, per builtin.
pub fn parameter_defaults(name: &str) -> Option<&'static [(&'static str, f64)]> {
    Some(match name {
        "constant" => &[("value", 0.0)],
        "sine_wave" => &[("amplitude", 1.0), ("period_ms", 60_000.0), ("offset", 0.0), ("phase_ms", 0.0)],
        "gaussian_noise" => &[("mean", 0.0), ("std_dev", 1.0), ("seed", 0.0)],
        "random_walk" => &[("start", 0.0), ("step", 1.0), ("seed", 0.0)],
        "accelerometer_sim" => &[("noise", 0.05), ("seed", 0.0)],
        "microphone_sim" => &[("level", 0.1), ("noise", 0.02), ("seed", 0.0)],
        "light_sim" => &[("base", 300.0), ("swing", 200.0), ("period_ms", 86_400_000.0), ("noise", 5.0), ("seed", 0.0)],
        "pressure_sim" => &[("start", 1013.25), ("step", 0.05), ("seed", 0.0)],
        _ => return None,
    })
}

/// The record structure a builtin produces, or `None` for an unknown name.
pub fn native_output(name: &str) -> Option<Vec<FieldSpec>> {
    Some(match name {
        "constant" | "sine_wave" | "gaussian_noise" | "random_walk" => vec![FieldSpec::numeric("value", "")],
        "accelerometer_sim" => vec![
            FieldSpec::numeric("x", "m/s^2"),
            FieldSpec::numeric("y", "m/s^2"),
            FieldSpec::numeric("z", "m/s^2"),
        ],
        "microphone_sim" => vec![FieldSpec::numeric("amplitude", "")],
        "light_sim" => vec![FieldSpec::numeric("illuminance", "lx")],
        "pressure_sim" => vec![FieldSpec::numeric("pressure", "hPa")],
        _ => return None,
    })
}

struct Params<'a> {
    given: &'a BTreeMap<String, f64>,
    defaults: &'static [(&'static str, f64)],
}

impl Params<'_> {
    fn get(&self, key: &str) -> f64 {
        self.given.get(key).copied().unwrap_or_else(|| {
            self.defaults
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .expect("parameter listed in defaults")
        })
    }

    fn seed(&self) -> u64 {
        self.get("seed") as u64
    }
}

/// Rejects unknown parameter names and out-of-range values.
pub fn check_parameters(name: &str, given: &BTreeMap<String, f64>) -> Result<()> {
    let defaults = parameter_defaults(name)
        .ok_or_else(|| EngineError::plugin_failure(format!("unknown builtin `{name}`")))?;
    for (k, v) in given {
        if !defaults.iter().any(|(d, _)| d == k) {
            return Err(EngineError::invalid_descriptor(format!("`{name}` has no parameter `{k}`")));
        }
        if !v.is_finite() {
            return Err(EngineError::invalid_descriptor(format!("`{k}` must be finite")));
        }
    }
    let p = Params { given, defaults };
    let positive = |k: &str| -> Result<()> {
        if p.get(k) > 0.0 {
            Ok(())
        } else {
            Err(EngineError::invalid_descriptor(format!("`{k}` must be > 0")))
        }
    };
    let non_negative = |k: &str| -> Result<()> {
        if p.get(k) >= 0.0 {
            Ok(())
        } else {
            Err(EngineError::invalid_descriptor(format!("`{k}` must be >= 0")))
        }
    };
    if defaults.iter().any(|(k, _)| *k == "seed") {
        let s = p.get("seed");
        if s < 0.0 || s.fract() != 0.0 {
            return Err(EngineError::invalid_descriptor("`seed` must be a non-negative integer"));
        }
    }
    match name {
        "sine_wave" | "light_sim" => positive("period_ms")?,
        _ => {}
    }
    for k in ["std_dev", "step", "noise", "level"] {
        if defaults.iter().any(|(d, _)| *d == k) {
            non_negative(k)?;
        }
    }
    Ok(())
}

/// Instantiates a builtin generator.
pub fn create(name: &str, given: &BTreeMap<String, f64>) -> Result<Box<dyn Generator>> {
    let defaults = parameter_defaults(name)
        .ok_or_else(|| EngineError::plugin_failure(format!("unknown builtin `{name}`")))?;
    check_parameters(name, given).map_err(|e| EngineError::plugin_failure(e.detail))?;
    let p = Params { given, defaults };
    let rng = || ChaCha8Rng::seed_from_u64(p.seed());
    let normal = |sd: f64| Normal::new(0.0, sd).expect("std dev checked non-negative");
    Ok(match name {
        "constant" => Box::new(Constant(p.get("value"))),
        "sine_wave" => Box::new(Sine {
            amplitude: p.get("amplitude"),
            period_ms: p.get("period_ms"),
            offset: p.get("offset"),
            phase_ms: p.get("phase_ms"),
        }),
        "gaussian_noise" => Box::new(Noise {
            mean: p.get("mean"),
            dist: normal(p.get("std_dev")),
            rng: rng(),
        }),
        "random_walk" => Box::new(Walk {
            pos: p.get("start"),
            step: normal(p.get("step")),
            bounds: None,
            rng: rng(),
        }),
        "pressure_sim" => Box::new(Walk {
            pos: p.get("start"),
            step: normal(p.get("step")),
            bounds: Some((870.0, 1085.0)),
            rng: rng(),
        }),
        "accelerometer_sim" => Box::new(Accelerometer {
            dist: normal(p.get("noise")),
            rng: rng(),
        }),
        "microphone_sim" => Box::new(Microphone {
            level: p.get("level"),
            dist: normal(p.get("noise")),
            rng: rng(),
        }),
        "light_sim" => Box::new(Light {
            base: p.get("base"),
            swing: p.get("swing"),
            period_ms: p.get("period_ms"),
            dist: normal(p.get("noise")),
            rng: rng(),
        }),
        _ => unreachable!("defaults exist only for known builtins"),
    })
}

struct Constant(f64);

impl Generator for Constant {
    fn sample(&mut self, _at: TimestampMs) -> Vec<Value> {
        vec![Value::Num(self.0)]
    }
}

/// `amplitude·sin(2π(t + phase)/period) + offset`, with `t` the sampling timestamp.
struct Sine {
    amplitude: f64,
    period_ms: f64,
    offset: f64,
    phase_ms: f64,
}

impl Generator for Sine {
    fn sample(&mut self, at: TimestampMs) -> Vec<Value> {
        // Reduce first so large epoch timestamps keep full precision.
        let t = (at as f64 + self.phase_ms).rem_euclid(self.period_ms);
        vec![Value::Num(self.amplitude * (2.0 * PI * t / self.period_ms).sin() + self.offset)]
    }
}

struct Noise {
    mean: f64,
    dist: Normal<f64>,
    rng: ChaCha8Rng,
}

impl Generator for Noise {
    fn sample(&mut self, _at: TimestampMs) -> Vec<Value> {
        vec![Value::Num(self.mean + self.dist.sample(&mut self.rng))]
    }
}

struct Walk {
    pos: f64,
    step: Normal<f64>,
    bounds: Option<(f64, f64)>,
    rng: ChaCha8Rng,
}

impl Generator for Walk {
    fn sample(&mut self, _at: TimestampMs) -> Vec<Value> {
        self.pos += self.step.sample(&mut self.rng);
        if let Some((lo, hi)) = self.bounds {
            self.pos = self.pos.clamp(lo, hi);
        }
        vec![Value::Num(self.pos)]
    }
}

/// A phone lying flat: gravity on z plus sensor noise on every axis.
struct Accelerometer {
    dist: Normal<f64>,
    rng: ChaCha8Rng,
}

impl Generator for Accelerometer {
    fn sample(&mut self, _at: TimestampMs) -> Vec<Value> {
        let mut n = || self.dist.sample(&mut self.rng);
        vec![Value::Num(n()), Value::Num(n()), Value::Num(STANDARD_GRAVITY + n())]
    }
}

/// Peak amplitude of a captured audio frame, slowly modulated ambient level.
struct Microphone {
    level: f64,
    dist: Normal<f64>,
    rng: ChaCha8Rng,
}

impl Generator for Microphone {
    fn sample(&mut self, at: TimestampMs) -> Vec<Value> {
        let swell = 1.0 + 0.5 * (2.0 * PI * (at.rem_euclid(30_000) as f64) / 30_000.0).sin();
        vec![Value::Num((self.level * swell + self.dist.sample(&mut self.rng)).abs())]
    }
}

struct Light {
    base: f64,
    swing: f64,
    period_ms: f64,
    dist: Normal<f64>,
    rng: ChaCha8Rng,
}

impl Generator for Light {
    fn sample(&mut self, at: TimestampMs) -> Vec<Value> {
        let t = (at as f64).rem_euclid(self.period_ms);
        let lux = self.base + self.swing * (2.0 * PI * t / self.period_ms).sin() + self.dist.sample(&mut self.rng);
        vec![Value::Num(lux.max(0.0))]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(kv: &[(&str, f64)]) -> BTreeMap<String, f64> {
        kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn sine_quarter_period_hits_amplitude() {
        let mut g = create("sine_wave", &params(&[("amplitude", 3.5), ("period_ms", 2000.0)])).unwrap();
        // Closed form A·sin(2πt/P) at t = P/4.
        let v = g.sample(500)[0].as_f64().unwrap();
        assert!((v - 3.5).abs() < 1e-9);
        // Same phase one full period later at an epoch-sized timestamp.
        let v = g.sample(1_700_000_000_000 + 500)[0].as_f64().unwrap();
        assert!((v - 3.5).abs() < 1e-9, "{v}");
    }

    #[test]
    fn every_builtin_conforms_for_10k_samples() {
        for name in BUILTIN_NAMES {
            let out = native_output(name).unwrap();
            let mut g = create(name, &BTreeMap::new()).unwrap();
            for i in 0..10_000i64 {
                let values = g.sample(1_700_000_000_000 + i * 1000);
                assert_eq!(values.len(), out.len(), "{name}");
                assert!(values.iter().all(|v| v.as_f64().is_some_and(f64::is_finite)), "{name}");
            }
        }
    }

    #[test]
    fn seeded_sequences_repeat() {
        for name in ["gaussian_noise", "random_walk", "accelerometer_sim", "microphone_sim", "light_sim", "pressure_sim"] {
            let p = params(&[("seed", 42.0)]);
            let mut a = create(name, &p).unwrap();
            let mut b = create(name, &p).unwrap();
            let mut c = create(name, &params(&[("seed", 43.0)])).unwrap();
            let sa: Vec<_> = (0..50).map(|i| a.sample(i)).collect();
            let sb: Vec<_> = (0..50).map(|i| b.sample(i)).collect();
            let sc: Vec<_> = (0..50).map(|i| c.sample(i)).collect();
            assert_eq!(sa, sb, "{name}");
            assert_ne!(sa, sc, "{name}");
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(check_parameters("sine_wave", &params(&[("period_ms", 0.0)])).is_err());
        assert!(check_parameters("gaussian_noise", &params(&[("std_dev", -1.0)])).is_err());
        assert!(check_parameters("gaussian_noise", &params(&[("seed", 1.5)])).is_err());
        assert!(check_parameters("constant", &params(&[("bogus", 1.0)])).is_err());
        assert!(create("xyz", &BTreeMap::new()).is_err());
    }
}
