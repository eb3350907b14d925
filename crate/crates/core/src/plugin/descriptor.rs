use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::builtin;
use crate::error::{EngineError, ErrorKind, Result};
use crate::types::{validate_output, FieldSpec};

pub const FORMAT_VERSION: u32 = 1;
pub const PLUGIN_EXTENSION: &str = "plugin";

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PluginSource {
    Builtin {
        name: String,
        #[serde(default)]
        parameters: BTreeMap<String, f64>,
    },
    External {
        endpoint: String,
    },
}

/// Declares one sensor source. Stored one per `*.plugin` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginDescriptor {
    pub format_version: u32,
    pub plugin_id: String,
    #[serde(default)]
    pub display_name: String,
    pub min_sampling_interval_ms: u64,
    pub source: PluginSource,
    /// May be omitted for builtin sources, which then use their native structure.
    #[serde(default)]
    pub output: Vec<FieldSpec>,
}

impl PluginDescriptor {
    pub fn builtin(
        plugin_id: impl Into<String>,
        name: &str,
        parameters: impl IntoIterator<Item = (&'static str, f64)>,
    ) -> Result<Self> {
        let mut d = Self {
            format_version: FORMAT_VERSION,
            plugin_id: plugin_id.into(),
            display_name: name.to_owned(),
            min_sampling_interval_ms: 1,
            source: PluginSource::Builtin {
                name: name.to_owned(),
                parameters: parameters.into_iter().map(|(k, v)| (k.to_owned(), v)).collect(),
            },
            output: Vec::new(),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn external(plugin_id: impl Into<String>, endpoint: impl Into<String>, output: Vec<FieldSpec>) -> Result<Self> {
        let mut d = Self {
            format_version: FORMAT_VERSION,
            plugin_id: plugin_id.into(),
            display_name: String::new(),
            min_sampling_interval_ms: 1,
            source: PluginSource::External {
                endpoint: endpoint.into(),
            },
            output,
        };
        d.validate()?;
        Ok(d)
    }

    /// Parses and validates descriptor text.
    pub fn parse(text: &str) -> Result<Self> {
        let mut d: PluginDescriptor =
            toml::from_str(text).map_err(|e| EngineError::invalid_descriptor(e.message().to_owned() + &span_hint(&e)))?;
        d.validate()?;
        Ok(d)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| EngineError::invalid_descriptor(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| EngineError::new(e.kind, format!("{}: {}", path.display(), e.detail)))
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("descriptor serializes")
    }

    /// Checks invariants, filling in a builtin's native output when omitted.
    pub fn validate(&mut self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(EngineError::invalid_descriptor(format!(
                "format_version: unsupported version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.plugin_id.parse::<crate::types::SensorName>().is_err() {
            return Err(EngineError::invalid_descriptor(format!(
                "plugin_id: `{}` must be non-empty and use [A-Za-z0-9_.-]",
                self.plugin_id
            )));
        }
        if self.min_sampling_interval_ms == 0 {
            return Err(EngineError::invalid_descriptor("min_sampling_interval_ms: must be at least 1"));
        }
        match &self.source {
            PluginSource::Builtin { name, parameters } => {
                let native = builtin::native_output(name)
                    .ok_or_else(|| EngineError::invalid_descriptor(format!("source.name: unknown builtin `{name}`")))?;
                builtin::check_parameters(name, parameters)
                    .map_err(|e| EngineError::invalid_descriptor(format!("source.parameters: {}", e.detail)))?;
                if self.output.is_empty() {
                    self.output = native;
                } else if self.output.len() != native.len()
                    || self.output.iter().zip(&native).any(|(a, b)| a.kind != b.kind)
                {
                    return Err(EngineError::invalid_descriptor(format!(
                        "output: builtin `{name}` produces {} field(s) of kinds {:?}",
                        native.len(),
                        native.iter().map(|f| f.kind).collect::<Vec<_>>()
                    )));
                }
            }
            PluginSource::External { endpoint } => {
                if endpoint.rsplit_once(':').is_none_or(|(h, p)| h.is_empty() || p.parse::<u16>().is_err()) {
                    return Err(EngineError::invalid_descriptor(format!(
                        "source.endpoint: `{endpoint}` is not host:port"
                    )));
                }
            }
        }
        validate_output(&self.output).map_err(|e| EngineError::invalid_descriptor(format!("output: {}", e.detail)))
    }
}

fn span_hint(e: &toml::de::Error) -> String {
    e.span().map(|s| format!(" (at byte {})", s.start)).unwrap_or_default()
}

/// Result of scanning a plugin directory. Malformed files are reported, not fatal.
#[derive(Debug, Default)]
pub struct ScanReport {
    pub descriptors: Vec<PluginDescriptor>,
    pub rejected: Vec<(PathBuf, EngineError)>,
}

/// Reads every `*.plugin` file in `dir`, in file-name order.
pub fn scan_plugins(dir: &Path) -> Result<ScanReport> {
    let entries = fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => EngineError::not_found(format!("plugin directory {}", dir.display())),
        _ => EngineError::invalid_descriptor(format!("{}: {e}", dir.display())),
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == PLUGIN_EXTENSION) && p.is_file())
        .collect();
    paths.sort();

    let mut report = ScanReport::default();
    for path in paths {
        match PluginDescriptor::load(&path) {
            Ok(d) if report.descriptors.iter().any(|o| o.plugin_id == d.plugin_id) => {
                let err = EngineError::new(
                    ErrorKind::InvalidDescriptor,
                    format!("{}: plugin_id: duplicate `{}`", path.display(), d.plugin_id),
                );
                report.rejected.push((path, err));
            }
            Ok(d) => report.descriptors.push(d),
            Err(e) => report.rejected.push((path, e)),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SINE: &str = r#"
format_version = 1
plugin_id = "sine"
display_name = "Sine"
min_sampling_interval_ms = 10

[source]
type = "builtin"
name = "sine_wave"
parameters = { amplitude = 2.0, period_ms = 1000 }
"#;

    #[test]
    fn parses_builtin_and_fills_output() {
        let d = PluginDescriptor::parse(SINE).unwrap();
        assert_eq!(d.plugin_id, "sine");
        assert_eq!(d.output.len(), 1);
        let back = PluginDescriptor::parse(&d.to_text()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn diagnostics_name_the_field() {
        let bad = SINE.replace("min_sampling_interval_ms = 10", "min_sampling_interval_ms = 0");
        let e = PluginDescriptor::parse(&bad).unwrap_err();
        assert_eq!(e.kind, ErrorKind::InvalidDescriptor);
        assert!(e.detail.contains("min_sampling_interval_ms"), "{}", e.detail);

        let bad = SINE.replace("sine_wave", "xyz");
        assert!(PluginDescriptor::parse(&bad).unwrap_err().detail.contains("source.name"));

        let bad = SINE.replace("format_version = 1", "format_version = 9");
        assert!(PluginDescriptor::parse(&bad).unwrap_err().detail.contains("format_version"));

        let bad = SINE.replace("amplitude = 2.0", "amplitud = 2.0");
        assert!(PluginDescriptor::parse(&bad).unwrap_err().detail.contains("source.parameters"));
    }

    #[test]
    fn output_must_match_builtin_arity() {
        let text = format!(
            "{SINE}\n[[output]]\nname = \"a\"\nkind = \"numeric\"\n[[output]]\nname = \"b\"\nkind = \"numeric\"\n"
        );
        let e = PluginDescriptor::parse(&text).unwrap_err();
        assert!(e.detail.starts_with("output"), "{}", e.detail);
    }

    #[test]
    fn external_endpoint_checked() {
        let out = vec![FieldSpec::numeric("v", "")];
        assert!(PluginDescriptor::external("ext", "127.0.0.1:9000", out.clone()).is_ok());
        assert!(PluginDescriptor::external("ext", "localhost", out.clone()).is_err());
        assert!(PluginDescriptor::external("ext", "127.0.0.1:9000", vec![]).is_err());
    }
}
