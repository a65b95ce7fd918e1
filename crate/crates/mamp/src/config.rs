//! Training configuration files: one `key = value` per line, `#` starts a
//! comment. Unset keys keep the defaults of the chosen encoder scale.
//!
//! ```text
//! encoder = toy
//! learning_rate = 0.01
//! max_iterations = 500
//! halve_at = 200, 400
//! ```

use std::path::Path;
use std::str::FromStr;

use mamp_core::encoder::EncoderConfig;
use mamp_core::train::TrainConfig;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Toy,
    Full,
}

impl Scale {
    pub fn encoder(self) -> EncoderConfig {
        match self {
            Scale::Toy => EncoderConfig::toy(),
            Scale::Full => EncoderConfig::full(),
        }
    }

    pub fn train(self) -> TrainConfig {
        match self {
            Scale::Toy => TrainConfig::toy(),
            Scale::Full => TrainConfig::full(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub scale: Scale,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self::for_scale(Scale::Toy)
    }
}

impl TrainSettings {
    pub fn for_scale(scale: Scale) -> Self {
        Self {
            scale,
            encoder: scale.encoder(),
            train: scale.train(),
        }
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn apply(t: &mut TrainConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    match key {
        "learning_rate" => t.learning_rate = parse(v)?,
        "batch_size" => t.batch_size = parse(v)?,
        "epochs" => t.epochs = parse(v)?,
        "max_iterations" => t.max_iterations = if v == "none" { None } else { Some(parse(v)?) },
        "halve_at" => {
            t.halve_at = v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(parse)
                .collect::<std::result::Result<_, _>>()?
        }
        "max_gap" => t.max_gap = parse(v)?,
        "radius" => t.radius = parse(v)?,
        "temperature" => t.temperature = if v == "channels" { None } else { Some(parse(v)?) },
        "input_size" => t.input_size = parse(v)?,
        "seed" => t.seed = parse(v)?,
        _ => return Err(format!("unknown key {key:?}")),
    }
    Ok(())
}

/// Parses configuration text; `origin` names it in error messages.
pub fn parse_str(text: &str, origin: &str) -> Result<TrainSettings> {
    let err = |line: usize, message: String| Error::Config {
        path: origin.to_owned(),
        line,
        message,
    };
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(err(i + 1, format!("expected key = value, found {line:?}")));
        };
        let (k, v) = (k.trim(), v.trim());
        if entries.iter().any(|(_, key, _): &(usize, &str, &str)| *key == k) {
            return Err(err(i + 1, format!("duplicate key {k:?}")));
        }
        entries.push((i + 1, k, v));
    }
    let scale = match entries.iter().find(|e| e.1 == "encoder") {
        None => Scale::Toy,
        Some(&(_, _, "toy")) => Scale::Toy,
        Some(&(_, _, "full")) => Scale::Full,
        Some(&(line, _, v)) => return Err(err(line, format!("encoder must be toy or full, found {v:?}"))),
    };
    let mut settings = TrainSettings::for_scale(scale);
    for (line, k, v) in entries {
        if k != "encoder" {
            apply(&mut settings.train, k, v).map_err(|m| err(line, m))?;
        }
    }
    settings
        .train
        .validate(&settings.encoder)
        .map_err(|e| err(0, e.to_string()))?;
    Ok(settings)
}

pub fn load(path: impl AsRef<Path>) -> Result<TrainSettings> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    parse_str(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_toy_defaults() {
        assert_eq!(parse_str("", "x").unwrap(), TrainSettings::default());
        assert_eq!(parse_str("# nothing\n\n", "x").unwrap(), TrainSettings::default());
    }

    #[test]
    fn keys_override_defaults() {
        let s = parse_str(
            "encoder = full\nlearning_rate=0.5 # fast\nmax_iterations = none\nhalve_at = 3, 9\ntemperature = 16\nseed=7",
            "x",
        )
        .unwrap();
        assert_eq!(s.scale, Scale::Full);
        assert_eq!(s.encoder, EncoderConfig::full());
        let t = s.train;
        assert_eq!(t.learning_rate, 0.5);
        assert_eq!(t.max_iterations, None);
        assert_eq!(t.halve_at, [3, 9]);
        assert_eq!(t.temperature, Some(16.0));
        assert_eq!(t.seed, 7);
        assert_eq!(t.batch_size, TrainConfig::full().batch_size);
    }

    #[test]
    fn errors_name_the_line() {
        let e = parse_str("seed = 1\nbogus = 2", "cfg.txt").unwrap_err();
        assert!(matches!(e, Error::Config { line: 2, .. }), "{e}");
        assert!(e.to_string().starts_with("cfg.txt:2:"));
        assert!(parse_str("seed", "x").is_err());
        assert!(parse_str("seed = x", "x").is_err());
        assert!(parse_str("seed = 1\nseed = 2", "x").is_err());
        assert!(parse_str("encoder = huge", "x").is_err());
        assert!(parse_str("input_size = 30", "x").is_err());
    }
}
