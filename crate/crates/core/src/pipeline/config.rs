//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::SrConfig;
use crate::objectives::{LossWeights, DEFAULT_NCC_WINDOW};

use super::synth::PairKind;

/// Held-out or training pair source.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub kind: PairKind,
    pub pairs: usize,
    pub seed: u64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dims: Vec<usize>,
    pub sr: SrConfig,
    pub weights: LossWeights,
    pub lr: f64,
    pub iterations: usize,
    pub seed: u64,
    pub ncc_window: usize,
    pub dataset: DatasetSpec,
    pub out: PathBuf,
}

pub const KEYS: &[&str] = &[
    "dims",
    "scales",
    "cascades",
    "channels",
    "sigma_h",
    "h_min",
    "pre_align",
    "lambda1",
    "lambda2",
    "lambda3",
    "lambda4",
    "lambda5",
    "lr",
    "iterations",
    "seed",
    "ncc_window",
    "dataset",
    "eval_pairs",
    "eval_seed",
    "amplitude",
    "out",
];

impl Default for RunConfig {
    fn default() -> Self {
        let sr = SrConfig::default();
        let weights = LossWeights::defaults(sr.scales);
        Self {
            dims: vec![64, 64],
            sr,
            weights,
            lr: 1e-4,
            iterations: 200,
            seed: 0,
            ncc_window: DEFAULT_NCC_WINDOW,
            dataset: DatasetSpec {
                kind: PairKind::Blob,
                pairs: 20,
                seed: 1_000_003,
                amplitude: super::synth::DEFAULT_AMPLITUDE,
            },
            out: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Parses the text format, starting from the defaults. Unknown and
    /// repeated keys are errors; a single `lambda1` value applies to every
    /// scale.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<&str> = Vec::new();
        let mut lambda1: Option<Vec<f64>> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, v) = (key.trim(), value.trim());
            let known = KEYS.iter().find(|k| **k == key).ok_or_else(|| {
                Error::Config(format!("line {}: unknown key {key:?}", lineno + 1))
            })?;
            if seen.contains(known) {
                return Err(Error::Config(format!(
                    "line {}: repeated key {key:?}",
                    lineno + 1
                )));
            }
            seen.push(known);
            match key {
                "dims" => cfg.dims = parse_list(key, v)?,
                "scales" => cfg.sr.scales = parse(key, v)?,
                "cascades" => cfg.sr.cascades = parse(key, v)?,
                "channels" => cfg.sr.channels = parse_list(key, v)?,
                "sigma_h" => cfg.sr.sigma_h = parse(key, v)?,
                "h_min" => cfg.sr.h_min = parse(key, v)?,
                "pre_align" => cfg.sr.pre_align = parse(key, v)?,
                "lambda1" => lambda1 = Some(parse_list(key, v)?),
                "lambda2" => cfg.weights.lambda2 = parse(key, v)?,
                "lambda3" => cfg.weights.lambda3 = parse(key, v)?,
                "lambda4" => cfg.weights.lambda4 = parse(key, v)?,
                "lambda5" => cfg.weights.lambda5 = parse(key, v)?,
                "lr" => cfg.lr = parse(key, v)?,
                "iterations" => cfg.iterations = parse(key, v)?,
                "seed" => cfg.seed = parse(key, v)?,
                "ncc_window" => cfg.ncc_window = parse(key, v)?,
                "dataset" => cfg.dataset.kind = parse(key, v)?,
                "eval_pairs" => cfg.dataset.pairs = parse(key, v)?,
                "eval_seed" => cfg.dataset.seed = parse(key, v)?,
                "amplitude" => cfg.dataset.amplitude = parse(key, v)?,
                "out" => cfg.out = PathBuf::from(v),
                _ => unreachable!("key list and match arms agree"),
            }
        }
        cfg.weights.lambda1 = match lambda1 {
            Some(l) if l.len() == 1 => vec![l[0]; cfg.sr.scales],
            Some(l) => l,
            None => vec![0.8; cfg.sr.scales],
        };
        if !seen.contains(&"channels") && cfg.sr.scales != 3 {
            return Err(Error::Config(
                "channels must be given when scales differs from 3".into(),
            ));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sr.validate()?;
        self.weights.validate()?;
        if self.weights.lambda1.len() != self.sr.scales {
            return Err(Error::Config(format!(
                "{} lambda1 values for {} scales",
                self.weights.lambda1.len(),
                self.sr.scales
            )));
        }
        if !(2..=3).contains(&self.dims.len()) {
            return Err(Error::Config(format!(
                "dims must have 2 or 3 extents, got {:?}",
                self.dims
            )));
        }
        self.sr.level_shapes(&self.dims)?;
        if self.ncc_window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "ncc_window must be odd, got {}",
                self.ncc_window
            )));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.dataset.amplitude > 0.0) || !self.dataset.amplitude.is_finite() {
            return Err(Error::Config(format!(
                "amplitude must be positive, got {}",
                self.dataset.amplitude
            )));
        }
        Ok(())
    }

    /// Every key in the text format; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("dims", join(&self.dims));
        kv("scales", self.sr.scales.to_string());
        kv("cascades", self.sr.cascades.to_string());
        kv("channels", join(&self.sr.channels));
        kv("sigma_h", self.sr.sigma_h.to_string());
        kv("h_min", self.sr.h_min.to_string());
        kv("pre_align", self.sr.pre_align.to_string());
        kv("lambda1", join(&self.weights.lambda1));
        kv("lambda2", self.weights.lambda2.to_string());
        kv("lambda3", self.weights.lambda3.to_string());
        kv("lambda4", self.weights.lambda4.to_string());
        kv("lambda5", self.weights.lambda5.to_string());
        kv("lr", self.lr.to_string());
        kv("iterations", self.iterations.to_string());
        kv("seed", self.seed.to_string());
        kv("ncc_window", self.ncc_window.to_string());
        kv("dataset", self.dataset.kind.to_string());
        kv("eval_pairs", self.dataset.pairs.to_string());
        kv("eval_seed", self.dataset.seed.to_string());
        kv("amplitude", self.dataset.amplitude.to_string());
        kv("out", self.out.display().to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty() {
        assert_eq!(
            RunConfig::parse("# nothing\n\n").unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn keys_and_comments() {
        let c = RunConfig::parse(
            "dims = 32, 32  # grid\nscales = 2\nchannels = 8,4\nlambda1 = 0.5\nlr = 1e-3\npre_align = false\ndataset = c-shape\n",
        )
        .unwrap();
        assert_eq!(c.dims, vec![32, 32]);
        assert_eq!(c.sr.channels, vec![8, 4]);
        assert_eq!(c.weights.lambda1, vec![0.5, 0.5]);
        assert_eq!(c.lr, 1e-3);
        assert!(!c.sr.pre_align);
        assert_eq!(c.dataset.kind, PairKind::CShape);
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "colour = red",
            "lr = fast",
            "lr = 1\nlr = 2",
            "no equals sign",
            "scales = 2",
            "scales = 2\nchannels = 4,4,4",
            "dims = 30,32",
            "ncc_window = 4",
            "lambda3 = -1",
            "lambda1 = 1,2",
        ] {
            assert!(RunConfig::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.lr = 3.3e-4;
        c.weights.lambda1 = vec![0.1, 0.2, 0.30000000000000004];
        c.sr.sigma_h = 1.0 / 3.0;
        c.out = PathBuf::from("somewhere/else");
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }
}
