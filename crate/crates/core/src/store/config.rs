use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::episodes::{EpisodeConfig, SplitSpec};
use crate::error::{Error, Result};
use crate::evaluation::ProtocolConfig;
use crate::metalearn::{select_alpha, CurveRow, MetaOptimizer, MetaTrainConfig};

/// Parses `key = value` lines. `#` starts a comment; later keys override
/// earlier ones.
pub fn parse_flat(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parameter(format!("config line {}: expected key = value", n + 1)));
        };
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Parameter(format!("config line {}: empty key", n + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Everything `meta-train` needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub meta: MetaTrainConfig,
    pub episode: EpisodeConfig,
    /// Pick `alpha` from the forgery fraction instead of `meta.alpha`.
    pub alpha_auto: bool,
    pub forgery_fraction: f64,
    pub split: SplitSpec,
    pub val_refs: usize,
    pub val_rf_query: usize,
    pub init_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            meta: MetaTrainConfig::default(),
            episode: EpisodeConfig::default(),
            alpha_auto: false,
            forgery_fraction: 1.0,
            split: SplitSpec::Fractions {
                train: 0.8,
                val: 0.1,
                test: 0.1,
            },
            val_refs: 5,
            val_rf_query: 10,
            init_seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Parameter(format!("config key {key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Parameter(format!(
            "config key {key}: expected a boolean, got {value:?}"
        ))),
    }
}

fn parse_split(value: &str) -> Result<SplitSpec> {
    let bad = || Error::Parameter(format!("config key split: cannot parse {value:?}"));
    if value == "gpds" {
        return Ok(SplitSpec::gpds());
    }
    if let Some(rest) = value.strip_prefix("fractions:") {
        let f: Vec<f64> = rest
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [train, val, test] = f[..] else { return Err(bad()) };
        return Ok(SplitSpec::Fractions { train, val, test });
    }
    if let Some(rest) = value.strip_prefix("ranges:") {
        let r: Vec<std::ops::Range<usize>> = rest
            .split(',')
            .map(|s| {
                let (a, b) = s.trim().split_once("..").ok_or_else(bad)?;
                Ok(a.parse().map_err(|_| bad())?..b.parse().map_err(|_| bad())?)
            })
            .collect::<Result<_>>()?;
        let [train, val, test] = <[_; 3]>::try_from(r).map_err(|_| bad())?;
        return Ok(SplitSpec::Ranges { train, val, test });
    }
    Err(bad())
}

fn split_string(s: &SplitSpec) -> String {
    match s {
        SplitSpec::Fractions { train, val, test } => format!("fractions:{train},{val},{test}"),
        SplitSpec::Ranges { train, val, test } => format!(
            "ranges:{}..{},{}..{},{}..{}",
            train.start, train.end, val.start, val.end, test.start, test.end
        ),
    }
}

impl RunConfig {
    /// Applies `map` on top of the current values. Unknown keys are errors.
    pub fn apply(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in map {
            let v = v.as_str();
            match k.as_str() {
                "meta_batch" => self.meta.meta_batch = parse(k, v)?,
                "inner_steps" => self.meta.inner_steps = parse(k, v)?,
                "alpha" if v == "auto" => self.alpha_auto = true,
                "alpha" => {
                    self.alpha_auto = false;
                    self.meta.alpha = parse(k, v)?;
                }
                "beta0" => self.meta.beta0 = parse(k, v)?,
                "beta_final" => self.meta.beta_final = parse(k, v)?,
                "epochs" => self.meta.epochs = parse(k, v)?,
                "msl_epochs" => self.meta.msl_epochs = parse(k, v)?,
                "first_order" => self.meta.first_order = parse_bool(k, v)?,
                "optimizer" => {
                    self.meta.optimizer = match v {
                        "sgd" => MetaOptimizer::Sgd,
                        "adam" => MetaOptimizer::Adam,
                        _ => return Err(Error::Parameter(format!("config key optimizer: unknown {v:?}"))),
                    }
                }
                "seed" => self.meta.seed = parse(k, v)?,
                "n_genuine_adapt" => self.episode.n_genuine_adapt = parse(k, v)?,
                "n_rf_adapt" => self.episode.n_rf_adapt = parse(k, v)?,
                "n_genuine_meta" => self.episode.n_genuine_meta = parse(k, v)?,
                "n_rf_meta" => self.episode.n_rf_meta = parse(k, v)?,
                "use_all_skilled_meta" => self.episode.use_all_skilled_meta = parse_bool(k, v)?,
                "forgery_fraction" => self.forgery_fraction = parse(k, v)?,
                "split" => self.split = parse_split(v)?,
                "val_refs" => self.val_refs = parse(k, v)?,
                "val_rf_query" => self.val_rf_query = parse(k, v)?,
                "init_seed" => self.init_seed = parse(k, v)?,
                _ => return Err(Error::Parameter(format!("unknown config key {k:?}"))),
            }
        }
        self.validate()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply(&parse_flat(text)?)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        self.episode.validate()?;
        if !(0.0..=1.0).contains(&self.forgery_fraction) {
            return Err(Error::Parameter(format!(
                "forgery_fraction {} outside [0,1]",
                self.forgery_fraction
            )));
        }
        if self.val_refs == 0 {
            return Err(Error::Parameter("val_refs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn effective_alpha(&self) -> f64 {
        if self.alpha_auto {
            select_alpha(self.forgery_fraction)
        } else {
            self.meta.alpha
        }
    }

    /// Meta-training settings with the effective task rate filled in.
    pub fn meta_config(&self) -> MetaTrainConfig {
        MetaTrainConfig {
            alpha: self.effective_alpha(),
            ..self.meta.clone()
        }
    }

    /// The single-split protocol used on the validation users.
    pub fn validation_protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            n_splits: 1,
            n_ref: self.val_refs,
            inner_steps: self.meta.inner_steps,
            alpha: self.effective_alpha(),
            n_rf_adapt: self.episode.n_rf_adapt,
            n_rf_query: self.val_rf_query,
            tau: 0.5,
            seed: self.meta.seed,
        }
    }

    /// Every key with its current value; feeding it back to
    /// [`apply`](Self::apply) reproduces `self`.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let m = &self.meta;
        let e = &self.episode;
        let alpha = if self.alpha_auto {
            "auto".to_string()
        } else {
            m.alpha.to_string()
        };
        let optimizer = match m.optimizer {
            MetaOptimizer::Sgd => "sgd",
            MetaOptimizer::Adam => "adam",
        };
        [
            ("meta_batch", m.meta_batch.to_string()),
            ("inner_steps", m.inner_steps.to_string()),
            ("alpha", alpha),
            ("beta0", m.beta0.to_string()),
            ("beta_final", m.beta_final.to_string()),
            ("epochs", m.epochs.to_string()),
            ("msl_epochs", m.msl_epochs.to_string()),
            ("first_order", m.first_order.to_string()),
            ("optimizer", optimizer.to_string()),
            ("seed", m.seed.to_string()),
            ("n_genuine_adapt", e.n_genuine_adapt.to_string()),
            ("n_rf_adapt", e.n_rf_adapt.to_string()),
            ("n_genuine_meta", e.n_genuine_meta.to_string()),
            ("n_rf_meta", e.n_rf_meta.to_string()),
            ("use_all_skilled_meta", e.use_all_skilled_meta.to_string()),
            ("forgery_fraction", self.forgery_fraction.to_string()),
            ("split", split_string(&self.split)),
            ("val_refs", self.val_refs.to_string()),
            ("val_rf_query", self.val_rf_query.to_string()),
            ("init_seed", self.init_seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn to_text(&self) -> String {
        self.to_map().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// `epoch,meta_loss,beta,val_eer_global,val_eer_user` rows.
pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("epoch,meta_loss,beta,val_eer_global,val_eer_user\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.epoch,
            opt(r.meta_loss),
            opt(r.beta),
            r.val.eer_global,
            r.val.eer_user
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_parsing() {
        let m = parse_flat("# comment\n a = 1 \n\nb=two # trailing\na = 3\n").unwrap();
        assert_eq!(m.get("a").map(String::as_str), Some("3"));
        assert_eq!(m.get("b").map(String::as_str), Some("two"));
        assert!(matches!(parse_flat("novalue\n"), Err(Error::Parameter(_))));
    }

    #[test]
    fn every_field_round_trips() {
        let text = "meta_batch = 2\ninner_steps = 3\nalpha = auto\nbeta0 = 0.01\nbeta_final = 0.0001\n\
                    epochs = 7\nmsl_epochs = 2\nfirst_order = true\noptimizer = adam\nseed = 9\n\
                    n_genuine_adapt = 4\nn_rf_adapt = 6\nn_genuine_meta = 3\nn_rf_meta = 2\n\
                    use_all_skilled_meta = false\nforgery_fraction = 0.05\nsplit = ranges:10..20,5..10,0..5\n\
                    val_refs = 3\nval_rf_query = 4\ninit_seed = 12\n";
        let c = RunConfig::from_text(text).unwrap();
        assert_eq!(c.meta.meta_batch, 2);
        assert_eq!(c.meta.optimizer, MetaOptimizer::Adam);
        assert_eq!(c.effective_alpha(), 0.01);
        assert_eq!(
            c.split,
            SplitSpec::Ranges {
                train: 10..20,
                val: 5..10,
                test: 0..5
            }
        );
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
        assert_eq!(c.to_map().len(), 20);
        let d = RunConfig::default();
        assert_eq!(RunConfig::from_text(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn bad_values_are_rejected() {
        for text in [
            "bogus = 1",
            "epochs = many",
            "first_order = maybe",
            "split = halves",
            "inner_steps = 0",
        ] {
            assert!(matches!(RunConfig::from_text(text), Err(Error::Parameter(_))), "{text}");
        }
    }
}
