//! Experiment config files.
//!
//! Plain `key = value` lines set IPD options; a `[lola]` section sets the
//! learner options. Unknown keys are rejected.
//!
//! ```text
//! horizon = 150
//! gamma = 0.96
//! batch = 64
//! seed = 0
//! baseline.mode = tabular
//! baseline.decay = 0.9
//!
//! [lola]
//! K = 1
//! alpha_inner = 1.0
//! alpha_outer = 0.3
//! epochs = 200
//! clip = 10
//! ```

use std::path::Path;
use std::str::FromStr;

use ini::{Ini, Properties};

use crate::error::{Error, Result};
use crate::lola::LolaConfig;

const IPD_KEYS: &[&str] = &["horizon", "gamma", "batch", "seed", "baseline.mode", "baseline.decay"];
const LOLA_KEYS: &[&str] = &["K", "alpha_inner", "alpha_outer", "epochs", "clip", "init_std", "warmup"];

fn parse<T: FromStr>(props: &Properties, key: &str, into: &mut T) -> Result<()>
where
    T::Err: std::fmt::Display,
{
    if let Some(raw) = props.get(key) {
        *into = raw
            .trim()
            .parse()
            .map_err(|e| Error::Config(format!("`{key} = {raw}`: {e}")))?;
    }
    Ok(())
}

fn check_keys(props: &Properties, allowed: &[&str], section: &str) -> Result<()> {
    for (k, _) in props.iter() {
        if !allowed.contains(&k) {
            return Err(Error::Config(format!("unknown key `{k}` in {section}")));
        }
    }
    Ok(())
}

/// Parses config text on top of the defaults.
pub fn parse_config(text: &str) -> Result<LolaConfig> {
    let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let mut cfg = LolaConfig::default();
    for (section, props) in ini.iter() {
        match section {
            None => {
                check_keys(props, IPD_KEYS, "top level")?;
                let ipd = &mut cfg.ipd;
                parse(props, "horizon", &mut ipd.horizon)?;
                parse(props, "gamma", &mut ipd.gamma)?;
                parse(props, "batch", &mut ipd.batch)?;
                parse(props, "seed", &mut ipd.seed)?;
                parse(props, "baseline.mode", &mut ipd.baseline)?;
                parse(props, "baseline.decay", &mut ipd.baseline_decay)?;
            }
            Some("lola") => {
                check_keys(props, LOLA_KEYS, "[lola]")?;
                parse(props, "K", &mut cfg.lookahead)?;
                parse(props, "alpha_inner", &mut cfg.alpha_inner)?;
                parse(props, "alpha_outer", &mut cfg.alpha_outer)?;
                parse(props, "epochs", &mut cfg.epochs)?;
                parse(props, "clip", &mut cfg.clip)?;
                parse(props, "init_std", &mut cfg.init_std)?;
                parse(props, "warmup", &mut cfg.warmup)?;
            }
            Some(other) => return Err(Error::Config(format!("unknown section [{other}]"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<LolaConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}
