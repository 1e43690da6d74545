//! Flat `key = value` run configs merged underneath command-line flags.

use std::collections::BTreeMap;
use std::ffi::OsString;

use anyhow::{bail, Context, Result};
use clap::parser::ValueSource;
use clap::{ArgMatches, Command};

/// Keys always accepted besides the subcommand's own flags.
pub const GLOBAL_KEYS: [&str; 3] = ["seed", "name", "run-dir"];

pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("config line {}: expected key = value", n + 1);
        };
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            bail!("config line {}: empty key", n + 1);
        }
        if out.iter().any(|(x, _)| *x == key) {
            bail!("config line {}: duplicate key {key}", n + 1);
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn long_names(cmd: &Command) -> Vec<String> {
    cmd.get_arguments()
        .filter_map(|a| a.get_long().map(str::to_string))
        .filter(|l| l != "help" && l != "config")
        .collect()
}

/// Extra argv entries for every config key not given on the command line.
/// Unknown keys are an error.
pub fn injected_args(
    root: &Command,
    sub_name: &str,
    matches: &ArgMatches,
    sub_matches: &ArgMatches,
    pairs: &[(String, String)],
) -> Result<Vec<OsString>> {
    let sub = root
        .find_subcommand(sub_name)
        .with_context(|| format!("unknown subcommand {sub_name}"))?;
    let known = long_names(sub);
    let mut out = Vec::new();
    for (key, value) in pairs {
        let global = GLOBAL_KEYS.contains(&key.as_str());
        if !global && !known.contains(key) {
            bail!("unknown config key {key:?} for {sub_name}");
        }
        let id = key.replace('-', "_");
        let m = if global { matches } else { sub_matches };
        let from_cli = matches!(m.value_source(&id), Some(ValueSource::CommandLine))
            || matches!(sub_matches.value_source(&id), Some(ValueSource::CommandLine));
        if !from_cli {
            out.push(format!("--{key}").into());
            out.push(value.into());
        }
    }
    Ok(out)
}

/// Every flag of the subcommand with its effective (raw) value.
pub fn effective(sub: &Command, m: &ArgMatches) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for a in sub.get_arguments() {
        let id = a.get_id().as_str();
        if id == "help" || id == "config" {
            continue;
        }
        if let Ok(Some(vals)) = m.try_get_raw(id) {
            let v: Vec<String> = vals.map(|v| v.to_string_lossy().into_owned()).collect();
            out.insert(id.replace('_', "-"), v.join(","));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_and_comments() {
        let p = parse_config("# run\nsteps = 10\nbatch_size=4 # inline\n\n").unwrap();
        assert_eq!(p, vec![("steps".into(), "10".into()), ("batch-size".into(), "4".into())]);
        assert!(parse_config("steps 10").is_err());
        assert!(parse_config("a=1\na=2").is_err());
    }
}
