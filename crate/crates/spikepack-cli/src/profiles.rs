//! Hardware profile catalog: the built-in `profiles.toml` shipped with
//! the binary, or any file with the same shape passed on the command
//! line.

use std::path::Path;

use serde::Deserialize;
use spikepack_core::metrics::HardwareProfile;

use crate::CliError;

const BUILTIN: &str = include_str!("../profiles.toml");

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Catalog {
    profile: Vec<Entry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    max_unique_states: usize,
    allowed_bits: Vec<u32>,
    max_neurons: u64,
    max_synapses: u64,
}

fn parse(text: &str, origin: &str) -> Result<Vec<HardwareProfile>, CliError> {
    let catalog: Catalog =
        toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
    let profiles: Vec<HardwareProfile> = catalog
        .profile
        .into_iter()
        .map(|e| HardwareProfile {
            name: e.name,
            max_unique_states: e.max_unique_states,
            allowed_bits: e.allowed_bits,
            max_neurons: e.max_neurons,
            max_synapses: e.max_synapses,
        })
        .collect();
    for p in &profiles {
        if p.max_unique_states == 0
            || p.allowed_bits.is_empty()
            || p.max_neurons == 0
            || p.max_synapses == 0
        {
            return Err(CliError::Config(format!(
                "{origin}: profile {} has an empty or zero bound",
                p.name
            )));
        }
    }
    Ok(profiles)
}

pub fn load_catalog(path: Option<&Path>) -> Result<Vec<HardwareProfile>, CliError> {
    match path {
        None => parse(BUILTIN, "built-in catalog"),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            parse(&text, &p.display().to_string())
        }
    }
}

pub fn find<'a>(
    catalog: &'a [HardwareProfile],
    name: &str,
) -> Result<&'a HardwareProfile, CliError> {
    catalog.iter().find(|p| p.name == name).ok_or_else(|| {
        let known: Vec<&str> = catalog.iter().map(|p| p.name.as_str()).collect();
        CliError::Config(format!("unknown profile {name:?}; catalog has {known:?}"))
    })
}
