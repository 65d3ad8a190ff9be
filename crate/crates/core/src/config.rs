//! Run configuration: flat dotted keys resolved from defaults, an optional preset, a TOML
//! file, `AIMCOT_*` environment variables and explicit `key=value` overrides, in that order.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::sim::SimOracleSpec;
use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::geometry::{Cell, GridSpec};
use crate::trigger::{TriggerConfig, TriggerMode};

pub const ENV_PREFIX: &str = "AIMCOT_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Greedy information-gain selection.
    #[default]
    Avp,
    /// The K highest-attention cells.
    TopK,
}

/// Which attention map feeds candidate construction at a trigger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSource {
    /// The map of the token that fired.
    #[default]
    Live,
    /// The map computed once from the enhanced question.
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Attention-driven candidates.
    pub n: usize,
    /// Exploratory candidates.
    pub m: usize,
    pub k: usize,
    pub grid_size: usize,
    pub region_size: usize,
    pub image: String,
    pub image_width: u32,
    pub image_height: u32,
    pub trigger: TriggerConfig,
    pub selection: SelectionMode,
    pub map_source: MapSource,
    /// Insertions per response; 0 means unlimited.
    pub max_insertions: usize,
    /// Greedy selection stops once the best gain falls below this; `-inf` disables it.
    pub min_gain: f64,
    pub cag: bool,
    pub multiple_choice: bool,
    pub decode: DecodeConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n: 4,
            m: 4,
            k: 3,
            grid_size: 4,
            region_size: 1,
            image: "image".into(),
            image_width: 64,
            image_height: 64,
            trigger: TriggerConfig { delta: 0.5, n_layers: 3, mode: TriggerMode::AttentionShift },
            selection: SelectionMode::Avp,
            map_source: MapSource::Live,
            max_insertions: 0,
            min_gain: f64::NEG_INFINITY,
            cag: true,
            multiple_choice: false,
            decode: DecodeConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn n_c(&self) -> usize {
        self.n + self.m
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.grid_size, self.region_size, self.image_width, self.image_height)
    }

    pub fn min_gain(&self) -> Option<f64> {
        (self.min_gain > f64::NEG_INFINITY).then_some(self.min_gain)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        self.trigger.validate()?;
        self.decode.validate()?;
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.k > self.n_c() {
            return Err(Error::Config(format!("k = {} exceeds n + m = {}", self.k, self.n_c())));
        }
        if self.min_gain.is_nan() {
            return Err(Error::Config("min_gain must not be NaN".into()));
        }
        Ok(())
    }
}

/// Settings of the simulated backend that are not implied by the run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSettings {
    pub evidence: Vec<Cell>,
    pub vocab_size: usize,
    pub base_entropy_bits: f64,
    pub per_cell_reduction_bits: f64,
    pub attention_bias: f64,
    pub cag_gain: f64,
    pub noise_seed: u64,
    pub complementary_pairs: Vec<(Cell, Cell)>,
    pub pair_bonus_bits: f64,
    pub v_sub: usize,
    pub n_layers: usize,
    pub response_len: usize,
    pub newline_at: Vec<usize>,
    pub echo_describe: bool,
}

impl Default for SimSettings {
    fn default() -> Self {
        let grid = GridSpec::new(4, 1, 64, 64).expect("valid default grid");
        let d = SimOracleSpec::new(grid, []);
        Self {
            evidence: vec![(0, 1), (2, 2), (3, 0)],
            vocab_size: d.vocab_size,
            base_entropy_bits: d.base_entropy_bits,
            per_cell_reduction_bits: d.per_cell_reduction_bits,
            attention_bias: d.attention_bias,
            cag_gain: d.cag_gain,
            noise_seed: d.noise_seed,
            complementary_pairs: d.complementary_pairs,
            pair_bonus_bits: d.pair_bonus_bits,
            v_sub: d.v_sub,
            n_layers: d.n_layers,
            response_len: d.response_len,
            newline_at: d.newline_at,
            echo_describe: d.echo_describe,
        }
    }
}

impl SimSettings {
    pub fn oracle_spec(&self, grid: GridSpec) -> SimOracleSpec {
        SimOracleSpec {
            grid,
            evidence_cells: self.evidence.iter().copied().collect(),
            vocab_size: self.vocab_size,
            base_entropy_bits: self.base_entropy_bits,
            per_cell_reduction_bits: self.per_cell_reduction_bits,
            attention_bias: self.attention_bias,
            cag_gain: self.cag_gain,
            noise_seed: self.noise_seed,
            complementary_pairs: self.complementary_pairs.clone(),
            pair_bonus_bits: self.pair_bonus_bits,
            v_sub: self.v_sub,
            n_layers: self.n_layers,
            response_len: self.response_len,
            newline_at: self.newline_at.clone(),
            echo_describe: self.echo_describe,
        }
    }
}

/// A fully resolved configuration with its flat echo.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub run: RunConfig,
    pub sim: SimSettings,
    pub preset: Option<String>,
}

const ALIASES: &[(&str, &str)] = &[
    ("delta", "trigger.delta"),
    ("n_layers", "trigger.n_layers"),
    ("k", "select.k"),
    ("n", "candidates.n"),
    ("m", "candidates.m"),
    ("n_c", "candidates.n_c"),
    ("s_g", "grid.s_g"),
    ("s_r", "grid.s_r"),
];

pub const PRESETS: &[&str] = &["m3cot", "scienceqa", "llava_w"];

fn preset(name: &str) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    match name {
        "m3cot" => {}
        "scienceqa" => {
            c.trigger.delta = 0.2;
            c.decode.max_new_tokens = 1024;
        }
        "llava_w" => {
            c.n = 2;
            c.m = 1;
            c.trigger.delta = 0.2;
            c.decode.max_new_tokens = 1024;
        }
        other => return Err(Error::Config(format!("unknown preset {other:?}; expected one of {PRESETS:?}"))),
    }
    Ok(c)
}

fn float(v: f64) -> Value {
    if v.is_finite() {
        Value::from(v)
    } else if v.is_nan() {
        Value::from("nan")
    } else if v > 0.0 {
        Value::from("inf")
    } else {
        Value::from("-inf")
    }
}

fn to_map(run: &RunConfig, sim: &SimSettings) -> BTreeMap<String, Value> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: Value| {
        m.insert(k.to_string(), v);
    };
    put("candidates.n", j(&run.n));
    put("candidates.m", j(&run.m));
    put("candidates.n_c", j(&run.n_c()));
    put("select.k", j(&run.k));
    put("select.mode", j(&run.selection));
    put("select.map_source", j(&run.map_source));
    put("select.max_insertions", j(&run.max_insertions));
    put("select.min_gain", float(run.min_gain));
    put("grid.s_g", j(&run.grid_size));
    put("grid.s_r", j(&run.region_size));
    put("image.ref", j(&run.image));
    put("image.width", j(&run.image_width));
    put("image.height", j(&run.image_height));
    put("trigger.delta", float(run.trigger.delta));
    put("trigger.n_layers", j(&run.trigger.n_layers));
    put("trigger.mode", j(&run.trigger.mode));
    put("cag.enabled", j(&run.cag));
    put("cag.multiple_choice", j(&run.multiple_choice));
    put("decode.temperature", float(run.decode.temperature));
    put("decode.top_p", float(run.decode.top_p));
    put("decode.repetition_penalty", float(run.decode.repetition_penalty));
    put("decode.min_new_tokens", j(&run.decode.min_new_tokens));
    put("decode.max_new_tokens", j(&run.decode.max_new_tokens));
    put("seed", j(&run.seed));
    put("sim.evidence", j(&sim.evidence));
    put("sim.vocab_size", j(&sim.vocab_size));
    put("sim.base_entropy_bits", float(sim.base_entropy_bits));
    put("sim.per_cell_reduction_bits", float(sim.per_cell_reduction_bits));
    put("sim.attention_bias", float(sim.attention_bias));
    put("sim.cag_gain", float(sim.cag_gain));
    put("sim.noise_seed", j(&sim.noise_seed));
    put("sim.complementary_pairs", j(&sim.complementary_pairs));
    put("sim.pair_bonus_bits", float(sim.pair_bonus_bits));
    put("sim.v_sub", j(&sim.v_sub));
    put("sim.n_layers", j(&sim.n_layers));
    put("sim.response_len", j(&sim.response_len));
    put("sim.newline_at", j(&sim.newline_at));
    put("sim.echo_describe", j(&sim.echo_describe));
    m
}

fn j<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config values serialize")
}

fn get<T: for<'de> Deserialize<'de>>(m: &BTreeMap<String, Value>, key: &str) -> Result<T> {
    let v = &m[key];
    let attempt = serde_json::from_value::<T>(v.clone());
    match (attempt, v) {
        (Ok(t), _) => Ok(t),
        // Non-finite floats travel as strings.
        (Err(e), Value::String(s)) => {
            let parsed: f64 = s.parse().map_err(|_| Error::Config(format!("{key}: {e}")))?;
            serde_json::from_value::<T>(Value::from(parsed))
                .or_else(|_| {
                    // `Value::from(inf)` is null; route through a deserializer that accepts it.
                    T::deserialize(serde::de::value::F64Deserializer::<serde::de::value::Error>::new(parsed))
                })
                .map_err(|_| Error::Config(format!("{key}: {e}")))
        }
        (Err(e), _) => Err(Error::Config(format!("{key}: {e}"))),
    }
}

fn from_map(m: &BTreeMap<String, Value>) -> Result<(RunConfig, SimSettings)> {
    let run = RunConfig {
        n: get(m, "candidates.n")?,
        m: get(m, "candidates.m")?,
        k: get(m, "select.k")?,
        grid_size: get(m, "grid.s_g")?,
        region_size: get(m, "grid.s_r")?,
        image: get(m, "image.ref")?,
        image_width: get(m, "image.width")?,
        image_height: get(m, "image.height")?,
        trigger: TriggerConfig {
            delta: get(m, "trigger.delta")?,
            n_layers: get(m, "trigger.n_layers")?,
            mode: get(m, "trigger.mode")?,
        },
        selection: get(m, "select.mode")?,
        map_source: get(m, "select.map_source")?,
        max_insertions: get(m, "select.max_insertions")?,
        min_gain: get(m, "select.min_gain")?,
        cag: get(m, "cag.enabled")?,
        multiple_choice: get(m, "cag.multiple_choice")?,
        decode: DecodeConfig {
            temperature: get(m, "decode.temperature")?,
            top_p: get(m, "decode.top_p")?,
            repetition_penalty: get(m, "decode.repetition_penalty")?,
            min_new_tokens: get(m, "decode.min_new_tokens")?,
            max_new_tokens: get(m, "decode.max_new_tokens")?,
        },
        seed: get(m, "seed")?,
    };
    let n_c: usize = get(m, "candidates.n_c")?;
    if n_c != run.n_c() {
        return Err(Error::Config(format!(
            "candidates.n_c = {n_c} disagrees with candidates.n + candidates.m = {}",
            run.n_c()
        )));
    }
    let sim = SimSettings {
        evidence: get(m, "sim.evidence")?,
        vocab_size: get(m, "sim.vocab_size")?,
        base_entropy_bits: get(m, "sim.base_entropy_bits")?,
        per_cell_reduction_bits: get(m, "sim.per_cell_reduction_bits")?,
        attention_bias: get(m, "sim.attention_bias")?,
        cag_gain: get(m, "sim.cag_gain")?,
        noise_seed: get(m, "sim.noise_seed")?,
        complementary_pairs: get(m, "sim.complementary_pairs")?,
        pair_bonus_bits: get(m, "sim.pair_bonus_bits")?,
        v_sub: get(m, "sim.v_sub")?,
        n_layers: get(m, "sim.n_layers")?,
        response_len: get(m, "sim.response_len")?,
        newline_at: get(m, "sim.newline_at")?,
        echo_describe: get(m, "sim.echo_describe")?,
    };
    Ok((run, sim))
}

fn toml_to_json(v: toml::Value) -> Value {
    match v {
        toml::Value::String(s) => Value::String(s),
        toml::Value::Integer(i) => Value::from(i),
        toml::Value::Float(f) => float(f),
        toml::Value::Boolean(b) => Value::Bool(b),
        toml::Value::Datetime(d) => Value::String(d.to_string()),
        toml::Value::Array(a) => Value::Array(a.into_iter().map(toml_to_json).collect()),
        toml::Value::Table(t) => Value::Object(t.into_iter().map(|(k, v)| (k, toml_to_json(v))).collect()),
    }
}

fn flatten(prefix: &str, table: toml::Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, toml_to_json(other))),
        }
    }
}

/// Parses a `key=value` override. The value is read as a TOML value when possible and as
/// a bare string otherwise.
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), parse_scalar(v.trim())))
}

fn parse_scalar(v: &str) -> Value {
    match toml::from_str::<toml::Table>(&format!("v = {v}")) {
        Ok(mut t) => toml_to_json(t.remove("v").expect("parsed key")),
        Err(_) => Value::String(v.to_string()),
    }
}

/// Maps `AIMCOT_TRIGGER__DELTA` to `trigger.delta`.
pub fn env_key(var: &str) -> Option<String> {
    let rest = var.strip_prefix(ENV_PREFIX)?;
    (!rest.is_empty()).then(|| rest.to_ascii_lowercase().replace("__", "."))
}

/// Layered configuration sources.
#[derive(Debug, Clone, Default)]
pub struct ConfigSources {
    pub file: Option<String>,
    pub env: Vec<(String, String)>,
    pub overrides: Vec<String>,
}

impl ConfigSources {
    /// Environment entries are taken from `vars`, keeping only `AIMCOT_*` names.
    pub fn with_env(mut self, vars: impl IntoIterator<Item = (String, String)>) -> Self {
        self.env = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        self
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let mut entries: Vec<(String, Value)> = Vec::new();
        if let Some(text) = &self.file {
            let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
            flatten("", table, &mut entries);
        }
        let mut env = self.env.clone();
        env.sort();
        for (k, v) in env {
            let key = env_key(&k).expect("filtered by prefix");
            entries.push((key, parse_scalar(&v)));
        }
        for o in &self.overrides {
            entries.push(parse_assignment(o)?);
        }
        resolve_entries(entries)
    }
}

fn canonical(key: &str) -> &str {
    ALIASES.iter().find(|(a, _)| *a == key).map_or(key, |(_, c)| c)
}

/// Applies flat entries in order over the defaults (or the preset named by a `preset` entry).
pub fn resolve_entries(entries: Vec<(String, Value)>) -> Result<Resolved> {
    let preset_name = entries
        .iter()
        .rev()
        .find(|(k, _)| k == "preset")
        .map(|(_, v)| v.as_str().map(str::to_string).ok_or_else(|| Error::Config("preset must be a string".into())))
        .transpose()?;
    let base = match &preset_name {
        Some(p) => preset(p)?,
        None => RunConfig::default(),
    };
    let mut map = to_map(&base, &SimSettings::default());
    let known: BTreeSet<String> = map.keys().cloned().collect();
    let mut n_c_given = false;
    for (k, v) in entries {
        if k == "preset" {
            continue;
        }
        let key = canonical(&k).to_string();
        if !known.contains(&key) {
            return Err(Error::Config(format!("unknown configuration key {k:?}")));
        }
        n_c_given |= key == "candidates.n_c";
        map.insert(key, v);
    }
    if !n_c_given {
        let n: usize = get(&map, "candidates.n")?;
        let m: usize = get(&map, "candidates.m")?;
        map.insert("candidates.n_c".into(), Value::from(n + m));
    }
    let (run, sim) = from_map(&map)?;
    run.validate()?;
    let resolved = Resolved { run, sim, preset: preset_name };
    resolved.sim_spec()?.validate()?;
    Ok(resolved)
}

impl Resolved {
    pub fn defaults() -> Self {
        Self { run: RunConfig::default(), sim: SimSettings::default(), preset: None }
    }

    /// Every effective key with its value; resolving this map reproduces the configuration.
    pub fn echo(&self) -> BTreeMap<String, Value> {
        let mut m = to_map(&self.run, &self.sim);
        if let Some(p) = &self.preset {
            m.insert("preset".into(), Value::from(p.clone()));
        }
        m
    }

    pub fn from_echo(echo: &BTreeMap<String, Value>) -> Result<Self> {
        resolve_entries(echo.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
    }

    pub fn sim_spec(&self) -> Result<SimOracleSpec> {
        let spec = self.sim.oracle_spec(self.run.grid()?);
        Ok(spec)
    }
}
