//! Flat `key = value` run configuration.
//!
//! One setting per line, dotted keys, `#` starts a comment:
//!
//! ```text
//! voxel_size.x = 0.2
//! voxel_size.y = 0.2
//! voxel_size.z = 0.2
//! model.group_size = 64
//! model.shifts = 0,0,0; 4,4,4
//! ablation.disco_branch = false
//! ```
//!
//! `voxel_size.{x,y,z}` are required. Every other key has a default, and the
//! defaults that were applied are kept in [`RunConfig::defaults`] so reports
//! can echo them. Unknown and repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt::{Display, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::error::{LestError, Result};
use crate::grouping::{default_shifts, Shift};
use crate::model::{Ablation, GlobalAttention, GroupExecution, LestConfig};
use crate::morton::MORTON_AXIS_LIMIT;

/// Harness parameters that are not part of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// Window dimensions (voxels) for the window baseline.
    pub window: [u32; 3],
    pub kmeans_iters: usize,
    pub reps: usize,
    pub attn_dim: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            window: [32, 32, 32],
            kmeans_iters: 20,
            reps: 5,
            attn_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: LestConfig,
    pub bench: BenchConfig,
    /// `(key, value)` for every default that was applied, in key order.
    pub defaults: Vec<(String, String)>,
}

struct Entries {
    values: BTreeMap<String, (usize, String)>,
    defaults: Vec<(String, String)>,
}

fn config_err(line: usize, key: &str, message: impl Into<String>) -> LestError {
    LestError::Config {
        line,
        key: key.to_string(),
        message: message.into(),
    }
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| config_err(line, content, "expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(config_err(line, key, "empty key"));
            }
            if let Some((first, _)) = values.insert(key.to_string(), (line, value.to_string())) {
                return Err(config_err(
                    line,
                    key,
                    format!("already set on line {first}"),
                ));
            }
        }
        Ok(Self {
            values,
            defaults: Vec::new(),
        })
    }

    /// Removes and parses `key`, falling back to `default` when absent.
    fn take<T>(
        &mut self,
        key: &str,
        default: Option<T>,
        check: impl Fn(&T) -> Option<String>,
    ) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        match self.values.remove(key) {
            Some((line, raw)) => {
                let v: T = raw
                    .parse()
                    .map_err(|e| config_err(line, key, format!("cannot parse {raw:?}: {e}")))?;
                match check(&v) {
                    Some(msg) => Err(config_err(line, key, msg)),
                    None => Ok(v),
                }
            }
            None => {
                let v = default.ok_or_else(|| config_err(0, key, "required key is missing"))?;
                self.defaults.push((key.to_string(), v.to_string()));
                Ok(v)
            }
        }
    }

    fn take_custom<T>(
        &mut self,
        key: &str,
        default: T,
        show: impl Fn(&T) -> String,
        parse: impl Fn(&str) -> std::result::Result<T, String>,
    ) -> Result<T> {
        match self.values.remove(key) {
            Some((line, raw)) => parse(&raw).map_err(|e| config_err(line, key, e)),
            None => {
                self.defaults.push((key.to_string(), show(&default)));
                Ok(default)
            }
        }
    }

    fn finish(self) -> Result<Vec<(String, String)>> {
        match self.values.into_iter().min_by_key(|(_, (line, _))| *line) {
            Some((key, (line, _))) => Err(config_err(line, &key, "unknown key")),
            None => {
                let mut d = self.defaults;
                d.sort();
                Ok(d)
            }
        }
    }
}

fn positive_f64(v: &f64) -> Option<String> {
    (!(v.is_finite() && *v > 0.0)).then(|| format!("must be a positive finite number, got {v}"))
}

fn finite(v: &f64) -> Option<String> {
    (!v.is_finite()).then(|| format!("must be finite, got {v}"))
}

fn positive(v: &usize) -> Option<String> {
    (*v == 0).then(|| "must be at least 1".to_string())
}

fn morton_range(v: &u32) -> Option<String> {
    (*v >= MORTON_AXIS_LIMIT).then(|| format!("must be below 2^21, got {v}"))
}

fn window_range(v: &u32) -> Option<String> {
    (*v == 0).then(|| "must be at least 1".to_string())
}

fn any<T>(_: &T) -> Option<String> {
    None
}

fn show_shifts(shifts: &[Shift]) -> String {
    shifts
        .iter()
        .map(|s| format!("{},{},{}", s[0], s[1], s[2]))
        .collect::<Vec<_>>()
        .join("; ")
}

fn parse_shifts(raw: &str) -> std::result::Result<Vec<Shift>, String> {
    let shifts = raw
        .split(';')
        .map(|triple| {
            let parts: Vec<&str> = triple.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(format!("shift {triple:?} must have three components"));
            }
            let mut s = [0u32; 3];
            for (slot, p) in s.iter_mut().zip(&parts) {
                *slot = p
                    .parse()
                    .map_err(|e| format!("shift component {p:?}: {e}"))?;
            }
            if s.iter().any(|&c| c >= MORTON_AXIS_LIMIT) {
                return Err(format!("shift {triple:?} leaves the 21-bit range"));
            }
            Ok(s)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if shifts.is_empty() {
        return Err("at least one shift is required".into());
    }
    Ok(shifts)
}

fn execution_name(e: &GroupExecution) -> String {
    match e {
        GroupExecution::Sequential => "sequential",
        GroupExecution::Padded => "padded",
    }
    .into()
}

fn attention_name(g: &GlobalAttention) -> String {
    match g {
        GlobalAttention::Disco => "disco",
        GlobalAttention::DiscoOracle => "disco_oracle",
    }
    .into()
}

const AXES: [&str; 3] = ["x", "y", "z"];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut e = Entries::parse(text)?;
        let d = LestConfig::default();
        let b = BenchConfig::default();
        let mut m = LestConfig::default();

        for (a, axis) in AXES.into_iter().enumerate() {
            m.grid.voxel_size[a] = e.take(&format!("voxel_size.{axis}"), None, positive_f64)?;
        }
        for (a, axis) in AXES.into_iter().enumerate() {
            m.grid.origin[a] = e.take(
                &format!("grid.origin.{axis}"),
                Some(d.grid.origin[a]),
                finite,
            )?;
        }
        for (a, axis) in AXES.into_iter().enumerate() {
            m.grid.max_coord[a] = e.take(
                &format!("grid.max_coord.{axis}"),
                Some(d.grid.max_coord[a]),
                morton_range,
            )?;
        }
        m.pointnet_hidden = e.take("pointnet.hidden", Some(d.pointnet_hidden), positive)?;
        m.channels = e.take("pointnet.channels", Some(d.channels), positive)?;
        m.pointnet_seed = e.take_custom(
            "pointnet.seed",
            None,
            |_| "derived from seed".into(),
            |raw| {
                raw.parse()
                    .map(Some)
                    .map_err(|err| format!("cannot parse {raw:?}: {err}"))
            },
        )?;
        m.attn_dim = e.take("model.attn_dim", Some(d.attn_dim), positive)?;
        m.ffn_hidden = e.take("model.ffn_hidden", Some(d.ffn_hidden), positive)?;
        m.group_size = e.take("model.group_size", Some(d.group_size), positive)?;
        m.shifts = e.take_custom(
            "model.shifts",
            default_shifts(m.group_size),
            |s| show_shifts(s),
            parse_shifts,
        )?;
        m.layers_per_grid = e.take("model.layers_per_grid", Some(d.layers_per_grid), positive)?;
        m.disco_layers = e.take("model.disco_layers", Some(d.disco_layers), positive)?;
        m.decoder_hidden = e.take("model.decoder_hidden", Some(d.decoder_hidden), positive)?;
        m.classes = e.take("model.classes", Some(d.classes), positive)?;
        m.group_execution = e.take_custom(
            "model.group_execution",
            d.group_execution,
            execution_name,
            |raw| match raw {
                "sequential" => Ok(GroupExecution::Sequential),
                "padded" => Ok(GroupExecution::Padded),
                _ => Err(format!("expected sequential or padded, got {raw:?}")),
            },
        )?;
        m.global_attention = e.take_custom(
            "model.global_attention",
            d.global_attention,
            attention_name,
            |raw| match raw {
                "disco" => Ok(GlobalAttention::Disco),
                "disco_oracle" => Ok(GlobalAttention::DiscoOracle),
                _ => Err(format!("expected disco or disco_oracle, got {raw:?}")),
            },
        )?;
        m.ablation = Ablation {
            shifted_grids: e.take("ablation.shifted_grids", Some(true), any)?,
            disco_branch: e.take("ablation.disco_branch", Some(true), any)?,
            channel_attention: e.take("ablation.channel_attention", Some(true), any)?,
        };
        m.seed = e.take("seed", Some(d.seed), any)?;

        let mut bench = BenchConfig::default();
        for (a, axis) in AXES.into_iter().enumerate() {
            bench.window[a] = e.take(
                &format!("bench.window.{axis}"),
                Some(b.window[a]),
                window_range,
            )?;
        }
        bench.kmeans_iters = e.take("bench.kmeans_iters", Some(b.kmeans_iters), positive)?;
        bench.reps = e.take("bench.reps", Some(b.reps), positive)?;
        bench.attn_dim = e.take("bench.attn_dim", Some(b.attn_dim), positive)?;

        let defaults = e.finish()?;
        Ok(Self {
            model: m,
            bench,
            defaults,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| LestError::io(path, e))?;
        Self::parse(&text)
    }

    /// Every setting as config text; `parse(dump())` reproduces the values.
    pub fn dump(&self) -> String {
        let m = &self.model;
        let mut out = String::new();
        let mut put = |k: &str, v: &dyn Display| {
            writeln!(out, "{k} = {v}").expect("writing to a String cannot fail");
        };
        for (a, axis) in AXES.into_iter().enumerate() {
            put(&format!("voxel_size.{axis}"), &m.grid.voxel_size[a]);
        }
        for (a, axis) in AXES.into_iter().enumerate() {
            put(&format!("grid.origin.{axis}"), &m.grid.origin[a]);
        }
        for (a, axis) in AXES.into_iter().enumerate() {
            put(&format!("grid.max_coord.{axis}"), &m.grid.max_coord[a]);
        }
        put("pointnet.hidden", &m.pointnet_hidden);
        put("pointnet.channels", &m.channels);
        if let Some(s) = m.pointnet_seed {
            put("pointnet.seed", &s);
        }
        put("model.attn_dim", &m.attn_dim);
        put("model.ffn_hidden", &m.ffn_hidden);
        put("model.group_size", &m.group_size);
        put("model.shifts", &show_shifts(&m.shifts));
        put("model.layers_per_grid", &m.layers_per_grid);
        put("model.disco_layers", &m.disco_layers);
        put("model.decoder_hidden", &m.decoder_hidden);
        put("model.classes", &m.classes);
        put("model.group_execution", &execution_name(&m.group_execution));
        put(
            "model.global_attention",
            &attention_name(&m.global_attention),
        );
        put("ablation.shifted_grids", &m.ablation.shifted_grids);
        put("ablation.disco_branch", &m.ablation.disco_branch);
        put("ablation.channel_attention", &m.ablation.channel_attention);
        put("seed", &m.seed);
        for (a, axis) in AXES.into_iter().enumerate() {
            put(&format!("bench.window.{axis}"), &self.bench.window[a]);
        }
        put("bench.kmeans_iters", &self.bench.kmeans_iters);
        put("bench.reps", &self.bench.reps);
        put("bench.attn_dim", &self.bench.attn_dim);
        out
    }
}
