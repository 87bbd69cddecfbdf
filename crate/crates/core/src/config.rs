//! Architecture hyperparameters and the flat `key=value` config format.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GuidanceMode {
    #[default]
    None,
    OneWay,
    Bidirectional,
}

impl GuidanceMode {
    pub fn is_guided(self) -> bool {
        self != GuidanceMode::None
    }
}

impl FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "one_way" => Ok(Self::OneWay),
            "bidirectional" => Ok(Self::Bidirectional),
            _ => Err(Error::Config(format!(
                "unknown guidance mode '{s}' (expected none, one_way or bidirectional)"
            ))),
        }
    }
}

impl fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::OneWay => "one_way",
            Self::Bidirectional => "bidirectional",
        })
    }
}

/// Architecture hyperparameters. Per-level lists are indexed from the
/// shallowest level, except `decoder_blocks` and `decoder_patches`, which
/// follow the decoding order (deepest stage first).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub encoder_blocks: Vec<usize>,
    pub bottleneck_blocks: usize,
    pub decoder_blocks: Vec<usize>,
    /// One entry per level plus one for the bottleneck.
    pub heads_per_level: Vec<usize>,
    pub ffn_expansion: f64,
    pub down_kernel: usize,
    pub up_kernel: usize,
    pub symmetric: bool,
    pub refinement_blocks: usize,
    pub guidance_mode: GuidanceMode,
    pub guidance_heads: usize,
    pub bottleneck_patch: usize,
    pub decoder_patches: Vec<usize>,
    pub context_tokens: usize,
    pub context_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_channels: 48,
            encoder_blocks: vec![4, 6, 6],
            bottleneck_blocks: 8,
            decoder_blocks: vec![6, 6, 4],
            heads_per_level: vec![1, 2, 4, 8],
            ffn_expansion: 2.66,
            down_kernel: 3,
            up_kernel: 1,
            symmetric: true,
            refinement_blocks: 4,
            guidance_mode: GuidanceMode::None,
            guidance_heads: 8,
            bottleneck_patch: 2,
            decoder_patches: vec![4, 4, 4],
            context_tokens: 257,
            context_dim: 1024,
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: '{v}' is not a comma-separated list of integers")))
        })
        .collect()
}

fn parse_num<N: FromStr>(key: &str, v: &str) -> Result<N> {
    v.trim()
        .parse::<N>()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

pub(crate) fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{v}'"))),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    /// Tiny configuration used for smoke tests and quick experiments.
    pub fn tiny() -> Self {
        Self {
            base_channels: 16,
            encoder_blocks: vec![1, 1, 1],
            bottleneck_blocks: 2,
            decoder_blocks: vec![1, 1, 1],
            ..Self::default()
        }
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn heads_at(&self, level: usize) -> usize {
        self.heads_per_level[level]
    }

    /// Decoder block count of `level` (0 = shallowest).
    pub fn decoder_blocks_at(&self, level: usize) -> usize {
        self.decoder_blocks[self.levels - 1 - level]
    }

    /// Patch size used by semantic guidance at `level` (`levels` = bottleneck).
    pub fn patch_at(&self, level: usize) -> usize {
        if level == self.levels {
            self.bottleneck_patch
        } else {
            self.decoder_patches[self.levels - 1 - level]
        }
    }

    /// Token width of the patchified feature map at `level`.
    pub fn token_dim_at(&self, level: usize) -> usize {
        let p = self.patch_at(level);
        p * p * self.channels_at(level)
    }

    /// Input height and width must be multiples of this value.
    pub fn required_multiple(&self) -> usize {
        let mut m = 1usize << self.levels;
        if self.guidance_mode.is_guided() {
            for level in 0..=self.levels {
                m = lcm(m, (1usize << level) * self.patch_at(level));
            }
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let l = self.levels;
        if l == 0 {
            return fail("levels must be at least 1".into());
        }
        if self.encoder_blocks.len() != l {
            return fail(format!("encoder_blocks has {} entries, levels={l}", self.encoder_blocks.len()));
        }
        if self.decoder_blocks.len() != l {
            return fail(format!("decoder_blocks has {} entries, levels={l}", self.decoder_blocks.len()));
        }
        if self.heads_per_level.len() != l + 1 {
            return fail(format!(
                "heads_per_level has {} entries, needs levels+1={}",
                self.heads_per_level.len(),
                l + 1
            ));
        }
        if self.symmetric {
            let rev: Vec<usize> = self.encoder_blocks.iter().rev().copied().collect();
            if self.decoder_blocks != rev {
                return fail(format!(
                    "symmetric model requires decoder_blocks == reverse(encoder_blocks) = [{}], got [{}]",
                    join(&rev),
                    join(&self.decoder_blocks)
                ));
            }
        }
        if self.base_channels == 0 || self.base_channels % 2 != 0 {
            return fail(format!("base_channels must be positive and even, got {}", self.base_channels));
        }
        for level in 0..=l {
            let (c, h) = (self.channels_at(level), self.heads_at(level));
            if h == 0 || c % h != 0 {
                return fail(format!(
                    "level {level}: channels {c} not divisible by heads {h}"
                ));
            }
        }
        if !(self.ffn_expansion > 0.0) {
            return fail(format!("ffn_expansion must be positive, got {}", self.ffn_expansion));
        }
        for (name, k) in [("down_kernel", self.down_kernel), ("up_kernel", self.up_kernel)] {
            if k == 0 || k % 2 == 0 {
                return fail(format!("{name} must be odd, got {k}"));
            }
        }
        if self.guidance_mode.is_guided() {
            if !self.symmetric {
                return fail("semantic guidance is only defined for the symmetric model".into());
            }
            if self.decoder_patches.len() != l {
                return fail(format!(
                    "decoder_patches has {} entries, levels={l}",
                    self.decoder_patches.len()
                ));
            }
            let heads = self.guidance_heads;
            if heads == 0 || self.context_dim % heads != 0 {
                return fail(format!(
                    "context_dim {} not divisible by guidance_heads {heads}",
                    self.context_dim
                ));
            }
            if self.context_tokens == 0 {
                return fail("context_tokens must be positive".into());
            }
            for level in 0..=l {
                if self.patch_at(level) == 0 {
                    return fail(format!("patch size at level {level} must be positive"));
                }
                let d = self.token_dim_at(level);
                if d % heads != 0 {
                    return fail(format!(
                        "token dim {d} at level {level} not divisible by guidance_heads {heads}"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Applies one `key=value` setting. Returns `false` for keys this type
    /// does not own.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "levels" => self.levels = parse_num(key, value)?,
            "base_channels" => self.base_channels = parse_num(key, value)?,
            "encoder_blocks" => self.encoder_blocks = parse_list(key, value)?,
            "bottleneck_blocks" => self.bottleneck_blocks = parse_num(key, value)?,
            "decoder_blocks" => self.decoder_blocks = parse_list(key, value)?,
            "heads_per_level" => self.heads_per_level = parse_list(key, value)?,
            "ffn_expansion" => self.ffn_expansion = parse_num(key, value)?,
            "down_kernel" => self.down_kernel = parse_num(key, value)?,
            "up_kernel" => self.up_kernel = parse_num(key, value)?,
            "symmetric" => self.symmetric = parse_bool(key, value)?,
            "refinement_blocks" => self.refinement_blocks = parse_num(key, value)?,
            "guidance_mode" => self.guidance_mode = value.trim().parse()?,
            "guidance_heads" => self.guidance_heads = parse_num(key, value)?,
            "bottleneck_patch" => self.bottleneck_patch = parse_num(key, value)?,
            "decoder_patches" => self.decoder_patches = parse_list(key, value)?,
            "context_tokens" => self.context_tokens = parse_num(key, value)?,
            "context_dim" => self.context_dim = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("levels", self.levels.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("encoder_blocks", join(&self.encoder_blocks)),
            ("bottleneck_blocks", self.bottleneck_blocks.to_string()),
            ("decoder_blocks", join(&self.decoder_blocks)),
            ("heads_per_level", join(&self.heads_per_level)),
            ("ffn_expansion", self.ffn_expansion.to_string()),
            ("down_kernel", self.down_kernel.to_string()),
            ("up_kernel", self.up_kernel.to_string()),
            ("symmetric", self.symmetric.to_string()),
            ("refinement_blocks", self.refinement_blocks.to_string()),
            ("guidance_mode", self.guidance_mode.to_string()),
            ("guidance_heads", self.guidance_heads.to_string()),
            ("bottleneck_patch", self.bottleneck_patch.to_string()),
            ("decoder_patches", join(&self.decoder_patches)),
            ("context_tokens", self.context_tokens.to_string()),
            ("context_dim", self.context_dim.to_string()),
        ]
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            if !cfg.apply(&k, &v)? {
                return Err(Error::Config(format!("unknown config key '{k}'")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv_text(&self) -> String {
        to_kv_text(&self.to_pairs())
    }
}

/// Parses UTF-8 `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn to_kv_text<K: AsRef<str>>(pairs: &[(K, String)]) -> String {
    pairs
        .iter()
        .map(|(k, v)| format!("{}={v}\n", k.as_ref()))
        .collect()
}
