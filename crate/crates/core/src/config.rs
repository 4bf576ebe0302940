//! Run configuration: a line-oriented `key = value` file with `#` comments,
//! overridable by command-line flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{GenConfig, Shape};
use crate::distill::MdMode;
use crate::error::{Error, Result};
use crate::head::LossWeights;
use crate::model::ModelConfig;
use crate::vit::ForceGates;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Invalid(format!("profile must be desk or paper, got `{other}`"))),
        }
    }
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub profile: Profile,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Search-crop center jitter as a fraction of the crop side.
    pub center_jitter: f64,
    /// Log-scale jitter of the search crop side.
    pub scale_jitter: f64,
    pub md_mode: MdMode,
    pub student_blocks: Option<usize>,
    /// Add the student's sparsity loss to the distillation objective.
    pub distill_spar: bool,
    /// Add the student's view-invariance loss to the distillation objective.
    pub distill_vir: bool,
    pub force_gates: String,
    pub data_dir: Option<PathBuf>,
    pub sequences: usize,
    pub gen: GenConfig,
}

impl Config {
    pub fn for_profile(profile: Profile) -> Self {
        let (model, lr, batch_size) = match profile {
            Profile::Desk => (ModelConfig::desk(), 1e-3, 8),
            Profile::Paper => (ModelConfig::paper(), 4e-5, 32),
        };
        Self {
            profile,
            model,
            weights: LossWeights::default(),
            lr,
            weight_decay: 1e-4,
            batch_size,
            steps: 300,
            seed: 0,
            center_jitter: 0.25,
            scale_jitter: 0.15,
            md_mode: MdMode::Jsd,
            student_blocks: None,
            distill_spar: false,
            distill_vir: false,
            force_gates: "none".into(),
            data_dir: None,
            sequences: 4,
            gen: GenConfig::default(),
        }
    }

    pub fn force(&self) -> Result<ForceGates> {
        ForceGates::parse(&self.force_gates)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config { key: key.into(), line: 0, msg });
        self.model.backbone.validate().map_err(|e| Error::Config {
            key: "model".into(),
            line: 0,
            msg: e.to_string(),
        })?;
        if !(self.lr > 0.0) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        if self.batch_size < 2 {
            return bad("batch_size", format!("must be at least 2, got {}", self.batch_size));
        }
        if !(self.weights.tau > 0.0) {
            return bad("tau", format!("must be positive, got {}", self.weights.tau));
        }
        self.force()?;
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let b = &self.model.backbone;
        let g = &self.gen;
        let size = |s: (usize, usize)| format!("{}x{}", s.0, s.1);
        vec![
            ("profile", self.profile.name().into()),
            ("depth", b.depth.to_string()),
            ("fixed_blocks", b.fixed_blocks.to_string()),
            ("dim", b.dim.to_string()),
            ("heads", b.heads.to_string()),
            ("mlp_ratio", fmt_f(b.mlp_ratio)),
            ("patch", b.patch.to_string()),
            ("template_size", size(b.template_size)),
            ("search_size", size(b.search_size)),
            ("beta", fmt_f(b.beta)),
            ("zeta", fmt_f(b.zeta)),
            ("am_init_bias", fmt_f(b.am_init_bias)),
            ("head_channels", self.model.head_channels.to_string()),
            ("critic_hidden", self.model.critic_hidden.to_string()),
            ("gamma", fmt_f(self.weights.gamma)),
            ("kappa", fmt_f(self.weights.kappa)),
            ("eta", fmt_f(self.weights.eta)),
            ("lambda_iou", fmt_f(self.weights.lambda_iou)),
            ("lambda_l1", fmt_f(self.weights.lambda_l1)),
            ("tau", fmt_f(self.weights.tau)),
            ("lr", fmt_f(self.lr)),
            ("weight_decay", fmt_f(self.weight_decay)),
            ("batch_size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("seed", self.seed.to_string()),
            ("center_jitter", fmt_f(self.center_jitter)),
            ("scale_jitter", fmt_f(self.scale_jitter)),
            ("md_mode", self.md_mode.name().into()),
            ("student_blocks", self.student_blocks.map_or("none".into(), |n| n.to_string())),
            ("distill_spar", self.distill_spar.to_string()),
            ("distill_vir", self.distill_vir.to_string()),
            ("force_gates", self.force_gates.clone()),
            ("data_dir", self.data_dir.as_ref().map_or("none".into(), |p| p.display().to_string())),
            ("sequences", self.sequences.to_string()),
            ("gen_width", g.width.to_string()),
            ("gen_height", g.height.to_string()),
            ("gen_length", g.length.to_string()),
            (
                "gen_shape",
                match g.shape {
                    Shape::Rectangle => "rectangle".into(),
                    Shape::Ellipse => "ellipse".into(),
                },
            ),
            ("gen_target_w", fmt_f(g.target_size.0)),
            ("gen_target_h", fmt_f(g.target_size.1)),
            ("gen_motion", fmt_f(g.motion)),
            ("gen_rotation", fmt_f(g.rotation)),
            ("gen_scale", fmt_f(g.scale)),
            ("gen_shear", fmt_f(g.shear)),
            ("gen_texture", fmt_f(g.texture_scale)),
            ("gen_occluder", fmt_f(g.occluder_prob)),
        ]
    }

    /// Assign one key from its text form. `line` is 0 for flags.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let err = |msg: String| Error::Config {
            key: key.into(),
            line,
            msg,
        };
        let v = value.trim();
        let b = &mut self.model.backbone;
        let g = &mut self.gen;
        match key {
            "profile" => self.profile = v.parse().map_err(|e: Error| err(e.to_string()))?,
            "depth" => b.depth = num(v, &err)?,
            "fixed_blocks" => b.fixed_blocks = num(v, &err)?,
            "dim" => b.dim = num(v, &err)?,
            "heads" => b.heads = num(v, &err)?,
            "mlp_ratio" => b.mlp_ratio = num(v, &err)?,
            "patch" => b.patch = num(v, &err)?,
            "template_size" => b.template_size = size(v, &err)?,
            "search_size" => b.search_size = size(v, &err)?,
            "beta" => {
                let x: f64 = num(v, &err)?;
                if !(x > 0.5 && x < 1.0) {
                    return Err(err(format!("beta must lie in (0.5, 1), got {x}")));
                }
                b.beta = x;
            }
            "zeta" => {
                let x: f64 = num(v, &err)?;
                if !(0.0..=1.0).contains(&x) {
                    return Err(err(format!("zeta must lie in [0, 1], got {x}")));
                }
                b.zeta = x;
            }
            "am_init_bias" => b.am_init_bias = num(v, &err)?,
            "head_channels" => self.model.head_channels = num(v, &err)?,
            "critic_hidden" => self.model.critic_hidden = num(v, &err)?,
            "gamma" => self.weights.gamma = num(v, &err)?,
            "kappa" => self.weights.kappa = num(v, &err)?,
            "eta" => self.weights.eta = num(v, &err)?,
            "lambda_iou" => self.weights.lambda_iou = num(v, &err)?,
            "lambda_l1" => self.weights.lambda_l1 = num(v, &err)?,
            "tau" => {
                let x: f64 = num(v, &err)?;
                if !(x > 0.0) {
                    return Err(err(format!("tau must be positive, got {x}")));
                }
                self.weights.tau = x;
            }
            "lr" => self.lr = num(v, &err)?,
            "weight_decay" => self.weight_decay = num(v, &err)?,
            "batch_size" => self.batch_size = num(v, &err)?,
            "steps" => self.steps = num(v, &err)?,
            "seed" => self.seed = num(v, &err)?,
            "center_jitter" => self.center_jitter = num(v, &err)?,
            "scale_jitter" => self.scale_jitter = num(v, &err)?,
            "md_mode" => self.md_mode = v.parse().map_err(|e: Error| err(e.to_string()))?,
            "student_blocks" => {
                self.student_blocks = if v == "none" { None } else { Some(num(v, &err)?) }
            }
            "distill_spar" => self.distill_spar = num(v, &err)?,
            "distill_vir" => self.distill_vir = num(v, &err)?,
            "force_gates" => {
                ForceGates::parse(v).map_err(|e| err(e.to_string()))?;
                self.force_gates = v.into();
            }
            "data_dir" => self.data_dir = if v == "none" { None } else { Some(PathBuf::from(v)) },
            "sequences" => self.sequences = num(v, &err)?,
            "gen_width" => g.width = num(v, &err)?,
            "gen_height" => g.height = num(v, &err)?,
            "gen_length" => g.length = num(v, &err)?,
            "gen_shape" => {
                g.shape = match v {
                    "rectangle" => Shape::Rectangle,
                    "ellipse" => Shape::Ellipse,
                    other => return Err(err(format!("expected rectangle or ellipse, got `{other}`"))),
                }
            }
            "gen_target_w" => g.target_size.0 = num(v, &err)?,
            "gen_target_h" => g.target_size.1 = num(v, &err)?,
            "gen_motion" => g.motion = num(v, &err)?,
            "gen_rotation" => g.rotation = num(v, &err)?,
            "gen_scale" => g.scale = num(v, &err)?,
            "gen_shear" => g.shear = num(v, &err)?,
            "gen_texture" => g.texture_scale = num(v, &err)?,
            "gen_occluder" => g.occluder_prob = num(v, &err)?,
            other => {
                return Err(Error::Config {
                    key: other.into(),
                    line,
                    msg: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Parse file text, then apply `overrides` in order. The profile is
    /// resolved first so every other key refines that profile's defaults.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let l = raw.split('#').next().unwrap_or("").trim();
            if l.is_empty() {
                continue;
            }
            let (k, v) = l.split_once('=').ok_or_else(|| Error::Config {
                key: l.into(),
                line: i + 1,
                msg: "expected `key = value`".into(),
            })?;
            lines.push((k.trim().to_string(), v.trim().to_string(), i + 1));
        }
        let profile = overrides
            .iter()
            .rev()
            .find(|(k, _)| k == "profile")
            .map(|(_, v)| (v.as_str(), 0))
            .or_else(|| lines.iter().rev().find(|l| l.0 == "profile").map(|l| (l.1.as_str(), l.2)));
        let mut cfg = Config::for_profile(Profile::Desk);
        if let Some((p, line)) = profile {
            cfg.set("profile", p, line)?;
            cfg = Config::for_profile(cfg.profile);
        }
        for (k, v, line) in &lines {
            cfg.set(k, v, *line)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v, 0)?;
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn fmt_f(x: f64) -> String {
    format!("{x:?}")
}

fn num<N: FromStr>(v: &str, err: &dyn Fn(String) -> Error) -> Result<N> {
    v.parse::<N>()
        .map_err(|_| err(format!("cannot parse `{v}` as {}", std::any::type_name::<N>())))
}

fn size(v: &str, err: &dyn Fn(String) -> Error) -> Result<(usize, usize)> {
    match v.split_once('x') {
        Some((h, w)) => Ok((num(h.trim(), err)?, num(w.trim(), err)?)),
        None => {
            let s = num(v, err)?;
            Ok((s, s))
        }
    }
}
