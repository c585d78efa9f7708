//! Weight-KV model variants with individual techniques switched on or off,
//! and the paired comparisons built from them.
//!
//! With everything off the variant is plain round-to-nearest: no clipping,
//! no channel smoothing, per-token absmax over whole cache rows, and the
//! current step's K/V quantized before attention. With everything on it is
//! the full calibrated method.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calib::{calibrate_model, CalibConfig, CalibrationReport};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport};
use crate::model::{Model, QuantMode};
use crate::quant::TokenScheme;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Technique {
    /// Learnable weight clipping.
    Lwc,
    /// Per-channel shift and scale smoothing of keys and values.
    Channel,
    /// Mean-shifted group-wise per-token KV quantization.
    Token,
    /// Past-only quantization.
    Poq,
}

impl Technique {
    pub const ALL: [Technique; 4] = [Technique::Lwc, Technique::Channel, Technique::Token, Technique::Poq];

    pub fn name(&self) -> &'static str {
        match self {
            Technique::Lwc => "lwc",
            Technique::Channel => "2dq-channel",
            Technique::Token => "2dq-token",
            Technique::Poq => "poq",
        }
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Technique {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Technique::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown technique '{s}' (expected lwc, 2dq-channel, 2dq-token or poq)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Techniques {
    pub lwc: bool,
    pub channel: bool,
    pub token: bool,
    pub poq: bool,
}

impl Techniques {
    pub const ALL: Techniques = Techniques {
        lwc: true,
        channel: true,
        token: true,
        poq: true,
    };
    pub const NONE: Techniques = Techniques {
        lwc: false,
        channel: false,
        token: false,
        poq: false,
    };

    pub fn with(mut self, t: Technique, on: bool) -> Self {
        match t {
            Technique::Lwc => self.lwc = on,
            Technique::Channel => self.channel = on,
            Technique::Token => self.token = on,
            Technique::Poq => self.poq = on,
        }
        self
    }

    pub fn needs_calibration(&self) -> bool {
        self.lwc || self.channel
    }
}

/// Builds the weight-KV variant of the full-precision `fp` model. Learned
/// parameters come from `calibrate_model` with `calib`'s settings; the
/// report is returned when calibration ran.
pub fn build_variant(
    fp: &Model,
    t: Techniques,
    tokens: &[usize],
    calib: &CalibConfig,
) -> Result<(Model, Option<CalibrationReport>)> {
    let mut base = fp.clone();
    if !t.token {
        base.config.kv_scheme = TokenScheme::Absmax;
        base.config.kv_group_size = base.config.hidden_size;
    }
    let (mut m, report) = if t.needs_calibration() {
        let cfg = CalibConfig {
            learn_clipping: t.lwc,
            smoothing: t.channel,
            ..calib.clone()
        };
        let (m, r) = calibrate_model(&base, tokens, &cfg)?;
        (m, Some(r))
    } else {
        (base.quantize_weights(QuantMode::WeightKv, None)?, None)
    };
    m.config.poq = t.poq;
    Ok((m, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub techniques: Techniques,
    pub perplexity: f64,
    pub logit_mae: f64,
    pub mean_loss_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub base: AblationRow,
    pub variant: AblationRow,
    /// Variant minus base.
    pub delta_perplexity: f64,
    pub delta_logit_mae: f64,
}

fn row(label: String, t: Techniques, report: &EvalReport, calib: Option<&CalibrationReport>) -> AblationRow {
    AblationRow {
        label,
        techniques: t,
        perplexity: report.perplexity,
        logit_mae: report.logit_mae.unwrap_or(f64::NAN),
        mean_loss_ratio: calib.map(|c| c.mean_loss_ratio),
    }
}

/// A built variant and its evaluation against the full-precision model.
pub struct Evaluated {
    pub model: Model,
    pub calibration: Option<CalibrationReport>,
    pub eval: EvalReport,
}

/// Everything a paired comparison holds fixed.
pub struct Harness<'a> {
    pub fp: &'a Model,
    pub calib_tokens: &'a [usize],
    pub eval_tokens: &'a [usize],
    pub calib: CalibConfig,
    pub eval: EvalOptions,
}

impl Harness<'_> {
    pub fn build_and_eval(&self, t: Techniques) -> Result<Evaluated> {
        let (model, calibration) = build_variant(self.fp, t, self.calib_tokens, &self.calib)?;
        let eval = evaluate(&model, Some(self.fp), self.eval_tokens, &self.eval)?;
        Ok(Evaluated {
            model,
            calibration,
            eval,
        })
    }

    /// Compares `base` against `base` with each of `drop` switched off and
    /// each of `add` switched on. A variant that differs from the base only
    /// in past-only quantization reuses the base's weights.
    pub fn ablate(&self, base: Techniques, drop: &[Technique], add: &[Technique]) -> Result<Ablation> {
        let variant = drop.iter().fold(base, |t, &d| t.with(d, false));
        let variant = add.iter().fold(variant, |t, &a| t.with(a, true));
        let b = self.build_and_eval(base)?;
        let (v_eval, v_calib) = if variant.with(Technique::Poq, base.poq) == base {
            let mut m = b.model.clone();
            m.config.poq = variant.poq;
            (evaluate(&m, Some(self.fp), self.eval_tokens, &self.eval)?, b.calibration.clone())
        } else {
            let v = self.build_and_eval(variant)?;
            (v.eval, v.calibration)
        };
        let base_row = row(describe(base), base, &b.eval, b.calibration.as_ref());
        let var_row = row(describe(variant), variant, &v_eval, v_calib.as_ref());
        Ok(Ablation {
            delta_perplexity: var_row.perplexity - base_row.perplexity,
            delta_logit_mae: var_row.logit_mae - base_row.logit_mae,
            base: base_row,
            variant: var_row,
        })
    }
}

/// `rtn`, `full`, or the enabled techniques joined by `+`.
pub fn describe(t: Techniques) -> String {
    if t == Techniques::NONE {
        return "rtn".into();
    }
    if t == Techniques::ALL {
        return "full".into();
    }
    let on: Vec<&str> = Technique::ALL
        .into_iter()
        .filter(|&x| t.with(x, true) == t)
        .map(|x| x.name())
        .collect();
    format!("rtn+{}", on.join("+"))
}
