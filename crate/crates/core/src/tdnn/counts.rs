use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which quantity of a layer carries a variational distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UncertaintyMode {
    /// Fixed-parameter TDNN layer.
    Tdnn,
    /// Gaussian posterior over weights.
    Bayes,
    /// Gaussian weight posterior mixed with a fixed narrow dropout component.
    BayesDropout,
    /// Activation-basis interpolation, variants 0 to 3.
    Gp(GpVariant),
    /// Latent hidden-output layer.
    Variational,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GpVariant {
    V0,
    V1,
    V2,
    V3,
}

impl GpVariant {
    pub fn from_index(index: u8) -> Result<Self> {
        match index {
            0 => Ok(GpVariant::V0),
            1 => Ok(GpVariant::V1),
            2 => Ok(GpVariant::V2),
            3 => Ok(GpVariant::V3),
            other => Err(Error::UnknownMode(format!("gp{other}"))),
        }
    }

    pub fn index(self) -> u8 {
        match self {
            GpVariant::V0 => 0,
            GpVariant::V1 => 1,
            GpVariant::V2 => 2,
            GpVariant::V3 => 3,
        }
    }

    /// Basis coefficients carry a posterior.
    pub fn lambda_uncertain(self) -> bool {
        matches!(self, GpVariant::V1 | GpVariant::V3)
    }

    /// The shared weight block carries a posterior.
    pub fn weight_uncertain(self) -> bool {
        matches!(self, GpVariant::V2 | GpVariant::V3)
    }
}

impl UncertaintyMode {
    pub const ALL: [UncertaintyMode; 8] = [
        UncertaintyMode::Tdnn,
        UncertaintyMode::Bayes,
        UncertaintyMode::BayesDropout,
        UncertaintyMode::Gp(GpVariant::V0),
        UncertaintyMode::Gp(GpVariant::V1),
        UncertaintyMode::Gp(GpVariant::V2),
        UncertaintyMode::Gp(GpVariant::V3),
        UncertaintyMode::Variational,
    ];

    pub fn weight_uncertain(self) -> bool {
        match self {
            UncertaintyMode::Bayes | UncertaintyMode::BayesDropout => true,
            UncertaintyMode::Gp(v) => v.weight_uncertain(),
            _ => false,
        }
    }

    pub fn is_stochastic(self) -> bool {
        match self {
            UncertaintyMode::Tdnn => false,
            UncertaintyMode::Gp(v) => v.weight_uncertain() || v.lambda_uncertain(),
            _ => true,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            UncertaintyMode::Tdnn => "tdnn",
            UncertaintyMode::Bayes => "b-tdnn",
            UncertaintyMode::BayesDropout => "bd-tdnn",
            UncertaintyMode::Gp(GpVariant::V0) => "gp0",
            UncertaintyMode::Gp(GpVariant::V1) => "gp1",
            UncertaintyMode::Gp(GpVariant::V2) => "gp2",
            UncertaintyMode::Gp(GpVariant::V3) => "gp3",
            UncertaintyMode::Variational => "v-tdnn",
        }
    }
}

impl fmt::Display for UncertaintyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UncertaintyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tdnn" => Ok(UncertaintyMode::Tdnn),
            "b-tdnn" | "btdnn" => Ok(UncertaintyMode::Bayes),
            "bd-tdnn" | "bdtdnn" => Ok(UncertaintyMode::BayesDropout),
            "v-tdnn" | "vtdnn" => Ok(UncertaintyMode::Variational),
            other => {
                let digit = other
                    .strip_prefix("gp-tdnn")
                    .or_else(|| other.strip_prefix("gp"))
                    .and_then(|d| d.parse::<u8>().ok());
                match digit {
                    Some(d) => GpVariant::from_index(d).map(UncertaintyMode::Gp),
                    None => Err(Error::UnknownMode(s.to_string())),
                }
            }
        }
    }
}

/// Free parameters of one layer after tying, split as in the layer comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamCounts {
    pub lambda: usize,
    pub w: usize,
    pub z: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.lambda + self.w + self.z
    }
}

/// Parameter counts for a layer with input size `a`, `b` hidden nodes and latent size `c`.
pub fn param_count(mode: UncertaintyMode, a: usize, b: usize, c: Option<usize>) -> Result<ParamCounts> {
    let (lambda, w, z) = match mode {
        UncertaintyMode::Tdnn => (0, a * b, 0),
        UncertaintyMode::Bayes | UncertaintyMode::BayesDropout => (0, a * b + a, 0),
        UncertaintyMode::Gp(v) => {
            let lambda = 3 * b + if v.lambda_uncertain() { 3 } else { 0 };
            let w = a * b + if v.weight_uncertain() { a } else { 0 };
            (lambda, w, 0)
        }
        UncertaintyMode::Variational => {
            let c = c.ok_or(Error::MissingLatentDim)?;
            (0, a * b + c * b, 4 * a * c)
        }
    };
    Ok(ParamCounts { lambda, w, z })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rows() {
        let pc = |m| param_count(m, 10, 20, Some(4)).unwrap();
        assert_eq!(pc(UncertaintyMode::Tdnn), ParamCounts { lambda: 0, w: 200, z: 0 });
        assert_eq!(pc(UncertaintyMode::Bayes).w, 210);
        let gp3 = pc(UncertaintyMode::Gp(GpVariant::V3));
        assert_eq!((gp3.lambda, gp3.w), (63, 210));
        let v = pc(UncertaintyMode::Variational);
        assert_eq!((v.w, v.z), (280, 160));
    }

    #[test]
    fn variational_requires_latent_dim() {
        assert!(matches!(
            param_count(UncertaintyMode::Variational, 3, 3, None),
            Err(Error::MissingLatentDim)
        ));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in UncertaintyMode::ALL {
            assert_eq!(m.as_str().parse::<UncertaintyMode>().unwrap(), m);
        }
        assert!("gp4".parse::<UncertaintyMode>().is_err());
        assert!("nope".parse::<UncertaintyMode>().is_err());
    }
}
